//! Rank-correlation and ROC evaluation of affinity predictions.
//!
//! The headline metric is the Spearman correlation between play durations
//! and predicted affinities; it only compares ranks, so no particular
//! duration-affinity link function is assumed. Durations can additionally be
//! normalized by the per-type threshold T, broken out per entity type and per
//! entity, and re-binarized at multiples of T for ROC AUC.

use std::collections::{BTreeMap, HashSet};
use std::io::{self, Write};

use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::ingest::{EntityType, Observation};
use crate::labeling::{binarize, Label};
use crate::model::EmbeddingModel;
use crate::scalar::Real;
use crate::vocab::{ConfigError, EntityTypeTable, Vocabulary};

pub const PER_ENTITY_MIN_COUNT: usize = 10;
pub const PER_ENTITY_ALPHA: f64 = 0.01;
/// Histogram resolution for per-entity correlations: width 0.05 over [-1, 1].
pub const RHO_HISTOGRAM_BUCKETS: usize = 40;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("input lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {min} pairs, got {n}")]
    TooFew { n: usize, min: usize },
    #[error("non-finite value among the {side} values")]
    NonFinite { side: &'static str },
    #[error("{side} values are constant; rank correlation is undefined")]
    ConstantInput { side: &'static str },
    #[error("only {present} examples present; AUC needs both classes (no {missing} examples)")]
    SingleClass {
        present: &'static str,
        missing: &'static str,
    },
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("test set is empty")]
    EmptyTestSet,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("AUC threshold multiplier must be positive and finite, got {0}")]
    BadMultiplier(f64),
}

/// Fractional (average) ranks, 1-based; ties share the mean of the ranks
/// they occupy.
pub fn average_ranks<F: Real>(values: &[F]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && values[order[end + 1]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 2) as f64 / 2.0;
        for &index in &order[start..=end] {
            ranks[index] = rank;
        }
        start = end + 1;
    }
    ranks
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spearman {
    pub rho: f64,
    pub p_value: f64,
    pub n: usize,
}

fn check_values<F: Real>(values: &[F], side: &'static str) -> Result<(), MetricError> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite { side });
    }
    if values.iter().all(|&v| v == values[0]) {
        return Err(MetricError::ConstantInput { side });
    }
    Ok(())
}

/// Spearman rank correlation with average-rank tie handling, plus the
/// two-sided p-value from the large-sample t approximation.
pub fn spearman<F: Real>(xs: &[F], ys: &[F]) -> Result<Spearman, MetricError> {
    if xs.len() != ys.len() {
        return Err(MetricError::LengthMismatch(xs.len(), ys.len()));
    }
    let n = xs.len();
    if n < 3 {
        return Err(MetricError::TooFew { n, min: 3 });
    }
    check_values(xs, "x")?;
    check_values(ys, "y")?;

    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let mean = (n + 1) as f64 / 2.0;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in rx.iter().zip(&ry) {
        let dx = x - mean;
        let dy = y - mean;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let rho = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);

    let df = (n - 2) as f64;
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("valid degrees of freedom");
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok(Spearman { rho, p_value, n })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Auc {
    pub value: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// Rank-sum AUC: the probability that a uniformly random positive outranks a
/// uniformly random negative, with ties counted one half.
pub fn auc<F: Real>(labels: &[Label], scores: &[F]) -> Result<Auc, MetricError> {
    if labels.len() != scores.len() {
        return Err(MetricError::LengthMismatch(labels.len(), scores.len()));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite { side: "score" });
    }
    let positives = labels.iter().filter(|l| l.is_positive()).count();
    let negatives = labels.len() - positives;
    if positives == 0 {
        return Err(MetricError::SingleClass {
            present: "negative",
            missing: "positive",
        });
    }
    if negatives == 0 {
        return Err(MetricError::SingleClass {
            present: "positive",
            missing: "negative",
        });
    }
    let ranks = average_ranks(scores);
    let positive_rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, l)| l.is_positive())
        .map(|(r, _)| r)
        .sum();
    let u = positive_rank_sum - (positives * (positives + 1)) as f64 / 2.0;
    Ok(Auc {
        value: u / (positives as f64 * negatives as f64),
        positives,
        negatives,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrCell {
    pub rho: f64,
    pub p_value: f64,
    pub n: usize,
}

impl From<Spearman> for CorrCell {
    fn from(s: Spearman) -> Self {
        CorrCell {
            rho: s.rho,
            p_value: s.p_value,
            n: s.n,
        }
    }
}

/// Full evaluation report. Cells keep their failure reason when a metric's
/// preconditions do not hold on the given slice of data.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    pub rho: Result<CorrCell, MetricError>,
    pub rho_normalized: Result<CorrCell, MetricError>,
    pub rho_per_type: BTreeMap<EntityType, Result<CorrCell, MetricError>>,
    /// AUC at each threshold multiplier m (labels re-binarized at m*T).
    pub auc_at: Vec<(f64, Result<Auc, MetricError>)>,
}

impl EvalReport {
    /// Machine-readable summary: one `name<TAB>value<TAB>count` line per
    /// metric, in a fixed order; skipped cells become `# skip` comment lines
    /// carrying the reason. Output is byte-stable for identical reports.
    pub fn write_tsv<W: Write>(&self, writer: &mut W, prefix: &str) -> io::Result<()> {
        write_corr(writer, prefix, "rho", &self.rho)?;
        write_corr(writer, prefix, "rho_normalized", &self.rho_normalized)?;
        for (ty, cell) in &self.rho_per_type {
            write_corr(writer, prefix, &format!("rho_{ty}"), cell)?;
        }
        for (multiplier, cell) in &self.auc_at {
            let name = format!("auc_{multiplier}T");
            match cell {
                Ok(a) => writeln!(
                    writer,
                    "{prefix}{name}\t{}\t{}",
                    a.value,
                    a.positives + a.negatives
                )?,
                Err(reason) => writeln!(writer, "# skip\t{prefix}{name}\t{reason}")?,
            }
        }
        writeln!(writer, "{prefix}test_rows\t{}\t{}", self.n, self.n)?;
        Ok(())
    }
}

fn write_corr<W: Write>(
    writer: &mut W,
    prefix: &str,
    name: &str,
    cell: &Result<CorrCell, MetricError>,
) -> io::Result<()> {
    match cell {
        Ok(c) => {
            writeln!(writer, "{prefix}{name}\t{}\t{}", c.rho, c.n)?;
            writeln!(writer, "{prefix}{name}_p\t{}\t{}", c.p_value, c.n)?;
        }
        Err(reason) => writeln!(writer, "# skip\t{prefix}{name}\t{reason}")?,
    }
    Ok(())
}

struct EvalRow {
    duration: f64,
    normalized: f64,
    threshold: f64,
    prediction: f64,
    entity_type: EntityType,
}

/// Evaluates a model over test observations: Spearman rho over raw and
/// threshold-normalized durations, per-type rho, and AUC at each threshold
/// multiplier. Unseen users and entities resolve to UNK before prediction.
pub fn evaluate<F: Real>(
    model: &EmbeddingModel<F>,
    test: &[Observation],
    table: &EntityTypeTable,
    multipliers: &[f64],
) -> Result<EvalReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    for &m in multipliers {
        if !m.is_finite() || m <= 0.0 {
            return Err(EvalError::BadMultiplier(m));
        }
    }

    let rows: Vec<EvalRow> = test
        .iter()
        .map(|obs| {
            let threshold = table.require(&obs.entity_type)?;
            Ok(EvalRow {
                duration: obs.duration_secs,
                normalized: obs.duration_secs / threshold,
                threshold,
                prediction: model.predict_ids(&obs.user, &obs.entity).as_f64(),
                entity_type: obs.entity_type.clone(),
            })
        })
        .collect::<Result<_, ConfigError>>()?;

    let durations: Vec<f64> = rows.iter().map(|r| r.duration).collect();
    let normalized: Vec<f64> = rows.iter().map(|r| r.normalized).collect();
    let predictions: Vec<f64> = rows.iter().map(|r| r.prediction).collect();

    let rho = spearman(&durations, &predictions).map(CorrCell::from);
    let rho_normalized = spearman(&normalized, &predictions).map(CorrCell::from);

    let mut by_type: BTreeMap<EntityType, Vec<usize>> = BTreeMap::new();
    for (i, row) in rows.iter().enumerate() {
        by_type.entry(row.entity_type.clone()).or_default().push(i);
    }
    let rho_per_type = by_type
        .into_iter()
        .map(|(ty, indices)| {
            let xs: Vec<f64> = indices.iter().map(|&i| durations[i]).collect();
            let ys: Vec<f64> = indices.iter().map(|&i| predictions[i]).collect();
            (ty, spearman(&xs, &ys).map(CorrCell::from))
        })
        .collect();

    let auc_at = multipliers
        .iter()
        .map(|&m| {
            let labels: Vec<Label> = rows
                .iter()
                .map(|r| binarize(r.duration, m * r.threshold))
                .collect();
            (m, auc(&labels, &predictions))
        })
        .collect();

    Ok(EvalReport {
        n: rows.len(),
        rho,
        rho_normalized,
        rho_per_type,
        auc_at,
    })
}

/// Per-entity correlation that survived the count and significance filters.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityCorrelation {
    pub entity_index: usize,
    pub entity_id: String,
    pub entity_type: EntityType,
    pub rho: f64,
    pub p_value: f64,
    pub test_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerEntityReport {
    /// Entities with more than `min_count` post-dedup rows and p < alpha,
    /// ordered by entity index.
    pub entities: Vec<EntityCorrelation>,
    /// Histogram of included rho values per entity type, bucket width 0.05
    /// over [-1, 1].
    pub histograms: BTreeMap<EntityType, Vec<u32>>,
    /// Entities present in the test set that failed a filter.
    pub excluded: usize,
}

/// Per-entity Spearman correlations over the test set. Duplicate (user,
/// entity) pairs share one prediction and would inflate rho through rank
/// ties, so only the first occurrence of each pair (in stream order, keyed
/// on post-UNK indices) is kept.
pub fn per_entity<F: Real>(
    model: &EmbeddingModel<F>,
    test: &[Observation],
    min_count: usize,
    alpha: f64,
) -> PerEntityReport {
    struct Group {
        entity_type: EntityType,
        durations: Vec<f64>,
        predictions: Vec<f64>,
    }

    let mut seen: HashSet<(usize, usize)> = HashSet::new();
    let mut groups: BTreeMap<usize, Group> = BTreeMap::new();
    for obs in test {
        let user = model.user_vocab.lookup(&obs.user);
        let entity = model.entity_vocab.lookup(&obs.entity);
        if !seen.insert((user, entity)) {
            continue;
        }
        let prediction = model
            .predict_affinity(user, entity)
            .expect("vocabulary indices in bounds")
            .as_f64();
        let group = groups.entry(entity).or_insert_with(|| Group {
            entity_type: obs.entity_type.clone(),
            durations: Vec::new(),
            predictions: Vec::new(),
        });
        group.durations.push(obs.duration_secs);
        group.predictions.push(prediction);
    }

    let mut entities = Vec::new();
    let mut histograms: BTreeMap<EntityType, Vec<u32>> = BTreeMap::new();
    let mut excluded = 0usize;
    for (entity_index, group) in groups {
        let test_count = group.durations.len();
        if test_count <= min_count {
            excluded += 1;
            continue;
        }
        match spearman(&group.durations, &group.predictions) {
            Ok(s) if s.p_value < alpha => {
                let bucket = (((s.rho + 1.0) / 0.05) as usize).min(RHO_HISTOGRAM_BUCKETS - 1);
                histograms
                    .entry(group.entity_type.clone())
                    .or_insert_with(|| vec![0; RHO_HISTOGRAM_BUCKETS])[bucket] += 1;
                entities.push(EntityCorrelation {
                    entity_index,
                    entity_id: model
                        .entity_vocab
                        .id(entity_index)
                        .expect("grouped by vocabulary index")
                        .to_string(),
                    entity_type: group.entity_type,
                    rho: s.rho,
                    p_value: s.p_value,
                    test_count,
                });
            }
            _ => excluded += 1,
        }
    }
    PerEntityReport {
        entities,
        histograms,
        excluded,
    }
}

/// Test observations partitioned by whether their (user, entity) index pair
/// occurs in the training set.
#[derive(Clone, Debug, PartialEq)]
pub struct SeenUnseen {
    pub seen: Vec<Observation>,
    pub unseen: Vec<Observation>,
    /// Test rows whose user or entity resolved to UNK; reported so the
    /// sensitivity of the index-keyed membership can be assessed.
    pub unk_involved: usize,
}

pub fn seen_unseen_split(
    train: &[Observation],
    test: &[Observation],
    user_vocab: &Vocabulary,
    entity_vocab: &Vocabulary,
) -> SeenUnseen {
    let train_pairs: HashSet<(usize, usize)> = train
        .iter()
        .map(|obs| {
            (
                user_vocab.lookup(&obs.user),
                entity_vocab.lookup(&obs.entity),
            )
        })
        .collect();
    let mut result = SeenUnseen {
        seen: Vec::new(),
        unseen: Vec::new(),
        unk_involved: 0,
    };
    for obs in test {
        let user = user_vocab.lookup(&obs.user);
        let entity = entity_vocab.lookup(&obs.entity);
        if user == user_vocab.unk_index() || entity == entity_vocab.unk_index() {
            result.unk_involved += 1;
        }
        if train_pairs.contains(&(user, entity)) {
            result.seen.push(obs.clone());
        } else {
            result.unseen.push(obs.clone());
        }
    }
    result
}

/// Summary lines for a per-entity report, following the same
/// `name<TAB>value<TAB>count` convention as [`EvalReport::write_tsv`].
pub fn write_per_entity_tsv<W: Write>(writer: &mut W, report: &PerEntityReport) -> io::Result<()> {
    writeln!(
        writer,
        "per_entity_included\t{}\t{}",
        report.entities.len(),
        report.entities.len()
    )?;
    writeln!(
        writer,
        "per_entity_excluded\t{}\t{}",
        report.excluded, report.excluded
    )?;
    for e in &report.entities {
        writeln!(
            writer,
            "rho_entity_{}\t{}\t{}",
            e.entity_id, e.rho, e.test_count
        )?;
        writeln!(
            writer,
            "rho_entity_{}_p\t{}\t{}",
            e.entity_id, e.p_value, e.test_count
        )?;
    }
    for (ty, buckets) in &report.histograms {
        for (b, &count) in buckets.iter().enumerate() {
            if count > 0 {
                let lo = -1.0 + b as f64 * 0.05;
                let hi = lo + 0.05;
                writeln!(writer, "rho_hist_{ty}[{lo:.2},{hi:.2})\t{count}\t{count}")?;
            }
        }
    }
    Ok(())
}
