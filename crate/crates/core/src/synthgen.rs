//! Synthetic playback-log generation from planted low-rank factors.
//!
//! Users and entities get planted Gaussian factor rows; the "true" affinity
//! of a pair is the cosine of the planted rows. Each request picks the
//! highest-affinity entity among a popularity-skewed candidate draw (users
//! ask for what they like), or, with the configured negative-affinity rate,
//! simulates a wrong resolution: a fresh popularity draw played only briefly.
//! Correct playbacks last longer the higher the true affinity; wrong
//! resolutions stop well short of the threshold.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson, Zipf};
use thiserror::Error;

use crate::eval::{evaluate, EvalError, EvalReport};
use crate::ingest::{EntityType, Observation};
use crate::math::{cosine, sigmoid};
use crate::model::{EmbeddingModel, FactorMatrix};
use crate::scalar::Real;
use crate::vocab::{EntityTypeTable, Vocabulary, ENTITY_UNK, USER_UNK};

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub users: usize,
    pub entities: usize,
    /// Rank of the planted factors.
    pub true_rank: usize,
    /// Entity-type mix; fractions must sum to 1 and every type needs a
    /// threshold entry.
    pub type_fractions: Vec<(EntityType, f64)>,
    pub thresholds: EntityTypeTable,
    pub requests_per_user_mean: f64,
    /// Candidates drawn per request; the best-affinity candidate is played.
    /// Larger pools mean more strongly preference-driven requests.
    pub candidate_pool: usize,
    /// Probability that a request resolves to a wrong entity.
    pub negative_rate: f64,
    /// Each user's wrong resolutions repeat from a fixed popularity-drawn
    /// list of this size, mimicking systematic misrecognitions of the same
    /// requests; 0 draws a fresh wrong entity every time.
    pub confusion_set: usize,
    /// Probability that external factors override a playback's duration with
    /// a draw near the threshold (stopped early, left unattended). Such rows
    /// carry labels uncorrelated with affinity.
    pub distraction_rate: f64,
    /// Log-normal sigma of the multiplicative duration noise.
    pub duration_noise: f64,
    /// Steepness of the affinity-to-duration map.
    pub duration_sharpness: f64,
    pub days: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 1000,
            entities: 500,
            true_rank: 8,
            type_fractions: vec![
                (EntityType::song(), 0.6),
                (EntityType::album(), 0.2),
                (EntityType::station(), 0.2),
            ],
            thresholds: EntityTypeTable::music_defaults(),
            requests_per_user_mean: 20.0,
            candidate_pool: 60,
            negative_rate: 0.2,
            confusion_set: 3,
            distraction_rate: 0.0,
            duration_noise: 0.25,
            duration_sharpness: 3.0,
            days: 10,
            seed: 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("synth config: {0}")]
    BadConfig(String),
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |msg: String| Err(SynthError::BadConfig(msg));
        if self.users < 2 {
            return fail(format!("need at least 2 users, got {}", self.users));
        }
        if self.entities < 2 {
            return fail(format!("need at least 2 entities, got {}", self.entities));
        }
        if self.true_rank == 0 {
            return fail("true rank must be positive".to_string());
        }
        if self.type_fractions.is_empty() {
            return fail("no entity-type fractions configured".to_string());
        }
        let total: f64 = self.type_fractions.iter().map(|(_, f)| f).sum();
        if (total - 1.0).abs() > 1e-9 || self.type_fractions.iter().any(|(_, f)| *f < 0.0) {
            return fail(format!(
                "type fractions must be non-negative and sum to 1, got {total}"
            ));
        }
        for (ty, _) in &self.type_fractions {
            if self.thresholds.threshold(ty).is_none() {
                return fail(format!("no threshold for entity type `{ty}`"));
            }
        }
        if !(0.0..=1.0).contains(&self.negative_rate) {
            return fail(format!(
                "negative rate must lie in [0, 1], got {}",
                self.negative_rate
            ));
        }
        if !(0.0..=1.0).contains(&self.distraction_rate) {
            return fail(format!(
                "distraction rate must lie in [0, 1], got {}",
                self.distraction_rate
            ));
        }
        if !self.duration_noise.is_finite() || self.duration_noise < 0.0 {
            return fail(format!(
                "duration noise must be non-negative, got {}",
                self.duration_noise
            ));
        }
        if !self.duration_sharpness.is_finite() || self.duration_sharpness <= 0.0 {
            return fail(format!(
                "duration sharpness must be positive, got {}",
                self.duration_sharpness
            ));
        }
        if !self.requests_per_user_mean.is_finite() || self.requests_per_user_mean <= 0.0 {
            return fail(format!(
                "requests per user must be positive, got {}",
                self.requests_per_user_mean
            ));
        }
        if self.days == 0 {
            return fail("need at least one day".to_string());
        }
        if self.candidate_pool == 0 {
            return fail("candidate pool must be positive".to_string());
        }
        Ok(())
    }
}

/// A generated log together with the planted ground-truth model whose
/// predictions are the true affinities.
pub struct SynthOutput<F> {
    pub observations: Vec<Observation>,
    pub truth: EmbeddingModel<F>,
}

/// Generates a playback log from planted factors. Deterministic for a fixed
/// config.
pub fn generate<F: Real>(config: &SynthConfig) -> Result<SynthOutput<F>, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let k = config.true_rank;
    let scale = 1.0 / (k as f64).sqrt();

    // planted rows at indices 1..; row 0 is the (zero) UNK row
    let normal = rand_distr::StandardNormal;
    let mut plant = |rows: usize| -> Vec<Vec<f64>> {
        (0..rows)
            .map(|_| {
                (0..k)
                    .map(|_| {
                        let v: f64 = normal.sample(&mut rng);
                        v * scale
                    })
                    .collect()
            })
            .collect()
    };
    let user_rows = plant(config.users);
    let entity_rows = plant(config.entities);

    let entity_types: Vec<EntityType> = (0..config.entities)
        .map(|_| {
            let roll: f64 = rng.random();
            let mut acc = 0.0;
            for (ty, fraction) in &config.type_fractions {
                acc += fraction;
                if roll < acc {
                    return ty.clone();
                }
            }
            config
                .type_fractions
                .last()
                .expect("non-empty fractions")
                .0
                .clone()
        })
        .collect();

    let zipf = Zipf::new(config.entities as f64, 1.0)
        .map_err(|e| SynthError::BadConfig(format!("zipf: {e}")))?;
    let draw_entity = |rng: &mut ChaCha8Rng| -> usize { zipf.sample(rng) as usize - 1 };
    let poisson = Poisson::new(config.requests_per_user_mean)
        .map_err(|e| SynthError::BadConfig(format!("poisson: {e}")))?;
    let noise = if config.duration_noise > 0.0 {
        Some(
            LogNormal::new(0.0, config.duration_noise)
                .map_err(|e| SynthError::BadConfig(format!("lognormal: {e}")))?,
        )
    } else {
        None
    };

    let mut observations = Vec::new();
    for (user, user_row) in user_rows.iter().enumerate() {
        let requests = (poisson.sample(&mut rng) as usize).max(1);
        let confusions: Vec<usize> = (0..config.confusion_set)
            .map(|_| draw_entity(&mut rng))
            .collect();
        for _ in 0..requests {
            let wrong = rng.random_bool(config.negative_rate);
            let entity = if wrong {
                if confusions.is_empty() {
                    draw_entity(&mut rng)
                } else {
                    confusions[rng.random_range(0..confusions.len())]
                }
            } else {
                // users request what they like: best affinity among candidates
                let mut best = draw_entity(&mut rng);
                let mut best_affinity = cosine(user_row, &entity_rows[best]);
                for _ in 1..config.candidate_pool {
                    let candidate = draw_entity(&mut rng);
                    let affinity = cosine(user_row, &entity_rows[candidate]);
                    if affinity > best_affinity {
                        best = candidate;
                        best_affinity = affinity;
                    }
                }
                best
            };
            let ty = &entity_types[entity];
            let threshold = self_threshold(&config.thresholds, ty);
            let distracted = rng.random_bool(config.distraction_rate);
            let duration = if distracted {
                rng.random_range(threshold / 2.0..2.0 * threshold)
            } else if wrong {
                rng.random_range(0.0..threshold / 2.0)
            } else {
                let affinity = cosine(user_row, &entity_rows[entity]);
                let base = threshold * (1.0 + 9.0 * sigmoid(config.duration_sharpness * affinity));
                let eps = noise.as_ref().map_or(1.0, |n| n.sample(&mut rng));
                (base * eps).clamp(threshold, 20.0 * threshold)
            };
            observations.push(Observation {
                user: format!("User_{user}"),
                entity: format!("Entity_{entity}"),
                entity_type: ty.clone(),
                duration_secs: duration,
                day: rng.random_range(1..=config.days),
            });
        }
    }

    let truth = planted_model(config, &user_rows, &entity_rows);
    Ok(SynthOutput {
        observations,
        truth,
    })
}

fn self_threshold(table: &EntityTypeTable, ty: &EntityType) -> f64 {
    table
        .threshold(ty)
        .expect("validated against the fraction list")
}

fn planted_model<F: Real>(
    config: &SynthConfig,
    user_rows: &[Vec<f64>],
    entity_rows: &[Vec<f64>],
) -> EmbeddingModel<F> {
    let k = config.true_rank;
    let user_vocab = Vocabulary::build((0..config.users).map(|i| format!("User_{i}")), 1, USER_UNK);
    let entity_vocab = Vocabulary::build(
        (0..config.entities).map(|i| format!("Entity_{i}")),
        1,
        ENTITY_UNK,
    );
    let mut user_factors = FactorMatrix::zeros(user_vocab.len(), k);
    for (i, row) in user_rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            user_factors.row_mut(i + 1)[j] = F::from_f64_lossy(v);
        }
    }
    let mut entity_factors = FactorMatrix::zeros(entity_vocab.len(), k);
    for (i, row) in entity_rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            entity_factors.row_mut(i + 1)[j] = F::from_f64_lossy(v);
        }
    }
    EmbeddingModel {
        user_factors,
        entity_factors,
        user_vocab,
        entity_vocab,
        type_table: config.thresholds.clone(),
    }
}

/// Evaluates the planted factors themselves, giving the ceiling a learned
/// model can approach on this log.
pub fn oracle_metrics<F: Real>(
    truth: &EmbeddingModel<F>,
    observations: &[Observation],
    multipliers: &[f64],
) -> Result<EvalReport, EvalError> {
    evaluate(truth, observations, &truth.type_table, multipliers)
}
