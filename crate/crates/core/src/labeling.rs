//! Duration binarization and confidence weighting.
//!
//! A playback counts as positive affinity when its duration reaches the
//! entity-type threshold T, negative otherwise. Confidence weights come from
//! curves over the duration axis that vanish at T, reach 1 at 0 s and at 10T,
//! and stay at 1 beyond 10T; samples near the threshold carry the least
//! information and get the least weight.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::ingest::{EntityType, Observation};
use crate::scalar::Real;
use crate::vocab::{ConfigError, EntityTypeTable, Vocabulary};

/// Binary affinity label. `Negative < Positive` so label monotonicity in the
/// duration can be expressed with `<=`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn signum(self) -> i8 {
        match self {
            Label::Positive => 1,
            Label::Negative => -1,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }
}

/// Positive iff the duration reaches the threshold (inclusive).
pub fn binarize<F: Real>(duration: F, threshold: F) -> Label {
    debug_assert!(threshold > F::zero(), "threshold must be positive");
    if duration >= threshold {
        Label::Positive
    } else {
        Label::Negative
    }
}

/// Confidence-weighting curve family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WeightingKind {
    Uniform,
    Log,
    ConcaveQuadratic,
    Linear,
    ConvexQuadratic,
}

impl WeightingKind {
    pub const ALL: [WeightingKind; 5] = [
        WeightingKind::Uniform,
        WeightingKind::Log,
        WeightingKind::ConcaveQuadratic,
        WeightingKind::Linear,
        WeightingKind::ConvexQuadratic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WeightingKind::Uniform => "uniform",
            WeightingKind::Log => "log",
            WeightingKind::ConcaveQuadratic => "concave-quad",
            WeightingKind::Linear => "linear",
            WeightingKind::ConvexQuadratic => "convex-quad",
        }
    }
}

impl fmt::Display for WeightingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown weighting kind {0:?}; expected uniform|log|concave-quad|linear|convex-quad")]
pub struct ParseWeightingError(String);

impl FromStr for WeightingKind {
    type Err = ParseWeightingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(WeightingKind::Uniform),
            "log" => Ok(WeightingKind::Log),
            "concave-quad" => Ok(WeightingKind::ConcaveQuadratic),
            "linear" => Ok(WeightingKind::Linear),
            "convex-quad" => Ok(WeightingKind::ConvexQuadratic),
            other => Err(ParseWeightingError(other.to_string())),
        }
    }
}

/// Curve shape over the normalized distance-from-threshold u in [0, 1].
/// All shapes map 0 to 0 and 1 to 1 and increase strictly in between.
fn shape<F: Real>(u: F, kind: WeightingKind) -> F {
    let two = F::from_f64_lossy(2.0);
    let nine = F::from_f64_lossy(9.0);
    let ten = F::from_f64_lossy(10.0);
    match kind {
        WeightingKind::Uniform => F::one(),
        WeightingKind::Linear => u,
        WeightingKind::ConvexQuadratic => u * u,
        WeightingKind::ConcaveQuadratic => two * u - u * u,
        WeightingKind::Log => (F::one() + nine * u).ln() / ten.ln(),
    }
}

/// Confidence weight w(t) in [0, 1] for a playback of `duration` seconds
/// against threshold T. Non-uniform kinds satisfy w(T) = 0, w(0) = w(10T) = 1
/// and w = 1 beyond 10T; the uniform kind is 1 everywhere.
pub fn confidence_weight<F: Real>(duration: F, threshold: F, kind: WeightingKind) -> F {
    debug_assert!(duration >= F::zero(), "duration must be non-negative");
    debug_assert!(threshold > F::zero(), "threshold must be positive");
    if kind == WeightingKind::Uniform {
        return F::one();
    }
    let nine = F::from_f64_lossy(9.0);
    let ten = F::from_f64_lossy(10.0);
    if duration > ten * threshold {
        return F::one();
    }
    let u = if duration <= threshold {
        (threshold - duration) / threshold
    } else {
        (duration - threshold) / (nine * threshold)
    };
    shape(u, kind)
}

/// One observation resolved to vocabulary indices and labeled.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub user_index: usize,
    pub entity_index: usize,
    pub entity_type: EntityType,
    pub label: Label,
    /// Confidence weight in [0, 1].
    pub weight: f64,
    pub duration_secs: f64,
}

/// Labels a batch of observations, resolving identifiers through the
/// vocabularies (UNK fallback). Fails on an entity type missing from the
/// threshold table, naming the type.
pub fn label_stream(
    observations: &[Observation],
    user_vocab: &Vocabulary,
    entity_vocab: &Vocabulary,
    table: &EntityTypeTable,
    kind: WeightingKind,
) -> Result<Vec<LabeledSample>, ConfigError> {
    observations
        .iter()
        .map(|obs| {
            let threshold = table.require(&obs.entity_type)?;
            Ok(LabeledSample {
                user_index: user_vocab.lookup(&obs.user),
                entity_index: entity_vocab.lookup(&obs.entity),
                entity_type: obs.entity_type.clone(),
                label: binarize(obs.duration_secs, threshold),
                weight: confidence_weight(obs.duration_secs, threshold, kind),
                duration_secs: obs.duration_secs,
            })
        })
        .collect()
}
