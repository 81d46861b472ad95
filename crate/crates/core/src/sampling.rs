//! Pairwise-ranking triple expansion by uniform entity sampling.
//!
//! Each labeled observation becomes N triples. A positive observation keeps
//! its entity on the preferred side and draws N dispreferred peers uniformly
//! from the entity pool; a negative observation keeps its entity on the
//! dispreferred side and draws preferred peers. A draw that collides with the
//! observed entity is redrawn, so the output always holds exactly N triples
//! per observation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::labeling::{Label, LabeledSample};

/// One pairwise training example: the user should rank the preferred entity
/// above the dispreferred one, with the observation's confidence weight.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTriple {
    pub user_index: usize,
    pub preferred_entity_index: usize,
    pub dispreferred_entity_index: usize,
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    /// Triples generated per observation (N).
    pub negatives_per_obs: usize,
    pub seed: u64,
    /// Size of the entity index pool, UNK row included.
    pub entity_pool_size: usize,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SamplingError {
    #[error("entity pool must hold at least 2 entities to sample a distinct peer, got {0}")]
    PoolTooSmall(usize),
    #[error("negatives_per_obs must be at least 1")]
    ZeroNegatives,
    #[error("observed entity index {index} outside pool of size {pool}")]
    EntityOutOfPool { index: usize, pool: usize },
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplingError> {
        if self.negatives_per_obs == 0 {
            return Err(SamplingError::ZeroNegatives);
        }
        if self.entity_pool_size < 2 {
            return Err(SamplingError::PoolTooSmall(self.entity_pool_size));
        }
        Ok(())
    }
}

/// Uniform draw from the pool, redrawn while it collides with `avoid`.
/// Collision probability is 1/pool per draw, so this terminates almost
/// surely for any pool of at least 2.
pub(crate) fn draw_peer<R: Rng>(rng: &mut R, pool_size: usize, avoid: usize) -> usize {
    debug_assert!(pool_size >= 2);
    loop {
        let candidate = rng.random_range(0..pool_size);
        if candidate != avoid {
            return candidate;
        }
    }
}

/// Orients a sampled peer around the observed entity according to the label.
pub(crate) fn orient(sample: &LabeledSample, peer: usize) -> TrainingTriple {
    let (preferred, dispreferred) = match sample.label {
        Label::Positive => (sample.entity_index, peer),
        Label::Negative => (peer, sample.entity_index),
    };
    TrainingTriple {
        user_index: sample.user_index,
        preferred_entity_index: preferred,
        dispreferred_entity_index: dispreferred,
        weight: sample.weight,
    }
}

/// Expands one labeled sample into exactly N triples using the given RNG.
pub fn expand<R: Rng>(
    sample: &LabeledSample,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<TrainingTriple>, SamplingError> {
    config.validate()?;
    if sample.entity_index >= config.entity_pool_size {
        return Err(SamplingError::EntityOutOfPool {
            index: sample.entity_index,
            pool: config.entity_pool_size,
        });
    }
    Ok((0..config.negatives_per_obs)
        .map(|_| {
            orient(
                sample,
                draw_peer(rng, config.entity_pool_size, sample.entity_index),
            )
        })
        .collect())
}

/// Lazily expands a labeled stream into triples; the RNG is seeded from the
/// config, so identical (stream, seed) pairs yield identical output.
pub fn triple_stream<I>(
    samples: I,
    config: &SamplerConfig,
) -> Result<TripleStream<I::IntoIter>, SamplingError>
where
    I: IntoIterator<Item = LabeledSample>,
{
    config.validate()?;
    Ok(TripleStream {
        inner: samples.into_iter(),
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        config: *config,
        current: None,
        emitted: 0,
    })
}

pub struct TripleStream<I> {
    inner: I,
    rng: ChaCha8Rng,
    config: SamplerConfig,
    current: Option<LabeledSample>,
    emitted: usize,
}

impl<I> Iterator for TripleStream<I>
where
    I: Iterator<Item = LabeledSample>,
{
    type Item = Result<TrainingTriple, SamplingError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.emitted == self.config.negatives_per_obs {
            self.current = None;
            self.emitted = 0;
        }
        if self.current.is_none() {
            self.current = self.inner.next();
        }
        let sample = self.current.as_ref()?;
        if sample.entity_index >= self.config.entity_pool_size {
            let err = SamplingError::EntityOutOfPool {
                index: sample.entity_index,
                pool: self.config.entity_pool_size,
            };
            self.current = None;
            self.emitted = 0;
            return Some(Err(err));
        }
        self.emitted += 1;
        let peer = draw_peer(
            &mut self.rng,
            self.config.entity_pool_size,
            sample.entity_index,
        );
        Some(Ok(orient(sample, peer)))
    }
}
