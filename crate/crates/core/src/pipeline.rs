//! End-to-end training pipeline: causal split, vocabulary build, labeling,
//! training.
//!
//! Vocabularies count occurrences over the training split only; dev and test
//! identifiers never create entries and resolve to UNK at evaluation time.

use thiserror::Error;

use crate::ingest::{causal_split, IngestError, Observation, SplitSpec};
use crate::labeling::{binarize, label_stream, WeightingKind};
use crate::model::EmbeddingModel;
use crate::scalar::Real;
use crate::trainer::{self, TrainConfig, TrainError, TrainReport};
use crate::vocab::{ConfigError, EntityTypeTable, Vocabulary, ENTITY_UNK, USER_UNK};

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub split: SplitSpec,
    /// Identifier occurrence threshold for a dedicated vocabulary index.
    pub min_count: usize,
    pub weighting: WeightingKind,
    /// Train on positive-affinity observations only (drops the negatives
    /// before the vocabulary build).
    pub positives_only: bool,
    pub train: TrainConfig,
}

/// Fraction of training observations whose user/entity resolved to UNK.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnkStats {
    pub user_fraction: f64,
    pub entity_fraction: f64,
    pub either_fraction: f64,
}

pub struct PipelineOutput<F> {
    pub model: EmbeddingModel<F>,
    pub report: TrainReport,
    pub dev: Vec<Observation>,
    pub test: Vec<Observation>,
    pub discarded: usize,
    /// Observations the model was trained on, after any filtering.
    pub train_rows: usize,
    pub unk: UnkStats,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub fn train_pipeline<F: Real>(
    observations: Vec<Observation>,
    table: EntityTypeTable,
    config: &PipelineConfig,
) -> Result<PipelineOutput<F>, PipelineError> {
    let split = causal_split(observations, config.split)?;
    let mut train_obs = split.train;
    if config.positives_only {
        let mut kept = Vec::with_capacity(train_obs.len());
        for obs in train_obs {
            let threshold = table.require(&obs.entity_type)?;
            if binarize(obs.duration_secs, threshold).is_positive() {
                kept.push(obs);
            }
        }
        train_obs = kept;
    }

    let user_vocab = Vocabulary::build(
        train_obs.iter().map(|o| o.user.as_str()),
        config.min_count,
        USER_UNK,
    );
    let entity_vocab = Vocabulary::build(
        train_obs.iter().map(|o| o.entity.as_str()),
        config.min_count,
        ENTITY_UNK,
    );

    let mut user_unk = 0usize;
    let mut entity_unk = 0usize;
    let mut either_unk = 0usize;
    for obs in &train_obs {
        let u = user_vocab.lookup(&obs.user) == user_vocab.unk_index();
        let e = entity_vocab.lookup(&obs.entity) == entity_vocab.unk_index();
        user_unk += u as usize;
        entity_unk += e as usize;
        either_unk += (u || e) as usize;
    }
    let denom = train_obs.len().max(1) as f64;
    let unk = UnkStats {
        user_fraction: user_unk as f64 / denom,
        entity_fraction: entity_unk as f64 / denom,
        either_fraction: either_unk as f64 / denom,
    };

    let samples = label_stream(
        &train_obs,
        &user_vocab,
        &entity_vocab,
        &table,
        config.weighting,
    )?;
    let (model, report) = trainer::train(&samples, user_vocab, entity_vocab, table, &config.train)?;

    Ok(PipelineOutput {
        model,
        report,
        dev: split.dev,
        test: split.test,
        discarded: split.discarded,
        train_rows: samples.len(),
        unk,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::EntityType;
    use crate::model::Hyperparameters;

    fn obs(user: &str, entity: &str, duration: f64, day: u32) -> Observation {
        Observation {
            user: user.to_string(),
            entity: entity.to_string(),
            entity_type: EntityType::song(),
            duration_secs: duration,
            day,
        }
    }

    fn toy_log() -> Vec<Observation> {
        let mut log = Vec::new();
        for day in 1..=8u32 {
            for i in 0..6usize {
                let duration = if (i + day as usize).is_multiple_of(3) {
                    5.0
                } else {
                    60.0
                };
                log.push(obs(
                    &format!("u{i}"),
                    &format!("e{}", (i + day as usize) % 5),
                    duration,
                    day,
                ));
            }
        }
        log.push(obs("dev-only-user", "e0", 45.0, 9));
        log.push(obs("u0", "test-only-entity", 45.0, 10));
        log
    }

    fn toy_config() -> PipelineConfig {
        PipelineConfig {
            split: SplitSpec {
                dev_day: 9,
                test_day: 10,
            },
            min_count: 1,
            weighting: WeightingKind::ConvexQuadratic,
            positives_only: false,
            train: TrainConfig {
                hp: Hyperparameters {
                    k: 4,
                    epochs: 2,
                    ..Hyperparameters::default()
                },
                ..TrainConfig::default()
            },
        }
    }

    #[test]
    fn pipeline_trains_and_keeps_eval_splits() {
        let out: PipelineOutput<f32> =
            train_pipeline(toy_log(), EntityTypeTable::music_defaults(), &toy_config()).unwrap();
        assert_eq!(out.train_rows, 48);
        assert_eq!(out.dev.len(), 1);
        assert_eq!(out.test.len(), 1);
        assert_eq!(out.discarded, 0);
        assert_eq!(out.report.epoch_triples.len(), 2);
    }

    #[test]
    fn dev_and_test_identifiers_stay_out_of_the_vocabulary() {
        let out: PipelineOutput<f32> =
            train_pipeline(toy_log(), EntityTypeTable::music_defaults(), &toy_config()).unwrap();
        let unk_user = out.model.user_vocab.unk_index();
        let unk_entity = out.model.entity_vocab.unk_index();
        assert_eq!(out.model.user_vocab.lookup("dev-only-user"), unk_user);
        assert_eq!(
            out.model.entity_vocab.lookup("test-only-entity"),
            unk_entity
        );
        assert_ne!(out.model.user_vocab.lookup("u0"), unk_user);
    }

    #[test]
    fn positives_only_filters_the_training_rows() {
        let mut config = toy_config();
        config.positives_only = true;
        let all: PipelineOutput<f32> =
            train_pipeline(toy_log(), EntityTypeTable::music_defaults(), &toy_config()).unwrap();
        let positives: PipelineOutput<f32> =
            train_pipeline(toy_log(), EntityTypeTable::music_defaults(), &config).unwrap();
        assert!(positives.train_rows < all.train_rows);
        assert_eq!(positives.train_rows, 32); // 48 rows, 16 below the threshold
    }

    #[test]
    fn unk_fractions_reflect_min_count() {
        let mut config = toy_config();
        // users appear 8 times each and fold; most entities appear 10 times
        // and survive
        config.min_count = 10;
        let out: PipelineOutput<f32> =
            train_pipeline(toy_log(), EntityTypeTable::music_defaults(), &config).unwrap();
        assert_eq!(out.unk.user_fraction, 1.0);
        assert!(out.unk.entity_fraction > 0.0 && out.unk.entity_fraction < 1.0);
        assert_eq!(out.unk.either_fraction, 1.0);

        let normal: PipelineOutput<f32> =
            train_pipeline(toy_log(), EntityTypeTable::music_defaults(), &toy_config()).unwrap();
        assert_eq!(normal.unk.either_fraction, 0.0);
    }

    #[test]
    fn pipeline_is_reproducible() {
        let run = || -> PipelineOutput<f32> {
            train_pipeline(toy_log(), EntityTypeTable::music_defaults(), &toy_config()).unwrap()
        };
        assert_eq!(run().model, run().model);
    }
}
