//! Weighted pairwise-ranking optimization.
//!
//! Each triple updates exactly three factor rows: the user row moves toward
//! the gap (g_preferred - g_dispreferred), the preferred entity row toward
//! the user row and the dispreferred row away from it, all scaled by the
//! logistic slope, the confidence weight, and per-row weight decay. AdaGrad
//! mode replaces the global learning rate with a per-coordinate
//! eta / (sqrt(accumulated squared gradient) + epsilon).
//!
//! Parallel training follows the Hogwild contract: workers update the shared
//! tables (and the AdaGrad accumulators) without locks, tolerating races on
//! individual coordinates; single-worker runs are bit-reproducible.

use std::fmt;
use std::io::{self, Write};
use std::marker::PhantomData;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::labeling::{Label, LabeledSample};
use crate::math::{dot, sigmoid, softplus};
use crate::model::{EmbeddingModel, FactorMatrix, ModelError};
use crate::sampling::{draw_peer, SamplerConfig, SamplingError, TrainingTriple};
use crate::scalar::Real;
use crate::vocab::{EntityTypeTable, Vocabulary};

pub const DEFAULT_ADAGRAD_EPSILON: f64 = 1e-8;

/// Learning-rate policy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    /// Constant learning rate; the update formula verbatim.
    PlainSgd,
    /// Per-coordinate rate eta / (sqrt(sum of squared gradients) + epsilon).
    Adagrad { epsilon: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adagrad {
            epsilon: DEFAULT_ADAGRAD_EPSILON,
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Optimizer::PlainSgd => f.write_str("sgd"),
            Optimizer::Adagrad { .. } => f.write_str("adagrad"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown optimizer {0:?}; expected sgd|adagrad")]
pub struct ParseOptimizerError(String);

impl FromStr for Optimizer {
    type Err = ParseOptimizerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(Optimizer::PlainSgd),
            "adagrad" => Ok(Optimizer::default()),
            other => Err(ParseOptimizerError(other.to_string())),
        }
    }
}

/// Optimizer working memory; AdaGrad mode carries accumulated squared
/// gradients in the shape of each factor table.
pub struct OptimizerState<F> {
    ada: Option<AdaState<F>>,
}

struct AdaState<F> {
    user: FactorMatrix<F>,
    entity: FactorMatrix<F>,
    epsilon: F,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(optimizer: Optimizer, user_rows: usize, entity_rows: usize, k: usize) -> Self {
        let ada = match optimizer {
            Optimizer::PlainSgd => None,
            Optimizer::Adagrad { epsilon } => Some(AdaState {
                user: FactorMatrix::zeros(user_rows, k),
                entity: FactorMatrix::zeros(entity_rows, k),
                epsilon: F::from_f64_lossy(epsilon),
            }),
        };
        OptimizerState { ada }
    }

    pub fn for_model(optimizer: Optimizer, model: &EmbeddingModel<F>) -> Self {
        Self::new(
            optimizer,
            model.user_factors.rows(),
            model.entity_factors.rows(),
            model.k(),
        )
    }

    pub fn is_adagrad(&self) -> bool {
        self.ada.is_some()
    }

    /// Accumulator tables (user, entity), present in AdaGrad mode.
    pub fn accumulators(&self) -> Option<(&FactorMatrix<F>, &FactorMatrix<F>)> {
        self.ada.as_ref().map(|a| (&a.user, &a.entity))
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training stream is empty")]
    EmptyStream,
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("sample {index} references {table} row {value} outside a table of {rows} rows")]
    SampleOutOfRange {
        index: usize,
        table: &'static str,
        value: usize,
        rows: usize,
    },
    #[error("triple pairs entity {0} with itself")]
    DegenerateTriple(usize),
    #[error("non-finite score gap in epoch {epoch} ({detail}); training diverged")]
    NonFinite { epoch: usize, detail: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub hp: crate::model::Hyperparameters,
    pub optimizer: Optimizer,
    pub workers: usize,
    pub seed: u64,
    /// Window size for bounded-memory shuffling of the per-epoch sample
    /// order; 0 keeps stream order.
    pub shuffle_buffer: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hp: crate::model::Hyperparameters::default(),
            optimizer: Optimizer::default(),
            workers: 1,
            seed: 42,
            shuffle_buffer: 0,
        }
    }
}

/// Per-epoch training statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean weighted pairwise loss per epoch, measured on each triple before
    /// its update.
    pub epoch_mean_loss: Vec<f64>,
    pub epoch_triples: Vec<u64>,
    pub wall_time_secs: f64,
}

impl TrainReport {
    pub fn total_triples(&self) -> u64 {
        self.epoch_triples.iter().sum()
    }

    /// Machine-readable summary, one `name<TAB>value<TAB>count` line per row.
    pub fn write_tsv<W: Write>(&self, writer: &mut W) -> io::Result<()> {
        for (i, (loss, triples)) in self
            .epoch_mean_loss
            .iter()
            .zip(&self.epoch_triples)
            .enumerate()
        {
            writeln!(writer, "epoch_mean_loss_{}\t{}\t{}", i + 1, loss, triples)?;
        }
        writeln!(
            writer,
            "triples_total\t{}\t{}",
            self.total_triples(),
            self.total_triples()
        )?;
        writeln!(writer, "wall_time_secs\t{}\t1", self.wall_time_secs)?;
        Ok(())
    }
}

/// Weighted pairwise loss of one triple: -w * ln sigmoid(score gap),
/// computed in the overflow-safe softplus form.
pub fn triple_loss<F: Real>(
    model: &EmbeddingModel<F>,
    triple: &TrainingTriple,
) -> Result<F, ModelError> {
    let x_hat = model.pairwise_diff(
        triple.user_index,
        triple.preferred_entity_index,
        triple.dispreferred_entity_index,
    )?;
    Ok(F::from_f64_lossy(triple.weight) * softplus(-x_hat))
}

/// AdaGrad accumulator rows for the three rows a step touches.
struct AdaRows<'a, F> {
    user: &'a mut [F],
    preferred: &'a mut [F],
    dispreferred: &'a mut [F],
    epsilon: F,
}

/// Applies one pairwise update to the three touched rows and returns the
/// pre-update score gap. Every right-hand side reads pre-update values, so
/// the three rows move simultaneously. A non-finite gap leaves the rows
/// untouched.
fn apply_step<F: Real>(
    f_u: &mut [F],
    g_e: &mut [F],
    g_n: &mut [F],
    ada: Option<AdaRows<'_, F>>,
    w: F,
    eta: F,
    lambda: F,
) -> F {
    let x_hat = dot(f_u, g_e) - dot(f_u, g_n);
    if !x_hat.is_finite() {
        return x_hat;
    }
    let s = sigmoid(-x_hat);
    match ada {
        None => {
            for i in 0..f_u.len() {
                let (fu, ge, gn) = (f_u[i], g_e[i], g_n[i]);
                f_u[i] = fu + eta * w * (s * (ge - gn) - lambda * fu);
                g_e[i] = ge + eta * w * (s * fu - lambda * ge);
                g_n[i] = gn + eta * w * (-(s * fu) - lambda * gn);
            }
        }
        Some(rows) => {
            for i in 0..f_u.len() {
                let (fu, ge, gn) = (f_u[i], g_e[i], g_n[i]);
                let d_u = w * (s * (ge - gn) - lambda * fu);
                let d_e = w * (s * fu - lambda * ge);
                let d_n = w * (-(s * fu) - lambda * gn);
                rows.user[i] += d_u * d_u;
                rows.preferred[i] += d_e * d_e;
                rows.dispreferred[i] += d_n * d_n;
                f_u[i] = fu + eta / (rows.user[i].sqrt() + rows.epsilon) * d_u;
                g_e[i] = ge + eta / (rows.preferred[i].sqrt() + rows.epsilon) * d_e;
                g_n[i] = gn + eta / (rows.dispreferred[i].sqrt() + rows.epsilon) * d_n;
            }
        }
    }
    x_hat
}

/// Applies one stochastic update for a triple. In AdaGrad mode the raw
/// per-coordinate gradient is squared into the accumulator before the scaled
/// step.
pub fn sgd_step<F: Real>(
    model: &mut EmbeddingModel<F>,
    state: &mut OptimizerState<F>,
    triple: &TrainingTriple,
    eta: f64,
    lambda: f64,
) -> Result<(), TrainError> {
    let user = triple.user_index;
    let preferred = triple.preferred_entity_index;
    let dispreferred = triple.dispreferred_entity_index;
    if preferred == dispreferred {
        return Err(TrainError::DegenerateTriple(preferred));
    }
    if user >= model.user_factors.rows() {
        return Err(ModelError::IndexOutOfBounds {
            table: "user",
            index: user,
            rows: model.user_factors.rows(),
        }
        .into());
    }
    let entity_rows = model.entity_factors.rows();
    for index in [preferred, dispreferred] {
        if index >= entity_rows {
            return Err(ModelError::IndexOutOfBounds {
                table: "entity",
                index,
                rows: entity_rows,
            }
            .into());
        }
    }

    let f_u = model.user_factors.row_mut(user);
    let (g_e, g_n) = model.entity_factors.two_rows_mut(preferred, dispreferred);
    let ada = state.ada.as_mut().map(|a| {
        let (ae, an) = a.entity.two_rows_mut(preferred, dispreferred);
        AdaRows {
            user: a.user.row_mut(user),
            preferred: ae,
            dispreferred: an,
            epsilon: a.epsilon,
        }
    });
    let x_hat = apply_step(
        f_u,
        g_e,
        g_n,
        ada,
        F::from_f64_lossy(triple.weight),
        F::from_f64_lossy(eta),
        F::from_f64_lossy(lambda),
    );
    if !x_hat.is_finite() {
        return Err(TrainError::NonFinite {
            epoch: 0,
            detail: format!("score gap {x_hat} for user {user} ({preferred} vs {dispreferred})"),
        });
    }
    Ok(())
}

/// Raw view of a factor table shared across Hogwild workers. Rows may be
/// updated concurrently without synchronization; torn coordinate updates are
/// tolerated by the training contract.
struct SharedRows<'a, F> {
    ptr: *mut F,
    k: usize,
    _rows: usize,
    _borrow: PhantomData<&'a mut [F]>,
}

unsafe impl<F: Send> Send for SharedRows<'_, F> {}
unsafe impl<F: Send> Sync for SharedRows<'_, F> {}

impl<'a, F: Real> SharedRows<'a, F> {
    fn new(matrix: &'a mut FactorMatrix<F>) -> Self {
        SharedRows {
            ptr: matrix.as_mut_slice().as_mut_ptr(),
            k: matrix.k(),
            _rows: matrix.rows(),
            _borrow: PhantomData,
        }
    }

    /// Callers must keep the row in bounds and must not hold two slices to
    /// the same row within one thread.
    #[allow(clippy::mut_from_ref)]
    unsafe fn row_mut(&self, row: usize) -> &mut [F] {
        debug_assert!(row < self._rows);
        std::slice::from_raw_parts_mut(self.ptr.add(row * self.k), self.k)
    }
}

fn worker_seed(seed: u64, epoch: usize, worker: usize) -> u64 {
    seed ^ ((epoch as u64) << 32) ^ worker as u64
}

const SHUFFLE_STREAM: u64 = u32::MAX as u64;

/// Sliding-window shuffle of `0..n`: deterministic, bounded by the window
/// size, identity-adjacent for small windows.
fn buffered_shuffle_order(n: usize, window_size: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    assert!(n <= u32::MAX as usize, "sample streams are indexed by u32");
    let cap = window_size.min(n).max(1);
    let mut window: Vec<u32> = (0..cap as u32).collect();
    let mut order = Vec::with_capacity(n);
    for incoming in cap..n {
        let slot = rand::Rng::random_range(&mut *rng, 0..window.len());
        order.push(window[slot]);
        window[slot] = incoming as u32;
    }
    while !window.is_empty() {
        let slot = rand::Rng::random_range(&mut *rng, 0..window.len());
        order.push(window.swap_remove(slot));
    }
    order
}

/// Initializes a model from the vocabularies and trains it on the labeled
/// stream.
pub fn train<F: Real>(
    samples: &[LabeledSample],
    user_vocab: Vocabulary,
    entity_vocab: Vocabulary,
    type_table: EntityTypeTable,
    config: &TrainConfig,
) -> Result<(EmbeddingModel<F>, TrainReport), TrainError> {
    let mut model = EmbeddingModel::init(
        user_vocab,
        entity_vocab,
        type_table,
        &config.hp,
        config.seed,
    );
    let report = train_model(&mut model, samples, config)?;
    Ok((model, report))
}

/// Runs `epochs` passes over the labeled stream, expanding each sample into
/// N fresh triples per epoch (epoch-varying seeds) and sharding samples
/// round-robin across workers in stream order.
pub fn train_model<F: Real>(
    model: &mut EmbeddingModel<F>,
    samples: &[LabeledSample],
    config: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyStream);
    }
    let sampler = SamplerConfig {
        negatives_per_obs: config.hp.negatives_per_obs,
        seed: config.seed,
        entity_pool_size: model.entity_factors.rows(),
    };
    sampler.validate()?;
    for (index, sample) in samples.iter().enumerate() {
        if sample.user_index >= model.user_factors.rows() {
            return Err(TrainError::SampleOutOfRange {
                index,
                table: "user",
                value: sample.user_index,
                rows: model.user_factors.rows(),
            });
        }
        if sample.entity_index >= model.entity_factors.rows() {
            return Err(TrainError::SampleOutOfRange {
                index,
                table: "entity",
                value: sample.entity_index,
                rows: model.entity_factors.rows(),
            });
        }
    }

    let workers = config.workers.max(1);
    assert!(
        workers < u32::MAX as usize,
        "worker count exceeds the seed-derivation space"
    );
    let mut state = OptimizerState::for_model(config.optimizer, model);

    let started = Instant::now();
    let mut epoch_mean_loss = Vec::with_capacity(config.hp.epochs);
    let mut epoch_triples = Vec::with_capacity(config.hp.epochs);
    for epoch in 0..config.hp.epochs {
        let order = (config.shuffle_buffer > 0).then(|| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(worker_seed(config.seed, epoch, 0) ^ SHUFFLE_STREAM);
            buffered_shuffle_order(samples.len(), config.shuffle_buffer, &mut rng)
        });
        let (loss_sum, triples) = run_epoch(
            model,
            &mut state,
            samples,
            order.as_deref(),
            epoch,
            workers,
            config,
        )?;
        epoch_mean_loss.push(if triples == 0 {
            0.0
        } else {
            loss_sum / triples as f64
        });
        epoch_triples.push(triples);
    }
    Ok(TrainReport {
        epoch_mean_loss,
        epoch_triples,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

fn run_epoch<F: Real>(
    model: &mut EmbeddingModel<F>,
    state: &mut OptimizerState<F>,
    samples: &[LabeledSample],
    order: Option<&[u32]>,
    epoch: usize,
    workers: usize,
    config: &TrainConfig,
) -> Result<(f64, u64), TrainError> {
    let pool = model.entity_factors.rows();
    let eta = F::from_f64_lossy(config.hp.eta);
    let lambda = F::from_f64_lossy(config.hp.lambda);
    let n_per_obs = config.hp.negatives_per_obs;
    let seed = config.seed;

    let users = SharedRows::new(&mut model.user_factors);
    let entities = SharedRows::new(&mut model.entity_factors);
    let (ada_users, ada_entities, epsilon) = match state.ada.as_mut() {
        Some(a) => (
            Some(SharedRows::new(&mut a.user)),
            Some(SharedRows::new(&mut a.entity)),
            a.epsilon,
        ),
        None => (None, None, F::zero()),
    };

    let abort = AtomicBool::new(false);
    let outcomes: Vec<Result<(f64, u64), TrainError>> = thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|worker| {
                let users = &users;
                let entities = &entities;
                let ada_users = ada_users.as_ref();
                let ada_entities = ada_entities.as_ref();
                let abort = &abort;
                scope.spawn(move || {
                    worker_pass(WorkerPass {
                        users,
                        entities,
                        ada_users,
                        ada_entities,
                        epsilon,
                        samples,
                        order,
                        pool,
                        n_per_obs,
                        eta,
                        lambda,
                        seed,
                        epoch,
                        worker,
                        stride: workers,
                        abort,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training worker panicked"))
            .collect()
    });

    let mut loss_sum = 0.0;
    let mut triples = 0u64;
    for outcome in outcomes {
        let (loss, count) = outcome?;
        loss_sum += loss;
        triples += count;
    }
    Ok((loss_sum, triples))
}

struct WorkerPass<'a, F> {
    users: &'a SharedRows<'a, F>,
    entities: &'a SharedRows<'a, F>,
    ada_users: Option<&'a SharedRows<'a, F>>,
    ada_entities: Option<&'a SharedRows<'a, F>>,
    epsilon: F,
    samples: &'a [LabeledSample],
    order: Option<&'a [u32]>,
    pool: usize,
    n_per_obs: usize,
    eta: F,
    lambda: F,
    seed: u64,
    epoch: usize,
    worker: usize,
    stride: usize,
    abort: &'a AtomicBool,
}

fn worker_pass<F: Real>(ctx: WorkerPass<'_, F>) -> Result<(f64, u64), TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(worker_seed(ctx.seed, ctx.epoch, ctx.worker));
    let mut loss_sum = 0.0f64;
    let mut triples = 0u64;
    let mut index = ctx.worker;
    while index < ctx.samples.len() {
        if ctx.abort.load(Ordering::Relaxed) {
            break;
        }
        let position = ctx.order.map_or(index, |o| o[index] as usize);
        let sample = &ctx.samples[position];
        let weight = F::from_f64_lossy(sample.weight);
        for _ in 0..ctx.n_per_obs {
            let peer = draw_peer(&mut rng, ctx.pool, sample.entity_index);
            let (preferred, dispreferred) = match sample.label {
                Label::Positive => (sample.entity_index, peer),
                Label::Negative => (peer, sample.entity_index),
            };
            // Safety: indices were bounds-checked against the tables up
            // front; the three rows are distinct within this thread. Cross-
            // thread aliasing is the Hogwild contract.
            let x_hat = unsafe {
                let f_u = ctx.users.row_mut(sample.user_index);
                let g_e = ctx.entities.row_mut(preferred);
                let g_n = ctx.entities.row_mut(dispreferred);
                let ada = ctx.ada_users.map(|au| AdaRows {
                    user: au.row_mut(sample.user_index),
                    preferred: ctx
                        .ada_entities
                        .expect("paired accumulator")
                        .row_mut(preferred),
                    dispreferred: ctx
                        .ada_entities
                        .expect("paired accumulator")
                        .row_mut(dispreferred),
                    epsilon: ctx.epsilon,
                });
                apply_step(f_u, g_e, g_n, ada, weight, ctx.eta, ctx.lambda)
            };
            if !x_hat.is_finite() {
                ctx.abort.store(true, Ordering::Relaxed);
                return Err(TrainError::NonFinite {
                    epoch: ctx.epoch,
                    detail: format!(
                        "score gap {x_hat} for user {} ({} vs {})",
                        sample.user_index, preferred, dispreferred
                    ),
                });
            }
            loss_sum += sample.weight * softplus(-x_hat.as_f64());
            triples += 1;
        }
        index += ctx.stride;
    }
    Ok((loss_sum, triples))
}
