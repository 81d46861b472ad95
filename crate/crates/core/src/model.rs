//! Factor tables, affinity scoring, and the binary model format.
//!
//! The affinity score of user u and entity e is the plain inner product of
//! their factor rows (no bias terms); the affinity *prediction* served at
//! inference time is the cosine of those rows, bounded in [-1, 1].
//!
//! # On-disk layout (version 1, all integers and floats little-endian)
//!
//! ```text
//! magic           4 bytes  b"PRNK"
//! version         u32      1
//! k               u32      embedding dimension
//! user_rows       u64
//! entity_rows     u64
//! user_factors    user_rows * k * f32, row-major
//! entity_factors  entity_rows * k * f32, row-major
//! user_vocab      vocab block
//! entity_vocab    vocab block
//! type_table      u32 count, then per entry: u32 name length, UTF-8 name,
//!                 f64 threshold seconds
//! ```
//!
//! A vocab block is `u64 unk_index, u64 min_count, u64 count`, then `count`
//! entries of `u32 length, UTF-8 identifier` in index order. Factors are
//! stored as f32 regardless of the in-memory scalar, so models wider than
//! f32 round-trip through f32 precision.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ingest::EntityType;
use crate::math::{cosine, dot};
use crate::scalar::Real;
use crate::vocab::{EntityTypeTable, Vocabulary};

const MAGIC: [u8; 4] = *b"PRNK";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{table} index {index} out of bounds for {rows} rows")]
    IndexOutOfBounds {
        table: &'static str,
        index: usize,
        rows: usize,
    },
}

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("model I/O failed: {0}")]
    Io(#[from] io::Error),
    #[error("not a model file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt model file: {0}")]
    Corrupt(String),
}

/// Dense row-major matrix of factor values.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorMatrix<F> {
    data: Vec<F>,
    rows: usize,
    k: usize,
}

impl<F: Real> FactorMatrix<F> {
    pub fn zeros(rows: usize, k: usize) -> Self {
        FactorMatrix {
            data: vec![F::zero(); rows * k],
            rows,
            k,
        }
    }

    /// Entries drawn i.i.d. uniform in [-scale, +scale].
    pub fn random<R: Rng>(rows: usize, k: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * k)
            .map(|_| F::from_f64_lossy(rng.random_range(-scale..=scale)))
            .collect();
        FactorMatrix { data, rows, k }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.k..(r + 1) * self.k]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.k..(r + 1) * self.k]
    }

    /// Mutable access to two distinct rows at once.
    pub fn two_rows_mut(&mut self, a: usize, b: usize) -> (&mut [F], &mut [F]) {
        assert_ne!(a, b, "two_rows_mut requires distinct rows");
        let k = self.k;
        if a < b {
            let (lo, hi) = self.data.split_at_mut(b * k);
            (&mut lo[a * k..(a + 1) * k], &mut hi[..k])
        } else {
            let (lo, hi) = self.data.split_at_mut(a * k);
            let (b_row, a_row) = (&mut lo[b * k..(b + 1) * k], &mut hi[..k]);
            (a_row, b_row)
        }
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }
}

/// Training hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hyperparameters {
    /// Embedding dimension K.
    pub k: usize,
    /// Learning rate.
    pub eta: f64,
    /// Regularization strength.
    pub lambda: f64,
    /// Triples per observation (N).
    pub negatives_per_obs: usize,
    /// Training iterations over the data (I).
    pub epochs: usize,
    /// Half-width of the uniform factor initialization.
    pub init_scale: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            k: 50,
            eta: 0.2,
            lambda: 0.005,
            negatives_per_obs: 3,
            epochs: 5,
            init_scale: 0.01,
        }
    }
}

/// User and entity factor tables plus the vocabularies and threshold table
/// they are indexed by.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingModel<F> {
    pub user_factors: FactorMatrix<F>,
    pub entity_factors: FactorMatrix<F>,
    pub user_vocab: Vocabulary,
    pub entity_vocab: Vocabulary,
    pub type_table: EntityTypeTable,
}

impl<F: Real> EmbeddingModel<F> {
    /// Fresh model with factors drawn uniform in [-init_scale, +init_scale],
    /// one row per vocabulary entry (UNK rows included). Deterministic for a
    /// fixed seed.
    pub fn init(
        user_vocab: Vocabulary,
        entity_vocab: Vocabulary,
        type_table: EntityTypeTable,
        hp: &Hyperparameters,
        seed: u64,
    ) -> Self {
        let mut user_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entity_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        EmbeddingModel {
            user_factors: FactorMatrix::random(
                user_vocab.len(),
                hp.k,
                hp.init_scale,
                &mut user_rng,
            ),
            entity_factors: FactorMatrix::random(
                entity_vocab.len(),
                hp.k,
                hp.init_scale,
                &mut entity_rng,
            ),
            user_vocab,
            entity_vocab,
            type_table,
        }
    }

    pub fn k(&self) -> usize {
        self.user_factors.k()
    }

    fn check_user(&self, u: usize) -> Result<(), ModelError> {
        if u >= self.user_factors.rows() {
            return Err(ModelError::IndexOutOfBounds {
                table: "user",
                index: u,
                rows: self.user_factors.rows(),
            });
        }
        Ok(())
    }

    fn check_entity(&self, e: usize) -> Result<(), ModelError> {
        if e >= self.entity_factors.rows() {
            return Err(ModelError::IndexOutOfBounds {
                table: "entity",
                index: e,
                rows: self.entity_factors.rows(),
            });
        }
        Ok(())
    }

    /// Raw affinity score: the inner product of the factor rows.
    pub fn score(&self, user: usize, entity: usize) -> Result<F, ModelError> {
        self.check_user(user)?;
        self.check_entity(entity)?;
        Ok(dot(
            self.user_factors.row(user),
            self.entity_factors.row(entity),
        ))
    }

    /// Score gap between the preferred and dispreferred entity, computed as
    /// the exact difference of the two scores.
    pub fn pairwise_diff(
        &self,
        user: usize,
        preferred: usize,
        dispreferred: usize,
    ) -> Result<F, ModelError> {
        Ok(self.score(user, preferred)? - self.score(user, dispreferred)?)
    }

    /// Affinity prediction: cosine of the factor rows, in [-1, 1]. A zero-norm
    /// row (e.g. an untrained one) predicts a neutral 0.
    pub fn predict_affinity(&self, user: usize, entity: usize) -> Result<F, ModelError> {
        self.check_user(user)?;
        self.check_entity(entity)?;
        Ok(cosine(
            self.user_factors.row(user),
            self.entity_factors.row(entity),
        ))
    }

    /// Prediction by raw identifiers; unknown identifiers resolve to UNK, so
    /// this never fails.
    pub fn predict_ids(&self, user: &str, entity: &str) -> F {
        let u = self.user_vocab.lookup(user);
        let e = self.entity_vocab.lookup(entity);
        self.predict_affinity(u, e)
            .expect("vocabulary indices are in bounds")
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), ModelIoError> {
        let mut writer = BufWriter::new(File::create(path)?);
        self.write_to(&mut writer)
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self, ModelIoError> {
        let mut reader = BufReader::new(File::open(path)?);
        Self::read_from(&mut reader)
    }

    pub fn write_to<W: Write>(&self, writer: &mut W) -> Result<(), ModelIoError> {
        writer.write_all(&MAGIC)?;
        writer.write_all(&FORMAT_VERSION.to_le_bytes())?;
        writer.write_all(&(self.k() as u32).to_le_bytes())?;
        writer.write_all(&(self.user_factors.rows() as u64).to_le_bytes())?;
        writer.write_all(&(self.entity_factors.rows() as u64).to_le_bytes())?;
        write_factors(writer, &self.user_factors)?;
        write_factors(writer, &self.entity_factors)?;
        write_vocab(writer, &self.user_vocab)?;
        write_vocab(writer, &self.entity_vocab)?;
        write_type_table(writer, &self.type_table)?;
        Ok(())
    }

    pub fn read_from<R: Read>(reader: &mut R) -> Result<Self, ModelIoError> {
        let mut magic = [0u8; 4];
        read_exact(reader, &mut magic)?;
        if magic != MAGIC {
            return Err(ModelIoError::BadMagic);
        }
        let version = read_u32(reader)?;
        if version != FORMAT_VERSION {
            return Err(ModelIoError::UnsupportedVersion(version));
        }
        let k = read_u32(reader)? as usize;
        let user_rows = read_u64(reader)? as usize;
        let entity_rows = read_u64(reader)? as usize;
        let user_factors = read_factors(reader, user_rows, k)?;
        let entity_factors = read_factors(reader, entity_rows, k)?;
        let user_vocab = read_vocab(reader)?;
        let entity_vocab = read_vocab(reader)?;
        let type_table = read_type_table(reader)?;

        if user_vocab.len() != user_rows {
            return Err(ModelIoError::Corrupt(format!(
                "user vocabulary holds {} entries but the factor table has {} rows",
                user_vocab.len(),
                user_rows
            )));
        }
        if entity_vocab.len() != entity_rows {
            return Err(ModelIoError::Corrupt(format!(
                "entity vocabulary holds {} entries but the factor table has {} rows",
                entity_vocab.len(),
                entity_rows
            )));
        }
        let mut probe = [0u8; 1];
        if reader.read(&mut probe)? != 0 {
            return Err(ModelIoError::Corrupt(
                "trailing bytes after model".to_string(),
            ));
        }
        Ok(EmbeddingModel {
            user_factors,
            entity_factors,
            user_vocab,
            entity_vocab,
            type_table,
        })
    }
}

fn read_exact<R: Read>(reader: &mut R, buf: &mut [u8]) -> Result<(), ModelIoError> {
    reader.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            ModelIoError::Corrupt("truncated file".to_string())
        } else {
            ModelIoError::Io(e)
        }
    })
}

fn read_u32<R: Read>(reader: &mut R) -> Result<u32, ModelIoError> {
    let mut buf = [0u8; 4];
    read_exact(reader, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(reader: &mut R) -> Result<u64, ModelIoError> {
    let mut buf = [0u8; 8];
    read_exact(reader, &mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64<R: Read>(reader: &mut R) -> Result<f64, ModelIoError> {
    let mut buf = [0u8; 8];
    read_exact(reader, &mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_string<R: Read>(reader: &mut R) -> Result<String, ModelIoError> {
    let len = read_u32(reader)? as usize;
    let mut buf = vec![0u8; len];
    read_exact(reader, &mut buf)?;
    String::from_utf8(buf).map_err(|_| ModelIoError::Corrupt("non-UTF-8 identifier".to_string()))
}

fn write_string<W: Write>(writer: &mut W, s: &str) -> Result<(), ModelIoError> {
    writer.write_all(&(s.len() as u32).to_le_bytes())?;
    writer.write_all(s.as_bytes())?;
    Ok(())
}

fn write_factors<W: Write, F: Real>(
    writer: &mut W,
    factors: &FactorMatrix<F>,
) -> Result<(), ModelIoError> {
    for &value in factors.as_slice() {
        let v = value.to_f32().unwrap_or(f32::NAN);
        if !v.is_finite() {
            return Err(ModelIoError::Corrupt(format!(
                "factor value {value} does not fit the on-disk f32 format"
            )));
        }
        writer.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_factors<R: Read, F: Real>(
    reader: &mut R,
    rows: usize,
    k: usize,
) -> Result<FactorMatrix<F>, ModelIoError> {
    let mut matrix = FactorMatrix::zeros(rows, k);
    let mut buf = [0u8; 4];
    for value in matrix.as_mut_slice() {
        read_exact(reader, &mut buf)?;
        let v = f32::from_le_bytes(buf);
        if !v.is_finite() {
            return Err(ModelIoError::Corrupt("non-finite factor value".to_string()));
        }
        *value = F::from_f64_lossy(v as f64);
    }
    Ok(matrix)
}

fn write_vocab<W: Write>(writer: &mut W, vocab: &Vocabulary) -> Result<(), ModelIoError> {
    writer.write_all(&(vocab.unk_index() as u64).to_le_bytes())?;
    writer.write_all(&(vocab.min_count() as u64).to_le_bytes())?;
    writer.write_all(&(vocab.len() as u64).to_le_bytes())?;
    for index in 0..vocab.len() {
        write_string(writer, vocab.id(index).expect("contiguous indices"))?;
    }
    Ok(())
}

fn read_vocab<R: Read>(reader: &mut R) -> Result<Vocabulary, ModelIoError> {
    let unk_index = read_u64(reader)? as usize;
    let min_count = read_u64(reader)? as usize;
    let count = read_u64(reader)? as usize;
    let mut index_to_id = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        index_to_id.push(read_string(reader)?);
    }
    Vocabulary::from_parts(index_to_id, unk_index, min_count)
        .map_err(|e| ModelIoError::Corrupt(e.to_string()))
}

fn write_type_table<W: Write>(writer: &mut W, table: &EntityTypeTable) -> Result<(), ModelIoError> {
    writer.write_all(&(table.len() as u32).to_le_bytes())?;
    for (ty, threshold) in table.iter() {
        write_string(writer, ty.as_str())?;
        writer.write_all(&threshold.to_le_bytes())?;
    }
    Ok(())
}

fn read_type_table<R: Read>(reader: &mut R) -> Result<EntityTypeTable, ModelIoError> {
    let count = read_u32(reader)?;
    let mut table = EntityTypeTable::new();
    for _ in 0..count {
        let name = read_string(reader)?;
        let threshold = read_f64(reader)?;
        table
            .insert(EntityType::new(&name), threshold)
            .map_err(|e| ModelIoError::Corrupt(e.to_string()))?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{ENTITY_UNK, USER_UNK};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    pub(crate) fn dummy_vocab(prefix: &str, count: usize, unk: &str) -> Vocabulary {
        Vocabulary::build((0..count).map(|i| format!("{prefix}{i}")), 1, unk)
    }

    fn small_model(k: usize, users: usize, entities: usize, seed: u64) -> EmbeddingModel<f64> {
        let hp = Hyperparameters {
            k,
            init_scale: 0.5,
            ..Hyperparameters::default()
        };
        EmbeddingModel::init(
            dummy_vocab("u", users, USER_UNK),
            dummy_vocab("e", entities, ENTITY_UNK),
            EntityTypeTable::music_defaults(),
            &hp,
            seed,
        )
    }

    #[test]
    fn init_produces_requested_shapes() {
        let hp = Hyperparameters {
            k: 50,
            ..Hyperparameters::default()
        };
        let model: EmbeddingModel<f32> = EmbeddingModel::init(
            dummy_vocab("u", 999, USER_UNK),
            dummy_vocab("e", 499, ENTITY_UNK),
            EntityTypeTable::music_defaults(),
            &hp,
            7,
        );
        assert_eq!(model.user_factors.rows(), 1000);
        assert_eq!(model.entity_factors.rows(), 500);
        assert_eq!(model.k(), 50);
    }

    #[test]
    fn zero_init_scale_gives_zero_scores() {
        let hp = Hyperparameters {
            k: 4,
            init_scale: 0.0,
            ..Hyperparameters::default()
        };
        let model: EmbeddingModel<f32> = EmbeddingModel::init(
            dummy_vocab("u", 3, USER_UNK),
            dummy_vocab("e", 3, ENTITY_UNK),
            EntityTypeTable::music_defaults(),
            &hp,
            7,
        );
        assert_eq!(model.score(1, 2).unwrap(), 0.0);
        assert_eq!(model.predict_affinity(1, 2).unwrap(), 0.0);
    }

    #[test]
    fn init_is_deterministic() {
        let a = small_model(8, 20, 30, 99);
        let b = small_model(8, 20, 30, 99);
        assert_eq!(a, b);
        let c = small_model(8, 20, 30, 100);
        assert_ne!(a, c);
    }

    #[test]
    fn score_matches_hand_inner_product() {
        let mut model = small_model(4, 2, 2, 1);
        model
            .user_factors
            .row_mut(1)
            .copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        model
            .entity_factors
            .row_mut(1)
            .copy_from_slice(&[2.0, 0.0, 0.0, 0.0]);
        assert_eq!(model.score(1, 1).unwrap(), 2.0);
    }

    #[test]
    fn score_matches_naive_summation_oracle() {
        let model = small_model(50, 5, 5, 21);
        for (u, e) in [(0, 0), (1, 3), (4, 2)] {
            let mut oracle = 0.0f64;
            for i in 0..model.k() {
                oracle += model.user_factors.row(u)[i] * model.entity_factors.row(e)[i];
            }
            assert_relative_eq!(model.score(u, e).unwrap(), oracle, max_relative = 1e-12);
        }
    }

    #[test]
    fn out_of_bounds_index_is_an_error() {
        let model = small_model(4, 2, 2, 1);
        assert!(model.score(99, 0).is_err());
        assert!(model.score(0, 99).is_err());
        assert!(model.predict_affinity(99, 0).is_err());
    }

    #[test]
    fn pairwise_diff_is_score_difference_and_antisymmetric() {
        let model = small_model(10, 4, 6, 5);
        let diff = model.pairwise_diff(2, 3, 4).unwrap();
        let oracle = model.score(2, 3).unwrap() - model.score(2, 4).unwrap();
        assert_eq!(diff, oracle);
        assert_eq!(model.pairwise_diff(2, 4, 3).unwrap(), -diff);
    }

    #[test]
    fn equal_entity_rows_give_zero_diff() {
        let mut model = small_model(4, 2, 3, 1);
        let row: Vec<f64> = model.entity_factors.row(1).to_vec();
        model.entity_factors.row_mut(2).copy_from_slice(&row);
        assert_eq!(model.pairwise_diff(1, 1, 2).unwrap(), 0.0);
    }

    #[test]
    fn predict_affinity_handles_parallel_orthogonal_zero() {
        let mut model = small_model(2, 2, 3, 1);
        model.user_factors.row_mut(1).copy_from_slice(&[3.0, 0.0]);
        model.entity_factors.row_mut(0).copy_from_slice(&[7.0, 0.0]);
        model.entity_factors.row_mut(1).copy_from_slice(&[0.0, 2.0]);
        model.entity_factors.row_mut(2).copy_from_slice(&[0.0, 0.0]);
        assert_eq!(model.predict_affinity(1, 0).unwrap(), 1.0);
        assert_eq!(model.predict_affinity(1, 1).unwrap(), 0.0);
        assert_eq!(model.predict_affinity(1, 2).unwrap(), 0.0);
    }

    #[test]
    fn predict_ids_falls_back_to_unk() {
        let model = small_model(4, 3, 3, 8);
        let p = model.predict_ids("nobody", "nothing");
        let via_unk = model
            .predict_affinity(model.user_vocab.unk_index(), model.entity_vocab.unk_index())
            .unwrap();
        assert_eq!(p, via_unk);
    }

    #[test]
    fn save_load_round_trip_is_exact_for_f32() {
        let hp = Hyperparameters {
            k: 6,
            init_scale: 0.3,
            ..Hyperparameters::default()
        };
        let model: EmbeddingModel<f32> = EmbeddingModel::init(
            dummy_vocab("u", 12, USER_UNK),
            dummy_vocab("e", 9, ENTITY_UNK),
            EntityTypeTable::music_defaults(),
            &hp,
            31,
        );
        let mut bytes = Vec::new();
        model.write_to(&mut bytes).unwrap();
        let loaded = EmbeddingModel::<f32>::read_from(&mut io::Cursor::new(&bytes)).unwrap();
        assert_eq!(loaded, model);
        // and writing again is byte-identical
        let mut again = Vec::new();
        loaded.write_to(&mut again).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn load_rejects_bad_magic_and_truncation() {
        let model = small_model(3, 2, 2, 4);
        let mut bytes = Vec::new();
        model.write_to(&mut bytes).unwrap();

        let mut mangled = bytes.clone();
        mangled[0] = b'X';
        assert!(matches!(
            EmbeddingModel::<f64>::read_from(&mut io::Cursor::new(&mangled)),
            Err(ModelIoError::BadMagic)
        ));

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(
            EmbeddingModel::<f64>::read_from(&mut io::Cursor::new(truncated)),
            Err(ModelIoError::Corrupt(_))
        ));

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(
            EmbeddingModel::<f64>::read_from(&mut io::Cursor::new(&trailing)),
            Err(ModelIoError::Corrupt(_))
        ));

        let mut wrong_version = bytes;
        wrong_version[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            EmbeddingModel::<f64>::read_from(&mut io::Cursor::new(&wrong_version)),
            Err(ModelIoError::UnsupportedVersion(9))
        ));
    }

    proptest! {
        #[test]
        fn predictions_stay_in_unit_interval(seed in proptest::num::u64::ANY) {
            let model = small_model(8, 6, 6, seed);
            for u in 0..6 {
                for e in 0..6 {
                    let p = model.predict_affinity(u, e).unwrap();
                    prop_assert!((-1.0..=1.0).contains(&p));
                }
            }
        }

        #[test]
        fn score_is_bilinear_and_prediction_scale_invariant(
            seed in proptest::num::u64::ANY,
            c in 0.1f64..50.0,
        ) {
            let mut model = small_model(8, 3, 3, seed);
            let base_score = model.score(1, 1).unwrap();
            let base_pred = model.predict_affinity(1, 1).unwrap();
            for v in model.user_factors.row_mut(1) {
                *v *= c;
            }
            prop_assert!((model.score(1, 1).unwrap() - c * base_score).abs() <= 1e-9 * c.max(1.0));
            prop_assert!((model.predict_affinity(1, 1).unwrap() - base_pred).abs() <= 1e-9);
        }
    }
}
