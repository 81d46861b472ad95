//! Identifier vocabularies with min-count UNK folding, and the per-type
//! playback-threshold table.
//!
//! User and entity identifiers get separate vocabularies with separate UNK
//! tokens. Identifiers occurring fewer than `min_count` times in the build
//! corpus fold into the UNK index, as does every identifier unseen at lookup
//! time, so index resolution never fails.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufRead, BufReader, Read, Write};

use thiserror::Error;

use crate::ingest::EntityType;

/// Reserved label absorbing low-frequency and unseen user identifiers.
pub const USER_UNK: &str = "<User_UNK>";
/// Reserved label absorbing low-frequency and unseen entity identifiers.
pub const ENTITY_UNK: &str = "<Entity_UNK>";

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("vocabulary I/O failed: {0}")]
    Io(#[from] io::Error),
    #[error("vocabulary line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("vocabulary indices are not contiguous from 0 (size {size}, saw index {index})")]
    NonContiguous { size: usize, index: usize },
    #[error("duplicate identifier {0:?}")]
    DuplicateId(String),
    #[error("UNK token {0:?} missing from vocabulary file")]
    MissingUnk(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("playback threshold for entity type `{ty}` must be positive and finite, got {value}")]
    BadThreshold { ty: EntityType, value: f64 },
    #[error("no playback threshold configured for entity type `{0}`")]
    MissingType(EntityType),
}

/// Immutable mapping between identifier strings and dense indices.
///
/// Index 0 is always the UNK index; remaining indices follow first-occurrence
/// order of the build stream, so builds are deterministic for a fixed input
/// order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_index: HashMap<String, usize>,
    index_to_id: Vec<String>,
    unk_index: usize,
    min_count: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from an identifier stream. Identifiers with fewer
    /// than `min_count` occurrences do not get a dedicated index. An empty
    /// stream yields a vocabulary holding only the UNK entry.
    pub fn build<I, S>(ids: I, min_count: usize, unk_token: &str) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        assert!(min_count >= 1, "min_count must be at least 1");
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut first_seen: Vec<String> = Vec::new();
        for id in ids {
            let id = id.as_ref();
            if id == unk_token {
                // the UNK literal never gets a dedicated slot
                continue;
            }
            match counts.get_mut(id) {
                Some(c) => *c += 1,
                None => {
                    counts.insert(id.to_string(), 1);
                    first_seen.push(id.to_string());
                }
            }
        }

        let mut index_to_id = Vec::with_capacity(first_seen.len() + 1);
        let mut id_to_index = HashMap::with_capacity(first_seen.len() + 1);
        index_to_id.push(unk_token.to_string());
        id_to_index.insert(unk_token.to_string(), 0);
        for id in first_seen {
            if counts[&id] >= min_count {
                id_to_index.insert(id.clone(), index_to_id.len());
                index_to_id.push(id);
            }
        }
        Vocabulary {
            id_to_index,
            index_to_id,
            unk_index: 0,
            min_count,
        }
    }

    /// Reassembles a vocabulary from an index-ordered identifier list, as
    /// read back from a serialized form.
    pub fn from_parts(
        index_to_id: Vec<String>,
        unk_index: usize,
        min_count: usize,
    ) -> Result<Self, VocabError> {
        if unk_index >= index_to_id.len() {
            return Err(VocabError::NonContiguous {
                size: index_to_id.len(),
                index: unk_index,
            });
        }
        let mut id_to_index = HashMap::with_capacity(index_to_id.len());
        for (index, id) in index_to_id.iter().enumerate() {
            if id_to_index.insert(id.clone(), index).is_some() {
                return Err(VocabError::DuplicateId(id.clone()));
            }
        }
        Ok(Vocabulary {
            id_to_index,
            index_to_id,
            unk_index,
            min_count,
        })
    }

    /// Resolves an identifier to its index, falling back to the UNK index for
    /// anything unknown. Never fails.
    pub fn lookup(&self, id: &str) -> usize {
        self.id_to_index.get(id).copied().unwrap_or(self.unk_index)
    }

    pub fn id(&self, index: usize) -> Option<&str> {
        self.index_to_id.get(index).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.index_to_id.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the UNK entry is always present
    }

    pub fn unk_index(&self) -> usize {
        self.unk_index
    }

    pub fn unk_token(&self) -> &str {
        &self.index_to_id[self.unk_index]
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    /// Fraction of the given identifiers that resolve to the UNK index.
    /// Returns 0 for an empty stream.
    pub fn unk_fraction<I, S>(&self, ids: I) -> f64
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut total = 0u64;
        let mut unk = 0u64;
        for id in ids {
            total += 1;
            if self.lookup(id.as_ref()) == self.unk_index {
                unk += 1;
            }
        }
        if total == 0 {
            0.0
        } else {
            unk as f64 / total as f64
        }
    }

    /// Writes `identifier<TAB>index` lines in index order (UNK row included).
    pub fn save_tsv<W: Write>(&self, mut writer: W) -> io::Result<()> {
        for (index, id) in self.index_to_id.iter().enumerate() {
            writeln!(writer, "{id}\t{index}")?;
        }
        Ok(())
    }

    /// Loads the text form written by [`save_tsv`](Self::save_tsv). The text
    /// format carries only the mapping; `min_count` restates the threshold
    /// the vocabulary was built with.
    pub fn load_tsv<R: Read>(
        reader: R,
        unk_token: &str,
        min_count: usize,
    ) -> Result<Self, VocabError> {
        let reader = BufReader::new(reader);
        let mut entries: Vec<(String, usize)> = Vec::new();
        for (line_no, line) in reader.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (id, index) = line.split_once('\t').ok_or_else(|| VocabError::Malformed {
                line: line_no + 1,
                reason: "expected identifier<TAB>index".to_string(),
            })?;
            let index: usize = index.parse().map_err(|_| VocabError::Malformed {
                line: line_no + 1,
                reason: format!("unparseable index {index:?}"),
            })?;
            entries.push((id.to_string(), index));
        }

        let size = entries.len();
        let mut index_to_id = vec![String::new(); size];
        let mut id_to_index = HashMap::with_capacity(size);
        for (id, index) in entries {
            if index >= size || !index_to_id[index].is_empty() {
                return Err(VocabError::NonContiguous { size, index });
            }
            if id_to_index.insert(id.clone(), index).is_some() {
                return Err(VocabError::DuplicateId(id));
            }
            index_to_id[index] = id;
        }
        let unk_index = *id_to_index
            .get(unk_token)
            .ok_or_else(|| VocabError::MissingUnk(unk_token.to_string()))?;
        Ok(Vocabulary {
            id_to_index,
            index_to_id,
            unk_index,
            min_count,
        })
    }
}

/// Per-type playback thresholds T, in seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityTypeTable {
    thresholds: BTreeMap<EntityType, f64>,
}

impl EntityTypeTable {
    pub fn new() -> Self {
        EntityTypeTable {
            thresholds: BTreeMap::new(),
        }
    }

    /// The music-domain defaults: 30 s for songs, 180 s for albums and
    /// stations.
    pub fn music_defaults() -> Self {
        let mut table = EntityTypeTable::new();
        table.insert(EntityType::song(), 30.0).unwrap();
        table.insert(EntityType::album(), 180.0).unwrap();
        table.insert(EntityType::station(), 180.0).unwrap();
        table
    }

    pub fn insert(&mut self, ty: EntityType, threshold_secs: f64) -> Result<(), ConfigError> {
        if !threshold_secs.is_finite() || threshold_secs <= 0.0 {
            return Err(ConfigError::BadThreshold {
                ty,
                value: threshold_secs,
            });
        }
        self.thresholds.insert(ty, threshold_secs);
        Ok(())
    }

    pub fn threshold(&self, ty: &EntityType) -> Option<f64> {
        self.thresholds.get(ty).copied()
    }

    /// Threshold lookup that treats a missing type as a configuration error.
    pub fn require(&self, ty: &EntityType) -> Result<f64, ConfigError> {
        self.threshold(ty)
            .ok_or_else(|| ConfigError::MissingType(ty.clone()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&EntityType, f64)> {
        self.thresholds.iter().map(|(ty, &t)| (ty, t))
    }

    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }

    /// Writes `type<TAB>threshold_secs` lines, sorted by type name.
    pub fn save_tsv<W: Write>(&self, mut writer: W) -> io::Result<()> {
        for (ty, threshold) in self.iter() {
            writeln!(writer, "{ty}\t{threshold}")?;
        }
        Ok(())
    }

    pub fn load_tsv<R: Read>(reader: R) -> Result<Self, VocabError> {
        let reader = BufReader::new(reader);
        let mut table = EntityTypeTable::new();
        for (line_no, line) in reader.lines().enumerate() {
            let line = line?;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (ty, threshold) = line.split_once('\t').ok_or_else(|| VocabError::Malformed {
                line: line_no + 1,
                reason: "expected type<TAB>threshold_secs".to_string(),
            })?;
            let threshold: f64 = threshold
                .trim()
                .parse()
                .map_err(|_| VocabError::Malformed {
                    line: line_no + 1,
                    reason: format!("unparseable threshold {threshold:?}"),
                })?;
            table
                .insert(EntityType::new(ty), threshold)
                .map_err(|e| VocabError::Malformed {
                    line: line_no + 1,
                    reason: e.to_string(),
                })?;
        }
        Ok(table)
    }
}

impl Default for EntityTypeTable {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn repeat_ids(spec: &[(&str, usize)]) -> Vec<String> {
        let mut ids = Vec::new();
        for &(id, count) in spec {
            for _ in 0..count {
                ids.push(id.to_string());
            }
        }
        ids
    }

    #[test]
    fn frequent_ids_get_dedicated_indices() {
        let vocab = Vocabulary::build(repeat_ids(&[("User_3", 12), ("User_9", 4)]), 5, USER_UNK);
        assert_ne!(vocab.lookup("User_3"), vocab.unk_index());
        assert_eq!(vocab.lookup("User_9"), vocab.unk_index());
        assert_eq!(vocab.len(), 2);
    }

    #[test]
    fn min_count_one_excludes_nothing() {
        let vocab = Vocabulary::build(repeat_ids(&[("a", 1), ("b", 2), ("c", 1)]), 1, USER_UNK);
        for id in ["a", "b", "c"] {
            assert_ne!(vocab.lookup(id), vocab.unk_index(), "{id} folded to UNK");
        }
    }

    #[test]
    fn empty_stream_yields_unk_only() {
        let vocab = Vocabulary::build(Vec::<String>::new(), 5, ENTITY_UNK);
        assert_eq!(vocab.len(), 1);
        assert_eq!(vocab.lookup("anything"), vocab.unk_index());
        assert_eq!(vocab.id(vocab.unk_index()), Some(ENTITY_UNK));
    }

    #[test]
    fn unseen_and_unk_literal_resolve_to_unk() {
        let vocab = Vocabulary::build(repeat_ids(&[("x", 6)]), 5, USER_UNK);
        assert_eq!(vocab.lookup("never-seen"), vocab.unk_index());
        assert_eq!(vocab.lookup(USER_UNK), vocab.unk_index());
    }

    #[test]
    fn unk_literal_in_corpus_never_gets_own_index() {
        let vocab = Vocabulary::build(repeat_ids(&[(USER_UNK, 100), ("y", 7)]), 5, USER_UNK);
        assert_eq!(vocab.len(), 2);
        assert_eq!(vocab.lookup(USER_UNK), vocab.unk_index());
    }

    #[test]
    fn indices_are_contiguous_and_round_trip() {
        let vocab = Vocabulary::build(
            repeat_ids(&[("a", 5), ("b", 5), ("c", 2), ("d", 9)]),
            3,
            USER_UNK,
        );
        for index in 0..vocab.len() {
            let id = vocab.id(index).expect("contiguous");
            assert_eq!(vocab.lookup(id), index);
        }
        assert_eq!(vocab.id(vocab.len()), None);
    }

    #[test]
    fn first_occurrence_order_is_deterministic() {
        let ids = repeat_ids(&[("b", 5), ("a", 5), ("c", 5)]);
        let vocab = Vocabulary::build(ids, 1, USER_UNK);
        assert_eq!(vocab.lookup("b"), 1);
        assert_eq!(vocab.lookup("a"), 2);
        assert_eq!(vocab.lookup("c"), 3);
    }

    #[test]
    fn unk_fraction_counts_resolutions() {
        let vocab = Vocabulary::build(repeat_ids(&[("a", 6), ("b", 2)]), 5, USER_UNK);
        // 6 hits on "a", 2 UNK resolutions for "b", 2 for something unseen
        let stream = repeat_ids(&[("a", 6), ("b", 2), ("zzz", 2)]);
        let fraction = vocab.unk_fraction(&stream);
        assert!((fraction - 0.4).abs() < 1e-12);
        assert_eq!(vocab.unk_fraction(Vec::<String>::new()), 0.0);
    }

    #[test]
    fn tsv_round_trip_is_exact() {
        let vocab = Vocabulary::build(repeat_ids(&[("a", 5), ("b", 7), ("c", 1)]), 2, USER_UNK);
        let mut bytes = Vec::new();
        vocab.save_tsv(&mut bytes).unwrap();
        let loaded = Vocabulary::load_tsv(bytes.as_slice(), USER_UNK, vocab.min_count()).unwrap();
        assert_eq!(loaded, vocab);
        let mut again = Vec::new();
        loaded.save_tsv(&mut again).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn tsv_load_rejects_gaps_and_duplicates() {
        let gap = format!("{USER_UNK}\t0\na\t2\n");
        assert!(matches!(
            Vocabulary::load_tsv(gap.as_bytes(), USER_UNK, 1),
            Err(VocabError::NonContiguous { .. })
        ));
        let dup = format!("{USER_UNK}\t0\na\t1\na\t2\n");
        assert!(Vocabulary::load_tsv(dup.as_bytes(), USER_UNK, 1).is_err());
        let no_unk = "a\t0\nb\t1\n";
        assert!(matches!(
            Vocabulary::load_tsv(no_unk.as_bytes(), USER_UNK, 1),
            Err(VocabError::MissingUnk(_))
        ));
    }

    #[test]
    fn type_table_rejects_non_positive_thresholds() {
        let mut table = EntityTypeTable::new();
        assert!(table.insert(EntityType::song(), 0.0).is_err());
        assert!(table.insert(EntityType::song(), -1.0).is_err());
        assert!(table.insert(EntityType::song(), f64::NAN).is_err());
        assert!(table.insert(EntityType::song(), 30.0).is_ok());
    }

    #[test]
    fn type_table_defaults_match_music_domain() {
        let table = EntityTypeTable::music_defaults();
        assert_eq!(table.threshold(&EntityType::song()), Some(30.0));
        assert_eq!(table.threshold(&EntityType::album()), Some(180.0));
        assert_eq!(table.threshold(&EntityType::station()), Some(180.0));
        assert!(matches!(
            table.require(&EntityType::new("podcast")),
            Err(ConfigError::MissingType(_))
        ));
    }

    #[test]
    fn type_table_tsv_round_trip() {
        let table = EntityTypeTable::music_defaults();
        let mut bytes = Vec::new();
        table.save_tsv(&mut bytes).unwrap();
        let loaded = EntityTypeTable::load_tsv(bytes.as_slice()).unwrap();
        assert_eq!(loaded, table);
    }
}
