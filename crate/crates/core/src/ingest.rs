//! Playback-log parsing and causal train/dev/test splitting.
//!
//! Logs are UTF-8 TSV files with the header
//! `user_id<TAB>entity_type<TAB>entity_id<TAB>duration_sec<TAB>day`.
//! Timestamps are day ordinals; splits happen at day granularity only.

use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

/// Expected log header, in column order.
pub const LOG_HEADER: [&str; 5] = ["user_id", "entity_type", "entity_id", "duration_sec", "day"];

/// Canonical entity-type name: lowercased, with any `Name` suffix stripped,
/// so slot-type spellings like `SongName` and `song` compare equal.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityType(String);

impl EntityType {
    pub fn new(raw: &str) -> Self {
        let lower = raw.trim().to_ascii_lowercase();
        let canon = match lower.strip_suffix("name") {
            Some(stem) if !stem.is_empty() => stem,
            _ => &lower,
        };
        EntityType(canon.to_string())
    }

    pub fn song() -> Self {
        EntityType("song".to_string())
    }

    pub fn album() -> Self {
        EntityType("album".to_string())
    }

    pub fn station() -> Self {
        EntityType("station".to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One playback record.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub user: String,
    pub entity: String,
    pub entity_type: EntityType,
    /// Play duration t >= 0, in seconds.
    pub duration_secs: f64,
    /// Day ordinal.
    pub day: u32,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("log I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("log read failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad header: expected {LOG_HEADER:?}, got {got:?}")]
    Header { got: Vec<String> },
    #[error("line {line}: {reason}")]
    Malformed { line: u64, reason: String },
    #[error("dev day {dev_day} must precede test day {test_day}")]
    SplitOrder { dev_day: u32, test_day: u32 },
    #[error("empty training split: no observations before day {dev_day}")]
    EmptyTrain { dev_day: u32 },
}

/// Parsed log plus the count of rejected lines (lenient mode only).
#[derive(Clone, Debug, Default)]
pub struct ParsedLog {
    pub observations: Vec<Observation>,
    pub rejected: u64,
}

fn parse_record(record: &csv::StringRecord) -> Result<Observation, String> {
    if record.len() != LOG_HEADER.len() {
        return Err(format!(
            "expected {} fields, got {}",
            LOG_HEADER.len(),
            record.len()
        ));
    }
    let user = record[0].trim();
    let entity = record[2].trim();
    if user.is_empty() {
        return Err("empty user_id".to_string());
    }
    if entity.is_empty() {
        return Err("empty entity_id".to_string());
    }
    let duration_secs: f64 = record[3]
        .trim()
        .parse()
        .map_err(|_| format!("unparseable duration_sec {:?}", &record[3]))?;
    if !duration_secs.is_finite() || duration_secs < 0.0 {
        return Err(format!(
            "duration_sec must be a finite non-negative number, got {}",
            duration_secs
        ));
    }
    let day: u32 = record[4]
        .trim()
        .parse()
        .map_err(|_| format!("unparseable day {:?}", &record[4]))?;
    Ok(Observation {
        user: user.to_string(),
        entity: entity.to_string(),
        entity_type: EntityType::new(&record[1]),
        duration_secs,
        day,
    })
}

/// Parses a TSV playback log. In lenient mode (`strict = false`) malformed
/// lines are counted and skipped; in strict mode the first malformed line
/// aborts with its line number.
pub fn parse_log<R: Read>(reader: R, strict: bool) -> Result<ParsedLog, IngestError> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);

    let header = csv_reader.headers()?.clone();
    if header.iter().map(str::trim).ne(LOG_HEADER.iter().copied()) {
        return Err(IngestError::Header {
            got: header.iter().map(String::from).collect(),
        });
    }

    let mut out = ParsedLog::default();
    let mut record = csv::StringRecord::new();
    loop {
        let line = csv_reader.position().line();
        match csv_reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => match parse_record(&record) {
                Ok(obs) => out.observations.push(obs),
                Err(reason) if strict => return Err(IngestError::Malformed { line, reason }),
                Err(_) => out.rejected += 1,
            },
            Err(err) => {
                if strict {
                    return Err(IngestError::Malformed {
                        line,
                        reason: err.to_string(),
                    });
                }
                out.rejected += 1;
                if err.is_io_error() {
                    return Err(IngestError::Csv(err));
                }
            }
        }
    }
    Ok(out)
}

pub fn read_log<P: AsRef<Path>>(path: P, strict: bool) -> Result<ParsedLog, IngestError> {
    parse_log(File::open(path)?, strict)
}

/// Writes observations in the log format `parse_log` accepts. Durations use
/// the shortest round-tripping decimal form, so write/parse is lossless.
pub fn write_log<W: Write>(writer: W, observations: &[Observation]) -> Result<(), IngestError> {
    let mut csv_writer = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_writer(writer);
    csv_writer.write_record(LOG_HEADER)?;
    for obs in observations {
        csv_writer.write_record([
            obs.user.as_str(),
            obs.entity_type.as_str(),
            obs.entity.as_str(),
            &obs.duration_secs.to_string(),
            &obs.day.to_string(),
        ])?;
    }
    csv_writer.flush()?;
    Ok(())
}

pub fn write_log_file<P: AsRef<Path>>(
    path: P,
    observations: &[Observation],
) -> Result<(), IngestError> {
    write_log(File::create(path)?, observations)
}

/// Day ordinals reserved for development and testing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub dev_day: u32,
    pub test_day: u32,
}

/// Causal split of a log. Days between `dev_day` and `test_day` and days
/// after `test_day` are discarded.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<Observation>,
    pub dev: Vec<Observation>,
    pub test: Vec<Observation>,
    pub discarded: usize,
}

pub fn causal_split(observations: Vec<Observation>, spec: SplitSpec) -> Result<Split, IngestError> {
    if spec.dev_day >= spec.test_day {
        return Err(IngestError::SplitOrder {
            dev_day: spec.dev_day,
            test_day: spec.test_day,
        });
    }
    let mut split = Split {
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
        discarded: 0,
    };
    for obs in observations {
        if obs.day < spec.dev_day {
            split.train.push(obs);
        } else if obs.day == spec.dev_day {
            split.dev.push(obs);
        } else if obs.day == spec.test_day {
            split.test.push(obs);
        } else {
            split.discarded += 1;
        }
    }
    if split.train.is_empty() {
        return Err(IngestError::EmptyTrain {
            dev_day: spec.dev_day,
        });
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HEADER_LINE: &str = "user_id\tentity_type\tentity_id\tduration_sec\tday";

    fn obs(user: &str, ty: &str, entity: &str, duration: f64, day: u32) -> Observation {
        Observation {
            user: user.to_string(),
            entity: entity.to_string(),
            entity_type: EntityType::new(ty),
            duration_secs: duration,
            day,
        }
    }

    #[test]
    fn entity_type_canonicalizes_slot_names() {
        assert_eq!(EntityType::new("SongName"), EntityType::song());
        assert_eq!(EntityType::new("StationName"), EntityType::station());
        assert_eq!(EntityType::new("AlbumName"), EntityType::album());
        assert_eq!(EntityType::new("song"), EntityType::song());
        assert_eq!(EntityType::new("Podcast"), EntityType::new("podcast"));
        // the bare word "name" stays itself rather than collapsing to ""
        assert_eq!(EntityType::new("Name").as_str(), "name");
    }

    #[test]
    fn parses_well_formed_rows() {
        let input = format!(
            "{HEADER_LINE}\nUser_3\tSongName\tEntity_5\t10.0\t41\nUser_4\tStationName\tEntity_7\t900.0\t41\n"
        );
        let log = parse_log(input.as_bytes(), true).unwrap();
        assert_eq!(log.rejected, 0);
        assert_eq!(
            log.observations,
            vec![
                obs("User_3", "song", "Entity_5", 10.0, 41),
                obs("User_4", "station", "Entity_7", 900.0, 41),
            ]
        );
    }

    #[test]
    fn rejects_negative_duration() {
        let input = format!("{HEADER_LINE}\nUser_1\tsong\tEntity_1\t-3.0\t2\n");
        let log = parse_log(input.as_bytes(), false).unwrap();
        assert!(log.observations.is_empty());
        assert_eq!(log.rejected, 1);
    }

    #[test]
    fn strict_mode_reports_line_number() {
        let input = format!("{HEADER_LINE}\nUser_1\tsong\tEntity_1\t5.0\t2\nUser_2\tsong\n");
        let err = parse_log(input.as_bytes(), true).unwrap_err();
        match err {
            IngestError::Malformed { line, .. } => assert_eq!(line, 3),
            other => panic!("expected Malformed, got {other:?}"),
        }
    }

    #[test]
    fn lenient_mode_counts_and_continues() {
        let input = format!(
            "{HEADER_LINE}\nbad line\nUser_1\tsong\tEntity_1\tnan\t2\nUser_2\tsong\tEntity_2\t7.5\t3\n"
        );
        let log = parse_log(input.as_bytes(), false).unwrap();
        assert_eq!(log.rejected, 2);
        assert_eq!(
            log.observations,
            vec![obs("User_2", "song", "Entity_2", 7.5, 3)]
        );
    }

    #[test]
    fn bad_header_is_an_error() {
        let input = "user\ttype\tentity\tduration\tday\nUser_1\tsong\tEntity_1\t5.0\t2\n";
        assert!(matches!(
            parse_log(input.as_bytes(), false),
            Err(IngestError::Header { .. })
        ));
    }

    #[test]
    fn split_sizes_match_per_day_tally() {
        // 10-day log with i observations on day i.
        let mut observations = Vec::new();
        for day in 1..=10u32 {
            for i in 0..day {
                observations.push(obs(&format!("U{i}"), "song", &format!("E{i}"), 30.0, day));
            }
        }
        // independent one-pass tally
        let mut per_day = [0usize; 11];
        for o in &observations {
            per_day[o.day as usize] += 1;
        }
        let split = causal_split(
            observations,
            SplitSpec {
                dev_day: 9,
                test_day: 10,
            },
        )
        .unwrap();
        let expected_train: usize = per_day[1..9].iter().sum();
        assert_eq!(split.train.len(), expected_train);
        assert_eq!(split.dev.len(), per_day[9]);
        assert_eq!(split.test.len(), per_day[10]);
        assert_eq!(split.discarded, 0);
    }

    #[test]
    fn all_observations_on_test_day_is_empty_train() {
        let observations = vec![obs("U", "song", "E", 1.0, 5); 3];
        let err = causal_split(
            observations,
            SplitSpec {
                dev_day: 4,
                test_day: 5,
            },
        )
        .unwrap_err();
        assert!(matches!(err, IngestError::EmptyTrain { dev_day: 4 }));
    }

    #[test]
    fn dev_day_must_precede_test_day() {
        let observations = vec![obs("U", "song", "E", 1.0, 1)];
        assert!(matches!(
            causal_split(
                observations,
                SplitSpec {
                    dev_day: 5,
                    test_day: 5
                }
            ),
            Err(IngestError::SplitOrder { .. })
        ));
    }

    proptest! {
        #[test]
        fn split_partitions_input(days in proptest::collection::vec(1u32..12, 1..200)) {
            let observations: Vec<Observation> = days
                .iter()
                .enumerate()
                .map(|(i, &day)| obs(&format!("U{i}"), "song", &format!("E{i}"), 1.0, day))
                .collect();
            let spec = SplitSpec { dev_day: 9, test_day: 10 };
            match causal_split(observations.clone(), spec) {
                Ok(split) => {
                    prop_assert_eq!(
                        split.train.len() + split.dev.len() + split.test.len() + split.discarded,
                        observations.len()
                    );
                    // causality
                    let max_train = split.train.iter().map(|o| o.day).max().unwrap();
                    prop_assert!(max_train < spec.dev_day);
                    prop_assert!(split.dev.iter().all(|o| o.day == spec.dev_day));
                    prop_assert!(split.test.iter().all(|o| o.day == spec.test_day));
                }
                Err(IngestError::EmptyTrain { .. }) => {
                    prop_assert!(observations.iter().all(|o| o.day >= spec.dev_day));
                }
                Err(other) => return Err(TestCaseError::fail(format!("unexpected error {other:?}"))),
            }
        }

        #[test]
        fn write_then_parse_is_lossless(
            rows in proptest::collection::vec(
                (0usize..50, 0usize..50, 0f64..4000.0, 1u32..30),
                0..40,
            )
        ) {
            let observations: Vec<Observation> = rows
                .iter()
                .map(|&(u, e, d, day)| obs(&format!("User_{u}"), "song", &format!("Entity_{e}"), d, day))
                .collect();
            let mut buf = Vec::new();
            write_log(&mut buf, &observations).unwrap();
            let parsed = parse_log(buf.as_slice(), true).unwrap();
            prop_assert_eq!(parsed.rejected, 0);
            prop_assert_eq!(parsed.observations, observations);
        }
    }
}
