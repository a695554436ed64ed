//! JSONL observation files: one JSON object per line.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    AgeGroup, DataError, Dataset, Demographics, Embedding, Language, Observation, Sex,
    SpeakerSequence, Target, HOURS_RANGE,
};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    speaker_id: String,
    seq_index: usize,
    embedding: Vec<f64>,
    hours: f64,
    sex: Sex,
    age_group: AgeGroup,
    language: Language,
}

/// Counts from a load: kept observations and records dropped by the range rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub kept: usize,
    pub dropped_out_of_range: usize,
}

pub fn load_dataset(path: &Path) -> Result<(Dataset, LoadReport), DataError> {
    let file = File::open(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    read_dataset(BufReader::new(file))
}

/// Parses JSONL records. Records with hours outside `[0, 24]` are dropped and
/// counted; sequences are sorted by `seq_index` and renumbered from 0.
pub fn read_dataset<R: BufRead>(reader: R) -> Result<(Dataset, LoadReport), DataError> {
    let mut order: Vec<String> = Vec::new();
    let mut by_speaker: HashMap<String, Vec<Observation>> = HashMap::new();
    let mut seen: HashSet<(String, usize)> = HashSet::new();
    let mut dim: Option<usize> = None;
    let mut report = LoadReport::default();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| DataError::Parse { line: lineno, msg: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| DataError::Parse { line: lineno, msg: e.to_string() })?;
        let expected = *dim.get_or_insert(rec.embedding.len());
        if rec.embedding.len() != expected {
            return Err(DataError::Dimension { line: lineno, expected, found: rec.embedding.len() });
        }
        if expected == 0 {
            return Err(DataError::Parse { line: lineno, msg: "empty embedding".into() });
        }
        if !seen.insert((rec.speaker_id.clone(), rec.seq_index)) {
            return Err(DataError::Parse {
                line: lineno,
                msg: format!("duplicate seq_index {} for speaker '{}'", rec.seq_index, rec.speaker_id),
            });
        }
        if !rec.hours.is_finite() || !(HOURS_RANGE.0..=HOURS_RANGE.1).contains(&rec.hours) {
            report.dropped_out_of_range += 1;
            continue;
        }
        let embedding = Embedding::new(rec.embedding).map_err(|e| DataError::Parse { line: lineno, msg: e.to_string() })?;
        let demographics = Demographics { sex: rec.sex, age_group: rec.age_group, language: rec.language };
        let obs = Observation {
            speaker_id: rec.speaker_id.clone(),
            seq_index: rec.seq_index,
            embedding,
            target: Target::new(rec.hours)?,
            demographics,
        };
        let list = by_speaker.entry(rec.speaker_id.clone()).or_insert_with(|| {
            order.push(rec.speaker_id.clone());
            Vec::new()
        });
        if let Some(first) = list.first() {
            if first.demographics != demographics {
                return Err(DataError::Parse {
                    line: lineno,
                    msg: format!("demographics of speaker '{}' change between records", rec.speaker_id),
                });
            }
        }
        list.push(obs);
        report.kept += 1;
    }
    if report.kept == 0 {
        return Err(DataError::Empty);
    }
    let speakers = order
        .into_iter()
        .map(|id| {
            let obs = by_speaker.remove(&id).unwrap_or_default();
            SpeakerSequence::new(id, obs)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((Dataset::new(speakers)?, report))
}

/// Writes one record per observation, speakers in dataset order. Reals use
/// the shortest representation that parses back to the same `f64`.
pub fn write_dataset<W: Write>(dataset: &Dataset, writer: W) -> Result<(), DataError> {
    let mut w = BufWriter::new(writer);
    let io_err = |source| DataError::Io { path: "<output>".into(), source };
    for s in dataset.speakers() {
        for o in s.observations() {
            let rec = Record {
                speaker_id: o.speaker_id.clone(),
                seq_index: o.seq_index,
                embedding: o.embedding.as_slice().to_vec(),
                hours: o.target.hours(),
                sex: o.demographics.sex,
                age_group: o.demographics.age_group,
                language: o.demographics.language,
            };
            serde_json::to_writer(&mut w, &rec).map_err(|e| io_err(e.into()))?;
            w.write_all(b"\n").map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, j: usize, emb: &[f64], hours: f64) -> String {
        format!(
            r#"{{"speaker_id":"{id}","seq_index":{j},"embedding":{},"hours":{hours},"sex":"Female","age_group":"Under40","language":"GB"}}"#,
            serde_json::to_string(emb).unwrap()
        )
    }

    #[test]
    fn out_of_range_rows_are_dropped_and_counted() {
        let text = [
            line("a", 0, &[1.0, 2.0], 3.0),
            line("a", 1, &[1.5, 2.0], 30.0),
            line("a", 2, &[1.0, 2.5], 12.0),
            line("b", 0, &[0.0, 0.0], 0.0),
        ]
        .join("\n");
        let (ds, rep) = read_dataset(text.as_bytes()).unwrap();
        assert_eq!(rep, LoadReport { kept: 3, dropped_out_of_range: 1 });
        assert_eq!(ds.n_observations(), 3);
        let a = &ds.speakers()[0];
        assert_eq!(a.observations().iter().map(|o| o.seq_index).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(a.observations()[1].target.hours(), 12.0);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(read_dataset("".as_bytes()), Err(DataError::Empty)));
        assert!(matches!(read_dataset("\n\n".as_bytes()), Err(DataError::Empty)));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = format!("{}\n{{not json}}\n", line("a", 0, &[1.0], 1.0));
        match read_dataset(text.as_bytes()) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let text = [line("a", 0, &[1.0, 2.0], 1.0), line("a", 1, &[1.0], 1.0)].join("\n");
        assert!(matches!(
            read_dataset(text.as_bytes()),
            Err(DataError::Dimension { line: 2, expected: 2, found: 1 })
        ));
    }

    #[test]
    fn duplicate_rows_are_rejected() {
        let text = [line("a", 0, &[1.0], 1.0), line("a", 0, &[2.0], 2.0)].join("\n");
        assert!(matches!(read_dataset(text.as_bytes()), Err(DataError::Parse { line: 2, .. })));
    }

    #[test]
    fn unsorted_input_is_sorted() {
        let text = [line("a", 5, &[5.0], 5.0), line("a", 2, &[2.0], 2.0)].join("\n");
        let (ds, _) = read_dataset(text.as_bytes()).unwrap();
        let hours: Vec<f64> = ds.speakers()[0].observations().iter().map(|o| o.target.hours()).collect();
        assert_eq!(hours, vec![2.0, 5.0]);
    }

    #[test]
    fn round_trip_is_exact() {
        let text = [
            line("x", 0, &[0.1, -1.0 / 3.0, 1e-300], 7.25),
            line("y", 0, &[std::f64::consts::PI, 2.0, 0.0], 23.999999),
        ]
        .join("\n");
        let (ds, _) = read_dataset(text.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let (back, _) = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(ds, back);
    }
}
