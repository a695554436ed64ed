//! Observations, speaker sequences, support sets and the dataset container.

mod io;
mod plan;

pub use io::{load_dataset, read_dataset, write_dataset, LoadReport};
pub use plan::{support_set_at, EvalPlan, Fold, Iteration, SupportSet};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Hours since sleep at or above which an observation is labelled fatigued.
pub const FATIGUE_THRESHOLD_HOURS: f64 = 10.0;
/// Valid target range in hours (inclusive).
pub const HOURS_RANGE: (f64, f64) = (0.0, 24.0);

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: embedding has dimension {found}, expected {expected}")]
    Dimension { line: usize, expected: usize, found: usize },
    #[error("dataset is empty")]
    Empty,
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("evaluation plan: {0}")]
    Plan(String),
    #[error("support index {t} out of range for a sequence of length {len}")]
    Index { t: usize, len: usize },
}

/// Binary fatigue label: true iff `hours >= 10`.
pub fn binarize(hours: f64) -> bool {
    hours >= FATIGUE_THRESHOLD_HOURS
}

/// Prediction task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Regression => "regression",
            Task::Classification => "classification",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "regression" | "reg" => Ok(Task::Regression),
            "classification" | "cls" => Ok(Task::Classification),
            other => Err(DataError::Invalid(format!("unknown task '{other}'"))),
        }
    }
}

/// Speech embedding of fixed, dataset-wide dimension with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, DataError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::Invalid(format!("embedding entry {i} is not finite")));
        }
        Ok(Embedding(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Hours since sleep together with the derived fatigue label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    hours: f64,
    label: bool,
}

impl Target {
    pub fn new(hours: f64) -> Result<Self, DataError> {
        if !(HOURS_RANGE.0..=HOURS_RANGE.1).contains(&hours) {
            return Err(DataError::Invalid(format!("hours {hours} outside [0, 24]")));
        }
        Ok(Target { hours, label: binarize(hours) })
    }

    pub fn hours(&self) -> f64 {
        self.hours
    }

    pub fn label(&self) -> bool {
        self.label
    }

    /// The value a model is trained against for `task`.
    pub fn value(&self, task: Task) -> f64 {
        match task {
            Task::Regression => self.hours,
            Task::Classification => f64::from(u8::from(self.label)),
        }
    }
}

macro_rules! string_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $s:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $s)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $s),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = DataError;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($s => Ok($name::$variant),)+
                    other => Err(DataError::Invalid(format!(
                        concat!("unknown ", stringify!($name), " '{}'"), other
                    ))),
                }
            }
        }
    };
}

string_enum!(Sex { Female => "Female", Male => "Male", Other => "Other" });
string_enum!(AgeGroup { Under40 => "Under40", Over40 => "Over40" });
string_enum!(Language { Gb => "GB", Us => "US", Es => "es", EngOther => "eng-other" });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Demographics {
    pub sex: Sex,
    pub age_group: AgeGroup,
    pub language: Language,
}

/// Demographic attribute used for grouping and confound audits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemographicField {
    Sex,
    AgeGroup,
    Language,
}

impl DemographicField {
    pub const ALL: [DemographicField; 3] =
        [DemographicField::Sex, DemographicField::AgeGroup, DemographicField::Language];

    pub fn as_str(self) -> &'static str {
        match self {
            DemographicField::Sex => "sex",
            DemographicField::AgeGroup => "age_group",
            DemographicField::Language => "language",
        }
    }

    /// Group name of `d` under this field.
    pub fn group_of(self, d: &Demographics) -> &'static str {
        match self {
            DemographicField::Sex => d.sex.as_str(),
            DemographicField::AgeGroup => d.age_group.as_str(),
            DemographicField::Language => d.language.as_str(),
        }
    }
}

impl FromStr for DemographicField {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sex" => Ok(DemographicField::Sex),
            "age" | "age_group" => Ok(DemographicField::AgeGroup),
            "language" => Ok(DemographicField::Language),
            other => Err(DataError::Invalid(format!("unknown demographic field '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub speaker_id: String,
    pub seq_index: usize,
    pub embedding: Embedding,
    pub target: Target,
    pub demographics: Demographics,
}

/// One speaker's observations ordered by `seq_index` (contiguous from 0).
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerSequence {
    speaker_id: String,
    observations: Vec<Observation>,
}

impl SpeakerSequence {
    /// Sorts by `seq_index` and renumbers contiguously from 0.
    pub fn new(speaker_id: impl Into<String>, mut observations: Vec<Observation>) -> Result<Self, DataError> {
        let speaker_id = speaker_id.into();
        if observations.is_empty() {
            return Err(DataError::Invalid(format!("speaker '{speaker_id}' has no observations")));
        }
        observations.sort_by_key(|o| o.seq_index);
        for (i, o) in observations.iter_mut().enumerate() {
            if o.speaker_id != speaker_id {
                return Err(DataError::Invalid(format!(
                    "observation of '{}' filed under '{}'",
                    o.speaker_id, speaker_id
                )));
            }
            o.seq_index = i;
        }
        Ok(SpeakerSequence { speaker_id, observations })
    }

    pub fn speaker_id(&self) -> &str {
        &self.speaker_id
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn demographics(&self) -> Demographics {
        self.observations[0].demographics
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    speakers: Vec<SpeakerSequence>,
    embedding_dim: usize,
}

impl Dataset {
    pub fn new(speakers: Vec<SpeakerSequence>) -> Result<Self, DataError> {
        let first = speakers.first().ok_or(DataError::Empty)?;
        let embedding_dim = first.observations[0].embedding.dim();
        let mut seen = std::collections::HashSet::new();
        for s in &speakers {
            if !seen.insert(s.speaker_id.as_str()) {
                return Err(DataError::Invalid(format!("duplicate speaker id '{}'", s.speaker_id)));
            }
            for o in &s.observations {
                if o.embedding.dim() != embedding_dim {
                    return Err(DataError::Invalid(format!(
                        "speaker '{}' has embedding dimension {}, expected {}",
                        s.speaker_id,
                        o.embedding.dim(),
                        embedding_dim
                    )));
                }
            }
        }
        Ok(Dataset { speakers, embedding_dim })
    }

    pub fn speakers(&self) -> &[SpeakerSequence] {
        &self.speakers
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn n_observations(&self) -> usize {
        self.speakers.iter().map(SpeakerSequence::len).sum()
    }

    pub fn observations(&self) -> impl Iterator<Item = &Observation> {
        self.speakers.iter().flat_map(|s| s.observations.iter())
    }

    /// Subset of speakers by index, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Vec<&SpeakerSequence> {
        idx.iter().map(|&i| &self.speakers[i]).collect()
    }

    /// Copy with every embedding replaced by the dataset-wide mean vector.
    pub fn with_mean_embeddings(&self) -> Dataset {
        let n = self.n_observations() as f64;
        let mut mean = vec![0.0; self.embedding_dim];
        for o in self.observations() {
            for (m, v) in mean.iter_mut().zip(o.embedding.as_slice()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let speakers = self
            .speakers
            .iter()
            .map(|s| {
                let observations = s
                    .observations
                    .iter()
                    .map(|o| Observation { embedding: Embedding(mean.clone()), ..o.clone() })
                    .collect();
                SpeakerSequence { speaker_id: s.speaker_id.clone(), observations }
            })
            .collect();
        Dataset { speakers, embedding_dim: self.embedding_dim }
    }
}
