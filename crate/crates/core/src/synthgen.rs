//! Synthetic longitudinal cohorts.
//!
//! Each speaker gets a random embedding offset, a demographic profile and a
//! per-speaker fatigue response strength. Every observation draws hours since
//! sleep from a bimodal distribution and embeds them as
//! `offset + beta_i * (hours - 8) / 6 * u + noise`, where `u` is a fixed unit
//! direction spanning the first `fatigue_direction_count` coordinates.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{
    AgeGroup, DataError, Dataset, DemographicField, Demographics, Embedding, Language, Observation, Sex,
    SpeakerSequence, Target, HOURS_RANGE,
};

/// Centre and spread used to standardise hours in the embedding model.
pub const HOURS_CENTER: f64 = 8.0;
pub const HOURS_SCALE: f64 = 6.0;

/// Two-component mixture of split normals (separate left/right spreads around
/// each mode), truncated to `[0, 24]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TssDistribution {
    pub low_mode: f64,
    pub low_left: f64,
    pub low_right: f64,
    pub high_mode: f64,
    pub high_left: f64,
    pub high_right: f64,
    /// Probability of the high (post-shift) component.
    pub high_weight: f64,
}

impl Default for TssDistribution {
    fn default() -> Self {
        // Fitted so that mean ~ 8 h, std ~ 6 h and 45.4% of draws are >= 10 h.
        TssDistribution {
            low_mode: 1.0,
            low_left: 1.0,
            low_right: 2.6,
            high_mode: 15.0,
            high_left: 2.9,
            high_right: 1.5,
            high_weight: 0.48,
        }
    }
}

impl TssDistribution {
    pub fn validate(&self) -> Result<(), DataError> {
        let range = HOURS_RANGE.0..=HOURS_RANGE.1;
        if !range.contains(&self.low_mode) || !range.contains(&self.high_mode) {
            return Err(DataError::Invalid("tss modes must lie in [0, 24]".into()));
        }
        let spreads = [self.low_left, self.low_right, self.high_left, self.high_right];
        if spreads.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(DataError::Invalid("tss spreads must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.high_weight) {
            return Err(DataError::Invalid("tss high_weight must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One draw of hours since sleep; always within `[0, 24]`.
pub fn sample_tss<R: Rng + ?Sized>(dist: &TssDistribution, rng: &mut R) -> f64 {
    let high = rng.gen::<f64>() < dist.high_weight;
    let (mode, left, right) = if high {
        (dist.high_mode, dist.high_left, dist.high_right)
    } else {
        (dist.low_mode, dist.low_left, dist.low_right)
    };
    if left + right == 0.0 {
        return mode;
    }
    // Rejection keeps the truncated shape; the mode is inside the range so
    // acceptance probability is at least one half.
    loop {
        let z: f64 = rng.sample::<f64, _>(StandardNormal).abs();
        let v = if rng.gen::<f64>() < right / (left + right) { mode + z * right } else { mode - z * left };
        if (HOURS_RANGE.0..=HOURS_RANGE.1).contains(&v) {
            return v;
        }
    }
}

/// Categorical proportions for each demographic field, in enum order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemographicProportions {
    /// Female, Male, Other.
    pub sex: Vec<f64>,
    /// Under40, Over40.
    pub age_group: Vec<f64>,
    /// GB, US, es, eng-other.
    pub language: Vec<f64>,
}

impl Default for DemographicProportions {
    fn default() -> Self {
        DemographicProportions {
            sex: vec![0.551, 0.446, 0.003],
            age_group: vec![0.789, 0.211],
            language: vec![0.592, 0.226, 0.143, 0.039],
        }
    }
}

/// Multiplies the fatigue response of one demographic group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attenuation {
    pub field: DemographicField,
    pub group: String,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortSpec {
    pub n_speakers: usize,
    pub avg_samples: f64,
    pub max_samples: usize,
    /// Gamma shape of the per-speaker sample-count rate; smaller is more dispersed.
    pub count_dispersion: f64,
    pub embedding_dim: usize,
    pub speaker_offset_scale: f64,
    pub fatigue_direction_count: usize,
    pub fatigue_signal_scale: f64,
    pub noise_scale: f64,
    /// Log-space std of the mean-one lognormal per-speaker response multiplier.
    pub response_heterogeneity: f64,
    /// Fraction of speakers whose fatigue response points the other way.
    pub flip_fraction: f64,
    pub attenuation: Option<Attenuation>,
    pub demographics: DemographicProportions,
    pub tss: TssDistribution,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            n_speakers: 1185,
            avg_samples: 8.7,
            max_samples: 28,
            count_dispersion: 3.0,
            embedding_dim: 32,
            speaker_offset_scale: 2.5,
            fatigue_direction_count: 4,
            fatigue_signal_scale: 1.2,
            noise_scale: 1.5,
            response_heterogeneity: 0.5,
            flip_fraction: 0.0,
            attenuation: None,
            demographics: DemographicProportions::default(),
            tss: TssDistribution::default(),
            seed: 20_241_185,
        }
    }
}

fn check_props(name: &str, p: &[f64], n: usize) -> Result<(), DataError> {
    if p.len() != n || p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::Invalid(format!("{name} proportions must be {n} non-negative values summing to 1")));
    }
    Ok(())
}

fn draw<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

impl CohortSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Invalid(m.to_string()));
        if self.n_speakers == 0 {
            return bad("n_speakers must be >= 1");
        }
        if !(self.avg_samples >= 1.0) || self.max_samples == 0 || (self.max_samples as f64) < self.avg_samples {
            return bad("need 1 <= avg_samples <= max_samples");
        }
        if !(self.count_dispersion > 0.0) {
            return bad("count_dispersion must be > 0");
        }
        if self.embedding_dim == 0 || self.fatigue_direction_count == 0 || self.fatigue_direction_count > self.embedding_dim {
            return bad("need 1 <= fatigue_direction_count <= embedding_dim");
        }
        let scales = [self.speaker_offset_scale, self.fatigue_signal_scale, self.noise_scale, self.response_heterogeneity];
        if scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("scales must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.flip_fraction) {
            return bad("flip_fraction must be in [0, 1]");
        }
        if let Some(a) = &self.attenuation {
            if !(a.factor.is_finite() && a.factor >= 0.0) {
                return bad("attenuation factor must be >= 0");
            }
        }
        check_props("sex", &self.demographics.sex, Sex::ALL.len())?;
        check_props("age_group", &self.demographics.age_group, AgeGroup::ALL.len())?;
        check_props("language", &self.demographics.language, Language::ALL.len())?;
        self.tss.validate()
    }

    /// Unit fatigue direction.
    pub fn fatigue_direction(&self) -> Vec<f64> {
        let k = self.fatigue_direction_count;
        let mut u = vec![0.0; self.embedding_dim];
        u[..k].iter_mut().for_each(|v| *v = 1.0 / (k as f64).sqrt());
        u
    }
}

/// `offset + beta * (hours - 8) / 6 * u + noise_scale * eps`.
pub fn embed_observation<R: Rng + ?Sized>(
    speaker_offset: &Embedding,
    hours: f64,
    beta: f64,
    spec: &CohortSpec,
    rng: &mut R,
) -> Embedding {
    let u = spec.fatigue_direction();
    let shift = beta * (hours - HOURS_CENTER) / HOURS_SCALE;
    let values = speaker_offset
        .as_slice()
        .iter()
        .zip(&u)
        .map(|(o, ui)| {
            let eps: f64 = rng.sample(StandardNormal);
            o + shift * ui + spec.noise_scale * eps
        })
        .collect();
    Embedding::new(values).expect("finite inputs give finite embeddings")
}

fn sample_count<R: Rng + ?Sized>(spec: &CohortSpec, rng: &mut R) -> usize {
    let extra = spec.avg_samples - 1.0;
    if extra <= 0.0 {
        return 1;
    }
    let rate = Gamma::new(spec.count_dispersion, extra / spec.count_dispersion)
        .expect("validated gamma parameters")
        .sample(rng);
    let n = if rate > 0.0 { Poisson::new(rate).expect("positive rate").sample(rng) as usize } else { 0 };
    (1 + n).min(spec.max_samples)
}

/// Generates a cohort; deterministic in `spec` (including its seed).
pub fn generate_cohort(spec: &CohortSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lognormal_shift = -spec.response_heterogeneity.powi(2) / 2.0;
    let mut speakers = Vec::with_capacity(spec.n_speakers);
    for i in 0..spec.n_speakers {
        let id = format!("spk{i:04}");
        let demographics = Demographics {
            sex: Sex::ALL[draw(&spec.demographics.sex, &mut rng)],
            age_group: AgeGroup::ALL[draw(&spec.demographics.age_group, &mut rng)],
            language: Language::ALL[draw(&spec.demographics.language, &mut rng)],
        };
        let n_obs = sample_count(spec, &mut rng);
        let offset: Vec<f64> =
            (0..spec.embedding_dim).map(|_| spec.speaker_offset_scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let offset = Embedding::new(offset)?;
        let z: f64 = rng.sample(StandardNormal);
        let mut beta = spec.fatigue_signal_scale * (lognormal_shift + spec.response_heterogeneity * z).exp();
        if rng.gen::<f64>() < spec.flip_fraction {
            beta = -beta;
        }
        if let Some(a) = &spec.attenuation {
            if a.field.group_of(&demographics) == a.group {
                beta *= a.factor;
            }
        }
        let observations = (0..n_obs)
            .map(|j| {
                let hours = sample_tss(&spec.tss, &mut rng);
                let embedding = embed_observation(&offset, hours, beta, spec, &mut rng);
                Ok(Observation { speaker_id: id.clone(), seq_index: j, embedding, target: Target::new(hours)?, demographics })
            })
            .collect::<Result<Vec<_>, DataError>>()?;
        speakers.push(SpeakerSequence::new(id, observations)?);
    }
    Dataset::new(speakers)
}
