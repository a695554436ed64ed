//! Distance ensemble: a pooled ridge on within-speaker embedding differences,
//! averaged over the support set at prediction time.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SpeakerSequence, SupportSet};
use crate::error::ModelError;
use crate::linmodels::{clamp_hours, ridge_fit_origin, RidgeModel};
use crate::numkernel::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistConfig {
    pub alpha: f64,
    /// Maximum ordered pairs kept per speaker; `None` keeps all.
    pub pair_cap: Option<usize>,
    pub seed: u64,
}

impl Default for DistConfig {
    fn default() -> Self {
        DistConfig { alpha: 1000.0, pair_cap: Some(200), seed: 7 }
    }
}

/// Difference features `x_t - x_j` and targets `y_t - y_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pairs {
    pub x: Tensor,
    pub dy: Vec<f64>,
    /// Ordered `(t, j)` indices within each speaker, grouped by speaker.
    pub index: Vec<(usize, usize, usize)>,
}

impl Pairs {
    pub fn len(&self) -> usize {
        self.dy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dy.is_empty()
    }
}

/// All ordered within-speaker pairs, subsampled uniformly to `cap` per speaker.
pub fn build_pairs(speakers: &[&SpeakerSequence], cap: Option<usize>, rng: &mut ChaCha8Rng) -> Pairs {
    let dim = speakers.iter().find_map(|s| s.observations().first()).map_or(0, |o| o.embedding.dim());
    let mut data = Vec::new();
    let mut dy = Vec::new();
    let mut idx = Vec::new();
    for (s, seq) in speakers.iter().enumerate() {
        let obs = seq.observations();
        let n = obs.len();
        let all: Vec<(usize, usize)> =
            (0..n).flat_map(|t| (0..n).filter(move |&j| j != t).map(move |j| (t, j))).collect();
        let kept: Vec<(usize, usize)> = match cap {
            Some(c) if all.len() > c => {
                let mut pick = index::sample(rng, all.len(), c).into_vec();
                pick.sort_unstable();
                pick.into_iter().map(|i| all[i]).collect()
            }
            _ => all,
        };
        for (t, j) in kept {
            let (xt, xj) = (obs[t].embedding.as_slice(), obs[j].embedding.as_slice());
            data.extend(xt.iter().zip(xj).map(|(a, b)| a - b));
            dy.push(obs[t].target.hours() - obs[j].target.hours());
            idx.push((s, t, j));
        }
    }
    let x = Tensor::new(dy.len(), dim, data).expect("pair rows share the embedding dimension");
    Pairs { x, dy, index: idx }
}

/// No-intercept ridge on difference pairs.
pub fn fit_distance(pairs: &Pairs, alpha: f64) -> Result<RidgeModel, ModelError> {
    ridge_fit_origin(&pairs.x, &pairs.dy, alpha)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceModel {
    pub f_d: RidgeModel,
    /// Cross-sectional hours model used for an empty support set.
    pub fallback: RidgeModel,
    pub config: DistConfig,
}

impl DistanceModel {
    pub fn fit(train: &[&SpeakerSequence], fallback: RidgeModel, config: DistConfig) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let pairs = build_pairs(train, config.pair_cap, &mut rng);
        if pairs.is_empty() {
            return Err(ModelError::EmptyFit);
        }
        if pairs.x.cols() != fallback.dim() {
            return Err(ModelError::Dimension { expected: fallback.dim(), found: pairs.x.cols() });
        }
        let f_d = fit_distance(&pairs, config.alpha)?;
        Ok(DistanceModel { f_d, fallback, config })
    }

    /// Predicted hours in `[0, 24]`: the fallback at `t = 0`, otherwise the mean
    /// of `y_j + f_d(x_t - x_j)` over the support.
    pub fn predict(&self, support: &SupportSet<'_>, x: &[f64]) -> f64 {
        if support.is_empty() {
            return clamp_hours(self.fallback.predict_one(x));
        }
        let mut diff = vec![0.0; x.len()];
        let mut total = 0.0;
        for o in support.iter() {
            for ((d, a), b) in diff.iter_mut().zip(x).zip(o.embedding.as_slice()) {
                *d = a - b;
            }
            total += o.target.hours() + self.f_d.predict_one(&diff);
        }
        clamp_hours(total / support.len() as f64)
    }
}
