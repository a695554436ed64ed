//! Prototypical network for binary fatigue classification.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Observation, SpeakerSequence, SupportSet};
use crate::error::ModelError;
use crate::metrics;
use crate::numkernel::{Adam, AdamConfig, Graph, KernelError, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtoConfig {
    pub hidden: usize,
    pub out_dim: usize,
    pub episodes: usize,
    pub batch_episodes: usize,
    pub support_min: usize,
    pub support_max: usize,
    pub max_queries: usize,
    pub adam: AdamConfig,
    /// Validation check interval in optimiser steps.
    pub eval_every: usize,
    pub patience: usize,
    pub val_episodes: usize,
    pub seed: u64,
}

impl Default for ProtoConfig {
    fn default() -> Self {
        ProtoConfig {
            hidden: 32,
            out_dim: 64,
            episodes: 5000,
            batch_episodes: 8,
            support_min: 2,
            support_max: 8,
            max_queries: 16,
            adam: AdamConfig::default(),
            eval_every: 10,
            patience: 10,
            val_episodes: 200,
            seed: 11,
        }
    }
}

/// Projection `d -> hidden -> hidden -> out` with ReLU after the first two
/// layers. Parameters are stored as `[w0, b0, w1, b1, w2, b2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionNet {
    pub dims: Vec<usize>,
    pub params: Vec<Tensor>,
}

impl ProjectionNet {
    pub fn new(input: usize, hidden: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        let dims = vec![input, hidden, hidden, out];
        let mut params = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            let gain = if i + 2 < dims.len() { 2.0 } else { 1.0 };
            let normal = Normal::new(0.0, (gain / w[0] as f64).sqrt()).expect("positive std");
            let data = (0..w[0] * w[1]).map(|_| normal.sample(rng)).collect();
            params.push(Tensor::new(w[0], w[1], data).expect("layer shape"));
            params.push(Tensor::zeros(1, w[1]));
        }
        ProjectionNet { dims, params }
    }

    pub fn from_params(params: Vec<Tensor>) -> Result<Self, ModelError> {
        if params.len() != 6 {
            return Err(ModelError::Config(format!("projection needs 6 tensors, got {}", params.len())));
        }
        let mut dims = vec![params[0].rows()];
        for l in 0..3 {
            let (w, b) = (&params[2 * l], &params[2 * l + 1]);
            if w.rows() != dims[l] || b.shape() != [1, w.cols()] {
                return Err(ModelError::Config(format!("layer {l} has inconsistent shapes")));
            }
            dims.push(w.cols());
        }
        Ok(ProjectionNet { dims, params })
    }

    pub fn param_names() -> Vec<String> {
        (0..3).flat_map(|l| [format!("w{l}"), format!("b{l}")]).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    /// Builds the projection of `x` inside `g` from parameter vars.
    pub fn project_graph(g: &mut Graph, params: &[Var], x: Var) -> Result<Var, KernelError> {
        let mut h = x;
        for l in 0..3 {
            let z = g.matmul(h, params[2 * l])?;
            h = g.add(z, params[2 * l + 1])?;
            if l < 2 {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn project(&self, x: &Tensor) -> Result<Tensor, KernelError> {
        let mut g = Graph::new();
        let params = self.params.iter().map(|p| g.constant(p.clone())).collect::<Result<Vec<_>, _>>()?;
        let xv = g.constant(x.clone())?;
        let out = Self::project_graph(&mut g, &params, xv)?;
        Ok(g.value(out).clone())
    }
}

/// Class prototypes `[non-fatigued, fatigued]` as means of projected support
/// rows; `None` when a class is absent.
pub fn prototypes(projected: &Tensor, labels: &[bool]) -> Option<[Vec<f64>; 2]> {
    let cols = projected.cols();
    let mut sums = [vec![0.0; cols], vec![0.0; cols]];
    let mut counts = [0usize; 2];
    for (r, &l) in labels.iter().enumerate() {
        let k = usize::from(l);
        counts[k] += 1;
        for (s, v) in sums[k].iter_mut().zip(projected.row_slice(r)) {
            *s += v;
        }
    }
    if counts.contains(&0) {
        return None;
    }
    for k in 0..2 {
        let n = counts[k] as f64;
        sums[k].iter_mut().for_each(|v| *v /= n);
    }
    Some(sums)
}

/// Probability of the fatigued class from softmax over negative squared
/// distances to the prototypes.
pub fn classify_projected(protos: &[Vec<f64>; 2], z: &[f64]) -> f64 {
    let d = |c: &Vec<f64>| c.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let (d0, d1) = (d(&protos[0]), d(&protos[1]));
    // softmax([-d0, -d1])[1] = sigmoid(d0 - d1)
    let s = d0 - d1;
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// One labelled episode from a single speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support: Tensor,
    pub support_labels: Vec<bool>,
    pub queries: Tensor,
    pub query_labels: Vec<bool>,
}

fn rows_of(obs: &[&Observation], dim: usize) -> Tensor {
    let data = obs.iter().flat_map(|o| o.embedding.as_slice().iter().copied()).collect();
    Tensor::new(obs.len(), dim, data).expect("common dimension")
}

/// Speakers with at least four observations and both classes.
pub fn eligible(speakers: &[&SpeakerSequence]) -> Vec<usize> {
    speakers
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            let pos = s.observations().iter().filter(|o| o.target.label()).count();
            s.len() >= 4 && pos > 0 && pos < s.len()
        })
        .map(|(i, _)| i)
        .collect()
}

/// Samples an episode: support size uniform in `[min, max]` (at most `n - 1`),
/// seeded with one observation of each class; the rest become queries.
pub fn sample_episode(seq: &SpeakerSequence, config: &ProtoConfig, rng: &mut ChaCha8Rng) -> Episode {
    let obs = seq.observations();
    let n = obs.len();
    let hi = config.support_max.min(n - 1).max(2);
    let k = rng.gen_range(config.support_min.min(hi)..=hi);
    let mut pos: Vec<usize> = (0..n).filter(|&i| obs[i].target.label()).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&i| !obs[i].target.label()).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    let mut support = vec![pos[0], neg[0]];
    let mut rest: Vec<usize> = pos[1..].iter().chain(&neg[1..]).copied().collect();
    rest.sort_unstable();
    rest.shuffle(rng);
    support.extend(rest.drain(..k - 2));
    rest.truncate(config.max_queries);
    let dim = obs[0].embedding.dim();
    let s: Vec<&Observation> = support.iter().map(|&i| &obs[i]).collect();
    let q: Vec<&Observation> = rest.iter().map(|&i| &obs[i]).collect();
    Episode {
        support: rows_of(&s, dim),
        support_labels: s.iter().map(|o| o.target.label()).collect(),
        queries: rows_of(&q, dim),
        query_labels: q.iter().map(|o| o.target.label()).collect(),
    }
}

/// Mean cross-entropy over episodes, with one shared projection pass.
pub fn batch_loss(g: &mut Graph, params: &[Var], episodes: &[Episode]) -> Result<Var, KernelError> {
    let mut blocks = Vec::new();
    let mut offsets = Vec::new();
    let mut total = 0;
    for e in episodes {
        offsets.push(total);
        total += e.support.rows() + e.queries.rows();
        blocks.push(g.constant(e.support.clone())?);
        blocks.push(g.constant(e.queries.clone())?);
    }
    let x = g.concat_rows(&blocks)?;
    let z = ProjectionNet::project_graph(g, params, x)?;
    let mut losses = Vec::new();
    for (e, &off) in episodes.iter().zip(&offsets) {
        if e.queries.rows() == 0 {
            continue;
        }
        let ns = e.support.rows();
        let counts = [
            e.support_labels.iter().filter(|&&l| !l).count() as f64,
            e.support_labels.iter().filter(|&&l| l).count() as f64,
        ];
        let mut avg = Tensor::zeros(2, total);
        for (r, &l) in e.support_labels.iter().enumerate() {
            let k = usize::from(l);
            avg.data_mut()[k * total + off + r] = 1.0 / counts[k];
        }
        let avg = g.constant(avg)?;
        let protos = g.matmul(avg, z)?;
        let q_idx: Vec<usize> = (0..e.queries.rows()).map(|i| off + ns + i).collect();
        let zq = g.gather_rows(z, &q_idx)?;
        let dist = g.sq_dist(zq, protos)?;
        let logits = g.scale(dist, -1.0)?;
        let targets: Vec<usize> = e.query_labels.iter().map(|&l| usize::from(l)).collect();
        losses.push(g.cross_entropy(logits, &targets)?);
    }
    let all = g.concat_rows(&losses)?;
    g.mean(all)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtoLog {
    pub steps: usize,
    pub best_step: usize,
    pub val_auc: Vec<f64>,
    pub train_loss: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtoNet {
    pub net: ProjectionNet,
    pub config: ProtoConfig,
    pub log: ProtoLog,
}

impl ProtoNet {
    /// Probability of fatigue, or `None` if the support lacks a class.
    pub fn predict(&self, support: &SupportSet<'_>, x: &[f64]) -> Result<Option<f64>, ModelError> {
        if support.is_empty() {
            return Ok(None);
        }
        let labels: Vec<bool> = support.iter().map(|o| o.target.label()).collect();
        if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
            return Ok(None);
        }
        if x.len() != self.net.input_dim() {
            return Err(ModelError::Dimension { expected: self.net.input_dim(), found: x.len() });
        }
        let mut rows: Vec<&[f64]> = support.iter().map(|o| o.embedding.as_slice()).collect();
        rows.push(x);
        let z = self.net.project(&Tensor::from_rows(&rows)?)?;
        let n = labels.len();
        let zs = Tensor::new(n, z.cols(), z.data()[..n * z.cols()].to_vec())?;
        let protos = prototypes(&zs, &labels).expect("both classes present");
        Ok(Some(classify_projected(&protos, z.row_slice(n))))
    }

    /// Pooled AUC of query predictions across episodes.
    pub fn episode_auc(&self, episodes: &[Episode]) -> Result<f64, ModelError> {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for e in episodes {
            let zs = self.net.project(&e.support)?;
            let protos = prototypes(&zs, &e.support_labels).expect("episodes cover both classes");
            if e.queries.rows() == 0 {
                continue;
            }
            let zq = self.net.project(&e.queries)?;
            for r in 0..zq.rows() {
                scores.push(classify_projected(&protos, zq.row_slice(r)));
            }
            labels.extend_from_slice(&e.query_labels);
        }
        metrics::auc(&scores, &labels).map_err(|e| ModelError::Training(format!("validation AUC: {e}")))
    }

    /// Episodic training with Adam and early stopping on validation AUC.
    pub fn train(train: &[&SpeakerSequence], val: &[&SpeakerSequence], config: ProtoConfig) -> Result<Self, ModelError> {
        let tr = eligible(train);
        if tr.is_empty() {
            return Err(ModelError::Training("no training speaker has four observations and both classes".into()));
        }
        let dim = train[tr[0]].observations()[0].embedding.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let net = ProjectionNet::new(dim, config.hidden, config.out_dim, &mut rng);
        let va = eligible(val);
        let mut val_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
        let val_eps: Vec<Episode> = if va.is_empty() {
            Vec::new()
        } else {
            (0..config.val_episodes).map(|i| sample_episode(val[va[i % va.len()]], &config, &mut val_rng)).collect()
        };
        let mut model = ProtoNet {
            net,
            config: config.clone(),
            log: ProtoLog { steps: 0, best_step: 0, val_auc: Vec::new(), train_loss: Vec::new() },
        };
        let mut best = (f64::NEG_INFINITY, model.net.params.clone());
        let mut bad_checks = 0;
        let mut adam = Adam::new(config.adam, &model.net.params);
        let batch = config.batch_episodes.max(1);
        let steps = config.episodes.div_ceil(batch);
        for step in 1..=steps {
            let eps: Vec<Episode> =
                (0..batch).map(|_| sample_episode(train[tr[rng.gen_range(0..tr.len())]], &config, &mut rng)).collect();
            let mut g = Graph::new();
            let vars = model.net.params.iter().map(|p| g.param(p.clone())).collect::<Result<Vec<_>, _>>()?;
            let loss = batch_loss(&mut g, &vars, &eps)?;
            model.log.train_loss.push(g.value(loss).item());
            let grads = g.backward(loss)?;
            let gs: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();
            adam.step(&mut model.net.params, &gs);
            model.log.steps = step;
            if !val_eps.is_empty() && (step % config.eval_every.max(1) == 0 || step == steps) {
                let auc = model.episode_auc(&val_eps)?;
                model.log.val_auc.push(auc);
                if auc > best.0 {
                    best = (auc, model.net.params.clone());
                    model.log.best_step = step;
                    bad_checks = 0;
                } else {
                    bad_checks += 1;
                    if bad_checks >= config.patience {
                        break;
                    }
                }
            }
        }
        if !val_eps.is_empty() {
            model.net.params = best.1;
        } else {
            model.log.best_step = model.log.steps;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::check::gradient_check;
    use proptest::prelude::{prop_assert, proptest};

    fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn toy_episode(d: usize, rng: &mut ChaCha8Rng) -> Episode {
        Episode {
            support: random_tensor(4, d, rng),
            support_labels: vec![true, false, true, false],
            queries: random_tensor(3, d, rng),
            query_labels: vec![true, false, false],
        }
    }

    #[test]
    fn one_example_per_class_is_its_prototype() {
        let z = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let p = prototypes(&z, &[false, true]).unwrap();
        assert_eq!(p, [vec![1.0, 2.0], vec![3.0, 4.0]]);
        let dup = Tensor::from_rows(&[[1.0, 2.0], [1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(prototypes(&dup, &[false, false, true]).unwrap(), p);
        assert!(prototypes(&z, &[true, true]).is_none());
    }

    #[test]
    fn classification_limits() {
        let p = [vec![0.0, 0.0], vec![2.0, 0.0]];
        assert_eq!(classify_projected(&p, &[1.0, 5.0]), 0.5);
        let far = [vec![100.0, 0.0], vec![0.0, 0.0]];
        assert!(classify_projected(&far, &[0.0, 0.0]) > 1.0 - 1e-12);
        let q = [0.3, -0.2];
        let (a, b) = (classify_projected(&p, &q), classify_projected(&[p[1].clone(), p[0].clone()], &q));
        assert!((a + b - 1.0).abs() < 1e-15);
    }

    #[test]
    fn episode_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let net = ProjectionNet::new(4, 32, 64, &mut rng);
        let eps = vec![toy_episode(4, &mut rng), toy_episode(4, &mut rng)];
        let r = gradient_check(&net.params, 1e-4, |g, vars| batch_loss(g, vars, &eps)).unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }

    #[test]
    fn rigid_transform_of_projection_preserves_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = ProjectionNet::new(4, 32, 64, &mut rng);
        let ep = toy_episode(4, &mut rng);
        let zs = net.project(&ep.support).unwrap();
        let zq = net.project(&ep.queries).unwrap();
        // Householder reflection plus a translation.
        let v: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let vv: f64 = v.iter().map(|a| a * a).sum();
        let shift: Vec<f64> = (0..64).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let map = |z: &[f64]| -> Vec<f64> {
            let dot: f64 = z.iter().zip(&v).map(|(a, b)| a * b).sum();
            z.iter().zip(&v).zip(&shift).map(|((a, b), s)| a - 2.0 * dot / vv * b + s).collect()
        };
        let mapped_rows: Vec<Vec<f64>> = (0..zs.rows()).map(|r| map(zs.row_slice(r))).collect();
        let ps = prototypes(&zs, &ep.support_labels).unwrap();
        let pm = prototypes(&Tensor::from_rows(&mapped_rows).unwrap(), &ep.support_labels).unwrap();
        for r in 0..zq.rows() {
            let a = classify_projected(&ps, zq.row_slice(r));
            let b = classify_projected(&pm, &map(zq.row_slice(r)));
            assert!((a - b).abs() <= 1e-9);
        }
    }

    proptest! {
        #[test]
        fn prototypes_ignore_support_order(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = random_tensor(6, 3, &mut rng);
            let labels = [true, false, true, true, false, false];
            let mut perm: Vec<usize> = (0..6).collect();
            perm.shuffle(&mut rng);
            let rows: Vec<Vec<f64>> = perm.iter().map(|&i| z.row_slice(i).to_vec()).collect();
            let pl: Vec<bool> = perm.iter().map(|&i| labels[i]).collect();
            let a = prototypes(&z, &labels).unwrap();
            let b = prototypes(&Tensor::from_rows(&rows).unwrap(), &pl).unwrap();
            for k in 0..2 {
                for (x, y) in a[k].iter().zip(&b[k]) {
                    prop_assert!((x - y).abs() <= 1e-12);
                }
            }
        }
    }
}
