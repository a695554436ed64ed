//! Decoder-only transformer over interleaved `[x, y, x, y, ..., x]` sequences.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Observation, SpeakerSequence, SupportSet, Task};
use crate::error::ModelError;
use crate::exec::Exec;
use crate::linmodels::clamp_hours;
use crate::numkernel::{clip_grad_norm, Adam, AdamConfig, Graph, KernelError, Segment, Tensor, Var};
use crate::synthgen::{HOURS_CENTER, HOURS_SCALE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    pub mlp_ratio: usize,
    pub max_seq_tokens: usize,
    pub aug_noise_std: f64,
    /// Training only: std of a random offset added to every embedding of a sequence.
    pub shift_std: f64,
    /// Training only: std of independent noise added to each embedding token.
    pub jitter_std: f64,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    /// Final learning rate as a fraction of the initial one, reached by cosine decay.
    pub lr_floor: f64,
    pub steps: usize,
    pub batch_sequences: usize,
    /// Fixed partition of each batch for gradient accumulation; results do not
    /// depend on whether chunks run in parallel.
    pub chunks: usize,
    pub eval_every: usize,
    pub patience: usize,
    /// Random orderings of each validation speaker used for early stopping.
    pub val_orderings: usize,
    pub seed: u64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig::desk()
    }
}

impl TransformerConfig {
    pub fn desk() -> Self {
        TransformerConfig {
            n_layers: 4,
            n_heads: 4,
            model_dim: 64,
            mlp_ratio: 4,
            max_seq_tokens: 64,
            aug_noise_std: 0.1,
            shift_std: 2.0,
            jitter_std: 1.0,
            adam: AdamConfig { lr: 5e-4, ..AdamConfig::default() },
            clip_norm: 1.0,
            lr_floor: 0.05,
            steps: 1500,
            batch_sequences: 32,
            chunks: 4,
            eval_every: 50,
            patience: 15,
            val_orderings: 4,
            seed: 13,
        }
    }

    pub fn large() -> Self {
        TransformerConfig { n_layers: 15, n_heads: 8, model_dim: 128, ..TransformerConfig::desk() }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "large" => Some(Self::large()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.model_dim == 0 || self.mlp_ratio == 0 {
            return bad("layer, head, width and MLP ratio must be positive".into());
        }
        if self.model_dim % self.n_heads != 0 {
            return bad(format!("model_dim {} not divisible by {} heads", self.model_dim, self.n_heads));
        }
        if self.max_seq_tokens < 3 {
            return bad("max_seq_tokens must allow at least one support pair".into());
        }
        if !(self.lr_floor > 0.0 && self.lr_floor <= 1.0) {
            return bad("lr_floor must be in (0, 1]".into());
        }
        if !(self.shift_std >= 0.0) || !(self.jitter_std >= 0.0) {
            return bad("embedding augmentation std must be non-negative".into());
        }
        if !(self.aug_noise_std >= 0.0) || !(self.clip_norm > 0.0) || !(self.adam.lr > 0.0) {
            return bad("noise, clip norm and learning rate must be non-negative/positive".into());
        }
        if self.batch_sequences == 0 || self.chunks == 0 {
            return bad("batch_sequences and chunks must be positive".into());
        }
        Ok(())
    }

    /// Largest support that fits in `max_seq_tokens` (`2t + 1` tokens).
    pub fn max_support(&self) -> usize {
        (self.max_seq_tokens - 1) / 2
    }
}

/// Affine map of targets into the model's working range.
pub fn target_norm(task: Task) -> (f64, f64) {
    match task {
        Task::Regression => (HOURS_CENTER, HOURS_SCALE),
        Task::Classification => (0.5, 0.5),
    }
}

/// `d` independent draws from `N(y, std^2)`.
pub fn augment_target<R: Rng + ?Sized>(y: f64, d: usize, std: f64, rng: &mut R) -> Vec<f64> {
    if std == 0.0 {
        return vec![y; d];
    }
    let normal = Normal::new(y, std).expect("finite target and std");
    (0..d).map(|_| normal.sample(rng)).collect()
}

/// Interleaved sequence: `x` rows are embedding tokens, `y` rows normalised
/// augmented targets; token `2i` is `x[i]` and token `2i + 1` is `y[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub x: Tensor,
    pub y: Tensor,
    /// Normalised augmented target for each `x` token, when known.
    pub targets: Option<Tensor>,
}

impl TokenSequence {
    pub fn n_tokens(&self) -> usize {
        self.x.rows() + self.y.rows()
    }

    /// Token positions whose outputs are scored: every embedding token.
    pub fn scored_positions(&self) -> Vec<usize> {
        (0..self.x.rows()).map(|i| 2 * i).collect()
    }

    /// Boolean mask over all tokens.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.n_tokens()).map(|p| p % 2 == 0).collect()
    }
}

fn value_of(o: &Observation, task: Task) -> f64 {
    o.target.value(task)
}

fn augmented_norm<R: Rng + ?Sized>(y: f64, d: usize, std: f64, task: Task, rng: &mut R) -> Vec<f64> {
    let (c, s) = target_norm(task);
    augment_target(y, d, std, rng).into_iter().map(|v| (v - c) / s).collect()
}

/// Sequence for a query `x` after `support`, with freshly augmented targets.
pub fn build_sequence<R: Rng + ?Sized>(
    support: &SupportSet<'_>,
    x: &[f64],
    task: Task,
    config: &TransformerConfig,
    rng: &mut R,
) -> Result<TokenSequence, ModelError> {
    let tokens = 2 * support.len() + 1;
    if tokens > config.max_seq_tokens {
        return Err(ModelError::SequenceTooLong { tokens, max: config.max_seq_tokens });
    }
    let d = x.len();
    let mut xs = Vec::with_capacity(tokens / 2 + 1);
    let mut ys = Vec::with_capacity(tokens / 2);
    for o in support.iter() {
        if o.embedding.dim() != d {
            return Err(ModelError::Dimension { expected: d, found: o.embedding.dim() });
        }
        xs.push(o.embedding.as_slice().to_vec());
        ys.push(augmented_norm(value_of(o, task), d, config.aug_noise_std, task, rng));
    }
    xs.push(x.to_vec());
    Ok(TokenSequence { x: stack(&xs, d), y: stack(&ys, d), targets: None })
}

/// Full training sequence over ordered observations; the last observation's
/// target is scored but not fed.
pub fn training_sequence<R: Rng + ?Sized>(
    obs: &[&Observation],
    task: Task,
    config: &TransformerConfig,
    rng: &mut R,
) -> TokenSequence {
    let n = obs.len().min(config.max_support() + 1);
    let d = obs[0].embedding.dim();
    let xs: Vec<Vec<f64>> = obs[..n].iter().map(|o| o.embedding.as_slice().to_vec()).collect();
    let ys: Vec<Vec<f64>> =
        obs[..n].iter().map(|o| augmented_norm(value_of(o, task), d, config.aug_noise_std, task, rng)).collect();
    let targets = stack(&ys, d);
    TokenSequence { x: stack(&xs, d), y: stack(&ys[..n - 1], d), targets: Some(targets) }
}

/// Adds a shared random offset and independent per-token noise to the
/// embedding tokens of a training sequence.
pub fn perturb_embeddings<R: Rng + ?Sized>(seq: &mut TokenSequence, shift_std: f64, jitter_std: f64, rng: &mut R) {
    let d = seq.x.cols();
    let shift: Vec<f64> =
        if shift_std > 0.0 { (0..d).map(|_| shift_std * rng.sample::<f64, _>(StandardNormal)).collect() } else { vec![0.0; d] };
    for row in seq.x.data_mut().chunks_mut(d) {
        for (v, s) in row.iter_mut().zip(&shift) {
            *v += s;
            if jitter_std > 0.0 {
                *v += jitter_std * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
}

fn stack(rows: &[Vec<f64>], d: usize) -> Tensor {
    Tensor::new(rows.len(), d, rows.concat()).expect("rows share a dimension")
}

/// Several sequences laid out back to back for one forward pass.
#[derive(Clone, Debug)]
struct Packed {
    x: Tensor,
    y: Tensor,
    /// Row of `[x; y]` for each packed token.
    order: Vec<usize>,
    positions: Vec<usize>,
    segments: Vec<Segment>,
    /// Packed row of every scored token.
    scored: Vec<usize>,
    targets: Option<Tensor>,
}

fn pack(seqs: &[&TokenSequence]) -> Packed {
    let d = seqs[0].x.cols();
    let nx: usize = seqs.iter().map(|s| s.x.rows()).sum();
    let (mut xd, mut yd, mut td) = (Vec::new(), Vec::new(), Vec::new());
    let (mut order, mut positions, mut segments, mut scored) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut xi, mut yi, mut start) = (0, 0, 0);
    let has_targets = seqs.iter().all(|s| s.targets.is_some());
    for s in seqs {
        xd.extend_from_slice(s.x.data());
        yd.extend_from_slice(s.y.data());
        if has_targets {
            td.extend_from_slice(s.targets.as_ref().expect("checked").data());
        }
        let len = s.n_tokens();
        for p in 0..len {
            if p % 2 == 0 {
                scored.push(start + p);
                order.push(xi);
                xi += 1;
            } else {
                order.push(nx + yi);
                yi += 1;
            }
            positions.push(p);
        }
        segments.push(Segment { start, len });
        start += len;
    }
    let ny = yi;
    Packed {
        x: Tensor::new(nx, d, xd).expect("packed x"),
        y: Tensor::new(ny, d, yd).expect("packed y"),
        order,
        positions,
        segments,
        scored,
        targets: has_targets.then(|| Tensor::new(nx, d, td).expect("packed targets")),
    }
}

/// Parameter layout: `[wx, bx, wy, by, pos]`, then 13 tensors per block,
/// then `[lnf_g, lnf_b, head_w, head_b]`.
const PRE: usize = 5;
const PER_LAYER: usize = 13;
const LAYER_NAMES: [&str; PER_LAYER] =
    ["ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: usize,
    pub best_step: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InContextTransformer {
    pub config: TransformerConfig,
    pub task: Task,
    pub dim: usize,
    pub params: Vec<Tensor>,
    pub log: TrainLog,
}

impl InContextTransformer {
    /// Fresh model with a zero output head.
    pub fn new(dim: usize, task: Task, config: TransformerConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let md = config.model_dim;
        let hid = md * config.mlp_ratio;
        let mut normal = |rows: usize, cols: usize, std: f64| {
            let n = Normal::new(0.0, std).expect("positive std");
            Tensor::new(rows, cols, (0..rows * cols).map(|_| n.sample(&mut rng)).collect()).expect("shape")
        };
        let in_std = 1.0 / (dim as f64).sqrt();
        let resid_std = 0.02 / (2.0 * config.n_layers as f64).sqrt();
        let mut p = vec![
            normal(dim, md, in_std),
            Tensor::zeros(1, md),
            normal(dim, md, in_std),
            Tensor::zeros(1, md),
            normal(config.max_seq_tokens, md, 0.02),
        ];
        for _ in 0..config.n_layers {
            p.push(Tensor::filled(1, md, 1.0));
            p.push(Tensor::zeros(1, md));
            for _ in 0..3 {
                p.push(normal(md, md, 0.02));
            }
            p.push(normal(md, md, resid_std));
            p.push(Tensor::zeros(1, md));
            p.push(Tensor::filled(1, md, 1.0));
            p.push(Tensor::zeros(1, md));
            p.push(normal(md, hid, 0.02));
            p.push(Tensor::zeros(1, hid));
            p.push(normal(hid, md, resid_std));
            p.push(Tensor::zeros(1, md));
        }
        p.push(Tensor::filled(1, md, 1.0));
        p.push(Tensor::zeros(1, md));
        p.push(Tensor::zeros(md, dim));
        p.push(Tensor::zeros(1, dim));
        let log = TrainLog { steps: 0, best_step: 0, train_loss: Vec::new(), val_loss: Vec::new() };
        Ok(InContextTransformer { config, task, dim, params: p, log })
    }

    pub fn param_names(n_layers: usize) -> Vec<String> {
        let mut names: Vec<String> = ["wx", "bx", "wy", "by", "pos"].iter().map(|s| s.to_string()).collect();
        for l in 0..n_layers {
            names.extend(LAYER_NAMES.iter().map(|n| format!("layer{l}.{n}")));
        }
        names.extend(["lnf_g", "lnf_b", "head_w", "head_b"].iter().map(|s| s.to_string()));
        names
    }

    /// Rebuilds a model from stored tensors, checking their shapes against a
    /// freshly initialised one.
    pub fn from_params(
        dim: usize,
        task: Task,
        config: TransformerConfig,
        params: Vec<Tensor>,
        log: TrainLog,
    ) -> Result<Self, ModelError> {
        let fresh = Self::new(dim, task, config)?;
        if fresh.params.len() != params.len()
            || fresh.params.iter().zip(&params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(ModelError::Config("parameter shapes do not match the configuration".into()));
        }
        Ok(InContextTransformer { params, log, ..fresh })
    }

    fn outputs(g: &mut Graph, p: &[Var], packed: &Packed, cfg: &TransformerConfig) -> Result<Var, KernelError> {
        let xc = g.constant(packed.x.clone())?;
        let ex = g.matmul(xc, p[0])?;
        let ex = g.add(ex, p[1])?;
        let e = if packed.y.rows() > 0 {
            let yc = g.constant(packed.y.clone())?;
            let ey = g.matmul(yc, p[2])?;
            let ey = g.add(ey, p[3])?;
            g.concat_rows(&[ex, ey])?
        } else {
            ex
        };
        let tokens = g.gather_rows(e, &packed.order)?;
        let pe = g.gather_rows(p[4], &packed.positions)?;
        let mut h = g.add(tokens, pe)?;
        for l in 0..cfg.n_layers {
            let w = &p[PRE + l * PER_LAYER..PRE + (l + 1) * PER_LAYER];
            let a = g.layer_norm(h, w[0], w[1])?;
            let q = g.matmul(a, w[2])?;
            let k = g.matmul(a, w[3])?;
            let v = g.matmul(a, w[4])?;
            let att = g.causal_attention(q, k, v, cfg.n_heads, &packed.segments)?;
            let o = g.matmul(att, w[5])?;
            let o = g.add(o, w[6])?;
            h = g.add(h, o)?;
            let m = g.layer_norm(h, w[7], w[8])?;
            let f = g.matmul(m, w[9])?;
            let f = g.add(f, w[10])?;
            let f = g.relu(f)?;
            let f = g.matmul(f, w[11])?;
            let f = g.add(f, w[12])?;
            h = g.add(h, f)?;
        }
        let tail = PRE + cfg.n_layers * PER_LAYER;
        let h = g.layer_norm(h, p[tail], p[tail + 1])?;
        let out = g.matmul(h, p[tail + 2])?;
        g.add(out, p[tail + 3])
    }

    /// Mean over scored positions of the per-dimension squared error.
    pub fn masked_loss(g: &mut Graph, outputs: Var, scored: &[usize], targets: &Tensor) -> Result<Var, KernelError> {
        let picked = g.gather_rows(outputs, scored)?;
        let t = g.constant(targets.clone())?;
        g.mse(picked, t)
    }

    fn graph_loss(
        &self,
        g: &mut Graph,
        vars: &[Var],
        seqs: &[&TokenSequence],
    ) -> Result<Var, KernelError> {
        let packed = pack(seqs);
        let out = Self::outputs(g, vars, &packed, &self.config)?;
        let targets = packed.targets.as_ref().expect("training sequences carry targets");
        Self::masked_loss(g, out, &packed.scored, targets)
    }

    /// Loss of `seqs` built from parameter vars, for gradient checking.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        vars: &[Var],
        seqs: &[TokenSequence],
    ) -> Result<Var, KernelError> {
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        self.graph_loss(g, vars, &refs)
    }

    fn check_dims(&self, seq: &TokenSequence) -> Result<(), ModelError> {
        if seq.x.cols() != self.dim {
            return Err(ModelError::Dimension { expected: self.dim, found: seq.x.cols() });
        }
        if seq.n_tokens() > self.config.max_seq_tokens {
            return Err(ModelError::SequenceTooLong { tokens: seq.n_tokens(), max: self.config.max_seq_tokens });
        }
        Ok(())
    }

    /// Outputs at every token position (`n_tokens x d`), normalised scale.
    pub fn forward(&self, seq: &TokenSequence) -> Result<Tensor, ModelError> {
        self.check_dims(seq)?;
        Ok(self.forward_packed(&[seq])?.remove(0))
    }

    fn forward_packed(&self, seqs: &[&TokenSequence]) -> Result<Vec<Tensor>, ModelError> {
        let packed = pack(seqs);
        let mut g = Graph::new();
        let vars = self.params.iter().map(|p| g.constant(p.clone())).collect::<Result<Vec<_>, _>>()?;
        let out = Self::outputs(&mut g, &vars, &packed, &self.config)?;
        let all = g.value(out);
        Ok(packed
            .segments
            .iter()
            .map(|s| {
                Tensor::new(s.len, self.dim, all.data()[s.start * self.dim..(s.start + s.len) * self.dim].to_vec())
                    .expect("segment slice")
            })
            .collect())
    }

    /// Mean of an output vector mapped back to target units.
    pub fn readout(&self, out_row: &[f64]) -> f64 {
        let (c, s) = target_norm(self.task);
        let v = c + s * out_row.iter().sum::<f64>() / out_row.len() as f64;
        match self.task {
            Task::Regression => clamp_hours(v),
            Task::Classification => v,
        }
    }

    /// Prediction for `x` after `support`; supports longer than the token
    /// budget keep their most recent elements.
    pub fn predict<R: Rng + ?Sized>(&self, support: &SupportSet<'_>, x: &[f64], rng: &mut R) -> Result<f64, ModelError> {
        let keep = self.config.max_support();
        let pairs = support.pairs();
        let trimmed = SupportSet::new(pairs[pairs.len().saturating_sub(keep)..].to_vec());
        let seq = build_sequence(&trimmed, x, self.task, &self.config, rng)?;
        let out = self.forward(&seq)?;
        Ok(self.readout(out.row_slice(out.rows() - 1)))
    }

    /// Predictions at every position of ordered sequences: entry `t` uses the
    /// first `t` observations as support. Equivalent to calling `predict` per
    /// position with the same target draws, by causality.
    pub fn predict_sequences(&self, seqs: &[Vec<&Observation>], seeds: &[u64]) -> Result<Vec<Vec<f64>>, ModelError> {
        let keep = self.config.max_support();
        let mut results: Vec<Vec<f64>> = Vec::with_capacity(seqs.len());
        let mut token_seqs = Vec::new();
        let mut owners = Vec::new();
        for (i, (obs, &seed)) in seqs.iter().zip(seeds).enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            results.push(Vec::with_capacity(obs.len()));
            if obs.is_empty() {
                continue;
            }
            let direct = obs.len().min(keep + 1);
            let mut ts = training_sequence(&obs[..direct], self.task, &self.config, &mut rng);
            ts.targets = None;
            token_seqs.push(ts);
            owners.push((i, None));
            for t in direct..obs.len() {
                let support = SupportSet::new(obs[t - keep..t].to_vec());
                let s = build_sequence(&support, obs[t].embedding.as_slice(), self.task, &self.config, &mut rng)?;
                token_seqs.push(s);
                owners.push((i, Some(t)));
            }
        }
        for s in &token_seqs {
            self.check_dims(s)?;
        }
        let budget = 512usize;
        let mut start = 0;
        while start < token_seqs.len() {
            let mut end = start;
            let mut tokens = 0;
            while end < token_seqs.len() && (end == start || tokens + token_seqs[end].n_tokens() <= budget) {
                tokens += token_seqs[end].n_tokens();
                end += 1;
            }
            let refs: Vec<&TokenSequence> = token_seqs[start..end].iter().collect();
            let outs = self.forward_packed(&refs)?;
            for (k, out) in outs.iter().enumerate() {
                let (owner, single) = owners[start + k];
                match single {
                    None => {
                        for p in (0..out.rows()).step_by(2) {
                            results[owner].push(self.readout(out.row_slice(p)));
                        }
                    }
                    Some(_) => results[owner].push(self.readout(out.row_slice(out.rows() - 1))),
                }
            }
            start = end;
        }
        Ok(results)
    }

    /// Loss value and gradients for one batch, accumulated over fixed chunks.
    fn batch_gradients(&self, seqs: &[TokenSequence], exec: Exec) -> Result<(f64, Vec<Tensor>), ModelError> {
        let total: usize = seqs.iter().map(|s| s.x.rows()).sum();
        let n_chunks = self.config.chunks.min(seqs.len()).max(1);
        let per = seqs.len().div_ceil(n_chunks);
        let chunks: Vec<&[TokenSequence]> = seqs.chunks(per).collect();
        let parts = exec.map(&chunks, |chunk| -> Result<(f64, Vec<Tensor>), ModelError> {
            let weight = chunk.iter().map(|s| s.x.rows()).sum::<usize>() as f64 / total as f64;
            let mut g = Graph::new();
            let vars = self.params.iter().map(|p| g.param(p.clone())).collect::<Result<Vec<_>, _>>()?;
            let refs: Vec<&TokenSequence> = chunk.iter().collect();
            let l = self.graph_loss(&mut g, &vars, &refs)?;
            let l = g.scale(l, weight)?;
            let grads = g.backward(l)?;
            Ok((g.value(l).item(), vars.iter().map(|&v| grads.get(v)).collect()))
        });
        let mut loss = 0.0;
        let mut acc: Option<Vec<Tensor>> = None;
        for part in parts {
            let (l, gs) = part?;
            loss += l;
            match acc.as_mut() {
                None => acc = Some(gs),
                Some(a) => a.iter_mut().zip(&gs).for_each(|(x, y)| x.add_assign(y)),
            }
        }
        Ok((loss, acc.expect("at least one chunk")))
    }

    fn eval_loss(&self, seqs: &[TokenSequence]) -> Result<f64, ModelError> {
        let mut sum = 0.0;
        let mut count = 0;
        for chunk in seqs.chunks(16) {
            let refs: Vec<&TokenSequence> = chunk.iter().collect();
            let mut g = Graph::new();
            let vars = self.params.iter().map(|p| g.constant(p.clone())).collect::<Result<Vec<_>, _>>()?;
            let l = self.graph_loss(&mut g, &vars, &refs)?;
            let n: usize = chunk.iter().map(|s| s.x.rows()).sum();
            sum += g.value(l).item() * n as f64;
            count += n;
        }
        Ok(sum / count.max(1) as f64)
    }

    /// Trains on sequences drawn by `sample` each step, with early stopping on
    /// the loss of the fixed validation sequences.
    pub fn train_with<'a, F>(
        dim: usize,
        task: Task,
        config: TransformerConfig,
        mut sample: F,
        val: &[Vec<&'a Observation>],
        exec: Exec,
    ) -> Result<Self, ModelError>
    where
        F: FnMut(&mut ChaCha8Rng) -> Vec<Vec<&'a Observation>>,
    {
        let mut model = Self::new(dim, task, config)?;
        let cfg = model.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
        let val_seqs: Vec<TokenSequence> =
            val.iter().filter(|s| !s.is_empty()).map(|s| training_sequence(s, task, &cfg, &mut val_rng)).collect();
        let mut adam = Adam::new(cfg.adam, &model.params);
        let mut best = (f64::INFINITY, model.params.clone());
        let mut bad = 0;
        for step in 1..=cfg.steps {
            let progress = (step - 1) as f64 / cfg.steps.max(1) as f64;
            let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            adam.config.lr = cfg.adam.lr * (cfg.lr_floor + (1.0 - cfg.lr_floor) * cosine);
            let batch: Vec<TokenSequence> = sample(&mut rng)
                .iter()
                .filter(|s| !s.is_empty())
                .map(|s| {
                    let mut ts = training_sequence(s, task, &cfg, &mut rng);
                    perturb_embeddings(&mut ts, cfg.shift_std, cfg.jitter_std, &mut rng);
                    ts
                })
                .collect();
            if batch.is_empty() {
                return Err(ModelError::Training("sampler produced no sequences".into()));
            }
            let (loss, mut grads) = model.batch_gradients(&batch, exec)?;
            clip_grad_norm(&mut grads, cfg.clip_norm);
            adam.step(&mut model.params, &grads);
            model.log.train_loss.push(loss);
            model.log.steps = step;
            if !val_seqs.is_empty() && (step % cfg.eval_every.max(1) == 0 || step == cfg.steps) {
                let vl = model.eval_loss(&val_seqs)?;
                model.log.val_loss.push(vl);
                if vl < best.0 {
                    best = (vl, model.params.clone());
                    model.log.best_step = step;
                    bad = 0;
                } else {
                    bad += 1;
                    if bad >= cfg.patience {
                        break;
                    }
                }
            }
        }
        if val_seqs.is_empty() {
            model.log.best_step = model.log.steps;
        } else {
            model.params = best.1;
        }
        Ok(model)
    }

    /// Trains on speaker sequences under fresh random orderings each step.
    pub fn train(
        train: &[&SpeakerSequence],
        val: &[&SpeakerSequence],
        task: Task,
        config: TransformerConfig,
        exec: Exec,
    ) -> Result<Self, ModelError> {
        let first = train.iter().find(|s| !s.is_empty()).ok_or(ModelError::EmptyFit)?;
        let dim = first.observations()[0].embedding.dim();
        let batch = config.batch_sequences;
        let mut val_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(3));
        let val_seqs: Vec<Vec<&Observation>> = (0..config.val_orderings.max(1))
            .flat_map(|_| val.iter())
            .map(|s| {
                let mut v: Vec<&Observation> = s.observations().iter().collect();
                v.shuffle(&mut val_rng);
                v
            })
            .collect();
        let mut queue: Vec<usize> = Vec::new();
        let sampler = move |rng: &mut ChaCha8Rng| {
            (0..batch)
                .map(|_| {
                    if queue.is_empty() {
                        queue = (0..train.len()).collect();
                        queue.shuffle(rng);
                    }
                    let s = train[queue.pop().expect("refilled")];
                    let mut v: Vec<&Observation> = s.observations().iter().collect();
                    v.shuffle(rng);
                    v
                })
                .collect()
        };
        Self::train_with(dim, task, config, sampler, &val_seqs, exec)
    }
}
