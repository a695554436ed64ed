//! Evaluation protocol: fold-level training, per-iteration prediction across
//! support sizes, metric aggregation, the null-model sequence control and the
//! fairness report.

mod fairness;
mod null;
mod report;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::artifact::{Artifact, Persist};
use crate::data::{DataError, Dataset, EvalPlan, Iteration, Observation, SpeakerSequence, SupportSet, Task};
use crate::distmodel::{DistConfig, DistanceModel};
use crate::error::ModelError;
use crate::exec::Exec;
use crate::ictransformer::{InContextTransformer, TransformerConfig};
use crate::linmodels::{
    clamp_hours, tune_cs_classifier, tune_cs_regression, LogisticModel, MixedEffects, Pool, RidgeModel,
};
use crate::metrics::{self, calibrate_threshold, Calibration, Summary};
use crate::protonet::{ProtoConfig, ProtoNet};

pub use fairness::{fairness_report, FairnessConfig, FairnessReport, FairnessRow, FieldAudit};
pub use null::{arrange, null_model_experiment, NullConfig, NullTable, SequenceRegime};
pub use report::{CoverageRow, MetricRow, SUMMARY_LABEL};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Cs,
    Me,
    Dist,
    Proto,
    Tr,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [ModelKind::Cs, ModelKind::Me, ModelKind::Dist, ModelKind::Proto, ModelKind::Tr];

    /// Label used in tables.
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Cs => "CS",
            ModelKind::Me => "ME",
            ModelKind::Dist => "Dist",
            ModelKind::Proto => "Proto",
            ModelKind::Tr => "Tr",
        }
    }

    pub fn supports(self, task: Task) -> bool {
        !(self == ModelKind::Proto && task == Task::Regression)
    }

    /// Models evaluated by default for `task`.
    pub fn defaults(task: Task) -> Vec<ModelKind> {
        ModelKind::ALL.into_iter().filter(|m| m.supports(task)).collect()
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ModelKind {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cs" => Ok(ModelKind::Cs),
            "me" => Ok(ModelKind::Me),
            "dist" => Ok(ModelKind::Dist),
            "proto" => Ok(ModelKind::Proto),
            "tr" => Ok(ModelKind::Tr),
            other => Err(HarnessError::Config(format!("unknown model '{other}' (expected cs, me, dist, proto or tr)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub models: Vec<ModelKind>,
    pub n_folds: usize,
    pub n_orderings: usize,
    /// Evaluate only the first `k` folds.
    pub max_folds: Option<usize>,
    pub plan_seed: u64,
    /// Support sizes at or above this value share the last curve bucket.
    pub max_bucket: usize,
    pub dist: DistConfig,
    pub proto: ProtoConfig,
    pub transformer: TransformerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Regression,
            models: ModelKind::defaults(Task::Regression),
            n_folds: 5,
            n_orderings: 5,
            max_folds: None,
            plan_seed: 2024,
            max_bucket: 10,
            dist: DistConfig::default(),
            proto: ProtoConfig::default(),
            transformer: TransformerConfig::desk(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.models.is_empty() {
            return Err(HarnessError::Config("no models selected".into()));
        }
        if let Some(m) = self.models.iter().find(|m| !m.supports(self.task)) {
            return Err(HarnessError::Config(format!("{m} is classification-only and cannot run the regression task")));
        }
        if self.max_bucket == 0 {
            return Err(HarnessError::Config("max_bucket must be at least 1".into()));
        }
        if self.max_folds == Some(0) || self.n_orderings == 0 {
            return Err(HarnessError::Config("at least one fold and one ordering are required".into()));
        }
        self.transformer.validate()?;
        Ok(())
    }

    pub fn plan(&self, dataset: &Dataset) -> Result<EvalPlan, HarnessError> {
        Ok(EvalPlan::new(dataset, self.n_folds, self.n_orderings, self.plan_seed)?)
    }
}

/// One scored query point of a test speaker.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    /// Index into [`Dataset::speakers`].
    pub speaker: usize,
    pub t: usize,
    pub score: f64,
    pub hours: f64,
}

impl Point {
    pub fn label(&self) -> bool {
        crate::data::binarize(self.hours)
    }
}

/// Predictions of one model in one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelRun {
    pub model: ModelKind,
    pub iteration: Iteration,
    /// Validation-calibrated threshold (classification task only).
    pub calibration: Option<Calibration>,
    pub points: Vec<Point>,
    /// Query points per support size.
    pub available: Vec<usize>,
    /// Query points per support size the model declined to score.
    pub skipped: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Failure {
    pub fold: usize,
    pub ordering: Option<usize>,
    pub model: ModelKind,
    pub message: String,
}

/// Content digest of a model trained for one fold.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelDigest {
    pub fold: usize,
    pub model: ModelKind,
    pub digest: String,
}

#[derive(Clone, Debug)]
pub struct MetricReport {
    pub task: Task,
    pub models: Vec<ModelKind>,
    pub iterations: Vec<Iteration>,
    pub max_bucket: usize,
    pub rows: Vec<MetricRow>,
    pub coverage: Vec<CoverageRow>,
    pub failures: Vec<Failure>,
    pub digests: Vec<ModelDigest>,
    pub runs: Vec<ModelRun>,
}

impl MetricReport {
    pub fn row(&self, model: ModelKind, support: &str, metric: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.model == model.label() && r.support_size == support && r.metric == metric && r.group == "all")
    }

    pub fn runs_of(&self, model: ModelKind) -> impl Iterator<Item = &ModelRun> {
        self.runs.iter().filter(move |r| r.model == model)
    }
}

/// Models trained on one fold's train and validation speakers.
#[derive(Default)]
struct FoldModels {
    cs_reg: Option<RidgeModel>,
    cs_cls: Option<LogisticModel>,
    dist: Option<DistanceModel>,
    proto: Option<ProtoNet>,
    tr: Option<InContextTransformer>,
    me: MixedEffects,
    failures: Vec<(ModelKind, String)>,
}

impl FoldModels {
    fn train(
        config: &RunConfig,
        train: &[&SpeakerSequence],
        val: &[&SpeakerSequence],
        dim: usize,
        exec: Exec,
    ) -> FoldModels {
        let mut m = FoldModels::default();
        let pool = |s: &[&SpeakerSequence]| Pool::from_observations(s.iter().flat_map(|q| q.observations()), dim);
        let (train_pool, val_pool) = (pool(train), pool(val));
        let wants = |k: ModelKind| config.models.contains(&k);
        let needs_ridge = (wants(ModelKind::Cs) && config.task == Task::Regression) || wants(ModelKind::Dist);
        if needs_ridge {
            match tune_cs_regression(&train_pool, &val_pool, exec) {
                Ok((r, _)) => m.cs_reg = Some(r),
                Err(e) => {
                    m.failures.push((ModelKind::Cs, e.to_string()));
                    if wants(ModelKind::Dist) {
                        m.failures.push((ModelKind::Dist, format!("fallback model: {e}")));
                    }
                }
            }
        }
        if wants(ModelKind::Cs) && config.task == Task::Classification {
            match tune_cs_classifier(&train_pool, &val_pool, exec) {
                Ok((c, _)) => m.cs_cls = Some(c),
                Err(e) => m.failures.push((ModelKind::Cs, e.to_string())),
            }
        }
        if wants(ModelKind::Dist) {
            if let Some(fallback) = m.cs_reg.clone() {
                match DistanceModel::fit(train, fallback, config.dist) {
                    Ok(d) => m.dist = Some(d),
                    Err(e) => m.failures.push((ModelKind::Dist, e.to_string())),
                }
            }
        }
        if wants(ModelKind::Proto) {
            match ProtoNet::train(train, val, config.proto.clone()) {
                Ok(p) => m.proto = Some(p),
                Err(e) => m.failures.push((ModelKind::Proto, e.to_string())),
            }
        }
        if wants(ModelKind::Tr) {
            match InContextTransformer::train(train, val, config.task, config.transformer.clone(), exec) {
                Ok(t) => m.tr = Some(t),
                Err(e) => m.failures.push((ModelKind::Tr, e.to_string())),
            }
        }
        m
    }

    fn ready(&self, kind: ModelKind, task: Task) -> bool {
        match kind {
            ModelKind::Cs => match task {
                Task::Regression => self.cs_reg.is_some(),
                Task::Classification => self.cs_cls.is_some(),
            },
            ModelKind::Me => true,
            ModelKind::Dist => self.dist.is_some(),
            ModelKind::Proto => self.proto.is_some(),
            ModelKind::Tr => self.tr.is_some(),
        }
    }

    fn digest(&self, kind: ModelKind, task: Task, seed: u64) -> Option<String> {
        match kind {
            ModelKind::Cs => match task {
                Task::Regression => self.cs_reg.as_ref().map(|m| m.to_artifact(seed).digest()),
                Task::Classification => self.cs_cls.as_ref().map(|m| m.to_artifact(seed).digest()),
            },
            ModelKind::Me => None,
            ModelKind::Dist => self.dist.as_ref().map(|m| m.to_artifact(seed).digest()),
            ModelKind::Proto => self.proto.as_ref().map(|m| m.to_artifact(seed).digest()),
            ModelKind::Tr => self.tr.as_ref().map(|m| m.to_artifact(seed).digest()),
        }
    }

    /// Scores at every position of an ordered sequence; `None` marks a skip.
    fn score_sequence(
        &self,
        kind: ModelKind,
        task: Task,
        ordered: &[&Observation],
        seed: u64,
    ) -> Result<Vec<Option<f64>>, ModelError> {
        let at = |t: usize| (SupportSet::new(ordered[..t].to_vec()), ordered[t].embedding.as_slice());
        let n = ordered.len();
        match kind {
            ModelKind::Cs => Ok(ordered
                .iter()
                .map(|o| {
                    let x = o.embedding.as_slice();
                    Some(match task {
                        Task::Regression => clamp_hours(self.cs_reg.as_ref().expect("ready").predict_one(x)),
                        Task::Classification => self.cs_cls.as_ref().expect("ready").predict_proba_one(x),
                    })
                })
                .collect()),
            ModelKind::Me => (0..n)
                .map(|t| {
                    let (s, x) = at(t);
                    match task {
                        Task::Regression => self.me.predict_hours(&s, x),
                        Task::Classification => self.me.predict_score(&s, x),
                    }
                })
                .collect(),
            ModelKind::Dist => {
                let d = self.dist.as_ref().expect("ready");
                Ok((0..n)
                    .map(|t| {
                        let (s, x) = at(t);
                        Some(d.predict(&s, x))
                    })
                    .collect())
            }
            ModelKind::Proto => {
                let p = self.proto.as_ref().expect("ready");
                (0..n)
                    .map(|t| {
                        let (s, x) = at(t);
                        p.predict(&s, x)
                    })
                    .collect()
            }
            ModelKind::Tr => {
                let tr = self.tr.as_ref().expect("ready");
                let out = tr.predict_sequences(&[ordered.to_vec()], &[seed])?;
                Ok(out.into_iter().next().unwrap_or_default().into_iter().map(Some).collect())
            }
        }
    }
}

/// A model trained on its own, for export as an artifact.
#[derive(Clone, Debug)]
pub enum Trained {
    CsRegression(RidgeModel),
    CsClassification(LogisticModel),
    Dist(DistanceModel),
    Proto(ProtoNet),
    Tr(InContextTransformer),
}

impl Trained {
    pub fn artifact(&self, seed: u64) -> Artifact {
        match self {
            Trained::CsRegression(m) => m.to_artifact(seed),
            Trained::CsClassification(m) => m.to_artifact(seed),
            Trained::Dist(m) => m.to_artifact(seed),
            Trained::Proto(m) => m.to_artifact(seed),
            Trained::Tr(m) => m.to_artifact(seed),
        }
    }

    /// Training diagnostics as JSON.
    pub fn log(&self) -> serde_json::Value {
        match self {
            Trained::CsRegression(m) => serde_json::json!({ "alpha": m.alpha }),
            Trained::CsClassification(m) => serde_json::json!({ "c": m.c, "steps": m.steps }),
            Trained::Dist(m) => serde_json::json!({ "alpha": m.config.alpha, "fallback_alpha": m.fallback.alpha }),
            Trained::Proto(m) => serde_json::to_value(&m.log).expect("plain struct"),
            Trained::Tr(m) => serde_json::to_value(&m.log).expect("plain struct"),
        }
    }
}

/// Trains one model family on the given train and validation speakers.
pub fn train_family(
    kind: ModelKind,
    config: &RunConfig,
    train: &[&SpeakerSequence],
    val: &[&SpeakerSequence],
    exec: Exec,
) -> Result<Trained, HarnessError> {
    if !kind.supports(config.task) {
        return Err(HarnessError::Config(format!("{kind} is classification-only and cannot run the regression task")));
    }
    let dim = train
        .iter()
        .find_map(|s| s.observations().first())
        .map(|o| o.embedding.dim())
        .ok_or(ModelError::EmptyFit)?;
    let pool = |s: &[&SpeakerSequence]| Pool::from_observations(s.iter().flat_map(|q| q.observations()), dim);
    let ridge = || tune_cs_regression(&pool(train), &pool(val), exec).map(|(r, _)| r);
    Ok(match (kind, config.task) {
        (ModelKind::Me, _) => {
            return Err(HarnessError::Config("ME refits on each speaker's history and has no trained parameters".into()))
        }
        (ModelKind::Cs, Task::Regression) => Trained::CsRegression(ridge()?),
        (ModelKind::Cs, Task::Classification) => {
            Trained::CsClassification(tune_cs_classifier(&pool(train), &pool(val), exec)?.0)
        }
        (ModelKind::Dist, _) => Trained::Dist(DistanceModel::fit(train, ridge()?, config.dist)?),
        (ModelKind::Proto, _) => Trained::Proto(ProtoNet::train(train, val, config.proto.clone())?),
        (ModelKind::Tr, task) => Trained::Tr(InContextTransformer::train(train, val, task, config.transformer.clone(), exec)?),
    })
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Inference seed for one speaker in one iteration.
pub fn inference_seed(plan_seed: u64, it: Iteration, speaker: usize) -> u64 {
    mix(mix(mix(plan_seed) ^ it.fold as u64) ^ ((it.ordering as u64) << 32) ^ speaker as u64)
}

fn ordered<'a>(plan: &EvalPlan, it: Iteration, seq: &'a SpeakerSequence) -> Vec<&'a Observation> {
    let obs = seq.observations();
    plan.ordering(it, seq).into_iter().map(|j| &obs[j]).collect()
}

fn evaluate_model(
    models: &FoldModels,
    kind: ModelKind,
    task: Task,
    dataset: &Dataset,
    plan: &EvalPlan,
    it: Iteration,
) -> Result<ModelRun, ModelError> {
    let fold = &plan.folds()[it.fold];
    let calibration = if task == Task::Classification {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for &s in &fold.val {
            let seq = &dataset.speakers()[s];
            let o = ordered(plan, it, seq);
            for (p, obs) in models.score_sequence(kind, task, &o, inference_seed(plan.seed(), it, s))?.iter().zip(&o) {
                if let Some(v) = p {
                    scores.push(*v);
                    labels.push(obs.target.label());
                }
            }
        }
        let c = calibrate_threshold(&scores, &labels);
        if c.fallback {
            log::warn!("{kind} fold {} ordering {}: degenerate validation, threshold falls back", it.fold, it.ordering);
        }
        Some(c)
    } else {
        None
    };
    let max_len = fold.test.iter().map(|&s| dataset.speakers()[s].len()).max().unwrap_or(0);
    let mut run = ModelRun {
        model: kind,
        iteration: it,
        calibration,
        points: Vec::new(),
        available: vec![0; max_len],
        skipped: vec![0; max_len],
    };
    for &s in &fold.test {
        let seq = &dataset.speakers()[s];
        let o = ordered(plan, it, seq);
        let scores = models.score_sequence(kind, task, &o, inference_seed(plan.seed(), it, s))?;
        for (t, (p, obs)) in scores.iter().zip(&o).enumerate() {
            run.available[t] += 1;
            match p {
                Some(score) => run.points.push(Point { speaker: s, t, score: *score, hours: obs.target.hours() }),
                None => run.skipped[t] += 1,
            }
        }
    }
    Ok(run)
}

/// Runs every (fold, ordering) iteration of the plan: models are trained once
/// per fold on train speakers, tuned on validation speakers, then scored on
/// test speakers at every support size under the iteration's ordering.
pub fn run_protocol(dataset: &Dataset, config: &RunConfig, exec: Exec) -> Result<MetricReport, HarnessError> {
    config.validate()?;
    let plan = config.plan(dataset)?;
    run_with_plan(dataset, &plan, config, exec)
}

pub fn run_with_plan(
    dataset: &Dataset,
    plan: &EvalPlan,
    config: &RunConfig,
    exec: Exec,
) -> Result<MetricReport, HarnessError> {
    config.validate()?;
    let dim = dataset.embedding_dim();
    let n_folds = config.max_folds.map_or(plan.folds().len(), |k| k.min(plan.folds().len()));
    let fold_models: Vec<FoldModels> = exec.map_range(n_folds, |f| {
        let fold = &plan.folds()[f];
        FoldModels::train(config, &dataset.subset(&fold.train), &dataset.subset(&fold.val), dim, exec)
    });
    let iterations: Vec<Iteration> = plan.iterations().into_iter().filter(|it| it.fold < n_folds).collect();
    let mut failures = Vec::new();
    let mut digests = Vec::new();
    for (f, m) in fold_models.iter().enumerate() {
        for (model, message) in &m.failures {
            failures.push(Failure { fold: f, ordering: None, model: *model, message: message.clone() });
        }
        for &kind in &config.models {
            if let Some(digest) = m.digest(kind, config.task, plan.seed()) {
                digests.push(ModelDigest { fold: f, model: kind, digest });
            }
        }
    }
    let jobs: Vec<(Iteration, ModelKind)> = iterations
        .iter()
        .flat_map(|&it| config.models.iter().map(move |&k| (it, k)))
        .filter(|&(it, k)| fold_models[it.fold].ready(k, config.task))
        .collect();
    let results = exec.map(&jobs, |&(it, k)| evaluate_model(&fold_models[it.fold], k, config.task, dataset, plan, it));
    let mut runs = Vec::with_capacity(results.len());
    for ((it, k), r) in jobs.iter().zip(results) {
        match r {
            Ok(run) => runs.push(run),
            Err(e) => failures.push(Failure { fold: it.fold, ordering: Some(it.ordering), model: *k, message: e.to_string() }),
        }
    }
    let (rows, coverage) = report::aggregate(config.task, &config.models, &runs, config.max_bucket);
    Ok(MetricReport {
        task: config.task,
        models: config.models.clone(),
        iterations,
        max_bucket: config.max_bucket,
        rows,
        coverage,
        failures,
        digests,
        runs,
    })
}

/// Metric values for one set of points; `None` where a metric is undefined.
pub fn point_metrics(task: Task, points: &[&Point], calibration: Option<&Calibration>) -> Vec<(&'static str, Option<f64>)> {
    let scores: Vec<f64> = points.iter().map(|p| p.score).collect();
    let labels: Vec<bool> = points.iter().map(|p| p.label()).collect();
    let auc = metrics::auc(&scores, &labels).ok();
    match task {
        Task::Regression => {
            let hours: Vec<f64> = points.iter().map(|p| p.hours).collect();
            vec![
                ("auc", auc),
                ("pearson", metrics::pearson(&scores, &hours).ok()),
                ("rmse", metrics::rmse(&scores, &hours).ok()),
            ]
        }
        Task::Classification => {
            let th = calibration.map_or(metrics::FALLBACK_THRESHOLD, |c| c.threshold);
            let conf = metrics::Confusion::at(&scores, &labels, th).ok();
            vec![
                ("auc", auc),
                ("balanced_accuracy", conf.and_then(|c| c.balanced_accuracy().ok())),
                ("precision", conf.and_then(|c| c.precision().ok())),
                ("recall", conf.and_then(|c| c.recall().ok())),
            ]
        }
    }
}

/// Summary over iterations of one metric for points selected by `keep`.
pub fn summarize_runs<'a>(
    task: Task,
    runs: impl Iterator<Item = &'a ModelRun>,
    metric: &str,
    keep: impl Fn(&Point) -> bool,
) -> Option<Summary> {
    let values: Vec<f64> = runs
        .filter_map(|r| {
            let pts: Vec<&Point> = r.points.iter().filter(|p| keep(p)).collect();
            point_metrics(task, &pts, r.calibration.as_ref()).into_iter().find(|(m, _)| *m == metric).and_then(|(_, v)| v)
        })
        .collect();
    Summary::of(&values)
}

#[cfg(test)]
mod tests;
