use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use fatigue_core::data::{load_dataset, write_dataset, Dataset, Task};
use fatigue_core::exec::configure_threads;
use fatigue_core::harness::{
    fairness_report, null_model_experiment, run_protocol, train_family, FairnessConfig, MetricReport, ModelKind,
    RunConfig, SUMMARY_LABEL,
};
use fatigue_core::synthgen::{generate_cohort, CohortSpec};
use fatigue_core::Exec;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::load_spec;
use crate::config::Config;
use crate::error::CliError;

pub const OUT_ENV: &str = "FATIGUE_OUT_DIR";
const DEFAULT_OUT: &str = "fatigue-out";

pub struct Context {
    pub config: Config,
    pub exec: Exec,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Context {
    /// `--out` when given, otherwise `name` under the output root.
    fn out_path(&self, name: &str) -> PathBuf {
        match &self.out {
            Some(p) => p.clone(),
            None => out_root().join(name),
        }
    }
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

pub fn exec_for(jobs: Option<usize>) -> Result<Exec, CliError> {
    match jobs {
        None => Ok(Exec::Parallel),
        Some(0) => Err(CliError::Usage("--jobs must be at least 1".into())),
        Some(1) => Ok(Exec::Sequential),
        Some(n) => {
            if !configure_threads(n) {
                log::warn!("could not resize the worker pool to {n} threads");
            }
            Ok(Exec::Parallel)
        }
    }
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display()))),
        None => Ok(()),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    ensure_parent(path)?;
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serialises");
    s.push('\n');
    s
}

fn load(path: &Path) -> Result<Dataset, CliError> {
    let (ds, report) = load_dataset(path)?;
    if report.dropped_out_of_range > 0 {
        log::warn!("{}: dropped {} records with hours outside [0, 24]", path.display(), report.dropped_out_of_range);
    }
    log::info!("{}: {} speakers, {} observations", path.display(), ds.speakers().len(), report.kept);
    Ok(ds)
}

fn parse_task(task: Option<&str>, fallback: Task) -> Result<Task, CliError> {
    match task {
        None => Ok(fallback),
        Some(s) => s.parse().map_err(|_| CliError::Usage(format!("unknown task '{s}' (expected regression or classification)"))),
    }
}

fn parse_models(list: &str) -> Result<Vec<ModelKind>, CliError> {
    let mut models = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let m: ModelKind = name.parse()?;
        if !models.contains(&m) {
            models.push(m);
        }
    }
    Ok(models)
}

/// Run configuration after `--task` and `--models` overrides.
fn run_config(base: &RunConfig, task: Option<&str>, models: Option<&str>) -> Result<RunConfig, CliError> {
    let mut run = base.clone();
    let task = parse_task(task, base.task)?;
    if let Some(list) = models {
        run.models = parse_models(list)?;
    } else if task != base.task {
        run.models = ModelKind::defaults(task);
    }
    run.task = task;
    run.validate()?;
    Ok(run)
}

fn write_cohort(ds: &Dataset, spec: &CohortSpec, path: &Path) -> Result<(), CliError> {
    ensure_parent(path)?;
    let file = fs::File::create(path).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    write_dataset(ds, BufWriter::new(file))?;
    write_file(&path.with_extension("spec.json"), to_json(spec))
}

pub fn gen(ctx: &Context, spec: &str) -> Result<(), CliError> {
    let mut spec = if spec == "default" { ctx.config.cohort.clone() } else { load_spec(Path::new(spec))? };
    if let Some(s) = ctx.seed {
        spec.seed = s;
    }
    let ds = generate_cohort(&spec)?;
    let path = ctx.out_path("cohort.jsonl");
    write_cohort(&ds, &spec, &path)?;
    let n_obs: usize = ds.speakers().iter().map(|s| s.len()).sum();
    println!("wrote {} speakers, {n_obs} observations to {}", ds.speakers().len(), path.display());
    Ok(())
}

pub fn train(ctx: &Context, data: &Path, model: &str, task: Option<&str>, fold: usize) -> Result<(), CliError> {
    let kind: ModelKind = model.parse()?;
    let task = parse_task(task, ctx.config.run.task)?;
    if kind == ModelKind::Me {
        return Err(CliError::Usage("ME refits on each speaker's history and has no trained artifact".into()));
    }
    if !kind.supports(task) {
        return Err(CliError::Usage(format!("{kind} is classification-only and cannot run the regression task")));
    }
    let run = RunConfig { task, models: vec![kind], ..ctx.config.run.clone() };
    run.validate()?;
    let ds = load(data)?;
    let plan = run.plan(&ds)?;
    let f = plan
        .folds()
        .get(fold)
        .ok_or_else(|| CliError::Usage(format!("fold {fold} out of range (plan has {})", plan.folds().len())))?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| &ds.speakers()[i]).collect::<Vec<_>>();
    let trained = train_family(kind, &run, &pick(&f.train), &pick(&f.val), ctx.exec)?;
    let artifact = trained.artifact(run.plan_seed);
    let name = format!("{}-{}-fold{fold}.fatm", kind.label().to_lowercase(), task_name(task));
    let path = ctx.out_path(&name);
    ensure_parent(&path)?;
    artifact.save(&path)?;
    let log = json!({
        "model": kind.label(),
        "task": task_name(task),
        "fold": fold,
        "digest": artifact.digest(),
        "training": trained.log(),
    });
    write_file(&path.with_extension("log.json"), to_json(&log))?;
    println!("wrote {} (digest {})", path.display(), artifact.digest());
    Ok(())
}

fn task_name(task: Task) -> &'static str {
    match task {
        Task::Regression => "regression",
        Task::Classification => "classification",
    }
}

/// Metric tables of one protocol run into `dir`.
fn write_report(report: &MetricReport, dir: &Path, summary: bool) -> Result<(), CliError> {
    write_file(&dir.join("metrics.csv"), report.metrics_csv())?;
    write_file(&dir.join("coverage.csv"), report.coverage_csv())?;
    write_file(&dir.join("failures.json"), to_json(&report.failures))?;
    if summary {
        write_file(&dir.join(format!("summary_{SUMMARY_LABEL}.csv")), report.summary_csv(SUMMARY_LABEL))?;
        write_file(&dir.join(format!("summary_{SUMMARY_LABEL}.txt")), report.summary_text(SUMMARY_LABEL))?;
    }
    Ok(())
}

fn check_failures(report: &MetricReport) -> Result<(), CliError> {
    if report.failures.is_empty() {
        return Ok(());
    }
    for f in &report.failures {
        log::error!("fold {} {}: {}", f.fold, f.model, f.message);
    }
    Err(CliError::Runtime(format!("{} model failure(s); see failures.json", report.failures.len())))
}

pub fn eval(ctx: &Context, data: &Path, task: Option<&str>, models: Option<&str>, summary: bool) -> Result<(), CliError> {
    let run = run_config(&ctx.config.run, task, models)?;
    let ds = load(data)?;
    let report = run_protocol(&ds, &run, ctx.exec)?;
    let dir = ctx.out_path("eval");
    write_report(&report, &dir, summary)?;
    if summary {
        print!("{}", report.summary_text(SUMMARY_LABEL));
    }
    println!("wrote tables to {}", dir.display());
    check_failures(&report)
}

pub fn curve(ctx: &Context, data: &Path, task: Option<&str>, models: Option<&str>) -> Result<(), CliError> {
    let run = run_config(&ctx.config.run, task, models)?;
    let ds = load(data)?;
    let report = run_protocol(&ds, &run, ctx.exec)?;
    let dir = ctx.out_path("curve");
    write_file(&dir.join("curve.csv"), report.curve_csv())?;
    write_report(&report, &dir, false)?;
    println!("wrote curves to {}", dir.display());
    check_failures(&report)
}

pub fn nullcheck(ctx: &Context, data: Option<&Path>, speakers: usize) -> Result<(), CliError> {
    let ds = match data {
        Some(p) => load(p)?,
        None => generate_cohort(&CohortSpec { n_speakers: speakers, ..ctx.config.cohort.clone() })?,
    };
    let table = null_model_experiment(&ds, &ctx.config.null, ctx.exec)?;
    let dir = ctx.out_path("nullcheck");
    write_file(&dir.join("null_table.csv"), table.to_csv())?;
    write_file(&dir.join("null_table.txt"), table.to_text())?;
    print!("{}", table.to_text());
    Ok(())
}

pub fn fairness(ctx: &Context, data: &Path, model: Option<&str>, task: Option<&str>) -> Result<(), CliError> {
    let mut fc = ctx.config.fairness.clone();
    if let Some(m) = model {
        fc.model = m.parse()?;
    }
    let run = run_config(&ctx.config.run, task, Some(fc.model.label()))?;
    let ds = load(data)?;
    let report = run_protocol(&ds, &run, ctx.exec)?;
    let dir = ctx.out_path("fairness");
    write_fairness(&report, &ds, &fc, &dir)?;
    check_failures(&report)
}

fn write_fairness(report: &MetricReport, ds: &Dataset, fc: &FairnessConfig, dir: &Path) -> Result<(), CliError> {
    let f = fairness_report(report, ds, fc)?;
    write_file(&dir.join("fairness.csv"), f.to_csv())?;
    write_file(&dir.join("fairness_audit.csv"), f.audit_csv())?;
    write_file(&dir.join("fairness.txt"), f.to_text())?;
    print!("{}", f.to_text());
    Ok(())
}

pub fn reproduce(ctx: &Context) -> Result<(), CliError> {
    let root = ctx.out_path("reproduce");
    let cfg = &ctx.config;
    write_file(&root.join("config.toml"), cfg.to_toml())?;

    let data_path = root.join("data").join("cohort.jsonl");
    let ds = (|| {
        let ds = generate_cohort(&cfg.cohort)?;
        write_cohort(&ds, &cfg.cohort, &data_path)?;
        Ok::<_, CliError>(ds)
    })()
    .map_err(|e| e.in_stage("gen"))?;
    log::info!("gen: {} speakers", ds.speakers().len());

    let mut artifacts = BTreeMap::new();
    (|| {
        for task in [Task::Regression, Task::Classification] {
            let run = RunConfig { task, models: ModelKind::defaults(task), ..cfg.run.clone() };
            let plan = run.plan(&ds)?;
            let f = &plan.folds()[0];
            let pick = |idx: &[usize]| idx.iter().map(|&i| &ds.speakers()[i]).collect::<Vec<_>>();
            for kind in ModelKind::defaults(task).into_iter().filter(|&k| k != ModelKind::Me) {
                let trained = train_family(kind, &run, &pick(&f.train), &pick(&f.val), ctx.exec)?;
                let artifact = trained.artifact(run.plan_seed);
                let stem = format!("{}-{}-fold0", kind.label().to_lowercase(), task_name(task));
                let path = root.join("models").join(format!("{stem}.fatm"));
                ensure_parent(&path)?;
                artifact.save(&path)?;
                write_file(&path.with_extension("log.json"), to_json(&trained.log()))?;
                artifacts.insert(stem, artifact.digest());
            }
        }
        Ok::<_, CliError>(())
    })()
    .map_err(|e| e.in_stage("train"))?;

    let mut reports = Vec::new();
    for task in [Task::Regression, Task::Classification] {
        let run = RunConfig { task, models: ModelKind::defaults(task), ..cfg.run.clone() };
        let dir = root.join("eval").join(task_name(task));
        let report = (|| {
            let report = run_protocol(&ds, &run, ctx.exec)?;
            write_report(&report, &dir, true)?;
            check_failures(&report)?;
            Ok::<_, CliError>(report)
        })()
        .map_err(|e| e.in_stage("eval"))?;
        write_file(&dir.join("curve.csv"), report.curve_csv()).map_err(|e| e.in_stage("curve"))?;
        reports.push(report);
    }

    (|| {
        let table = null_model_experiment(&ds, &cfg.null, ctx.exec)?;
        write_file(&root.join("null").join("null_table.csv"), table.to_csv())?;
        write_file(&root.join("null").join("null_table.txt"), table.to_text())
    })()
    .map_err(|e| e.in_stage("nullcheck"))?;

    let fairness_report_src = reports
        .iter()
        .find(|r| r.task == cfg.run.task)
        .expect("both tasks evaluated");
    write_fairness(fairness_report_src, &ds, &cfg.fairness, &root.join("fairness")).map_err(|e| e.in_stage("fairness"))?;

    let manifest = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "seeds": { "cohort": cfg.cohort.seed, "plan": cfg.run.plan_seed, "null": cfg.null.plan_seed },
        "artifacts": artifacts,
        "fold_models": reports.iter().map(|r| json!({ "task": task_name(r.task), "digests": r.digests })).collect::<Vec<_>>(),
        "files": digest_tree(&root)?,
    });
    write_file(&root.join("manifest.json"), to_json(&manifest))?;
    println!("wrote {}", root.join("manifest.json").display());
    Ok(())
}

/// SHA-256 of every file under `root` except the manifest, keyed by relative path.
fn digest_tree(root: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = fs::read_dir(&dir).map_err(|e| CliError::Runtime(format!("cannot list {}: {e}", dir.display())))?;
        for entry in entries {
            let path = entry.map_err(|e| CliError::Runtime(e.to_string()))?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
            if rel == "manifest.json" {
                continue;
            }
            let bytes = fs::read(&path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
            out.insert(rel, hex::encode(Sha256::digest(&bytes)));
        }
    }
    Ok(out)
}
