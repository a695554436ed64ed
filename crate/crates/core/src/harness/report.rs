use serde::Serialize;

use super::{summarize_runs, MetricReport, ModelKind, ModelRun};
use crate::data::Task;

/// Support-size label of the pooled `t in {6, 7}` summary.
pub const SUMMARY_LABEL: &str = "6-7";
const SUMMARY_T: [usize; 2] = [6, 7];

/// One line of the metrics table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub model: String,
    pub task: Task,
    pub support_size: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_iterations: usize,
    pub group: String,
    #[serde(skip)]
    pub ci_low: f64,
    #[serde(skip)]
    pub ci_high: f64,
}

/// Query-point accounting for one model and support-size bucket, summed over iterations.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoverageRow {
    pub model: String,
    pub support_size: String,
    pub available: usize,
    pub predicted: usize,
    pub skipped: usize,
}

pub fn metric_names(task: Task) -> &'static [&'static str] {
    match task {
        Task::Regression => &["auc", "pearson", "rmse"],
        Task::Classification => &["auc", "balanced_accuracy", "precision", "recall"],
    }
}

pub fn bucket_of(t: usize, max_bucket: usize) -> usize {
    t.min(max_bucket)
}

pub fn bucket_label(b: usize, max_bucket: usize) -> String {
    if b >= max_bucket {
        format!("{max_bucket}+")
    } else {
        b.to_string()
    }
}

pub(super) fn aggregate(
    task: Task,
    models: &[ModelKind],
    runs: &[ModelRun],
    max_bucket: usize,
) -> (Vec<MetricRow>, Vec<CoverageRow>) {
    let mut rows = Vec::new();
    let mut coverage = Vec::new();
    for &model in models {
        let mine: Vec<&ModelRun> = runs.iter().filter(|r| r.model == model).collect();
        if mine.is_empty() {
            continue;
        }
        let mut push = |support: String, keep: &dyn Fn(usize) -> bool| {
            for metric in metric_names(task) {
                if let Some(s) = summarize_runs(task, mine.iter().copied(), metric, |p| keep(p.t)) {
                    rows.push(MetricRow {
                        model: model.label().into(),
                        task,
                        support_size: support.clone(),
                        metric: (*metric).into(),
                        mean: s.mean,
                        std: s.std,
                        n_iterations: s.n,
                        group: "all".into(),
                        ci_low: s.ci_low,
                        ci_high: s.ci_high,
                    });
                }
            }
        };
        for b in 0..=max_bucket {
            push(bucket_label(b, max_bucket), &|t| bucket_of(t, max_bucket) == b);
        }
        push(SUMMARY_LABEL.into(), &|t| SUMMARY_T.contains(&t));

        let longest = mine.iter().map(|r| r.available.len()).max().unwrap_or(0);
        let mut avail = vec![0usize; max_bucket + 1];
        let mut skip = vec![0usize; max_bucket + 1];
        for r in &mine {
            for t in 0..longest.min(r.available.len()) {
                avail[bucket_of(t, max_bucket)] += r.available[t];
                skip[bucket_of(t, max_bucket)] += r.skipped[t];
            }
        }
        for b in 0..=max_bucket {
            if avail[b] > 0 {
                coverage.push(CoverageRow {
                    model: model.label().into(),
                    support_size: bucket_label(b, max_bucket),
                    available: avail[b],
                    predicted: avail[b] - skip[b],
                    skipped: skip[b],
                });
            }
        }
    }
    (rows, coverage)
}

fn csv_of<T: Serialize>(rows: impl IntoIterator<Item = T>, empty_header: &[&str]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut any = false;
    for r in rows {
        w.serialize(r).expect("in-memory csv");
        any = true;
    }
    if !any {
        w.write_record(empty_header).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

const METRIC_HEADER: [&str; 8] = ["model", "task", "support_size", "metric", "mean", "std", "n_iterations", "group"];

#[derive(Serialize)]
struct CurveRow<'a> {
    model: &'a str,
    support_size: &'a str,
    metric: &'a str,
    mean: f64,
    std: f64,
    ci_low: f64,
    ci_high: f64,
    n_iterations: usize,
}

/// Fixed-width text table, first column left-aligned.
pub fn aligned(header: &[String], body: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    out.push_str(&line(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>()));
    for row in body {
        out.push_str(&line(row));
    }
    out
}

impl MetricReport {
    /// All metric rows in the long CSV layout.
    pub fn metrics_csv(&self) -> String {
        csv_of(&self.rows, &METRIC_HEADER)
    }

    /// Per-support-size rows with 95% intervals, for plotting.
    pub fn curve_csv(&self) -> String {
        let rows = self.rows.iter().filter(|r| r.support_size != SUMMARY_LABEL).map(|r| CurveRow {
            model: &r.model,
            support_size: &r.support_size,
            metric: &r.metric,
            mean: r.mean,
            std: r.std,
            ci_low: r.ci_low,
            ci_high: r.ci_high,
            n_iterations: r.n_iterations,
        });
        csv_of(rows, &["model", "support_size", "metric", "mean", "std", "ci_low", "ci_high", "n_iterations"])
    }

    pub fn coverage_csv(&self) -> String {
        csv_of(&self.coverage, &["model", "support_size", "available", "predicted", "skipped"])
    }

    /// Rows of one support-size label in the long CSV layout.
    pub fn summary_csv(&self, support: &str) -> String {
        csv_of(self.rows.iter().filter(|r| r.support_size == support), &METRIC_HEADER)
    }

    /// Models by metrics, `mean [std]` per cell.
    pub fn summary_text(&self, support: &str) -> String {
        let metrics = metric_names(self.task);
        let mut header = vec!["Model".to_string()];
        header.extend(metrics.iter().map(|m| m.to_string()));
        let body: Vec<Vec<String>> = self
            .models
            .iter()
            .map(|&m| {
                let mut row = vec![m.label().to_string()];
                for metric in metrics {
                    row.push(match self.row(m, support, metric) {
                        Some(r) => format!("{:.3} [{:.3}]", r.mean, r.std),
                        None => "n/a".into(),
                    });
                }
                row
            })
            .collect();
        format!(
            "{} task, support size {support}, mean [std] over {} iterations\n{}",
            self.task,
            self.iterations.len(),
            aligned(&header, &body)
        )
    }
}
