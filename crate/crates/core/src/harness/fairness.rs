use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::report::aligned;
use super::{HarnessError, MetricReport, ModelKind};
use crate::data::{Dataset, DemographicField};
use crate::metrics::{confound_aware_auc, group_report, ScoredSet, Summary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FairnessConfig {
    pub model: ModelKind,
    /// Largest support size included.
    pub max_t: usize,
    /// Groups holding a smaller share of speakers are reported but left out of gaps.
    pub min_group_share: f64,
}

impl Default for FairnessConfig {
    fn default() -> Self {
        FairnessConfig { model: ModelKind::Tr, max_t: 7, min_group_share: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FairnessRow {
    pub field: DemographicField,
    pub group: String,
    pub n_speakers: usize,
    pub share: f64,
    pub mean_points: f64,
    pub auc: Option<Summary>,
    pub undefined_replicates: usize,
    /// Below the minimum share; not part of the gap.
    pub small: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FieldAudit {
    pub field: DemographicField,
    /// Largest difference in mean AUC between eligible groups.
    pub gap: Option<f64>,
    /// AUC of the label from group membership alone.
    pub confound_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FairnessReport {
    pub model: ModelKind,
    pub max_t: usize,
    pub rows: Vec<FairnessRow>,
    pub fields: Vec<FieldAudit>,
}

impl FairnessReport {
    pub fn audit(&self, field: DemographicField) -> Option<&FieldAudit> {
        self.fields.iter().find(|f| f.field == field)
    }

    pub fn row(&self, field: DemographicField, group: &str) -> Option<&FairnessRow> {
        self.rows.iter().find(|r| r.field == field && r.group == group)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "model", "field", "group", "n_speakers", "share", "mean_points", "auc_mean", "auc_std", "ci_low", "ci_high",
            "n_iterations", "undefined_replicates", "small",
        ])
        .expect("in-memory csv");
        for r in &self.rows {
            let (m, s, lo, hi, n) = r.auc.map_or(Default::default(), |a| {
                (a.mean.to_string(), a.std.to_string(), a.ci_low.to_string(), a.ci_high.to_string(), a.n.to_string())
            });
            w.write_record([
                self.model.label(),
                r.field.as_str(),
                &r.group,
                &r.n_speakers.to_string(),
                &r.share.to_string(),
                &r.mean_points.to_string(),
                &m,
                &s,
                &lo,
                &hi,
                &n,
                &r.undefined_replicates.to_string(),
                if r.small { "true" } else { "false" },
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }

    pub fn audit_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["model", "field", "gap", "confound_auc"]).expect("in-memory csv");
        let f = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for a in &self.fields {
            w.write_record([self.model.label(), a.field.as_str(), &f(a.gap), &f(a.confound_auc)]).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }

    pub fn to_text(&self) -> String {
        let header: Vec<String> =
            ["Field", "Group", "Speakers", "Points", "AUC mean [std]", "95% CI"].iter().map(|s| s.to_string()).collect();
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let (auc, ci) = match r.auc {
                    Some(a) => (format!("{:.3} [{:.3}]", a.mean, a.std), format!("{:.3}-{:.3}", a.ci_low, a.ci_high)),
                    None => ("undefined".into(), String::new()),
                };
                let group = if r.small { format!("{} (small)", r.group) } else { r.group.clone() };
                vec![r.field.as_str().into(), group, r.n_speakers.to_string(), format!("{:.1}", r.mean_points), auc, ci]
            })
            .collect();
        let f = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
        let mut out = format!("{} AUC by group, support sizes 0-{}\n{}", self.model, self.max_t, aligned(&header, &body));
        out.push('\n');
        let header: Vec<String> = ["Field", "Gap", "Confound AUC"].iter().map(|s| s.to_string()).collect();
        let body: Vec<Vec<String>> =
            self.fields.iter().map(|a| vec![a.field.as_str().into(), f(a.gap), f(a.confound_auc)]).collect();
        out.push_str(&aligned(&header, &body));
        out
    }
}

/// Per-group AUC of one model over points with support size up to `max_t`,
/// with one replicate per evaluation iteration, plus a confound audit of each
/// demographic field over the whole dataset.
pub fn fairness_report(
    report: &MetricReport,
    dataset: &Dataset,
    config: &FairnessConfig,
) -> Result<FairnessReport, HarnessError> {
    let runs: Vec<_> = report.runs_of(config.model).collect();
    if runs.is_empty() {
        return Err(HarnessError::Config(format!("no predictions from {} to audit", config.model)));
    }
    let n_speakers = dataset.speakers().len().max(1);
    let mut rows = Vec::new();
    let mut fields = Vec::new();
    for field in DemographicField::ALL {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for s in dataset.speakers() {
            *counts.entry(field.group_of(&s.demographics())).or_default() += 1;
        }
        let replicates: Vec<ScoredSet> = runs
            .iter()
            .map(|r| {
                let mut set = ScoredSet::default();
                for p in r.points.iter().filter(|p| p.t <= config.max_t) {
                    set.scores.push(p.score);
                    set.labels.push(p.label());
                    set.hours.push(p.hours);
                    set.groups.push(field.group_of(&dataset.speakers()[p.speaker].demographics()).to_string());
                }
                set
            })
            .collect();
        let mut eligible = Vec::new();
        for g in group_report(&replicates) {
            let n = counts.get(g.group.as_str()).copied().unwrap_or(0);
            let share = n as f64 / n_speakers as f64;
            let small = share < config.min_group_share;
            if !small {
                if let Some(a) = g.auc {
                    eligible.push(a.mean);
                }
            }
            rows.push(FairnessRow {
                field,
                group: g.group,
                n_speakers: n,
                share,
                mean_points: g.mean_points,
                auc: g.auc,
                undefined_replicates: g.undefined_replicates,
                small,
            });
        }
        let gap = (eligible.len() >= 2).then(|| {
            let hi = eligible.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = eligible.iter().cloned().fold(f64::INFINITY, f64::min);
            hi - lo
        });
        let groups: Vec<&str> = dataset.observations().map(|o| field.group_of(&o.demographics)).collect();
        let labels: Vec<bool> = dataset.observations().map(|o| o.target.label()).collect();
        fields.push(FieldAudit { field, gap, confound_auc: confound_aware_auc(&groups, &labels).ok() });
    }
    Ok(FairnessReport { model: config.model, max_t: config.max_t, rows, fields })
}
