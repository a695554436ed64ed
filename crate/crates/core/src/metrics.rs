//! Classification and regression metrics, threshold calibration and the
//! demographic confound audit.

use std::collections::BTreeMap;

use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("metric undefined: only one class present")]
    SingleClass,
    #[error("metric undefined: zero variance")]
    ZeroVariance,
    #[error("metric undefined: need at least {0} points")]
    TooFew(usize),
    #[error("metric undefined: empty denominator for {0}")]
    EmptyDenominator(&'static str),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("metric undefined: fewer than two groups")]
    SingleGroup,
}

type Result<T> = std::result::Result<T, MetricError>;

fn same_len(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(MetricError::LengthMismatch(a, b))
    }
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half (Mann-Whitney U over average ranks).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    same_len(scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their average.
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    /// Predicted positive iff `score >= threshold`.
    pub fn at(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Self> {
        same_len(scores.len(), labels.len())?;
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn precision(&self) -> Result<f64> {
        let d = self.tp + self.fp;
        if d == 0 {
            return Err(MetricError::EmptyDenominator("precision"));
        }
        Ok(self.tp as f64 / d as f64)
    }

    pub fn recall(&self) -> Result<f64> {
        let d = self.tp + self.fn_;
        if d == 0 {
            return Err(MetricError::EmptyDenominator("recall"));
        }
        Ok(self.tp as f64 / d as f64)
    }

    pub fn specificity(&self) -> Result<f64> {
        let d = self.tn + self.fp;
        if d == 0 {
            return Err(MetricError::EmptyDenominator("specificity"));
        }
        Ok(self.tn as f64 / d as f64)
    }

    /// Mean of true-positive and true-negative rates.
    pub fn balanced_accuracy(&self) -> Result<f64> {
        match (self.recall(), self.specificity()) {
            (Ok(r), Ok(s)) => Ok((r + s) / 2.0),
            _ => Err(MetricError::SingleClass),
        }
    }
}

pub fn precision(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    Confusion::at(scores, labels, threshold)?.precision()
}

pub fn recall(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    Confusion::at(scores, labels, threshold)?.recall()
}

pub fn balanced_accuracy(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    Confusion::at(scores, labels, threshold)?.balanced_accuracy()
}

pub fn pearson(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(pred.len(), truth.len())?;
    if pred.len() < 2 {
        return Err(MetricError::TooFew(2));
    }
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = truth.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        let (dp, dt) = (p - mp, t - mt);
        sxy += dp * dt;
        sxx += dp * dp;
        syy += dt * dt;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(pred.len(), truth.len())?;
    if pred.is_empty() {
        return Err(MetricError::TooFew(1));
    }
    let mse = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64;
    Ok(mse.sqrt())
}

/// Chosen decision threshold; `fallback` is set when validation could not
/// support a sweep and 0.5 was used instead.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Calibration {
    pub threshold: f64,
    pub fallback: bool,
}

pub const FALLBACK_THRESHOLD: f64 = 0.5;

/// Candidate thresholds: `-inf`, midpoints between adjacent distinct sorted
/// scores, `+inf`.
pub fn threshold_candidates(scores: &[f64]) -> Vec<f64> {
    let mut s: Vec<f64> = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut c = Vec::with_capacity(s.len() + 1);
    c.push(f64::NEG_INFINITY);
    c.extend(s.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    c.push(f64::INFINITY);
    c
}

/// Threshold minimising `|precision - recall|` on validation scores; ties go to
/// higher balanced accuracy, then the lower threshold. Candidates where
/// precision is undefined are skipped.
pub fn calibrate_threshold(scores: &[f64], labels: &[bool]) -> Calibration {
    let fallback = Calibration { threshold: FALLBACK_THRESHOLD, fallback: true };
    if scores.len() != labels.len() || !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
        return fallback;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    // Sweep upward: at candidate c, positives are the scores above c.
    let cands = threshold_candidates(scores);
    let mut best: Option<(f64, f64, f64)> = None;
    let mut below = 0;
    let (mut fn_, mut tn) = (0usize, 0usize);
    for &c in &cands {
        while below < order.len() && scores[order[below]] < c {
            if labels[order[below]] {
                fn_ += 1;
            } else {
                tn += 1;
            }
            below += 1;
        }
        let conf = Confusion { tp: n_pos - fn_, fp: n_neg - tn, tn, fn_ };
        let (Ok(p), Ok(r), Ok(b)) = (conf.precision(), conf.recall(), conf.balanced_accuracy()) else {
            continue;
        };
        let gap = (p - r).abs();
        let better = match best {
            None => true,
            Some((bg, bb, _)) => gap < bg || (gap == bg && b > bb),
        };
        if better {
            best = Some((gap, b, c));
        }
    }
    match best {
        Some((_, _, threshold)) => Calibration { threshold, fallback: false },
        None => fallback,
    }
}

/// AUC of predicting labels from group membership alone, each point scored by
/// its group's positive rate.
pub fn confound_aware_auc<G: Ord + Clone>(groups: &[G], labels: &[bool]) -> Result<f64> {
    same_len(groups.len(), labels.len())?;
    let mut rates: BTreeMap<G, (usize, usize)> = BTreeMap::new();
    for (g, &l) in groups.iter().zip(labels) {
        let e = rates.entry(g.clone()).or_default();
        e.0 += usize::from(l);
        e.1 += 1;
    }
    if rates.len() < 2 {
        return Err(MetricError::SingleGroup);
    }
    let scores: Vec<f64> = groups
        .iter()
        .map(|g| {
            let (p, n) = rates[g];
            p as f64 / n as f64
        })
        .collect();
    auc(&scores, labels)
}

/// Mean, sample standard deviation and normal-approximation 95% interval of
/// per-iteration values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let half = 1.96 * std / (n as f64).sqrt();
        Some(Summary { mean, std, n, ci_low: mean - half, ci_high: mean + half })
    }
}

/// Scores with labels, optional hours and optional group tags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub hours: Vec<f64>,
    pub groups: Vec<String>,
}

/// One row of a per-group table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupRow {
    pub group: String,
    /// Mean number of points per replicate.
    pub mean_points: f64,
    /// `None` when the group's AUC was undefined in every replicate.
    pub auc: Option<Summary>,
    pub undefined_replicates: usize,
}

/// Per-group AUC across replicates (e.g. evaluation iterations). Rows appear
/// for every group with at least one point, sorted by name.
pub fn group_report(replicates: &[ScoredSet]) -> Vec<GroupRow> {
    let mut per_group: BTreeMap<String, Vec<(usize, Result<f64>)>> = BTreeMap::new();
    for rep in replicates {
        let mut split: BTreeMap<&str, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
        for ((s, l), g) in rep.scores.iter().zip(&rep.labels).zip(&rep.groups) {
            let e = split.entry(g.as_str()).or_default();
            e.0.push(*s);
            e.1.push(*l);
        }
        for (g, (s, l)) in split {
            per_group.entry(g.to_string()).or_default().push((s.len(), auc(&s, &l)));
        }
    }
    let n_rep = replicates.len().max(1) as f64;
    per_group
        .into_iter()
        .map(|(group, vals)| {
            let points: usize = vals.iter().map(|v| v.0).sum();
            let ok: Vec<f64> = vals.iter().filter_map(|v| v.1.as_ref().ok().copied()).collect();
            GroupRow {
                group,
                mean_points: points as f64 / n_rep,
                auc: Summary::of(&ok),
                undefined_replicates: vals.len() - ok.len(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive positive/negative pair counting.
    fn auc_by_pairs(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    /// Exhaustive sweep with the same objective and tie-breaks.
    fn threshold_by_sweep(scores: &[f64], labels: &[bool]) -> f64 {
        let mut best: Option<(f64, f64, f64)> = None;
        for c in threshold_candidates(scores) {
            let conf = Confusion::at(scores, labels, c).unwrap();
            let (Ok(p), Ok(r), Ok(b)) = (conf.precision(), conf.recall(), conf.balanced_accuracy()) else { continue };
            let key = ((p - r).abs(), b, c);
            best = match best {
                Some(k) if !(key.0 < k.0 || (key.0 == k.0 && key.1 > k.1) || (key.0 == k.0 && key.1 == k.1 && key.2 < k.2)) => Some(k),
                _ => Some(key),
            };
        }
        best.unwrap().2
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 5], &[true, false, true, false, false]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.2], &[true, true]), Err(MetricError::SingleClass));
    }

    #[test]
    fn confusion_examples() {
        let labels = [true, false, true, false];
        let preds = [1.0, 0.0, 0.0, 0.0];
        assert_eq!(recall(&preds, &labels, 0.5).unwrap(), 0.5);
        assert_eq!(precision(&preds, &labels, 0.5).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&preds, &labels, 0.5).unwrap(), 0.75);
        // Everything predicted positive.
        let all = [1.0; 4];
        assert_eq!(recall(&all, &labels, 0.5).unwrap(), 1.0);
        assert_eq!(precision(&all, &labels, 0.5).unwrap(), 0.5);
        assert_eq!(precision(&[0.0; 4], &labels, 0.5), Err(MetricError::EmptyDenominator("precision")));
        let perfect = [1.0, 0.0, 1.0, 0.0];
        assert_eq!(balanced_accuracy(&perfect, &labels, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn regression_examples() {
        let t = [1.0, 4.0, 2.0, 8.0];
        assert!((pearson(&t, &t).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(rmse(&t, &t).unwrap(), 0.0);
        let neg: Vec<f64> = t.iter().map(|v| -v).collect();
        assert!((pearson(&neg, &t).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]), Err(MetricError::ZeroVariance));
        assert!((rmse(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap() - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn calibration_examples() {
        let c = calibrate_threshold(&[0.1, 0.2, 0.6, 0.9], &[false, false, true, true]);
        assert_eq!(c, Calibration { threshold: 0.4, fallback: false });
        let degenerate = calibrate_threshold(&[0.1, 0.2], &[true, true]);
        assert!(degenerate.fallback);
        assert_eq!(degenerate.threshold, 0.5);
    }

    #[test]
    fn confound_examples() {
        let g = ["a", "a", "b", "b"];
        assert_eq!(confound_aware_auc(&g, &[true, false, true, false]).unwrap(), 0.5);
        assert_eq!(confound_aware_auc(&g, &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(confound_aware_auc(&["a", "a"], &[true, false]), Err(MetricError::SingleGroup));
    }

    #[test]
    fn group_report_rows() {
        let rep = ScoredSet {
            scores: vec![0.1, 0.9, 0.1, 0.9, 0.5],
            labels: vec![false, true, false, true, true],
            hours: vec![],
            groups: vec!["a".into(), "a".into(), "b".into(), "b".into(), "c".into()],
        };
        let rows = group_report(&[rep.clone(), rep]);
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].auc, rows[1].auc);
        assert!(rows[2].auc.is_none());
        assert_eq!(rows[2].undefined_replicates, 2);
    }

    fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec((0i32..12).prop_map(|v| v as f64 / 4.0), n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
        .prop_filter("both classes", |(_, l)| l.iter().any(|&x| x) && l.iter().any(|&x| !x))
    }

    proptest! {
        #[test]
        fn auc_equals_pair_counting((s, l) in scored()) {
            prop_assert_eq!(auc(&s, &l).unwrap(), auc_by_pairs(&s, &l));
        }

        #[test]
        fn auc_invariant_under_monotone_maps((s, l) in scored()) {
            let mapped: Vec<f64> = s.iter().map(|v| (v * 3.0).exp() - 7.0).collect();
            prop_assert_eq!(auc(&s, &l).unwrap(), auc(&mapped, &l).unwrap());
        }

        #[test]
        fn auc_complement_for_distinct_scores(l in prop::collection::vec(any::<bool>(), 2..30), seed in 0u64..1000) {
            prop_assume!(l.iter().any(|&x| x) && l.iter().any(|&x| !x));
            let s: Vec<f64> = (0..l.len()).map(|i| ((i as u64 * 7919 + seed) % 1009) as f64 + i as f64 * 1e-6).collect();
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            prop_assert!((auc(&s, &l).unwrap() + auc(&neg, &l).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn calibration_matches_sweep((s, l) in scored()) {
            let c = calibrate_threshold(&s, &l);
            prop_assert!(!c.fallback);
            prop_assert_eq!(c.threshold, threshold_by_sweep(&s, &l));
        }

        #[test]
        fn rmse_nonnegative(p in prop::collection::vec(-10.0f64..10.0, 1..20)) {
            let t: Vec<f64> = p.iter().map(|v| v * 0.5 + 1.0).collect();
            let r = rmse(&p, &t).unwrap();
            prop_assert!(r >= 0.0);
            prop_assert_eq!(rmse(&p, &p).unwrap(), 0.0);
        }

        #[test]
        fn pearson_affine_invariant(p in prop::collection::vec(-10.0f64..10.0, 3..20), a in 0.1f64..5.0, b in -5.0f64..5.0) {
            let t: Vec<f64> = p.iter().enumerate().map(|(i, v)| v.sin() + i as f64 * 0.1).collect();
            if let Ok(r) = pearson(&p, &t) {
                let q: Vec<f64> = p.iter().map(|v| a * v + b).collect();
                prop_assert!((pearson(&q, &t).unwrap() - r).abs() < 1e-9);
            }
        }
    }
}
