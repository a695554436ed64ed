//! Sequence-effect control: the transformer sees only dataset-mean embeddings,
//! so any skill must come from the order of labels in its context.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::report::aligned;
use super::{mix, HarnessError};
use crate::data::{Dataset, EvalPlan, Observation, SpeakerSequence, Task};
use crate::exec::Exec;
use crate::ictransformer::{InContextTransformer, TransformerConfig};
use crate::metrics::{self, Summary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceRegime {
    Periodic,
    Balanced,
    Random,
}

impl SequenceRegime {
    pub const ALL: [SequenceRegime; 3] = [SequenceRegime::Periodic, SequenceRegime::Balanced, SequenceRegime::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            SequenceRegime::Periodic => "Periodic",
            SequenceRegime::Balanced => "Balanced",
            SequenceRegime::Random => "Random",
        }
    }
}

impl fmt::Display for SequenceRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SequenceRegime {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "periodic" => Ok(SequenceRegime::Periodic),
            "balanced" => Ok(SequenceRegime::Balanced),
            "random" => Ok(SequenceRegime::Random),
            other => Err(HarnessError::Config(format!("unknown sequence regime '{other}'"))),
        }
    }
}

/// Orders (and possibly subsets) one speaker's observations under `regime`.
///
/// Periodic: alternating classes from a random starting class, `2 min(n+, n-)`
/// long. Balanced: `min(n+, n-, len / 2)` of each class in random order.
/// Random: a uniform permutation of all observations. Speakers lacking a class
/// yield an empty sequence under Periodic and Balanced.
pub fn arrange<'a, R: Rng + ?Sized>(
    regime: SequenceRegime,
    obs: &[&'a Observation],
    balanced_len: usize,
    rng: &mut R,
) -> Vec<&'a Observation> {
    let mut all = obs.to_vec();
    all.shuffle(rng);
    if regime == SequenceRegime::Random {
        return all;
    }
    let (pos, neg): (Vec<&Observation>, Vec<&Observation>) = all.into_iter().partition(|o| o.target.label());
    match regime {
        SequenceRegime::Periodic => {
            let k = pos.len().min(neg.len());
            let first_pos = rng.gen::<bool>();
            let (a, b) = if first_pos { (&pos, &neg) } else { (&neg, &pos) };
            (0..k).flat_map(|i| [a[i], b[i]]).collect()
        }
        SequenceRegime::Balanced => {
            let k = pos.len().min(neg.len()).min(balanced_len / 2);
            let mut out: Vec<&Observation> = pos[..k].iter().chain(&neg[..k]).copied().collect();
            out.shuffle(rng);
            out
        }
        SequenceRegime::Random => unreachable!(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NullConfig {
    pub n_folds: usize,
    /// Folds actually trained and evaluated.
    pub folds_used: usize,
    /// Test arrangements per fold and test regime.
    pub n_orderings: usize,
    pub plan_seed: u64,
    pub balanced_len: usize,
    /// Query positions below this support size are not scored.
    pub min_support: usize,
    pub transformer: TransformerConfig,
}

impl Default for NullConfig {
    fn default() -> Self {
        NullConfig {
            n_folds: 5,
            folds_used: 2,
            n_orderings: 5,
            plan_seed: 2024,
            balanced_len: 8,
            min_support: 1,
            transformer: TransformerConfig { steps: 400, eval_every: 25, ..TransformerConfig::desk() },
        }
    }
}

/// Train regime by test regime AUC, summarised over (fold, arrangement) replicates.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NullTable {
    pub regimes: Vec<SequenceRegime>,
    /// `cells[train][test]`
    pub cells: Vec<Vec<Option<Summary>>>,
}

impl NullTable {
    pub fn cell(&self, train: SequenceRegime, test: SequenceRegime) -> Option<Summary> {
        let i = self.regimes.iter().position(|&r| r == train)?;
        let j = self.regimes.iter().position(|&r| r == test)?;
        self.cells[i][j]
    }

    pub fn to_text(&self) -> String {
        let mut header = vec!["Trained on \\ Tested on".to_string()];
        header.extend(self.regimes.iter().map(|r| r.to_string()));
        let body: Vec<Vec<String>> = self
            .regimes
            .iter()
            .zip(&self.cells)
            .map(|(r, row)| {
                let mut line = vec![r.to_string()];
                line.extend(row.iter().map(|c| match c {
                    Some(s) => format!("{:.3} [{:.3}]", s.mean, s.std),
                    None => "n/a".into(),
                }));
                line
            })
            .collect();
        format!("Null model AUC, mean [std]\n{}", aligned(&header, &body))
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["trained_on", "tested_on", "mean", "std", "n_replicates"]).expect("in-memory csv");
        for (r, row) in self.regimes.iter().zip(&self.cells) {
            for (c, cell) in self.regimes.iter().zip(row) {
                let (m, s, n) = cell.map_or((String::new(), String::new(), 0), |s| (s.mean.to_string(), s.std.to_string(), s.n));
                w.write_record([r.as_str(), c.as_str(), &m, &s, &n.to_string()]).expect("in-memory csv");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }
}

fn regime_seed(base: u64, fold: usize, ordering: usize, regime: SequenceRegime) -> u64 {
    mix(mix(mix(base) ^ fold as u64) ^ ((ordering as u64) << 8) ^ regime as u64)
}

/// Trains the classification transformer on mean-embedding sequences arranged
/// under each training regime and scores held-out speakers arranged under
/// each test regime.
pub fn null_model_experiment(dataset: &Dataset, config: &NullConfig, exec: Exec) -> Result<NullTable, HarnessError> {
    config.transformer.validate()?;
    if config.balanced_len < 2 || config.folds_used == 0 || config.n_orderings == 0 {
        return Err(HarnessError::Config("null model needs balanced_len >= 2 and at least one fold and ordering".into()));
    }
    let null_ds = dataset.with_mean_embeddings();
    let plan = EvalPlan::new(&null_ds, config.n_folds, config.n_orderings, config.plan_seed)?;
    let dim = null_ds.embedding_dim();
    let regimes = SequenceRegime::ALL.to_vec();
    let folds = config.folds_used.min(plan.folds().len());
    let jobs: Vec<(usize, SequenceRegime)> =
        (0..folds).flat_map(|f| regimes.iter().map(move |&r| (f, r))).collect();
    let results = exec.map(&jobs, |&(f, train_regime)| -> Result<Vec<Vec<f64>>, HarnessError> {
        let fold = &plan.folds()[f];
        let train: Vec<&SpeakerSequence> = null_ds.subset(&fold.train);
        let val: Vec<&SpeakerSequence> = null_ds.subset(&fold.val);
        let mut val_rng = ChaCha8Rng::seed_from_u64(regime_seed(config.plan_seed ^ 0x7a1, f, 0, train_regime));
        let val_seqs: Vec<Vec<&Observation>> = val
            .iter()
            .map(|s| arrange(train_regime, &s.observations().iter().collect::<Vec<_>>(), config.balanced_len, &mut val_rng))
            .filter(|v| !v.is_empty())
            .collect();
        let batch = config.transformer.batch_sequences;
        let sampler = |rng: &mut ChaCha8Rng| {
            let mut out = Vec::with_capacity(batch);
            while out.len() < batch {
                let s = train[rng.gen_range(0..train.len())];
                let v = arrange(train_regime, &s.observations().iter().collect::<Vec<_>>(), config.balanced_len, rng);
                if !v.is_empty() {
                    out.push(v);
                }
            }
            out
        };
        let usable = |s: &&SpeakerSequence| {
            let pos = s.observations().iter().filter(|o| o.target.label()).count();
            train_regime == SequenceRegime::Random || (pos > 0 && pos < s.len())
        };
        if !train.iter().any(usable) {
            return Err(HarnessError::Config("training speakers hold no usable sequences".into()));
        }
        let model = InContextTransformer::train_with(
            dim,
            Task::Classification,
            config.transformer.clone(),
            sampler,
            &val_seqs,
            Exec::Sequential,
        )?;
        let mut per_test = Vec::with_capacity(regimes.len());
        for &test_regime in &regimes {
            let mut aucs = Vec::with_capacity(config.n_orderings);
            for o in 0..config.n_orderings {
                let mut rng = ChaCha8Rng::seed_from_u64(regime_seed(config.plan_seed, f, o + 1, test_regime));
                let seqs: Vec<Vec<&Observation>> = fold
                    .test
                    .iter()
                    .map(|&s| {
                        let obs: Vec<&Observation> = null_ds.speakers()[s].observations().iter().collect();
                        arrange(test_regime, &obs, config.balanced_len, &mut rng)
                    })
                    .filter(|v| !v.is_empty())
                    .collect();
                let seeds: Vec<u64> = (0..seqs.len()).map(|k| rng.gen::<u64>() ^ k as u64).collect();
                let preds = model.predict_sequences(&seqs, &seeds)?;
                let mut scores = Vec::new();
                let mut labels = Vec::new();
                for (seq, p) in seqs.iter().zip(&preds) {
                    for t in config.min_support..seq.len() {
                        scores.push(p[t]);
                        labels.push(seq[t].target.label());
                    }
                }
                if let Ok(a) = metrics::auc(&scores, &labels) {
                    aucs.push(a);
                }
            }
            per_test.push(aucs);
        }
        Ok(per_test)
    });
    let mut pooled: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); regimes.len()]; regimes.len()];
    for (&(_, train_regime), r) in jobs.iter().zip(results) {
        let i = regimes.iter().position(|&x| x == train_regime).expect("listed");
        for (j, aucs) in r?.into_iter().enumerate() {
            pooled[i][j].extend(aucs);
        }
    }
    let cells = pooled.iter().map(|row| row.iter().map(|v| Summary::of(v)).collect()).collect();
    Ok(NullTable { regimes, cells })
}
