//! Speaker-level cross-validation folds, per-speaker sequence orderings and
//! support-set extraction.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AgeGroup, DataError, Dataset, Observation, Sex, SpeakerSequence};

/// Train/validation/test percentages per fold.
pub const SPLIT_PERCENT: [usize; 3] = [70, 10, 20];
/// Minimum number of speakers per fold.
pub const MIN_SPEAKERS_PER_FOLD: usize = 10;

/// Speaker indices (into [`Dataset::speakers`]) of one fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// One (fold, ordering) evaluation iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Iteration {
    pub fold: usize,
    pub ordering: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalPlan {
    seed: u64,
    speaker_ids: Vec<String>,
    folds: Vec<Fold>,
    ordering_seeds: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct FoldExport {
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct PlanExport {
    seed: u64,
    ordering_seeds: Vec<u64>,
    folds: Vec<FoldExport>,
}

/// Largest-remainder apportionment of `total` by integer `weights`; ties in
/// the remainder go to the earlier weight.
pub fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let wsum: usize = weights.iter().sum();
    let mut counts: Vec<usize> = weights.iter().map(|w| total * w / wsum).collect();
    let mut rema: Vec<(usize, usize)> = weights.iter().enumerate().map(|(i, w)| (total * w % wsum, i)).collect();
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = total - counts.iter().sum::<usize>();
    for &(_, i) in rema.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

impl EvalPlan {
    /// Builds `n_folds` speaker-disjoint folds stratified by sex x age group,
    /// and `n_orderings` ordering seeds. Deterministic in `seed`.
    pub fn new(dataset: &Dataset, n_folds: usize, n_orderings: usize, seed: u64) -> Result<Self, DataError> {
        let n = dataset.speakers().len();
        if n_folds < 2 || n_orderings == 0 {
            return Err(DataError::Plan(format!("need >= 2 folds and >= 1 ordering, got {n_folds} x {n_orderings}")));
        }
        if n < n_folds * MIN_SPEAKERS_PER_FOLD {
            return Err(DataError::Plan(format!(
                "{n} speakers is too few for {n_folds} folds (need {})",
                n_folds * MIN_SPEAKERS_PER_FOLD
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut strata: BTreeMap<(Sex, AgeGroup), Vec<usize>> = BTreeMap::new();
        for (i, s) in dataset.speakers().iter().enumerate() {
            let d = s.demographics();
            strata.entry((d.sex, d.age_group)).or_default().push(i);
        }
        // Spread each stratum evenly along one list so contiguous blocks
        // inherit the overall stratum proportions.
        let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(n);
        for (si, members) in strata.values_mut().enumerate() {
            members.shuffle(&mut rng);
            let m = members.len() as f64;
            for (r, &i) in members.iter().enumerate() {
                keyed.push(((r as f64 + 0.5) / m, si, i));
            }
        }
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let order: Vec<usize> = keyed.into_iter().map(|(_, _, i)| i).collect();

        let blocks = apportion(n, &vec![1; n_folds]);
        let n_val = apportion(n, &SPLIT_PERCENT)[1];
        let mut folds = Vec::with_capacity(n_folds);
        let mut offset = 0;
        for &b in &blocks {
            let test: Vec<usize> = order[offset..offset + b].to_vec();
            let val: Vec<usize> = (0..n_val).map(|k| order[(offset + b + k) % n]).collect();
            let rest_start = offset + b + n_val;
            let train: Vec<usize> = (0..n - b - n_val).map(|k| order[(rest_start + k) % n]).collect();
            folds.push(Fold { train, val, test });
            offset += b;
        }
        let ordering_seeds = (0..n_orderings).map(|_| rng.gen()).collect();
        let speaker_ids = dataset.speakers().iter().map(|s| s.speaker_id().to_string()).collect();
        Ok(EvalPlan { seed, speaker_ids, folds, ordering_seeds })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn folds(&self) -> &[Fold] {
        &self.folds
    }

    pub fn n_orderings(&self) -> usize {
        self.ordering_seeds.len()
    }

    pub fn ordering_seeds(&self) -> &[u64] {
        &self.ordering_seeds
    }

    /// All (fold, ordering) pairs, fold-major.
    pub fn iterations(&self) -> Vec<Iteration> {
        (0..self.folds.len())
            .flat_map(|fold| (0..self.n_orderings()).map(move |ordering| Iteration { fold, ordering }))
            .collect()
    }

    /// Uniform random permutation of `0..seq.len()` for this iteration and speaker.
    pub fn ordering(&self, it: Iteration, seq: &SpeakerSequence) -> Vec<usize> {
        let s = splitmix(self.ordering_seeds[it.ordering] ^ splitmix(it.fold as u64) ^ fnv1a(seq.speaker_id().as_bytes()));
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut perm: Vec<usize> = (0..seq.len()).collect();
        perm.shuffle(&mut rng);
        perm
    }

    pub fn to_json(&self) -> String {
        let ids = |v: &[usize]| v.iter().map(|&i| self.speaker_ids[i].clone()).collect();
        let export = PlanExport {
            seed: self.seed,
            ordering_seeds: self.ordering_seeds.clone(),
            folds: self.folds.iter().map(|f| FoldExport { train: ids(&f.train), val: ids(&f.val), test: ids(&f.test) }).collect(),
        };
        serde_json::to_string_pretty(&export).expect("plan serialises")
    }

    /// Rebuilds an exported plan against `dataset`.
    pub fn from_json(json: &str, dataset: &Dataset) -> Result<Self, DataError> {
        let export: PlanExport = serde_json::from_str(json).map_err(|e| DataError::Plan(e.to_string()))?;
        let index: std::collections::HashMap<&str, usize> =
            dataset.speakers().iter().enumerate().map(|(i, s)| (s.speaker_id(), i)).collect();
        let lookup = |ids: &[String]| -> Result<Vec<usize>, DataError> {
            ids.iter()
                .map(|id| index.get(id.as_str()).copied().ok_or_else(|| DataError::Plan(format!("unknown speaker '{id}'"))))
                .collect()
        };
        let folds = export
            .folds
            .iter()
            .map(|f| Ok(Fold { train: lookup(&f.train)?, val: lookup(&f.val)?, test: lookup(&f.test)? }))
            .collect::<Result<Vec<_>, DataError>>()?;
        let speaker_ids = dataset.speakers().iter().map(|s| s.speaker_id().to_string()).collect();
        Ok(EvalPlan { seed: export.seed, speaker_ids, folds, ordering_seeds: export.ordering_seeds })
    }
}

/// Observations preceding the query position under some ordering.
#[derive(Clone, Debug, Default)]
pub struct SupportSet<'a> {
    pairs: Vec<&'a Observation>,
}

impl<'a> SupportSet<'a> {
    pub fn new(pairs: Vec<&'a Observation>) -> Self {
        SupportSet { pairs }
    }

    pub fn empty() -> Self {
        SupportSet { pairs: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[&'a Observation] {
        &self.pairs
    }

    pub fn iter(&self) -> impl Iterator<Item = &'a Observation> + '_ {
        self.pairs.iter().copied()
    }
}

/// The first `t` observations under `ordering` as support, and the next one as query.
pub fn support_set_at<'a>(
    seq: &'a SpeakerSequence,
    ordering: &[usize],
    t: usize,
) -> Result<(SupportSet<'a>, &'a Observation), DataError> {
    if ordering.len() != seq.len() {
        return Err(DataError::Invalid(format!(
            "ordering of length {} for a sequence of length {}",
            ordering.len(),
            seq.len()
        )));
    }
    if t >= seq.len() {
        return Err(DataError::Index { t, len: seq.len() });
    }
    let obs = seq.observations();
    let pairs = ordering[..t].iter().map(|&j| &obs[j]).collect();
    Ok((SupportSet { pairs }, &obs[ordering[t]]))
}
