use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::report::{bucket_label, bucket_of};
use super::*;
use crate::data::{DemographicField, Embedding, Target};
use crate::synthgen::{generate_cohort, CohortSpec};

fn cohort(n: usize, seed: u64) -> Dataset {
    generate_cohort(&CohortSpec { n_speakers: n, embedding_dim: 6, seed, ..CohortSpec::default() }).unwrap()
}

fn tiny_tr() -> TransformerConfig {
    TransformerConfig {
        n_layers: 1,
        n_heads: 2,
        model_dim: 8,
        max_seq_tokens: 64,
        steps: 6,
        batch_sequences: 4,
        chunks: 2,
        eval_every: 3,
        ..TransformerConfig::desk()
    }
}

fn quick(task: Task) -> RunConfig {
    RunConfig {
        task,
        models: ModelKind::defaults(task),
        n_orderings: 2,
        max_folds: Some(2),
        proto: ProtoConfig { episodes: 6, eval_every: 3, val_episodes: 8, ..ProtoConfig::default() },
        transformer: tiny_tr(),
        ..RunConfig::default()
    }
}

#[test]
fn model_names_and_task_compatibility() {
    for m in ModelKind::ALL {
        assert_eq!(m.label().parse::<ModelKind>().unwrap(), m);
    }
    assert!("lstm".parse::<ModelKind>().is_err());
    assert_eq!(ModelKind::defaults(Task::Regression), vec![ModelKind::Cs, ModelKind::Me, ModelKind::Dist, ModelKind::Tr]);
    let bad = RunConfig { models: vec![ModelKind::Proto], ..RunConfig::default() };
    assert!(matches!(bad.validate(), Err(HarnessError::Config(_))));
    let ok = RunConfig { task: Task::Classification, models: vec![ModelKind::Proto], ..RunConfig::default() };
    assert!(ok.validate().is_ok());
}

#[test]
fn buckets_pool_beyond_the_cap() {
    assert_eq!(bucket_of(3, 10), 3);
    assert_eq!(bucket_of(10, 10), 10);
    assert_eq!(bucket_of(27, 10), 10);
    assert_eq!(bucket_label(10, 10), "10+");
    assert_eq!(bucket_label(4, 10), "4");
}

#[test]
fn inference_seeds_differ_across_speakers_and_iterations() {
    let a = inference_seed(1, Iteration { fold: 0, ordering: 0 }, 5);
    assert_ne!(a, inference_seed(1, Iteration { fold: 0, ordering: 0 }, 6));
    assert_ne!(a, inference_seed(1, Iteration { fold: 0, ordering: 1 }, 5));
    assert_ne!(a, inference_seed(1, Iteration { fold: 1, ordering: 0 }, 5));
    assert_eq!(a, inference_seed(1, Iteration { fold: 0, ordering: 0 }, 5));
}

#[test]
fn skip_accounting_balances_in_every_bucket() {
    let ds = cohort(100, 3);
    for task in [Task::Regression, Task::Classification] {
        let report = run_protocol(&ds, &quick(task), Exec::Sequential).unwrap();
        assert!(report.failures.is_empty(), "{:?}", report.failures);
        assert_eq!(report.iterations.len(), 4);
        for run in &report.runs {
            for t in 0..run.available.len() {
                let predicted = run.points.iter().filter(|p| p.t == t).count();
                assert_eq!(predicted + run.skipped[t], run.available[t]);
            }
            let total: usize = run.available.iter().sum();
            let test_points: usize =
                report_fold_test(&ds, &quick(task), run.iteration.fold).iter().map(|&s| ds.speakers()[s].len()).sum();
            assert_eq!(total, test_points);
        }
        for c in &report.coverage {
            assert_eq!(c.predicted + c.skipped, c.available);
        }
        let me0 = report.coverage.iter().find(|c| c.model == "ME" && c.support_size == "0").unwrap();
        assert_eq!(me0.predicted, 0);
        for m in [ModelKind::Cs, ModelKind::Tr] {
            let c = report.coverage.iter().find(|c| c.model == m.label() && c.support_size == "0").unwrap();
            assert_eq!(c.skipped, 0);
        }
        if task == Task::Classification {
            let p0 = report.coverage.iter().find(|c| c.model == "Proto" && c.support_size == "0").unwrap();
            assert_eq!(p0.predicted, 0);
            assert!(report.runs.iter().all(|r| r.calibration.is_some()));
        }
    }
}

fn report_fold_test(ds: &Dataset, config: &RunConfig, fold: usize) -> Vec<usize> {
    config.plan(ds).unwrap().folds()[fold].test.clone()
}

#[test]
fn distance_model_equals_cross_sectional_at_cold_start() {
    let ds = cohort(100, 4);
    let config = RunConfig { models: vec![ModelKind::Cs, ModelKind::Dist], ..quick(Task::Regression) };
    let report = run_protocol(&ds, &config, Exec::Sequential).unwrap();
    for it in &report.iterations {
        let pick = |m: ModelKind| -> Vec<(usize, u64)> {
            let run = report.runs.iter().find(|r| r.model == m && r.iteration == *it).unwrap();
            run.points.iter().filter(|p| p.t == 0).map(|p| (p.speaker, p.score.to_bits())).collect()
        };
        assert_eq!(pick(ModelKind::Cs), pick(ModelKind::Dist));
    }
}

#[test]
fn reports_are_reproducible_and_independent_of_execution() {
    let ds = cohort(80, 5);
    let config = quick(Task::Regression);
    let a = run_protocol(&ds, &config, Exec::Sequential).unwrap();
    let b = run_protocol(&ds, &config, Exec::Parallel).unwrap();
    assert_eq!(a.metrics_csv(), b.metrics_csv());
    assert_eq!(a.coverage_csv(), b.coverage_csv());
    assert_eq!(a.digests, b.digests);
}

#[test]
fn test_targets_never_reach_training_or_calibration() {
    let ds = cohort(100, 6);
    let config = quick(Task::Classification);
    let plan = config.plan(&ds).unwrap();
    let test: std::collections::HashSet<usize> = plan.folds()[0].test.iter().copied().collect();
    let speakers: Vec<SpeakerSequence> = ds
        .speakers()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let obs = s
                .observations()
                .iter()
                .map(|o| {
                    let mut o = o.clone();
                    if test.contains(&i) {
                        o.target = Target::new(24.0 - o.target.hours()).unwrap();
                    }
                    o
                })
                .collect();
            SpeakerSequence::new(s.speaker_id(), obs).unwrap()
        })
        .collect();
    let flipped = Dataset::new(speakers).unwrap();
    let one = RunConfig { max_folds: Some(1), ..config };
    let a = run_with_plan(&ds, &plan, &one, Exec::Sequential).unwrap();
    let b = run_with_plan(&flipped, &plan, &one, Exec::Sequential).unwrap();
    assert_eq!(a.digests, b.digests);
    let cal = |r: &MetricReport| r.runs.iter().map(|x| x.calibration).collect::<Vec<_>>();
    assert_eq!(cal(&a), cal(&b));
    assert_ne!(a.metrics_csv(), b.metrics_csv());
}

#[test]
fn summary_rows_pool_support_sizes_six_and_seven() {
    let ds = cohort(100, 7);
    let config = RunConfig { models: vec![ModelKind::Cs], ..quick(Task::Regression) };
    let report = run_protocol(&ds, &config, Exec::Sequential).unwrap();
    let expected = summarize_runs(Task::Regression, report.runs.iter(), "auc", |p| p.t == 6 || p.t == 7).unwrap();
    let row = report.row(ModelKind::Cs, SUMMARY_LABEL, "auc").unwrap();
    assert_eq!(row.mean, expected.mean);
    assert_eq!(row.n_iterations, 4);
    let text = report.summary_text(SUMMARY_LABEL);
    assert!(text.contains("CS") && text.contains("pearson"));
    let header = report.metrics_csv().lines().next().unwrap().to_string();
    assert_eq!(header, "model,task,support_size,metric,mean,std,n_iterations,group");
    assert!(report.curve_csv().lines().skip(1).all(|l| !l.contains(SUMMARY_LABEL)));
}

fn obs(j: usize, hours: f64) -> Observation {
    Observation {
        speaker_id: "a".into(),
        seq_index: j,
        embedding: Embedding::new(vec![0.0]).unwrap(),
        target: Target::new(hours).unwrap(),
        demographics: crate::data::Demographics {
            sex: crate::data::Sex::Female,
            age_group: crate::data::AgeGroup::Under40,
            language: crate::data::Language::Gb,
        },
    }
}

proptest! {
    #[test]
    fn regimes_follow_their_contracts(hours in proptest::collection::vec(0.0f64..24.0, 1..30), seed in 0u64..1000, len in 2usize..12) {
        let owned: Vec<Observation> = hours.iter().enumerate().map(|(j, &h)| obs(j, h)).collect();
        let refs: Vec<&Observation> = owned.iter().collect();
        let n_pos = owned.iter().filter(|o| o.target.label()).count();
        let n_neg = owned.len() - n_pos;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let r = arrange(SequenceRegime::Random, &refs, len, &mut rng);
        let mut idx: Vec<usize> = r.iter().map(|o| o.seq_index).collect();
        idx.sort_unstable();
        prop_assert_eq!(idx, (0..owned.len()).collect::<Vec<_>>());

        let p = arrange(SequenceRegime::Periodic, &refs, len, &mut rng);
        prop_assert_eq!(p.len(), 2 * n_pos.min(n_neg));
        for w in p.windows(2) {
            prop_assert_ne!(w[0].target.label(), w[1].target.label());
        }

        let b = arrange(SequenceRegime::Balanced, &refs, len, &mut rng);
        let k = n_pos.min(n_neg).min(len / 2);
        prop_assert_eq!(b.len(), 2 * k);
        prop_assert_eq!(b.iter().filter(|o| o.target.label()).count(), k);
        let mut seen: Vec<usize> = b.iter().map(|o| o.seq_index).collect();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), b.len());
    }
}

#[test]
fn null_table_layout() {
    let ds = cohort(60, 8);
    let config = NullConfig {
        folds_used: 1,
        n_orderings: 2,
        transformer: TransformerConfig { steps: 4, eval_every: 2, ..tiny_tr() },
        ..NullConfig::default()
    };
    let table = null_model_experiment(&ds, &config, Exec::Sequential).unwrap();
    assert_eq!(table.cells.len(), 3);
    assert!(table.cells.iter().all(|r| r.len() == 3 && r.iter().all(|c| c.map_or(false, |s| s.n == 2))));
    let text = table.to_text();
    assert!(text.contains("Trained on") && text.contains("Periodic") && text.contains("Balanced"));
    assert_eq!(table.to_csv().lines().count(), 10);
}

#[test]
fn fairness_rows_cover_every_present_group() {
    let ds = cohort(120, 9);
    let config = RunConfig { models: vec![ModelKind::Cs, ModelKind::Dist], ..quick(Task::Regression) };
    let report = run_protocol(&ds, &config, Exec::Sequential).unwrap();
    let f = fairness_report(&report, &ds, &FairnessConfig { model: ModelKind::Dist, ..FairnessConfig::default() }).unwrap();
    for field in DemographicField::ALL {
        let present: std::collections::BTreeSet<&str> = ds.speakers().iter().map(|s| field.group_of(&s.demographics())).collect();
        let rows: Vec<&FairnessRow> = f.rows.iter().filter(|r| r.field == field).collect();
        assert!(rows.len() <= present.len());
        assert!(rows.iter().all(|r| r.n_speakers > 0));
        assert!(f.audit(field).unwrap().confound_auc.is_some());
    }
    assert!(f.to_text().contains("Confound AUC"));
    let missing = fairness_report(&report, &ds, &FairnessConfig::default());
    assert!(matches!(missing, Err(HarnessError::Config(_))));
}
