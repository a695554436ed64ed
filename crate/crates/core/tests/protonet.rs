use fatigue_core::data::{support_set_at, Dataset, SpeakerSequence};
use fatigue_core::linmodels::{tune_cs_classifier, Pool};
use fatigue_core::metrics::auc;
use fatigue_core::numkernel::Graph;
use fatigue_core::protonet::{batch_loss, eligible, sample_episode, ProjectionNet, ProtoConfig, ProtoNet};
use fatigue_core::synthgen::{generate_cohort, CohortSpec};
use fatigue_core::Exec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cohort(flip: f64, seed: u64) -> Dataset {
    let spec = CohortSpec {
        n_speakers: 240,
        flip_fraction: flip,
        fatigue_signal_scale: 2.0,
        seed,
        ..CohortSpec::default()
    };
    generate_cohort(&spec).unwrap()
}

fn split(ds: &Dataset) -> (Vec<&SpeakerSequence>, Vec<&SpeakerSequence>, Vec<&SpeakerSequence>) {
    let s = ds.speakers();
    (s[..160].iter().collect(), s[160..190].iter().collect(), s[190..].iter().collect())
}

fn quick_config() -> ProtoConfig {
    ProtoConfig { episodes: 2400, val_episodes: 100, ..ProtoConfig::default() }
}

#[test]
fn episodic_training_beats_pooled_classifier_on_flipped_cohort() {
    let ds = cohort(0.5, 77);
    let (train, val, test) = split(&ds);
    let dim = ds.embedding_dim();
    let pool = |s: &[&SpeakerSequence]| Pool::from_observations(s.iter().flat_map(|q| q.observations()), dim);
    let (cs, _) = tune_cs_classifier(&pool(&train), &pool(&val), Exec::Parallel).unwrap();
    let proto = ProtoNet::train(&train, &val, quick_config()).unwrap();
    let (mut ps, mut cs_scores, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for seq in &test {
        let order: Vec<usize> = (0..seq.len()).collect();
        for t in 1..seq.len() {
            let (support, query) = support_set_at(seq, &order, t).unwrap();
            if let Some(p) = proto.predict(&support, query.embedding.as_slice()).unwrap() {
                ps.push(p);
                cs_scores.push(cs.predict_proba_one(query.embedding.as_slice()));
                labels.push(query.target.label());
            }
        }
    }
    let (a_proto, a_cs) = (auc(&ps, &labels).unwrap(), auc(&cs_scores, &labels).unwrap());
    assert!(a_proto >= a_cs + 0.05, "proto {a_proto:.3} vs cs {a_cs:.3}");
}

#[test]
fn loss_on_fixed_batch_decreases() {
    let ds = cohort(0.0, 5);
    let (train, _, _) = split(&ds);
    let config = ProtoConfig::default();
    let idx = eligible(&train);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch: Vec<_> = idx.iter().take(8).map(|&i| sample_episode(train[i], &config, &mut rng)).collect();
    let mut net = ProjectionNet::new(ds.embedding_dim(), 32, 64, &mut rng);
    let mut adam = fatigue_core::numkernel::Adam::new(config.adam, &net.params);
    let mut losses = Vec::new();
    for _ in 0..50 {
        let mut g = Graph::new();
        let vars: Vec<_> = net.params.iter().map(|p| g.param(p.clone()).unwrap()).collect();
        let loss = batch_loss(&mut g, &vars, &batch).unwrap();
        losses.push(g.value(loss).item());
        let grads = g.backward(loss).unwrap();
        let gs: Vec<_> = vars.iter().map(|&v| grads.get(v)).collect();
        adam.step(&mut net.params, &gs);
    }
    assert!(losses[49] < losses[0], "{:?}", (losses[0], losses[49]));
}

#[test]
fn training_is_deterministic() {
    let ds = cohort(0.0, 9);
    let (train, val, _) = split(&ds);
    let config = ProtoConfig { episodes: 160, ..quick_config() };
    let a = ProtoNet::train(&train, &val, config.clone()).unwrap();
    let b = ProtoNet::train(&train, &val, config).unwrap();
    assert_eq!(a.net, b.net);
    assert_eq!(a.log, b.log);
}
