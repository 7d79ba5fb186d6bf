use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vkt_core::data::{generate_greebles, validate_session, DatasetManifest, GreeblesSpec, Phase};
use vkt_core::pipeline::{ap_report, gt_label_baseline};
use vkt_core::simulator::{
    load_probes, oracle_ap, ranked_response, save_probes, simulate_learner, simulate_population,
    SimConfig, SimLearner, SimLearnerParams, SimStimulus,
};

fn shipped() -> SimConfig {
    SimConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/sim_default.json"))
        .unwrap()
}

fn greebles_manifest(per_class: usize) -> DatasetManifest {
    let spec = GreeblesSpec {
        per_class,
        ..GreeblesSpec::default()
    };
    generate_greebles(&spec).unwrap().manifest
}

#[test]
fn shipped_config_is_the_default() {
    assert_eq!(shipped(), SimConfig::default());
}

#[test]
fn hand_trace_two_classes() {
    // C = 2, tau = 1, eta = 1, W0 = 0.
    let params = SimLearnerParams {
        weights: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
        eta: 1.0,
        tau: 1.0,
        seed: 0,
    };
    let mut l = SimLearner::new(&params);
    let steps = [([1.0, 0.0], 0), ([0.0, 1.0], 1), ([1.0, 1.0], 0)];

    // Step 1: p = (0.5, 0.5); W += (0.5, -0.5) x (1, 0).
    let p = l.distribution(&steps[0].0);
    assert_eq!(p, vec![0.5, 0.5]);
    l.learn(&steps[0].0, 0, &p);
    assert_eq!(l.weights, vec![vec![0.5, 0.0], vec![-0.5, 0.0]]);

    // Step 2: logits (0, 0) again; W += (-0.5, 0.5) x (0, 1).
    let p = l.distribution(&steps[1].0);
    assert_eq!(p, vec![0.5, 0.5]);
    l.learn(&steps[1].0, 1, &p);
    assert_eq!(l.weights, vec![vec![0.5, -0.5], vec![-0.5, 0.5]]);

    // Step 3: logits (0, 0); W += (0.5, -0.5) x (1, 1).
    let p = l.distribution(&steps[2].0);
    l.learn(&steps[2].0, 0, &p);
    let want = [[1.0, 0.0], [-1.0, 0.0]];
    for (row, w) in l.weights.iter().zip(want) {
        for (a, b) in row.iter().zip(w) {
            assert!((a - b).abs() < 1e-9);
        }
    }
    // Then p(0 | (1, 0)) = 1 / (1 + e^-2).
    let p = l.distribution(&[1.0, 0.0]);
    assert!((p[0] - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-9);
}

fn toy_stimuli(n: usize) -> Vec<SimStimulus> {
    (0..n)
        .map(|i| SimStimulus {
            item_id: format!("s{i}"),
            label: i % 3,
            phi: vec![(i as f64 * 0.37).sin(), (i as f64 * 0.91).cos()],
        })
        .collect()
}

fn params(eta: f64, tau: f64) -> SimLearnerParams {
    SimLearnerParams {
        weights: vec![vec![0.3, -0.2], vec![-0.1, 0.4], vec![0.2, 0.1]],
        eta,
        tau,
        seed: 9,
    }
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let mut stimuli = toy_stimuli(45);
    // The same stimulus shown in both phases.
    stimuli[40] = SimStimulus {
        item_id: "again".into(),
        ..stimuli[0].clone()
    };
    let (_, probe) = simulate_learner(&params(0.0, 1.0), "a", "toy", &stimuli, 30).unwrap();
    assert!(probe.weights.iter().all(|w| *w == probe.weights[0]));
    assert_eq!(probe.probs[0], probe.probs[40]);
}

#[test]
fn test_phase_freezes_weights() {
    let (session, probe) =
        simulate_learner(&params(0.3, 1.0), "a", "toy", &toy_stimuli(45), 30).unwrap();
    assert_ne!(probe.weights[0], probe.weights[29]);
    let frozen = &probe.weights[30];
    assert!(probe.weights[30..].iter().all(|w| w == frozen));
    // The weights at step 31 include the update from step 30.
    assert_ne!(&probe.weights[29], frozen);
    assert_eq!(session.train().len(), 30);
    assert!(session.test().iter().all(|i| i.phase == Phase::Test));
}

#[test]
fn cold_temperature_is_deterministic() {
    let (session, probe) =
        simulate_learner(&params(0.3, 1e-6), "a", "toy", &toy_stimuli(45), 30).unwrap();
    for (p, i) in probe.probs.iter().zip(&session.interactions) {
        let best = (0..3).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
        assert_eq!(i.response(), best);
    }
}

#[test]
fn sampled_responses_match_the_distribution() {
    let p = [0.2, 0.5, 0.3];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 10_000;
    let mut freq = [0usize; 3];
    for _ in 0..n {
        let r = ranked_response(&p, &mut rng).unwrap();
        freq[r[0]] += 1;
        let mut sorted = r;
        sorted.sort();
        assert_eq!(sorted, [0, 1, 2]);
    }
    for c in 0..3 {
        let se = (p[c] * (1.0 - p[c]) / n as f64).sqrt();
        assert!(
            (freq[c] as f64 / n as f64 - p[c]).abs() < 3.0 * se,
            "{freq:?}"
        );
    }
}

#[test]
fn population_is_valid_and_deterministic() {
    let manifest = greebles_manifest(40);
    let cfg = SimConfig {
        learners: 12,
        ..shipped()
    };
    let a = simulate_population(&manifest, &cfg).unwrap();
    let b = simulate_population(&manifest, &cfg).unwrap();
    assert_eq!(a.sessions, b.sessions);
    assert_eq!(a.probes, b.probes);
    assert_eq!(a.sessions.len(), 12);
    for (s, p) in a.sessions.iter().zip(&a.probes) {
        assert!(validate_session(s, &manifest).is_empty());
        assert_eq!(s.interactions.len(), 45);
        assert!(p
            .probs
            .iter()
            .all(|d| (d.iter().sum::<f64>() - 1.0).abs() < 1e-12));
    }
    let other = simulate_population(
        &manifest,
        &SimConfig {
            seed: 1,
            ..cfg.clone()
        },
    )
    .unwrap();
    assert_ne!(a.sessions, other.sessions);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("probes.jsonl");
    save_probes(&path, &a.probes).unwrap();
    assert_eq!(load_probes(&path).unwrap(), a.probes);

    let small = greebles_manifest(14);
    assert!(simulate_population(&small, &cfg).is_err());
}

#[test]
fn shipped_population_learns_and_oracle_beats_labels() {
    let manifest = greebles_manifest(400);
    let pop = simulate_population(&manifest, &shipped()).unwrap();
    assert_eq!(pop.sessions.len(), 150);
    let correct = |range: std::ops::Range<usize>| -> f64 {
        let n: usize = pop
            .sessions
            .iter()
            .map(|s| {
                s.interactions[range.clone()]
                    .iter()
                    .filter(|i| i.is_correct())
                    .count()
            })
            .sum();
        n as f64 / (pop.sessions.len() * range.len()) as f64
    };
    let (early, late) = (correct(0..10), correct(20..30));
    assert!(late > early, "early {early}, late {late}");

    let oracle = oracle_ap(&pop.probes, &pop.sessions, 3).unwrap();
    let gt: Vec<_> = pop
        .sessions
        .iter()
        .map(|s| gt_label_baseline(s, 3))
        .collect();
    let gt = ap_report(&gt, &pop.sessions, 3).unwrap();
    assert!(
        oracle.test.micro >= gt.test.micro,
        "{} vs {}",
        oracle.test.micro,
        gt.test.micro
    );
    assert!(oracle.train.micro >= gt.train.micro);
    for s in [&oracle.train, &oracle.test] {
        assert!((0.0..=1.0).contains(&s.micro) && (0.0..=1.0).contains(&s.macro_ap));
    }
}

#[test]
fn certain_learners_give_perfect_oracle() {
    let manifest = greebles_manifest(20);
    let cfg = SimConfig {
        learners: 5,
        tau: [1e-6, 1e-6],
        ..shipped()
    };
    let pop = simulate_population(&manifest, &cfg).unwrap();
    let r = oracle_ap(&pop.probes, &pop.sessions, 3).unwrap();
    assert_eq!(r.train.micro, 1.0);
    assert_eq!(r.test.micro, 1.0);
}
