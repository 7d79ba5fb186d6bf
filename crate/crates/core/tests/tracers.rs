mod common;

use common::*;
use vkt_core::numerics::Graph;
use vkt_core::tracers::{
    classify, exemplar_predict, prototype_predict, Conditioning, ResponseDistribution, Stimuli,
    TraceSequence, TracerKind, TracerModel, TracerState, TracerVariant,
};
use vkt_core::Error;

const C: usize = 3;
const D: usize = 4;

fn model(kind: TracerKind, emb: &vkt_core::tracers::EmbeddingKind, seed: u64) -> TracerModel<f64> {
    let mut m = TracerModel::new(small_config(kind, C, emb.clone()), seed).unwrap();
    randomize(&mut m.store, seed + 100, 0.8);
    m
}

/// Runs a sequence through the stepwise interface: training steps advance
/// the state, test queries use the frozen state.
fn stepwise(
    m: &TracerModel<f64>,
    stimuli: &Stimuli<f64>,
    seq: &TraceSequence,
) -> Vec<ResponseDistribution> {
    let z = m.embed_items(stimuli, &seq.items).unwrap();
    let mut state = m.initial_state();
    let mut out = Vec::new();
    for t in 0..seq.train_len {
        out.push(m.predict(&state, &z[t], seq.labels[t]).unwrap());
        state = m
            .advance(&state, &z[t], seq.labels[t], seq.responses[t])
            .unwrap();
    }
    for t in seq.train_len..seq.len() {
        out.push(m.predict(&state, &z[t], seq.labels[t]).unwrap());
    }
    out
}

fn assert_close(a: &[ResponseDistribution], b: &[ResponseDistribution], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.probs.iter().zip(&y.probs) {
            assert!((p - q).abs() < tol, "{:?} vs {:?}", x.probs, y.probs);
        }
    }
}

fn all_variants() -> Vec<TracerVariant> {
    let mut v: Vec<TracerVariant> = TracerKind::ALL
        .iter()
        .map(|&k| TracerVariant::new(k))
        .collect();
    for kind in [TracerKind::Direct, TracerKind::ClsPred] {
        for c in [Conditioning::Base, Conditioning::Y, Conditioning::YZ] {
            v.push(TracerVariant::new(kind).with_conditioning(c));
        }
        v.push(TracerVariant::new(kind).with_meta(true));
    }
    v.push(TracerVariant::new(TracerKind::Static).with_meta(true));
    v
}

#[test]
fn batch_forward_matches_stepwise_interface() {
    let (stimuli, emb) = feature_setup::<f64>(C, D, 1);
    let mut r = rng(2);
    let seqs: Vec<TraceSequence> = (0..3)
        .map(|_| random_sequence(&stimuli, C, 5, 3, &mut r))
        .collect();
    for (i, variant) in all_variants().into_iter().enumerate() {
        let mut cfg = small_config(variant.kind, C, emb.clone());
        cfg.variant = variant;
        let mut m = TracerModel::<f64>::new(cfg, i as u64).unwrap();
        randomize(&mut m.store, 50 + i as u64, 0.8);
        let batch = m.predict_sequences(&stimuli, &seqs, 2).unwrap();
        for (seq, got) in seqs.iter().zip(&batch) {
            assert_close(got, &stepwise(&m, &stimuli, seq), 1e-12);
        }
    }
}

#[test]
fn cnn_batch_matches_stepwise() {
    let (stimuli, emb) = image_setup::<f64>(4, 32, D);
    let mut r = rng(3);
    let seqs: Vec<TraceSequence> = (0..2)
        .map(|_| random_sequence(&stimuli, C, 5, 2, &mut r))
        .collect();
    for kind in [
        TracerKind::Direct,
        TracerKind::ClsPred,
        TracerKind::Exemplar,
    ] {
        let m = TracerModel::<f64>::new(small_config(kind, C, emb.clone()), 4).unwrap();
        let batch = m.predict_sequences(&stimuli, &seqs, 2).unwrap();
        for (seq, got) in seqs.iter().zip(&batch) {
            assert_close(got, &stepwise(&m, &stimuli, seq), 1e-12);
        }
    }
}

#[test]
fn distributions_are_valid_under_random_parameters() {
    let (stimuli, emb) = feature_setup::<f64>(C, D, 5);
    let mut r = rng(6);
    let seqs: Vec<TraceSequence> = (0..4)
        .map(|_| random_sequence(&stimuli, C, 5, 3, &mut r))
        .collect();
    for kind in TracerKind::ALL {
        for seed in 0..5 {
            let mut m = TracerModel::<f64>::new(small_config(kind, C, emb.clone()), seed).unwrap();
            randomize(&mut m.store, seed + 7, 3.0);
            for dists in m.predict_sequences(&stimuli, &seqs, 4).unwrap() {
                for d in dists {
                    assert!((d.sum() - 1.0).abs() < 1e-6, "{kind:?}: {:?}", d.probs);
                    assert!(d.probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
                }
            }
        }
    }
}

#[test]
fn zero_parameters_give_uniform_predictions() {
    let (stimuli, emb) = feature_setup::<f64>(C, D, 8);
    let mut r = rng(9);
    let seq = random_sequence(&stimuli, C, 5, 3, &mut r);
    for kind in [
        TracerKind::Static,
        TracerKind::StaticTime,
        TracerKind::Direct,
        TracerKind::ClsPred,
        TracerKind::Dkt,
    ] {
        let mut m = TracerModel::<f64>::new(small_config(kind, C, emb.clone()), 0).unwrap();
        zero_params(&mut m.store);
        for d in stepwise(&m, &stimuli, &seq) {
            assert!(
                d.probs.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15),
                "{kind:?}"
            );
        }
    }
    let mut m = TracerModel::<f64>::new(small_config(TracerKind::Direct, C, emb), 0).unwrap();
    zero_params(&mut m.store);
    let z = vec![0.3; D];
    let s = m.advance(&m.initial_state(), &z, 1, 2).unwrap();
    assert!(s.hidden.iter().chain(&s.cell).flatten().all(|&v| v == 0.0));
}

#[test]
fn base_conditioning_ignores_the_query() {
    let (stimuli, emb) = feature_setup::<f64>(C, D, 10);
    let mut cfg = small_config(TracerKind::Direct, C, emb);
    cfg.variant = cfg.variant.with_conditioning(Conditioning::Base);
    let mut m = TracerModel::<f64>::new(cfg, 0).unwrap();
    randomize(&mut m.store, 11, 0.8);
    let z = m.embed_items(&stimuli, &[0, 1, 2]).unwrap();
    let s = m.advance(&m.initial_state(), &z[0], 0, 1).unwrap();
    assert_eq!(
        m.predict(&s, &z[1], 1).unwrap(),
        m.predict(&s, &z[2], 2).unwrap()
    );
}

#[test]
fn cls_pred_classifier_does_not_see_the_query() {
    let (stimuli, emb) = feature_setup::<f64>(C, D, 12);
    let m = model(TracerKind::ClsPred, &emb, 13);
    let z = m
        .embed_items(&stimuli, &(0..6).collect::<Vec<_>>())
        .unwrap();
    let mut s = m.initial_state();
    for t in 0..3 {
        s = m
            .advance(&s, &z[t], stimuli.labels[t], (t + 1) % C)
            .unwrap();
    }
    let cls = m.emit_classifier(&s, 1).unwrap();
    assert_eq!(cls.w.shape(), &[C, D]);
    for q in &z[3..] {
        let direct = m.predict(&s, q, 1).unwrap();
        let via = classify(&cls, q).unwrap();
        for (a, b) in direct.probs.iter().zip(&via.probs) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert!(m.emit_classifier(&m.initial_state(), C).is_err());
    let big = TracerModel::<f64>::new(
        small_config(TracerKind::ClsPred, 5, feature_setup::<f64>(5, 16, 1).1),
        0,
    )
    .unwrap();
    assert_eq!(
        big.emit_classifier(&big.initial_state(), 0)
            .unwrap()
            .flat()
            .len(),
        85
    );
}

#[test]
fn dkt_is_blind_to_images() {
    let (stimuli, emb) = feature_setup::<f64>(C, D, 14);
    let m = model(TracerKind::Dkt, &emb, 15);
    let mut r = rng(16);
    let seq = random_sequence(&stimuli, C, 5, 3, &mut r);
    let mut swapped = seq.clone();
    for (t, item) in swapped.items.iter_mut().enumerate() {
        // Another stimulus with the same label.
        *item = (0..stimuli.len())
            .find(|&j| stimuli.labels[j] == seq.labels[t] && !seq.items.contains(&j) && j != *item)
            .unwrap();
    }
    let a = m.predict_sequences(&stimuli, &[seq], 1).unwrap();
    let b = m.predict_sequences(&stimuli, &[swapped], 1).unwrap();
    assert_eq!(a, b);
}

#[test]
fn predictions_are_causal() {
    let (stimuli, emb) = feature_setup::<f64>(C, D, 17);
    let mut r = rng(18);
    for kind in TracerKind::ALL {
        let m = model(kind, &emb, 19);
        let seq = random_sequence(&stimuli, C, 5, 3, &mut r);
        let base = m
            .predict_sequences(&stimuli, std::slice::from_ref(&seq), 1)
            .unwrap()
            .remove(0);
        for t in 0..4 {
            let mut changed = seq.clone();
            for j in t + 1..5 {
                changed.responses[j] = (changed.responses[j] + 1) % C;
                let other = (0..stimuli.len())
                    .find(|i| !changed.items.contains(i))
                    .unwrap();
                changed.items[j] = other;
                changed.labels[j] = stimuli.labels[other];
            }
            let got = m
                .predict_sequences(&stimuli, &[changed], 1)
                .unwrap()
                .remove(0);
            assert_eq!(&got[..=t], &base[..=t], "{kind:?} at step {t}");
        }
    }
}

#[test]
fn state_depends_on_interaction_order() {
    let (stimuli, emb) = feature_setup::<f64>(C, D, 20);
    for kind in [TracerKind::Direct, TracerKind::ClsPred, TracerKind::Dkt] {
        let m = model(kind, &emb, 21);
        let z = m.embed_items(&stimuli, &[0, 1]).unwrap();
        let run = |order: [usize; 2]| -> TracerState {
            let mut s = m.initial_state();
            for &i in &order {
                s = m
                    .advance(&s, &z[i], stimuli.labels[i], (i + 2) % C)
                    .unwrap();
            }
            s
        };
        assert_ne!(run([0, 1]).hidden, run([1, 0]).hidden, "{kind:?}");
    }
}

#[test]
fn cognitive_graph_matches_closed_form() {
    let (stimuli, emb) = feature_setup::<f64>(C, D, 22);
    for kind in [TracerKind::Prototype, TracerKind::Exemplar] {
        let m = model(kind, &emb, 23);
        let p = m.cognitive_params().unwrap();
        let z = m
            .embed_items(&stimuli, &(0..8).collect::<Vec<_>>())
            .unwrap();
        let mut s = m.initial_state();
        let mut hist = Vec::new();
        for t in 0..7 {
            let got = m.predict(&s, &z[t], stimuli.labels[t]).unwrap();
            let want = match kind {
                TracerKind::Prototype => {
                    prototype_predict(&hist, &z[t], p.c, C, Default::default()).unwrap()
                }
                _ => exemplar_predict(&hist, &z[t], p.c, p.gamma, C).unwrap(),
            };
            assert_close(&[got], &[want], 1e-12);
            s = m.advance(&s, &z[t], stimuli.labels[t], 0).unwrap();
            hist.push((z[t].clone(), stimuli.labels[t]));
        }
        assert_eq!(s.history.len(), 7);
    }
}

#[test]
fn prototype_rejects_gamma() {
    let (_, emb) = feature_setup::<f64>(C, D, 24);
    let mut cfg = small_config(TracerKind::Prototype, C, emb);
    cfg.cognitive.gamma = 2.0;
    assert!(matches!(
        TracerModel::<f64>::new(cfg, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let (stimuli, emb) = feature_setup::<f64>(C, D, 25);
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(26);
    let seqs: Vec<TraceSequence> = (0..2)
        .map(|_| random_sequence(&stimuli, C, 5, 3, &mut r))
        .collect();
    for kind in TracerKind::ALL {
        let m = model(kind, &emb, 27);
        let path = dir.path().join(format!("{}.ckpt", kind.name()));
        m.save(&path, serde_json::json!({"note": 1})).unwrap();
        let (back, extra) = TracerModel::<f64>::load(&path).unwrap();
        assert_eq!(extra["note"], 1);
        assert_eq!(back.config, m.config);
        assert_eq!(
            back.predict_sequences(&stimuli, &seqs, 2).unwrap(),
            m.predict_sequences(&stimuli, &seqs, 2).unwrap()
        );
    }
}

#[test]
fn batch_graph_supports_backward() {
    let (stimuli, emb) = feature_setup::<f64>(C, D, 28);
    let mut r = rng(29);
    let seqs: Vec<TraceSequence> = (0..2)
        .map(|_| random_sequence(&stimuli, C, 5, 3, &mut r))
        .collect();
    let refs: Vec<&TraceSequence> = seqs.iter().collect();
    for kind in TracerKind::ALL {
        let m = model(kind, &emb, 30);
        let mut g = Graph::new();
        let out = m.forward_batch(&mut g, &stimuli, &refs, false).unwrap();
        assert!(out.test.is_none());
        let loss = m.sequence_loss(&mut g, &out, &refs).unwrap();
        let grads = g.backward(loss, &m.store).unwrap();
        let total: f64 = grads
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v.abs()).sum::<f64>())
            .sum();
        assert!(total > 0.0, "{kind:?}");
    }
}
