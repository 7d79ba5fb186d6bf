use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{analytic_gradients, max_relative_error};
use super::*;
use crate::error::Error;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::new(
        shape,
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn param(
    store: &mut ParamStore<f64>,
    rng: &mut ChaCha8Rng,
    name: &str,
    shape: &[usize],
) -> ParamId {
    let t = random_tensor(rng, shape);
    store.add(name, ParamGroup::Head, t)
}

#[test]
fn product_rule_by_hand() {
    let mut store = ParamStore::new();
    let x = store.add("x", ParamGroup::Head, Tensor::scalar(2.0));
    let y = store.add("y", ParamGroup::Head, Tensor::scalar(3.0));
    let mut g = Graph::new();
    let xn = g.param(&store, x);
    let yn = g.param(&store, y);
    let xy = g.mul(xn, yn).unwrap();
    let f = g.add(xy, xn).unwrap();
    let grads = g.backward(f, &store).unwrap();
    assert_eq!(grads.get(x).data(), &[4.0]);
    assert_eq!(grads.get(y).data(), &[2.0]);
}

#[test]
fn softmax_sum_has_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let v = param(&mut store, &mut rng, "v", &[1, 6]);
    let mut g = Graph::new();
    let vn = g.param(&store, v);
    let s = g.softmax(vn).unwrap();
    let total = g.sum(s);
    let grads = g.backward(total, &store).unwrap();
    assert!(grads.get(v).data().iter().all(|d| d.abs() < 1e-15));
}

#[test]
fn cross_entropy_gradient_is_probs_minus_onehot() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let logits = param(&mut store, &mut rng, "logits", &[1, 5]);
    let build = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let l = g.param(s, logits);
        let p = g.softmax(l)?;
        g.cross_entropy(p, &[3])
    };
    let (_, grads) = analytic_gradients(&store, &build).unwrap();
    let mut probs = store.get(logits).data().to_vec();
    softmax_in_place(&mut probs);
    for (k, (&gk, &pk)) in grads.get(logits).data().iter().zip(&probs).enumerate() {
        let expected = pk - if k == 3 { 1.0 } else { 0.0 };
        assert!((gk - expected).abs() < 1e-12);
    }
    let err = max_relative_error(&store, &grads, 1e-4, Coverage::Full, &build).unwrap();
    assert!(err < 1e-8, "finite-difference error {err}");
}

#[test]
fn non_scalar_backward_is_contract_error() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[2, 2]));
    assert!(matches!(g.backward(x, &store), Err(Error::Contract(_))));
}

#[test]
fn non_finite_intermediate_names_node() {
    let mut store = ParamStore::new();
    let x = store.add("x", ParamGroup::Head, Tensor::scalar(1000.0f64));
    let mut g = Graph::new();
    let xn = g.param(&store, x);
    let e = g.exp(xn);
    let big = g.exp(e);
    let out = g.sum(big);
    match g.backward(out, &store) {
        Err(Error::Numeric { node, .. }) => assert!(node >= big.index()),
        other => panic!("expected numeric error, got {other:?}"),
    }
}

#[test]
fn untouched_parameters_get_zero_gradient() {
    let mut store = ParamStore::new();
    let a = store.add("a", ParamGroup::Head, Tensor::scalar(1.5f64));
    let unused = store.add("unused", ParamGroup::Head, Tensor::zeros(&[3, 2]));
    let mut g = Graph::new();
    let an = g.param(&store, a);
    let out = g.mul(an, an).unwrap();
    let grads = g.backward(out, &store).unwrap();
    assert_eq!(grads.get(a).data(), &[3.0]);
    assert_eq!(grads.get(unused).shape(), &[3, 2]);
    assert!(grads.get(unused).data().iter().all(|&v| v == 0.0));
}

/// Reduces an arbitrary node to a scalar with fixed random weights so every
/// output entry contributes a distinct sensitivity.
fn weighted_sum(g: &mut Graph<f64>, x: NodeId, seed: u64) -> NodeId {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(x).to_vec();
    let w = g.input(random_tensor(&mut rng, &shape));
    let prod = g.mul(x, w).unwrap();
    g.sum(prod)
}

fn check(
    store: &ParamStore<f64>,
    f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> crate::Result<NodeId>,
) -> f64 {
    grad_check(store, 1e-4, Coverage::Full, f).unwrap()
}

#[test]
fn primitives_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut s = ParamStore::new();
    let x = param(&mut s, &mut rng, "x", &[3, 4]);
    let w = param(&mut s, &mut rng, "w", &[5, 4]);
    let b = param(&mut s, &mut rng, "b", &[5]);
    let m = param(&mut s, &mut rng, "m", &[4, 2]);
    let y = param(&mut s, &mut rng, "y", &[3, 4]);
    let slope = s.add("slope", ParamGroup::Head, Tensor::scalar(0.25));
    let k = s.add("k", ParamGroup::Head, Tensor::scalar(0.7));
    let q = param(&mut s, &mut rng, "q", &[1, 4]);
    let cls = param(&mut s, &mut rng, "cls", &[3, 3 * 5]);

    let cases: Vec<(
        &str,
        Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> crate::Result<NodeId>>,
    )> = vec![
        (
            "affine",
            Box::new(move |g, s| {
                let (xn, wn, bn) = (g.param(s, x), g.param(s, w), g.param(s, b));
                let o = g.affine(xn, wn, Some(bn))?;
                Ok(weighted_sum(g, o, 10))
            }),
        ),
        (
            "matmul",
            Box::new(move |g, s| {
                let (xn, mn) = (g.param(s, x), g.param(s, m));
                let o = g.matmul(xn, mn)?;
                Ok(weighted_sum(g, o, 11))
            }),
        ),
        (
            "add_sub_mul",
            Box::new(move |g, s| {
                let (xn, yn) = (g.param(s, x), g.param(s, y));
                let a = g.add(xn, yn)?;
                let d = g.sub(a, yn)?;
                let p = g.mul(d, yn)?;
                let n = g.add_n(&[p, xn, yn])?;
                let sc = g.scale(n, 1.5);
                Ok(weighted_sum(g, sc, 12))
            }),
        ),
        (
            "scale_by_exp",
            Box::new(move |g, s| {
                let (xn, kn) = (g.param(s, x), g.param(s, k));
                let o = g.scale_by(xn, kn)?;
                let e = g.exp(o);
                Ok(weighted_sum(g, e, 13))
            }),
        ),
        (
            "sigmoid_tanh",
            Box::new(move |g, s| {
                let xn = g.param(s, x);
                let a = g.sigmoid(xn);
                let t = g.tanh(a);
                Ok(weighted_sum(g, t, 14))
            }),
        ),
        (
            "prelu",
            Box::new(move |g, s| {
                let (xn, sn) = (g.param(s, x), g.param(s, slope));
                let o = g.prelu(xn, sn)?;
                Ok(weighted_sum(g, o, 15))
            }),
        ),
        (
            "concat_narrow_gather_reshape",
            Box::new(move |g, s| {
                let (xn, yn) = (g.param(s, x), g.param(s, y));
                let c = g.concat(&[xn, yn])?;
                let n = g.narrow(c, 2, 4)?;
                let r = g.gather_rows(n, &[2, 0, 2])?;
                let cr = g.concat_rows(&[r, xn])?;
                let rs = g.reshape(cr, &[4, 6])?;
                Ok(weighted_sum(g, rs, 16))
            }),
        ),
        (
            "softmax_cross_entropy_mean",
            Box::new(move |g, s| {
                let xn = g.param(s, x);
                let p = g.softmax(xn)?;
                let ce = g.cross_entropy(p, &[0, 3, 1])?;
                let m = g.mean(p);
                g.add(ce, m)
            }),
        ),
        (
            "distance_pow_normalize",
            Box::new(move |g, s| {
                let (xn, qn, kn) = (g.param(s, x), g.param(s, q), g.param(s, k));
                let d = g.distance(xn, qn)?;
                let neg = g.scale(d, -1.0);
                let e = g.exp(neg);
                let p = g.pow_by(e, kn)?;
                let r = g.reshape(p, &[1, 3])?;
                let nr = g.normalize_rows(r)?;
                Ok(weighted_sum(g, nr, 17))
            }),
        ),
        (
            "apply_classifiers",
            Box::new(move |g, s| {
                let (cn, xn) = (g.param(s, cls), g.param(s, x));
                let o = g.apply_classifiers(cn, xn, 3)?;
                Ok(weighted_sum(g, o, 18))
            }),
        ),
    ];
    for (name, f) in cases {
        let err = check(&s, f);
        assert!(err < 1e-6, "{name}: grad_check error {err}");
    }
}

#[test]
fn conv_and_pool_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut s = ParamStore::new();
    let x = param(&mut s, &mut rng, "x", &[2, 2, 9, 9]);
    let w = param(&mut s, &mut rng, "w", &[3, 2, 5, 5]);
    let b = param(&mut s, &mut rng, "b", &[3]);
    let err = check(&s, move |g, s| {
        let (xn, wn, bn) = (g.param(s, x), g.param(s, w), g.param(s, b));
        let c = g.conv2d(xn, wn, bn, 1, 2)?;
        let p = g.max_pool2d(c, 4)?;
        Ok(weighted_sum(g, p, 19))
    });
    assert!(err < 1e-6, "conv/pool grad_check error {err}");

    let strided = check(&s, move |g, s| {
        let (xn, wn, bn) = (g.param(s, x), g.param(s, w), g.param(s, b));
        let c = g.conv2d(xn, wn, bn, 2, 1)?;
        Ok(weighted_sum(g, c, 20))
    });
    assert!(strided < 1e-6, "strided conv grad_check error {strided}");
}

#[test]
fn grad_check_single_affine_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut s = ParamStore::new();
    let w = s.add("w", ParamGroup::Head, uniform_fan_in(&mut rng, &[3, 4], 4));
    let b = s.add("b", ParamGroup::Head, Tensor::zeros(&[3]));
    let xs = random_tensor(&mut rng, &[2, 4]).map(|v| 5.0 * v);
    let f = move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let xn = g.input(xs.clone());
        let (wn, bn) = (g.param(s, w), g.param(s, b));
        let l = g.affine(xn, wn, Some(bn))?;
        let p = g.softmax(l)?;
        g.cross_entropy(p, &[0, 2])
    };
    let err = grad_check(&s, 1e-4, Coverage::Full, &f).unwrap();
    assert!(err < 1e-6, "error {err}");

    // a deliberately broken gradient is detected
    let (_, mut grads) = analytic_gradients(&s, &f).unwrap();
    grads.scale(2.0);
    let broken = max_relative_error(&s, &grads, 1e-4, Coverage::Full, &f).unwrap();
    assert!(broken >= 0.3, "scaled gradient not detected: {broken}");
}

#[test]
fn constant_function_has_zero_error() {
    let mut s = ParamStore::new();
    s.add(
        "w",
        ParamGroup::Head,
        Tensor::from_f64(&[2], &[0.3, -0.2]).unwrap(),
    );
    let err = grad_check(&s, 1e-4, Coverage::Full, |g, _| {
        Ok(g.input(Tensor::scalar(4.2)))
    })
    .unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn non_finite_function_is_error() {
    let mut s = ParamStore::new();
    s.add("w", ParamGroup::Head, Tensor::scalar(1.0));
    let r = grad_check(&s, 1e-4, Coverage::Full, |g, _| {
        Ok(g.input(Tensor::scalar(f64::NAN)))
    });
    assert!(r.is_err());
}

#[test]
fn max_pool_constant_input_routes_to_first_element() {
    let mut s = ParamStore::new();
    let x = s.add("x", ParamGroup::Head, Tensor::full(&[1, 1, 4, 8], 2.5f64));
    let mut g = Graph::new();
    let xn = g.param(&s, x);
    let p = g.max_pool2d(xn, 4).unwrap();
    assert!(g.value(p).data().iter().all(|&v| v == 2.5));
    let out = g.sum(p);
    let grads = g.backward(out, &s).unwrap();
    let gx = grads.get(x).data();
    // windows start at columns 0 and 4 of row 0
    assert_eq!(gx[0], 1.0);
    assert_eq!(gx[4], 1.0);
    assert_eq!(gx.iter().filter(|&&v| v != 0.0).count(), 2);
}

#[test]
fn backward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s = ParamStore::new();
    let lstm = LstmParams::init(&mut s, &mut rng, "rnn", 3, 6, 2).unwrap();
    let head = param(&mut s, &mut rng, "head", &[4, 6]);
    let inputs: Vec<Tensor<f64>> = (0..4).map(|_| random_tensor(&mut rng, &[2, 3])).collect();
    let run = || {
        let mut g = Graph::new();
        let xs: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let init = lstm.zero_state(&mut g, 2);
        let (outs, _) = lstm.forward(&mut g, &s, &xs, init).unwrap();
        let h = g.param(&s, head);
        let l = g.affine(outs[3], h, None).unwrap();
        let p = g.softmax(l).unwrap();
        let ce = g.cross_entropy(p, &[1, 2]).unwrap();
        let grads = g.backward(ce, &s).unwrap();
        grads
            .iter()
            .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect::<Vec<u64>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn lstm_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut s = ParamStore::new();
    let lstm = LstmParams::init(&mut s, &mut rng, "rnn", 3, 5, 3).unwrap();
    let inputs: Vec<Tensor<f64>> = (0..3).map(|_| random_tensor(&mut rng, &[2, 3])).collect();
    let err = check(&s, move |g, s| {
        let xs: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let init = lstm.zero_state(g, 2);
        let (outs, fin) = lstm.forward(g, s, &xs, init)?;
        let all = g.concat(&[outs[0], outs[2], fin.cell[0]])?;
        Ok(weighted_sum(g, all, 21))
    });
    assert!(err < 1e-6, "lstm grad_check error {err}");
}

proptest! {
    #[test]
    fn softmax_is_a_distribution_and_shift_invariant(
        logits in prop::collection::vec(-15.0f64..15.0, 2..8),
        shift in -100.0f64..100.0,
    ) {
        let mut p = logits.clone();
        softmax_in_place(&mut p);
        let total: f64 = p.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
        prop_assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        let mut q: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        softmax_in_place(&mut q);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
