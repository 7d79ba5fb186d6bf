//! Plain-vector forms of the tracer read-outs, used for single queries and
//! as references for the graph versions.

use super::{
    Conditioning, PredictedClassifier, PrototypeNorm, ResponseDistribution, TracerKind,
    TracerVariant,
};
use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, Scalar, Tensor};

/// One block of a recurrent step input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Block {
    PrevResponse,
    PrevLabel,
    CurLabel,
    PrevZ,
    CurZ,
    Meta,
}

pub(crate) fn layout(variant: &TracerVariant) -> Vec<Block> {
    use Block::*;
    let label = if variant.conditioning == Conditioning::Base {
        PrevLabel
    } else {
        CurLabel
    };
    let mut blocks = match variant.kind {
        TracerKind::Dkt => vec![PrevLabel, PrevResponse, CurLabel],
        TracerKind::ClsPred => vec![PrevZ, PrevResponse, label],
        _ => {
            let z = if variant.conditioning == Conditioning::YZ {
                CurZ
            } else {
                PrevZ
            };
            vec![PrevResponse, z, label]
        }
    };
    if variant.meta_per_class_acc {
        blocks.push(Meta);
    }
    blocks
}

/// The completed interaction preceding the current step.
#[derive(Clone, Copy, Debug)]
pub struct PrevInteraction<'a> {
    pub z: &'a [f64],
    pub label: usize,
    pub response: usize,
}

fn one_hot_into(out: &mut Vec<f64>, classes: usize, c: Option<usize>) {
    let start = out.len();
    out.resize(start + classes, 0.0);
    if let Some(c) = c {
        out[start + c] = 1.0;
    }
}

fn check_class(c: usize, classes: usize, what: &str) -> Result<()> {
    if c >= classes {
        return Err(Error::Contract(format!("{what} {c} outside 0..{classes}")));
    }
    Ok(())
}

/// Assembles the recurrent input for one step. Without a previous
/// interaction its blocks are zero.
pub fn encode_step_input(
    variant: &TracerVariant,
    classes: usize,
    prev: Option<&PrevInteraction<'_>>,
    cur_z: &[f64],
    cur_label: usize,
    meta: Option<&[f64]>,
) -> Result<Vec<f64>> {
    variant.validate()?;
    if !variant.kind.is_recurrent() {
        return Err(Error::Config(format!(
            "{} has no step input",
            variant.kind.name()
        )));
    }
    check_class(cur_label, classes, "label")?;
    let dim = cur_z.len();
    if let Some(p) = prev {
        check_class(p.label, classes, "previous label")?;
        check_class(p.response, classes, "previous response")?;
        if variant.kind != TracerKind::Dkt && p.z.len() != dim {
            return Err(Error::Shape(format!(
                "previous embedding has {} values, current {dim}",
                p.z.len()
            )));
        }
    }
    let mut out = Vec::new();
    for block in layout(variant) {
        match block {
            Block::PrevResponse => one_hot_into(&mut out, classes, prev.map(|p| p.response)),
            Block::PrevLabel => one_hot_into(&mut out, classes, prev.map(|p| p.label)),
            Block::CurLabel => one_hot_into(&mut out, classes, Some(cur_label)),
            Block::PrevZ => match prev {
                Some(p) => out.extend_from_slice(p.z),
                None => out.resize(out.len() + dim, 0.0),
            },
            Block::CurZ => out.extend_from_slice(cur_z),
            Block::Meta => {
                let m = meta
                    .ok_or_else(|| Error::Contract("meta input required by the variant".into()))?;
                if m.len() != classes {
                    return Err(Error::Shape(format!(
                        "meta has {} values, expected {classes}",
                        m.len()
                    )));
                }
                out.extend_from_slice(m);
            }
        }
    }
    Ok(out)
}

pub fn softmax(logits: &[f64]) -> ResponseDistribution {
    let mut probs = logits.to_vec();
    softmax_in_place(&mut probs);
    ResponseDistribution { probs }
}

fn linear_readout<T: Scalar>(z: &[T], w: &Tensor<T>, b: &[T]) -> Result<ResponseDistribution> {
    let (c, d) = w.dims2()?;
    if d != z.len() || b.len() != c {
        return Err(Error::Shape(format!(
            "w {c}x{d}, b {}, z {}",
            b.len(),
            z.len()
        )));
    }
    let logits: Vec<f64> = (0..c)
        .map(|i| {
            w.row(i)
                .iter()
                .zip(z)
                .map(|(&a, &x)| (a * x).as_f64())
                .sum::<f64>()
                + b[i].as_f64()
        })
        .collect();
    Ok(softmax(&logits))
}

/// `softmax(w z + b)` with `w` of shape `C x D`.
pub fn static_predict<T: Scalar>(
    z: &[T],
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<ResponseDistribution> {
    linear_readout(z, w, b.data())
}

pub fn classify(cls: &PredictedClassifier, z: &[f64]) -> Result<ResponseDistribution> {
    linear_readout(z, &cls.w, &cls.b)
}

/// Read-out with the classifier of one-based step `t`.
pub fn time_indexed_predict<T: Scalar>(
    z: &[T],
    t: usize,
    table: &[(Tensor<T>, Tensor<T>)],
) -> Result<ResponseDistribution> {
    if t == 0 || t > table.len() {
        return Err(Error::Contract(format!(
            "step {t} outside 1..={}",
            table.len()
        )));
    }
    let (w, b) = &table[t - 1];
    static_predict(z, w, b)
}

/// `exp(-c * ||zi - zj||)`.
pub fn similarity(zi: &[f64], zj: &[f64], c: f64) -> f64 {
    let d: f64 = zi
        .iter()
        .zip(zj)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    (-c * d).exp()
}

fn check_history(history: &[(Vec<f64>, usize)], z: &[f64], classes: usize, c: f64) -> Result<()> {
    if !(c > 0.0) {
        return Err(Error::Config(format!(
            "similarity scale must be positive, got {c}"
        )));
    }
    for (h, y) in history {
        check_class(*y, classes, "history label")?;
        if h.len() != z.len() {
            return Err(Error::Shape(
                "history embedding width differs from query".into(),
            ));
        }
    }
    Ok(())
}

fn normalize(mut v: Vec<f64>) -> ResponseDistribution {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
        ResponseDistribution { probs: v }
    } else {
        ResponseDistribution::uniform(v.len())
    }
}

/// Class prototypes from the history, scored by similarity to `z`. Classes
/// absent from the history have a zero prototype; an empty history gives
/// the uniform distribution.
pub fn prototype_predict(
    history: &[(Vec<f64>, usize)],
    z: &[f64],
    c: f64,
    classes: usize,
    norm: PrototypeNorm,
) -> Result<ResponseDistribution> {
    check_history(history, z, classes, c)?;
    if history.is_empty() {
        return Ok(ResponseDistribution::uniform(classes));
    }
    let mut protos = vec![vec![0.0; z.len()]; classes];
    let mut counts = vec![0usize; classes];
    for (h, y) in history {
        counts[*y] += 1;
        protos[*y].iter_mut().zip(h).for_each(|(p, v)| *p += v);
    }
    let sims = protos
        .iter()
        .zip(&counts)
        .map(|(p, &n)| {
            let div = match norm {
                PrototypeNorm::ClassMean => n.max(1) as f64,
                PrototypeNorm::HistoryLength => history.len() as f64,
            };
            let p: Vec<f64> = p.iter().map(|v| v / div).collect();
            similarity(&p, z, c)
        })
        .collect();
    Ok(normalize(sims))
}

/// Summed similarity of `z` to the history items of each class, raised to
/// `gamma` and normalized. Absent classes get zero probability.
pub fn exemplar_predict(
    history: &[(Vec<f64>, usize)],
    z: &[f64],
    c: f64,
    gamma: f64,
    classes: usize,
) -> Result<ResponseDistribution> {
    check_history(history, z, classes, c)?;
    if !(gamma > 0.0) {
        return Err(Error::Config(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    let mut e = vec![0.0; classes];
    for (h, y) in history {
        e[*y] += similarity(h, z, c);
    }
    Ok(normalize(
        e.into_iter()
            .map(|v| if v > 0.0 { v.powf(gamma) } else { 0.0 })
            .collect(),
    ))
}

/// Fraction of correct top responses per true class; zero for unseen classes.
pub fn per_class_accuracy(history: &[(usize, usize)], classes: usize) -> Vec<f64> {
    let mut seen = vec![0usize; classes];
    let mut right = vec![0usize; classes];
    for &(y, r) in history {
        if y < classes {
            seen[y] += 1;
            if r == y {
                right[y] += 1;
            }
        }
    }
    seen.iter()
        .zip(&right)
        .map(|(&s, &r)| if s == 0 { 0.0 } else { r as f64 / s as f64 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(kind: TracerKind) -> TracerVariant {
        TracerVariant::new(kind)
    }

    #[test]
    fn step_input_lengths() {
        let z = vec![0.5; 16];
        for kind in [TracerKind::Direct, TracerKind::ClsPred] {
            assert_eq!(
                encode_step_input(&v(kind), 5, None, &z, 2, None)
                    .unwrap()
                    .len(),
                26
            );
            let meta = vec![0.0; 5];
            let x =
                encode_step_input(&v(kind).with_meta(true), 5, None, &z, 2, Some(&meta)).unwrap();
            assert_eq!(x.len(), 31);
        }
        assert_eq!(
            encode_step_input(&v(TracerKind::Dkt), 5, None, &z, 2, None)
                .unwrap()
                .len(),
            15
        );
        assert!(encode_step_input(&v(TracerKind::Direct), 5, None, &z, 5, None).is_err());
    }

    #[test]
    fn first_step_previous_blocks_are_zero() {
        let z = [0.3, -0.7];
        let x = encode_step_input(&v(TracerKind::Direct), 3, None, &z, 1, None).unwrap();
        assert_eq!(x, vec![0.0, 0.0, 0.0, 0.3, -0.7, 0.0, 1.0, 0.0]);
        let x = encode_step_input(&v(TracerKind::ClsPred), 3, None, &z, 1, None).unwrap();
        assert_eq!(x, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn layouts_with_history() {
        let pz = [1.0, 2.0];
        let prev = PrevInteraction {
            z: &pz,
            label: 0,
            response: 2,
        };
        let z = [5.0, 6.0];
        let direct =
            encode_step_input(&v(TracerKind::Direct), 3, Some(&prev), &z, 1, None).unwrap();
        assert_eq!(direct, vec![0.0, 0.0, 1.0, 5.0, 6.0, 0.0, 1.0, 0.0]);
        let direct_y = v(TracerKind::Direct).with_conditioning(Conditioning::Y);
        let x = encode_step_input(&direct_y, 3, Some(&prev), &z, 1, None).unwrap();
        assert_eq!(x, vec![0.0, 0.0, 1.0, 1.0, 2.0, 0.0, 1.0, 0.0]);
        let direct_base = v(TracerKind::Direct).with_conditioning(Conditioning::Base);
        let x = encode_step_input(&direct_base, 3, Some(&prev), &z, 1, None).unwrap();
        assert_eq!(x, vec![0.0, 0.0, 1.0, 1.0, 2.0, 1.0, 0.0, 0.0]);
        let cls = encode_step_input(&v(TracerKind::ClsPred), 3, Some(&prev), &z, 1, None).unwrap();
        assert_eq!(cls, vec![1.0, 2.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let dkt = encode_step_input(&v(TracerKind::Dkt), 3, Some(&prev), &z, 1, None).unwrap();
        assert_eq!(dkt, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn conditioning_and_meta_are_validated() {
        let bad = v(TracerKind::Static).with_conditioning(Conditioning::Y);
        assert!(bad.validate().is_err());
        assert!(v(TracerKind::Exemplar).with_meta(true).validate().is_err());
        assert!(v(TracerKind::Static).with_meta(true).validate().is_ok());
    }

    #[test]
    fn static_cases() {
        let w = Tensor::<f64>::zeros(&[4, 3]);
        let b = Tensor::zeros(&[4]);
        let p = static_predict(&[1.0, 2.0, 3.0], &w, &b).unwrap();
        assert!(p.probs.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let w = Tensor::from_rows(&[vec![1.0], vec![-1.0]]).unwrap();
        let p = static_predict(&[0.0], &w, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(p.probs, vec![0.5, 0.5]);
        let w = Tensor::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.1], vec![-0.4, 0.4]]).unwrap();
        let b = Tensor::from_f64(&[3], &[0.1, -0.2, 0.3]).unwrap();
        let shifted = b.map(|x| x + 7.5);
        let a = static_predict(&[0.2, 0.9], &w, &b).unwrap();
        let s = static_predict(&[0.2, 0.9], &w, &shifted).unwrap();
        for (x, y) in a.probs.iter().zip(&s.probs) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(static_predict(&[0.2], &w, &b).is_err());
    }

    #[test]
    fn classify_matches_static_and_scaling_keeps_argmax() {
        let w = Tensor::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.1], vec![-0.4, 0.4]]).unwrap();
        let b = vec![0.1, -0.2, 0.3];
        let cls = PredictedClassifier {
            w: w.clone(),
            b: b.clone(),
        };
        let z = [0.5, -0.25];
        let a = classify(&cls, &z).unwrap();
        assert_eq!(
            a,
            static_predict(&z, &w, &Tensor::from_f64(&[3], &b).unwrap()).unwrap()
        );
        let scaled = PredictedClassifier {
            w: w.map(|x| 3.0 * x),
            b: b.iter().map(|x| 3.0 * x).collect(),
        };
        assert_eq!(classify(&scaled, &z).unwrap().argmax(), a.argmax());
        let zero = PredictedClassifier::from_flat(&[0.0; 9], 3).unwrap();
        assert_eq!(
            classify(&zero, &z).unwrap(),
            ResponseDistribution::uniform(3)
        );
    }

    #[test]
    fn time_indexed_table() {
        let table: Vec<_> = (0..30)
            .map(|_| (Tensor::<f64>::zeros(&[3, 2]), Tensor::zeros(&[3])))
            .collect();
        for t in 1..=30 {
            assert_eq!(
                time_indexed_predict(&[1.0, 1.0], t, &table).unwrap(),
                ResponseDistribution::uniform(3)
            );
        }
        assert!(time_indexed_predict(&[1.0, 1.0], 0, &table).is_err());
        assert!(time_indexed_predict(&[1.0, 1.0], 31, &table).is_err());
        let mut table = table;
        table[4].0 = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert_ne!(
            time_indexed_predict(&[1.0, 1.0], 5, &table).unwrap(),
            time_indexed_predict(&[1.0, 1.0], 6, &table).unwrap()
        );
    }

    #[test]
    fn similarity_values() {
        assert_eq!(similarity(&[1.0, 2.0], &[1.0, 2.0], 3.0), 1.0);
        assert!((similarity(&[0.0, 0.0], &[0.6, 0.8], 1.0) - (-1.0f64).exp()).abs() < 1e-15);
        let mut last = 1.0;
        for k in 1..20 {
            let s = similarity(&[0.0], &[k as f64 * 0.3], 0.7);
            assert!(s < last);
            last = s;
        }
    }

    #[test]
    fn prototype_hand_case() {
        let h = vec![(vec![1.0, 0.0], 0)];
        let z = [0.0, 1.0];
        let p = prototype_predict(&h, &z, 1.0, 2, PrototypeNorm::ClassMean).unwrap();
        let s0 = (-(2f64).sqrt()).exp();
        let s1 = (-1f64).exp();
        assert!((p.probs[0] - s0 / (s0 + s1)).abs() < 1e-12);
        assert!(
            prototype_predict(&[], &z, 1.0, 2, PrototypeNorm::ClassMean).unwrap()
                == ResponseDistribution::uniform(2)
        );
        assert!(prototype_predict(&h, &z, 0.0, 2, PrototypeNorm::ClassMean).is_err());
    }

    #[test]
    fn exemplar_cases() {
        let h = vec![
            (vec![1.0, 0.0], 0),
            (vec![-1.0, 0.0], 1),
            (vec![0.0, 1.0], 2),
        ];
        let p = exemplar_predict(&h[..2], &[0.0, 0.0], 1.3, 1.0, 3).unwrap();
        assert!(
            (p.probs[0] - 0.5).abs() < 1e-15
                && (p.probs[1] - 0.5).abs() < 1e-15
                && p.probs[2] == 0.0
        );
        let sharp = exemplar_predict(&h, &[0.9, 0.1], 1.0, 200.0, 3).unwrap();
        assert!(sharp.probs[0] > 0.999);
    }

    #[test]
    fn per_class_accuracy_counts() {
        assert_eq!(per_class_accuracy(&[], 3), vec![0.0; 3]);
        assert_eq!(
            per_class_accuracy(&[(0, 0), (0, 1), (1, 1)], 3),
            vec![0.5, 1.0, 0.0]
        );
    }
}
