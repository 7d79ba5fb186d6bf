use std::collections::HashSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::sequences;
use crate::data::{LearnerSession, Phase};
use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::tracers::{Stimuli, TracerKind, TracerModel};

/// Up to `per_class` stimuli of each class, sampled once by seed, grouped
/// by class.
pub fn probe_set<T: Scalar>(
    stimuli: &Stimuli<T>,
    classes: usize,
    per_class: usize,
    seed: u64,
) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..stimuli.len())
            .filter(|&i| stimuli.labels[i] == c)
            .collect();
        idx.shuffle(&mut rng);
        idx.truncate(per_class);
        idx.sort_unstable();
        out.extend(idx);
    }
    out
}

/// Mean correct-class probability per class (rows) and step (columns).
/// The first `train_steps` columns follow the learner's training history;
/// the remaining columns repeat the frozen state's values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityTrace {
    pub train_steps: usize,
    pub test_steps: usize,
    pub mean: Vec<Vec<f64>>,
    pub sd: Vec<Vec<f64>>,
    pub count: Vec<Vec<usize>>,
}

impl ProbabilityTrace {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["class", "step", "mean", "sd", "count"])
            .map_err(csv_err)?;
        for (c, row) in self.mean.iter().enumerate() {
            for (t, m) in row.iter().enumerate() {
                w.write_record([
                    c.to_string(),
                    (t + 1).to_string(),
                    m.to_string(),
                    self.sd[c][t].to_string(),
                    self.count[c][t].to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Evaluates the probe set at every training step of every session. Probe
/// items the learner saw are skipped for that learner.
pub fn probability_trace<T: Scalar>(
    model: &TracerModel<T>,
    stimuli: &Stimuli<T>,
    sessions: &[LearnerSession],
    probes: &[usize],
) -> Result<ProbabilityTrace> {
    let seqs = sequences(sessions, stimuli)?;
    let classes = model.classes();
    let (tr, te) = match seqs.first() {
        Some(s) => (s.train_len, s.test_len()),
        None => (0, 0),
    };
    let cols = tr + te;
    let mut sum = vec![vec![0.0; cols]; classes];
    let mut sq = vec![vec![0.0; cols]; classes];
    let mut count = vec![vec![0usize; cols]; classes];
    let probe_z = model.embed_items(stimuli, probes)?;
    for seq in &seqs {
        if seq.train_len != tr || seq.test_len() != te {
            return Err(Error::Contract("sessions differ in phase lengths".into()));
        }
        let seen: HashSet<usize> = seq.items.iter().copied().collect();
        let keep: Vec<usize> = (0..probes.len())
            .filter(|&j| !seen.contains(&probes[j]))
            .collect();
        let queries: Vec<(Vec<f64>, usize)> = keep
            .iter()
            .map(|&j| (probe_z[j].clone(), stimuli.labels[probes[j]]))
            .collect();
        let z = model.embed_items(stimuli, &seq.items[..tr])?;
        let mut state = model.initial_state();
        let mut record = |state: &_, from: usize, to: usize| -> Result<()> {
            let preds = model.predict_many(state, &queries)?;
            for (d, (_, y)) in preds.iter().zip(&queries) {
                let p = d.probs[*y];
                for t in from..to {
                    sum[*y][t] += p;
                    sq[*y][t] += p * p;
                    count[*y][t] += 1;
                }
            }
            Ok(())
        };
        for t in 0..tr {
            record(&state, t, t + 1)?;
            state = model.advance(&state, &z[t], seq.labels[t], seq.responses[t])?;
        }
        record(&state, tr, cols)?;
    }
    let mut mean = vec![vec![0.0; cols]; classes];
    let mut sd = vec![vec![0.0; cols]; classes];
    for c in 0..classes {
        for t in 0..cols {
            let n = count[c][t] as f64;
            if n > 0.0 {
                mean[c][t] = sum[c][t] / n;
            }
            if n > 1.0 {
                sd[c][t] = ((sq[c][t] - n * mean[c][t] * mean[c][t]).max(0.0) / (n - 1.0)).sqrt();
            }
        }
    }
    Ok(ProbabilityTrace {
        train_steps: tr,
        test_steps: te,
        mean,
        sd,
        count,
    })
}

/// Adjusted Fisher-Pearson sample skewness; `None` below 3 values or
/// without variance.
pub fn skewness(values: &[f64]) -> Option<f64> {
    let n = values.len();
    if n < 3 {
        return None;
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf;
    let m3 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / nf;
    if m2 <= 0.0 {
        return None;
    }
    let g1 = m3 / m2.powf(1.5);
    Some((nf * (nf - 1.0)).sqrt() / (nf - 2.0) * g1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseStats {
    /// `histogram[k]` learners got exactly `k` right.
    pub histogram: Vec<usize>,
    pub mean: f64,
    pub skewness: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessStats {
    pub learners: usize,
    pub train: PhaseStats,
    pub test: PhaseStats,
}

fn phase_stats(sessions: &[LearnerSession], phase: Phase) -> PhaseStats {
    let steps = sessions
        .iter()
        .map(|s| s.interactions.iter().filter(|i| i.phase == phase).count())
        .max()
        .unwrap_or(0);
    let counts: Vec<usize> = sessions.iter().map(|s| s.correct_count(phase)).collect();
    let mut histogram = vec![0; steps + 1];
    for &c in &counts {
        histogram[c] += 1;
    }
    let values: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    PhaseStats {
        histogram,
        mean: if values.is_empty() {
            0.0
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        },
        skewness: skewness(&values),
    }
}

pub fn correctness_stats(sessions: &[LearnerSession]) -> CorrectnessStats {
    CorrectnessStats {
        learners: sessions.len(),
        train: phase_stats(sessions, Phase::Train),
        test: phase_stats(sessions, Phase::Test),
    }
}

/// Writes the recurrent state after every training step (one row per
/// learner, step, layer and state kind) and, for classifier-predicting
/// models, the classifier emitted at every step. Returns the row counts.
pub fn export_states<T: Scalar, W: Write, V: Write>(
    model: &TracerModel<T>,
    stimuli: &Stimuli<T>,
    sessions: &[LearnerSession],
    states: W,
    classifiers: Option<V>,
) -> Result<(usize, usize)> {
    if !model.kind().is_recurrent() {
        return Err(Error::Config(format!(
            "{} has no recurrent state",
            model.kind().name()
        )));
    }
    let mut sw = csv::Writer::from_writer(states);
    let hidden = model.config.hidden;
    let mut header: Vec<String> = ["learner_id", "step", "layer", "kind"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..hidden).map(|i| format!("v{i}")));
    sw.write_record(&header).map_err(csv_err)?;

    let emit = model.kind() == TracerKind::ClsPred;
    let mut cw = match classifiers {
        Some(w) if emit => {
            let mut cw = csv::Writer::from_writer(w);
            let n = model.classes() * (model.config.embed_dim() + 1);
            let mut header: Vec<String> = vec!["learner_id".into(), "step".into()];
            header.extend((0..n).map(|i| format!("c{i}")));
            cw.write_record(&header).map_err(csv_err)?;
            Some(cw)
        }
        _ => None,
    };

    let seqs = sequences(sessions, stimuli)?;
    let (mut state_rows, mut cls_rows) = (0, 0);
    for (session, seq) in sessions.iter().zip(&seqs) {
        let z = model.embed_items(stimuli, &seq.items[..seq.train_len])?;
        let mut state = model.initial_state();
        for t in 0..seq.len() {
            if let Some(cw) = cw.as_mut() {
                let flat = model.emit_classifier(&state, seq.labels[t])?.flat();
                let mut row = vec![session.learner_id.clone(), (t + 1).to_string()];
                row.extend(flat.iter().map(f64::to_string));
                cw.write_record(&row).map_err(csv_err)?;
                cls_rows += 1;
            }
            if t >= seq.train_len {
                continue;
            }
            state = model.advance(&state, &z[t], seq.labels[t], seq.responses[t])?;
            for (kind, layers) in [("hidden", &state.hidden), ("cell", &state.cell)] {
                for (l, values) in layers.iter().enumerate() {
                    let mut row = vec![
                        session.learner_id.clone(),
                        (t + 1).to_string(),
                        l.to_string(),
                        kind.into(),
                    ];
                    row.extend(values.iter().map(f64::to_string));
                    sw.write_record(&row).map_err(csv_err)?;
                    state_rows += 1;
                }
            }
        }
    }
    sw.flush()?;
    if let Some(mut cw) = cw {
        cw.flush()?;
    }
    Ok((state_rows, cls_rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skewness_cases() {
        assert!(skewness(&[9.0, 10.0, 11.0]).unwrap().abs() < 1e-12);
        assert!(skewness(&[1.0, 2.0]).is_none());
        assert!(skewness(&[4.0, 4.0, 4.0]).is_none());
        // Hand value: deviations (-1, -1, 2), m2 = 2, m3 = 2.
        let want = (6.0f64).sqrt() / 1.0 * (2.0 / 2.0f64.powf(1.5));
        assert!((skewness(&[1.0, 1.0, 4.0]).unwrap() - want).abs() < 1e-12);
    }
}
