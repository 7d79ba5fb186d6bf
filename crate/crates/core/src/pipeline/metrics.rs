use serde::{Deserialize, Serialize};

use super::split::{Split, SplitAssignment};
use crate::data::{LearnerSession, Phase};
use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::tracers::{ResponseDistribution, Stimuli, TracerModel};

/// Mean over positives of the precision at their rank, ranking by
/// descending score with ties kept in input order. `None` without
/// positives.
pub fn average_precision(scores: &[(f64, bool)]) -> Option<f64> {
    let positives = scores.iter().filter(|s| s.1).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].0.total_cmp(&scores[a].0));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if scores[i].1 {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(total / positives as f64)
}

/// AP of one block of predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApScores {
    pub micro: f64,
    /// Unweighted mean of the per-class APs that are defined.
    #[serde(rename = "macro")]
    pub macro_ap: f64,
    /// `None` for classes no learner chose.
    pub per_class: Vec<Option<f64>>,
    pub predictions: usize,
}

/// Scores on the training steps and the frozen test steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct APReport {
    pub train: ApScores,
    pub test: ApScores,
}

fn score_block(pairs: &[(&ResponseDistribution, usize)], classes: usize) -> Result<ApScores> {
    if pairs.is_empty() {
        return Err(Error::Contract("no predictions to score".into()));
    }
    let mut per: Vec<Vec<(f64, bool)>> = vec![Vec::with_capacity(pairs.len()); classes];
    let mut all = Vec::with_capacity(pairs.len() * classes);
    for (dist, response) in pairs {
        if dist.probs.len() != classes {
            return Err(Error::Shape(format!(
                "distribution over {} classes, expected {classes}",
                dist.probs.len()
            )));
        }
        for (c, &p) in dist.probs.iter().enumerate() {
            per[c].push((p, *response == c));
            all.push((p, *response == c));
        }
    }
    let per_class: Vec<Option<f64>> = per.iter().map(|s| average_precision(s)).collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(ApScores {
        micro: average_precision(&all).expect("every prediction has one positive"),
        macro_ap: defined.iter().sum::<f64>() / defined.len() as f64,
        per_class,
        predictions: pairs.len(),
    })
}

/// Scores per-session predictions (training steps then test steps, as
/// produced by the tracers) against each learner's top response.
pub fn ap_report(
    preds: &[Vec<ResponseDistribution>],
    sessions: &[LearnerSession],
    classes: usize,
) -> Result<APReport> {
    if sessions.is_empty() {
        return Err(Error::Contract(
            "cannot score an empty set of sessions".into(),
        ));
    }
    if preds.len() != sessions.len() {
        return Err(Error::Contract(format!(
            "{} prediction sets for {} sessions",
            preds.len(),
            sessions.len()
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (p, s) in preds.iter().zip(sessions) {
        if p.len() != s.interactions.len() {
            return Err(Error::Contract(format!(
                "learner '{}': {} predictions for {} steps",
                s.learner_id,
                p.len(),
                s.interactions.len()
            )));
        }
        for (d, i) in p.iter().zip(&s.interactions) {
            match i.phase {
                Phase::Train => train.push((d, i.response())),
                Phase::Test => test.push((d, i.response())),
            }
        }
    }
    Ok(APReport {
        train: score_block(&train, classes)?,
        test: score_block(&test, classes)?,
    })
}

/// One-hot at the true label for every step.
pub fn gt_label_baseline(session: &LearnerSession, classes: usize) -> Vec<ResponseDistribution> {
    session
        .interactions
        .iter()
        .map(|i| ResponseDistribution::one_hot(classes, i.label))
        .collect()
}

/// Teacher-forced predictions of a model on sessions, scored.
pub fn evaluate_model<T: Scalar>(
    model: &TracerModel<T>,
    stimuli: &Stimuli<T>,
    sessions: &[LearnerSession],
) -> Result<(APReport, Vec<Vec<ResponseDistribution>>)> {
    let seqs = super::train::sequences(sessions, stimuli)?;
    let preds = model.predict_sequences(stimuli, &seqs, 32)?;
    Ok((ap_report(&preds, sessions, model.classes())?, preds))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub sd: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.iter().all(|&v| v == values[0]) {
            return Self {
                mean: values[0],
                sd: 0.0,
            };
        }
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, sd }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpreadScores {
    pub micro: Spread,
    #[serde(rename = "macro")]
    pub macro_ap: Spread,
    /// Over the runs where the class was defined.
    pub per_class: Vec<Option<Spread>>,
}

impl SpreadScores {
    fn of(runs: &[&ApScores]) -> Self {
        let classes = runs[0].per_class.len();
        Self {
            micro: Spread::of(&runs.iter().map(|r| r.micro).collect::<Vec<_>>()),
            macro_ap: Spread::of(&runs.iter().map(|r| r.macro_ap).collect::<Vec<_>>()),
            per_class: (0..classes)
                .map(|c| {
                    let v: Vec<f64> = runs.iter().filter_map(|r| r.per_class[c]).collect();
                    (!v.is_empty()).then(|| Spread::of(&v))
                })
                .collect(),
        }
    }
}

/// Mean and spread over repeated splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReshuffleReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<APReport>,
    pub train: SpreadScores,
    pub test: SpreadScores,
}

/// Runs `run` on `reshuffles` splits seeded `seed + i` and summarizes.
/// `run` receives the split and its seed and returns the held-out report.
pub fn reshuffle_protocol<F>(
    sessions: &[LearnerSession],
    fractions: [f64; 2],
    seed: u64,
    reshuffles: usize,
    mut run: F,
) -> Result<ReshuffleReport>
where
    F: FnMut(&SplitAssignment, u64) -> Result<APReport>,
{
    if reshuffles == 0 {
        return Err(Error::Config("reshuffles must be positive".into()));
    }
    let ids: Vec<String> = sessions.iter().map(|s| s.learner_id.clone()).collect();
    let seeds: Vec<u64> = (0..reshuffles as u64).map(|i| seed + i).collect();
    let mut runs = Vec::with_capacity(reshuffles);
    for &s in &seeds {
        let split = super::split::split_learners(&ids, fractions, s)?;
        split.check(sessions)?;
        if split.count(Split::Test) == 0 {
            return Err(Error::Contract("split has no test learners".into()));
        }
        runs.push(run(&split, s)?);
    }
    let train: Vec<&ApScores> = runs.iter().map(|r| &r.train).collect();
    let test: Vec<&ApScores> = runs.iter().map(|r| &r.test).collect();
    Ok(ReshuffleReport {
        train: SpreadScores::of(&train),
        test: SpreadScores::of(&test),
        seeds,
        runs,
    })
}
