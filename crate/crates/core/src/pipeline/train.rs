use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{evaluate_model, APReport};
use super::split::{Split, SplitAssignment};
use crate::data::LearnerSession;
use crate::error::{Error, Result};
use crate::numerics::{AdamGroup, Graph, ParamGroup, ParamStore, Scalar};
use crate::tracers::{
    EmbeddingKind, ModelConfig, Stimuli, TraceSequence, TracerModel, TracerVariant,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub lr_encoder: f64,
    pub lr_head: f64,
    /// Learners per batch.
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub embed_dim: usize,
    pub seed: u64,
    pub reshuffles: usize,
    pub variant: TracerVariant,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lr_encoder: 1e-5,
            lr_head: 1e-3,
            batch_size: 16,
            patience: 35,
            max_epochs: 400,
            embed_dim: 16,
            seed: 0,
            reshuffles: 5,
            variant: TracerVariant::new(crate::tracers::TracerKind::Direct),
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_encoder > 0.0 && self.lr_head > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.patience == 0 || self.embed_dim == 0 || self.reshuffles == 0
        {
            return Err(Error::Config(
                "batch size, patience, embed_dim and reshuffles must be positive".into(),
            ));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} must be below max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        self.variant.validate()
    }

    /// Default-sized model of this variant.
    pub fn model_config(&self, classes: usize, embedding: EmbeddingKind) -> ModelConfig {
        ModelConfig::new(self.variant, classes, embedding)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
    /// Observed responses whose predicted probability hit the floor.
    pub clamp_events: usize,
    /// Whether validation loss fell back to the training loss for lack of
    /// validation learners.
    pub val_from_train: bool,
}

/// Model sequences of sessions, in order.
pub fn sequences<T: Scalar>(
    sessions: &[LearnerSession],
    stimuli: &Stimuli<T>,
) -> Result<Vec<TraceSequence>> {
    sessions
        .iter()
        .map(|s| TraceSequence::from_session(s, stimuli))
        .collect()
}

/// Mean training-phase loss over sequences, evaluated in chunks.
fn mean_loss<T: Scalar>(
    model: &TracerModel<T>,
    stimuli: &Stimuli<T>,
    seqs: &[TraceSequence],
    chunk: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for part in seqs.chunks(chunk.max(1)) {
        let refs: Vec<&TraceSequence> = part.iter().collect();
        let mut g = Graph::new();
        let out = model.forward_batch(&mut g, stimuli, &refs, false)?;
        let loss = model.sequence_loss(&mut g, &out, &refs)?;
        total += g.value(loss).data()[0].as_f64() * part.len() as f64;
    }
    Ok(total / seqs.len() as f64)
}

/// Trains with a per-epoch hook. The hook sees the epoch's parameters and
/// may adjust the record before the early-stopping decision uses it.
pub fn train_with<T: Scalar, F: FnMut(&mut EpochRecord, &ParamStore<T>)>(
    config: ModelConfig,
    stimuli: &Stimuli<T>,
    train_seqs: &[TraceSequence],
    val_seqs: &[TraceSequence],
    hp: &Hyperparams,
    mut on_epoch: F,
) -> Result<(TracerModel<T>, TrainReport)> {
    hp.validate()?;
    if train_seqs.is_empty() {
        return Err(Error::Config("no training learners".into()));
    }
    let mut model = TracerModel::<T>::new(config, hp.seed)?;
    let mut groups = [
        AdamGroup::new(
            &model.store,
            model.store.ids_in(ParamGroup::Encoder),
            T::lit(hp.lr_encoder),
        ),
        AdamGroup::new(
            &model.store,
            model.store.ids_in(ParamGroup::Head),
            T::lit(hp.lr_head),
        ),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..train_seqs.len()).collect();
    let mut best = model.store.clone();
    let mut best_epoch = 0;
    let mut best_val = f64::INFINITY;
    let mut epochs = Vec::new();
    let mut clamp_events = 0;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=hp.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, idx) in order.chunks(hp.batch_size).enumerate() {
            let refs: Vec<&TraceSequence> = idx.iter().map(|&i| &train_seqs[i]).collect();
            let mut g = Graph::new();
            let out = model.forward_batch(&mut g, stimuli, &refs, false)?;
            let loss = model.sequence_loss(&mut g, &out, &refs)?;
            let value = g.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b + 1,
                });
            }
            clamp_events += g.clamp_events();
            total += value * refs.len() as f64;
            let grads = g.backward(loss, &model.store)?;
            for group in &mut groups {
                group.step(&mut model.store, &grads)?;
            }
        }
        let train_loss = total / train_seqs.len() as f64;
        let val_loss = if val_seqs.is_empty() {
            train_loss
        } else {
            mean_loss(&model, stimuli, val_seqs, hp.batch_size)?
        };
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0 });
        }
        let mut record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
        };
        on_epoch(&mut record, &model.store);
        let val_loss = record.val_loss;
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        epochs.push(record);
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best.copy_from(&model.store)?;
        } else if epoch - best_epoch >= hp.patience {
            stop_reason = StopReason::Patience;
            break;
        }
    }
    model.store.copy_from(&best)?;
    if clamp_events > 0 {
        log::warn!("{clamp_events} observed responses had probability at the floor");
    }
    Ok((
        model,
        TrainReport {
            epochs,
            best_epoch,
            best_val_loss: best_val,
            stop_reason,
            clamp_events,
            val_from_train: val_seqs.is_empty(),
        },
    ))
}

pub fn train<T: Scalar>(
    config: ModelConfig,
    stimuli: &Stimuli<T>,
    train_seqs: &[TraceSequence],
    val_seqs: &[TraceSequence],
    hp: &Hyperparams,
) -> Result<(TracerModel<T>, TrainReport)> {
    train_with(config, stimuli, train_seqs, val_seqs, hp, |_, _| {})
}

/// A model trained on one split and scored on its test learners.
pub struct SplitRun<T> {
    pub model: TracerModel<T>,
    pub report: TrainReport,
    pub ap: APReport,
}

/// Trains on the split's train learners, stops early on its validation
/// learners and scores its test learners.
pub fn fit_split<T: Scalar>(
    config: ModelConfig,
    stimuli: &Stimuli<T>,
    sessions: &[LearnerSession],
    split: &SplitAssignment,
    hp: &Hyperparams,
) -> Result<SplitRun<T>> {
    split.check(sessions)?;
    let pick = |s: Split| -> Vec<LearnerSession> {
        split.select(sessions, s).into_iter().cloned().collect()
    };
    let (tr, va, te) = (pick(Split::Train), pick(Split::Val), pick(Split::Test));
    let (model, report) = train(
        config,
        stimuli,
        &sequences(&tr, stimuli)?,
        &sequences(&va, stimuli)?,
        hp,
    )?;
    let (ap, _) = evaluate_model(&model, stimuli, &te)?;
    Ok(SplitRun { model, report, ap })
}
