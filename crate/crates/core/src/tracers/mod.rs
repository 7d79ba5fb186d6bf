//! Tracing models: static, time-indexed, recurrent (direct response,
//! classifier prediction, DKT) and the prototype/exemplar cognitive models.

pub mod functional;
pub mod model;
pub mod stimuli;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use functional::{
    classify, encode_step_input, exemplar_predict, per_class_accuracy, prototype_predict,
    similarity, softmax, static_predict, time_indexed_predict, PrevInteraction,
};
pub use model::{
    BatchOutput, CognitiveParams, EmbeddingKind, ModelConfig, TraceSequence, TracerModel,
    TracerState,
};
pub use stimuli::Stimuli;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TracerKind {
    Static,
    StaticTime,
    Direct,
    ClsPred,
    Dkt,
    Prototype,
    Exemplar,
}

impl TracerKind {
    pub const ALL: [TracerKind; 7] = [
        TracerKind::Static,
        TracerKind::StaticTime,
        TracerKind::Direct,
        TracerKind::ClsPred,
        TracerKind::Dkt,
        TracerKind::Prototype,
        TracerKind::Exemplar,
    ];

    pub fn is_recurrent(self) -> bool {
        matches!(
            self,
            TracerKind::Direct | TracerKind::ClsPred | TracerKind::Dkt
        )
    }

    pub fn is_cognitive(self) -> bool {
        matches!(self, TracerKind::Prototype | TracerKind::Exemplar)
    }

    /// Whether the model reads image embeddings at all.
    pub fn uses_embeddings(self) -> bool {
        self != TracerKind::Dkt
    }

    pub fn name(self) -> &'static str {
        match self {
            TracerKind::Static => "static",
            TracerKind::StaticTime => "static_time",
            TracerKind::Direct => "direct",
            TracerKind::ClsPred => "cls_pred",
            TracerKind::Dkt => "dkt",
            TracerKind::Prototype => "prototype",
            TracerKind::Exemplar => "exemplar",
        }
    }
}

impl std::str::FromStr for TracerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TracerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

/// What the recurrent input carries about the current query.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Conditioning {
    /// History only.
    #[default]
    #[serde(rename = "base")]
    Base,
    /// History plus the query's true label.
    #[serde(rename = "y")]
    Y,
    /// History plus the query's true label and embedding.
    #[serde(rename = "y_z")]
    YZ,
}

impl std::str::FromStr for Conditioning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Conditioning::Base),
            "y" => Ok(Conditioning::Y),
            "y_z" => Ok(Conditioning::YZ),
            other => Err(Error::Config(format!("unknown conditioning '{other}'"))),
        }
    }
}

/// How prototypes are normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeNorm {
    /// Mean over history items of the class.
    #[default]
    ClassMean,
    /// Sum over history items of the class divided by the history length.
    HistoryLength,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TracerVariant {
    pub kind: TracerKind,
    #[serde(default)]
    pub conditioning: Conditioning,
    #[serde(default)]
    pub meta_per_class_acc: bool,
    #[serde(default)]
    pub prototype_norm: PrototypeNorm,
}

impl TracerVariant {
    /// The variant with its default conditioning: query embedding and label
    /// for `direct`, query label for `cls_pred`.
    pub fn new(kind: TracerKind) -> Self {
        let conditioning = match kind {
            TracerKind::Direct => Conditioning::YZ,
            TracerKind::ClsPred => Conditioning::Y,
            _ => Conditioning::Base,
        };
        Self {
            kind,
            conditioning,
            meta_per_class_acc: false,
            prototype_norm: PrototypeNorm::ClassMean,
        }
    }

    pub fn with_conditioning(mut self, c: Conditioning) -> Self {
        self.conditioning = c;
        self
    }

    pub fn with_meta(mut self, on: bool) -> Self {
        self.meta_per_class_acc = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.kind;
        if self.conditioning != Conditioning::Base
            && !matches!(k, TracerKind::Direct | TracerKind::ClsPred)
        {
            return Err(Error::Config(format!(
                "conditioning applies only to direct and cls_pred, not {}",
                k.name()
            )));
        }
        if self.meta_per_class_acc
            && !matches!(
                k,
                TracerKind::Static | TracerKind::Direct | TracerKind::ClsPred
            )
        {
            return Err(Error::Config(format!(
                "per-class accuracy input is not defined for {}",
                k.name()
            )));
        }
        if self.prototype_norm != PrototypeNorm::ClassMean && k != TracerKind::Prototype {
            return Err(Error::Config(
                "prototype_norm applies only to prototype".into(),
            ));
        }
        Ok(())
    }

    /// Width of the recurrent step input.
    pub fn step_input_len(&self, classes: usize, dim: usize) -> usize {
        let base = match self.kind {
            TracerKind::Dkt => 3 * classes,
            _ => dim + 2 * classes,
        };
        base + if self.meta_per_class_acc { classes } else { 0 }
    }
}

/// Probability vector over classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseDistribution {
    pub probs: Vec<f64>,
}

impl ResponseDistribution {
    pub fn uniform(classes: usize) -> Self {
        Self {
            probs: vec![1.0 / classes as f64; classes],
        }
    }

    pub fn one_hot(classes: usize, c: usize) -> Self {
        let mut probs = vec![0.0; classes];
        probs[c] = 1.0;
        Self { probs }
    }

    /// Most probable class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn sum(&self) -> f64 {
        self.probs.iter().sum()
    }
}

/// Per-step linear classifier: `w` is `C x D`, `b` has `C` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedClassifier {
    pub w: Tensor<f64>,
    pub b: Vec<f64>,
}

impl PredictedClassifier {
    /// Splits a flat `C*D` weights + `C` biases vector.
    pub fn from_flat(flat: &[f64], classes: usize) -> Result<Self> {
        if classes == 0 || !flat.len().is_multiple_of(classes) || flat.len() / classes < 2 {
            return Err(Error::Shape(format!(
                "{} values cannot hold {classes} classifiers",
                flat.len()
            )));
        }
        let dim = flat.len() / classes - 1;
        Ok(Self {
            w: Tensor::new(&[classes, dim], flat[..classes * dim].to_vec())?,
            b: flat[classes * dim..].to_vec(),
        })
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.w.data().to_vec();
        v.extend_from_slice(&self.b);
        v
    }
}
