use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::functional::{layout, per_class_accuracy, Block};
use super::stimuli::Stimuli;
use super::{PredictedClassifier, PrototypeNorm, ResponseDistribution, TracerKind, TracerVariant};
use crate::data::{FeatureMap, LearnerSession, Phase};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::checkpoint::{load_checkpoint, save_checkpoint};
use crate::numerics::{
    uniform_fan_in, Graph, LstmNodes, LstmParams, NodeId, ParamGroup, ParamId, ParamStore, Scalar,
    Tensor,
};

/// Where embeddings come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EmbeddingKind {
    /// Learned CNN over images.
    Cnn(EncoderConfig),
    /// Fixed map of recorded stimulus features; nothing is learned.
    Features(FeatureMap),
}

impl EmbeddingKind {
    pub fn dim(&self) -> usize {
        match self {
            EmbeddingKind::Cnn(c) => c.embed_dim,
            EmbeddingKind::Features(m) => m.out_dim(),
        }
    }
}

/// Initial values of the similarity scale `c` and exponent `gamma`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CognitiveParams {
    pub c: f64,
    pub gamma: f64,
}

impl Default for CognitiveParams {
    fn default() -> Self {
        Self { c: 1.0, gamma: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: TracerVariant,
    pub classes: usize,
    pub embedding: EmbeddingKind,
    pub hidden: usize,
    pub layers: usize,
    pub head_hidden: usize,
    /// Length of the feedback phase; sizes the time-indexed table.
    pub train_steps: usize,
    #[serde(default)]
    pub cognitive: CognitiveParams,
}

impl ModelConfig {
    pub fn new(variant: TracerVariant, classes: usize, embedding: EmbeddingKind) -> Self {
        Self {
            variant,
            classes,
            embedding,
            hidden: 128,
            layers: 3,
            head_hidden: 64,
            train_steps: crate::data::TRAIN_STEPS,
            cognitive: CognitiveParams::default(),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.embedding.dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.variant.validate()?;
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.embed_dim() == 0 || self.hidden == 0 || self.layers == 0 || self.head_hidden == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.train_steps == 0 {
            return Err(Error::Config("train_steps must be positive".into()));
        }
        let cog = self.cognitive;
        if !(cog.c > 0.0) || !(cog.gamma > 0.0) {
            return Err(Error::Config(
                "similarity scale and gamma must be positive".into(),
            ));
        }
        if self.variant.kind == TracerKind::Prototype && cog.gamma != 1.0 {
            return Err(Error::Config(format!(
                "prototype requires gamma = 1, got {}",
                cog.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Head {
    Static {
        w: ParamId,
        b: ParamId,
    },
    StaticTime {
        table: Vec<(ParamId, ParamId)>,
    },
    Recurrent {
        lstm: LstmParams,
        fc1: (ParamId, ParamId),
        slope: ParamId,
        fc2: (ParamId, ParamId),
    },
    Cognitive {
        log_c: ParamId,
        log_gamma: Option<ParamId>,
    },
}

/// One learner sequence in model terms.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceSequence {
    /// Stimulus indices.
    pub items: Vec<usize>,
    pub labels: Vec<usize>,
    /// Top-ranked responses.
    pub responses: Vec<usize>,
    /// Number of leading feedback steps; the rest are test queries.
    pub train_len: usize,
}

impl TraceSequence {
    pub fn from_session<T: Scalar>(session: &LearnerSession, stimuli: &Stimuli<T>) -> Result<Self> {
        Ok(Self {
            items: stimuli.session_items(session)?,
            labels: session.interactions.iter().map(|i| i.label).collect(),
            responses: session.interactions.iter().map(|i| i.response()).collect(),
            train_len: session
                .interactions
                .iter()
                .filter(|i| i.phase == Phase::Train)
                .count(),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn test_len(&self) -> usize {
        self.items.len() - self.train_len
    }
}

/// Graph nodes produced for a batch of `rows` sequences. Probability
/// matrices are step-major: row `t * rows + k` is sequence `k` at step `t`.
#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub rows: usize,
    pub train_steps: usize,
    pub test_steps: usize,
    pub train: NodeId,
    pub test: Option<NodeId>,
    /// Recurrent state after each training step.
    pub states: Vec<LstmNodes>,
    /// Classifier parameters per training step (`rows x C(D+1)`), then one
    /// step-major node for all test queries.
    pub train_classifiers: Vec<NodeId>,
    pub test_classifiers: Option<NodeId>,
}

/// A completed interaction as stored in a tracer state.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryItem {
    pub z: Vec<f64>,
    pub label: usize,
    pub response: usize,
}

/// A single learner's trace after `steps` completed interactions.
#[derive(Clone, Debug, PartialEq)]
pub struct TracerState {
    pub steps: usize,
    /// Recurrent state per layer; empty for non-recurrent variants.
    pub hidden: Vec<Vec<f64>>,
    pub cell: Vec<Vec<f64>>,
    pub history: Vec<HistoryItem>,
}

/// Per-row description of one recurrent step.
struct StepRows {
    prev: Vec<Option<(usize, usize)>>,
    cur_label: Vec<usize>,
    meta: Option<Vec<Vec<f64>>>,
}

#[derive(Clone)]
pub struct TracerModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub seed: u64,
    encoder: Option<Encoder>,
    head: Head,
}

impl<T: Scalar> TracerModel<T> {
    /// Fresh parameters, all drawn from one seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let kind = config.variant.kind;
        let encoder = match &config.embedding {
            EmbeddingKind::Cnn(cfg) if kind.uses_embeddings() => {
                Some(Encoder::init(&mut store, &mut rng, *cfg))
            }
            _ => None,
        };
        let (c, d) = (config.classes, config.embed_dim());
        let head_group = ParamGroup::Head;
        let static_in = d + if config.variant.meta_per_class_acc {
            c
        } else {
            0
        };
        let head = match kind {
            TracerKind::Static => Head::Static {
                w: store.add(
                    "head.w",
                    head_group,
                    uniform_fan_in(&mut rng, &[c, static_in], static_in),
                ),
                b: store.add("head.b", head_group, Tensor::zeros(&[c])),
            },
            TracerKind::StaticTime => Head::StaticTime {
                table: (0..config.train_steps)
                    .map(|t| {
                        (
                            store.add(
                                format!("head.t{t}.w"),
                                head_group,
                                uniform_fan_in(&mut rng, &[c, d], d),
                            ),
                            store.add(format!("head.t{t}.b"), head_group, Tensor::zeros(&[c])),
                        )
                    })
                    .collect(),
            },
            TracerKind::Direct | TracerKind::ClsPred | TracerKind::Dkt => {
                let input = config.variant.step_input_len(c, d);
                let lstm = LstmParams::init(
                    &mut store,
                    &mut rng,
                    "rnn",
                    input,
                    config.hidden,
                    config.layers,
                )?;
                let (h, hh) = (config.hidden, config.head_hidden);
                let out = if kind == TracerKind::ClsPred {
                    c * (d + 1)
                } else {
                    c
                };
                Head::Recurrent {
                    lstm,
                    fc1: (
                        store.add(
                            "head.fc1.w",
                            head_group,
                            uniform_fan_in(&mut rng, &[hh, h], h),
                        ),
                        store.add("head.fc1.b", head_group, Tensor::zeros(&[hh])),
                    ),
                    slope: store.add("head.prelu", head_group, Tensor::full(&[1], T::lit(0.25))),
                    fc2: (
                        store.add(
                            "head.fc2.w",
                            head_group,
                            uniform_fan_in(&mut rng, &[out, hh], hh),
                        ),
                        store.add("head.fc2.b", head_group, Tensor::zeros(&[out])),
                    ),
                }
            }
            TracerKind::Prototype | TracerKind::Exemplar => Head::Cognitive {
                log_c: store.add(
                    "cog.log_c",
                    head_group,
                    Tensor::full(&[1], T::lit(config.cognitive.c.ln())),
                ),
                log_gamma: (kind == TracerKind::Exemplar).then(|| {
                    store.add(
                        "cog.log_gamma",
                        head_group,
                        Tensor::full(&[1], T::lit(config.cognitive.gamma.ln())),
                    )
                }),
            },
        };
        Ok(Self {
            config,
            store,
            seed,
            encoder,
            head,
        })
    }

    pub fn kind(&self) -> TracerKind {
        self.config.variant.kind
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    /// Current similarity scale and exponent of a cognitive model.
    pub fn cognitive_params(&self) -> Option<CognitiveParams> {
        match &self.head {
            Head::Cognitive { log_c, log_gamma } => Some(CognitiveParams {
                c: self.store.get(*log_c).data()[0].as_f64().exp(),
                gamma: log_gamma.map_or(1.0, |g| self.store.get(g).data()[0].as_f64().exp()),
            }),
            _ => None,
        }
    }

    fn check_stimuli(&self, stimuli: &Stimuli<T>) -> Result<()> {
        if !self.kind().uses_embeddings() {
            return Ok(());
        }
        match &self.config.embedding {
            EmbeddingKind::Cnn(c)
                if stimuli.image_shape() == Some([c.img_chns, c.input_height, c.input_width]) =>
            {
                Ok(())
            }
            EmbeddingKind::Features(m) if stimuli.embedding_dim() == Some(m.out_dim()) => Ok(()),
            _ => Err(Error::Config(
                "stimuli do not match the model's embedding kind".into(),
            )),
        }
    }

    /// `N x D` embeddings of the given stimuli.
    fn embed(&self, g: &mut Graph<T>, stimuli: &Stimuli<T>, items: &[usize]) -> Result<NodeId> {
        match &self.encoder {
            Some(enc) => {
                let x = g.input(stimuli.image_batch(items)?);
                enc.forward(g, &self.store, x)
            }
            None => Ok(g.input(stimuli.embedding_batch(items)?)),
        }
    }

    /// Embeddings of the given stimuli outside any training graph.
    pub fn embed_items(&self, stimuli: &Stimuli<T>, items: &[usize]) -> Result<Vec<Vec<f64>>> {
        self.check_stimuli(stimuli)?;
        let d = self.config.embed_dim();
        if !self.kind().uses_embeddings() {
            return Ok(vec![vec![0.0; d]; items.len()]);
        }
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(64) {
            let mut g = Graph::new();
            let z = self.embed(&mut g, stimuli, chunk)?;
            out.extend(
                g.value(z)
                    .data()
                    .chunks(d)
                    .map(|r| r.iter().map(|v| v.as_f64()).collect()),
            );
        }
        Ok(out)
    }

    fn one_hot(&self, g: &mut Graph<T>, classes: &[Option<usize>]) -> Result<NodeId> {
        let c = self.config.classes;
        let mut data = vec![T::zero(); classes.len() * c];
        for (r, k) in classes.iter().enumerate() {
            if let Some(k) = k {
                data[r * c + k] = T::one();
            }
        }
        Ok(g.input(Tensor::new(&[classes.len(), c], data)?))
    }

    fn rows_input(&self, g: &mut Graph<T>, rows: &[Vec<f64>]) -> Result<NodeId> {
        let width = rows.first().map_or(0, Vec::len);
        let data = rows.iter().flatten().map(|&v| T::lit(v)).collect();
        Ok(g.input(Tensor::new(&[rows.len(), width], data)?))
    }

    fn step_input(
        &self,
        g: &mut Graph<T>,
        rows: &StepRows,
        prev_z: Option<NodeId>,
        cur_z: Option<NodeId>,
    ) -> Result<NodeId> {
        let n = rows.cur_label.len();
        let mut parts = Vec::new();
        for block in layout(&self.config.variant) {
            let node = match block {
                Block::PrevResponse => self.one_hot(
                    g,
                    &rows.prev.iter().map(|p| p.map(|x| x.1)).collect::<Vec<_>>(),
                )?,
                Block::PrevLabel => self.one_hot(
                    g,
                    &rows.prev.iter().map(|p| p.map(|x| x.0)).collect::<Vec<_>>(),
                )?,
                Block::CurLabel => self.one_hot(
                    g,
                    &rows.cur_label.iter().map(|&y| Some(y)).collect::<Vec<_>>(),
                )?,
                Block::PrevZ => match prev_z {
                    Some(z) => z,
                    None => g.input(Tensor::zeros(&[n, self.config.embed_dim()])),
                },
                Block::CurZ => {
                    cur_z.ok_or_else(|| Error::Contract("current embedding missing".into()))?
                }
                Block::Meta => {
                    let meta = rows
                        .meta
                        .as_ref()
                        .ok_or_else(|| Error::Contract("meta rows missing".into()))?;
                    self.rows_input(g, meta)?
                }
            };
            parts.push(node);
        }
        g.concat(&parts)
    }

    /// Head on the top recurrent output. Returns probabilities and, for
    /// `cls_pred`, the emitted classifier parameters.
    fn recurrent_readout(
        &self,
        g: &mut Graph<T>,
        top: NodeId,
        query_z: Option<NodeId>,
    ) -> Result<(NodeId, Option<NodeId>)> {
        let Head::Recurrent {
            fc1, slope, fc2, ..
        } = &self.head
        else {
            return Err(Error::Contract("not a recurrent model".into()));
        };
        let (w1, b1, s) = (
            g.param(&self.store, fc1.0),
            g.param(&self.store, fc1.1),
            g.param(&self.store, *slope),
        );
        let (w2, b2) = (g.param(&self.store, fc2.0), g.param(&self.store, fc2.1));
        let h = g.affine(top, w1, Some(b1))?;
        let h = g.prelu(h, s)?;
        let out = g.affine(h, w2, Some(b2))?;
        if self.kind() == TracerKind::ClsPred {
            let z =
                query_z.ok_or_else(|| Error::Contract("cls_pred needs query embeddings".into()))?;
            let logits = g.apply_classifiers(out, z, self.config.classes)?;
            Ok((g.softmax(logits)?, Some(out)))
        } else {
            Ok((g.softmax(out)?, None))
        }
    }

    /// Emitted classifier parameters without applying them.
    fn emit_params(&self, g: &mut Graph<T>, top: NodeId) -> Result<NodeId> {
        let Head::Recurrent {
            fc1, slope, fc2, ..
        } = &self.head
        else {
            return Err(Error::Contract("not a recurrent model".into()));
        };
        let (w1, b1, s) = (
            g.param(&self.store, fc1.0),
            g.param(&self.store, fc1.1),
            g.param(&self.store, *slope),
        );
        let (w2, b2) = (g.param(&self.store, fc2.0), g.param(&self.store, fc2.1));
        let h = g.affine(top, w1, Some(b1))?;
        let h = g.prelu(h, s)?;
        g.affine(h, w2, Some(b2))
    }

    /// Linear read-out for `static` (table index ignored) and `static_time`.
    fn static_readout(
        &self,
        g: &mut Graph<T>,
        z: NodeId,
        meta: Option<&[Vec<f64>]>,
        t: usize,
    ) -> Result<NodeId> {
        let (w, b) = match &self.head {
            Head::Static { w, b } => (*w, *b),
            Head::StaticTime { table } => table[t.min(table.len() - 1)],
            _ => return Err(Error::Contract("not a static model".into())),
        };
        let x = match meta {
            Some(m) => {
                let m = self.rows_input(g, m)?;
                g.concat(&[z, m])?
            }
            None => z,
        };
        let (w, b) = (g.param(&self.store, w), g.param(&self.store, b));
        let logits = g.affine(x, w, Some(b))?;
        g.softmax(logits)
    }

    /// `1 x C` prototype/exemplar distribution for one query.
    fn cognitive_readout(
        &self,
        g: &mut Graph<T>,
        hist_z: Option<NodeId>,
        hist_y: &[usize],
        query: NodeId,
    ) -> Result<NodeId> {
        let Head::Cognitive { log_c, log_gamma } = &self.head else {
            return Err(Error::Contract("not a cognitive model".into()));
        };
        let classes = self.config.classes;
        let Some(hist_z) = hist_z.filter(|_| !hist_y.is_empty()) else {
            return Ok(g.input(Tensor::full(&[1, classes], T::lit(1.0 / classes as f64))));
        };
        let m = hist_y.len();
        let lc = g.param(&self.store, *log_c);
        let c = g.exp(lc);
        let neg_c = g.scale(c, -T::one());
        let mut counts = vec![0usize; classes];
        hist_y.iter().for_each(|&y| counts[y] += 1);
        let select = |weight: &dyn Fn(usize) -> f64| {
            let mut data = vec![T::zero(); classes * m];
            for (i, &y) in hist_y.iter().enumerate() {
                data[y * m + i] = T::lit(weight(y));
            }
            Tensor::new(&[classes, m], data)
        };
        let scores = if self.kind() == TracerKind::Prototype {
            let sel = match self.config.variant.prototype_norm {
                PrototypeNorm::ClassMean => select(&|y| 1.0 / counts[y] as f64)?,
                PrototypeNorm::HistoryLength => select(&|_| 1.0 / m as f64)?,
            };
            let sel = g.input(sel);
            let protos = g.matmul(sel, hist_z)?;
            let d = g.distance(protos, query)?;
            let e = g.scale_by(d, neg_c)?;
            let sims = g.exp(e);
            g.reshape(sims, &[1, classes])?
        } else {
            let d = g.distance(hist_z, query)?;
            let e = g.scale_by(d, neg_c)?;
            let sims = g.exp(e);
            let sel = g.input(select(&|_| 1.0)?);
            let sums = g.matmul(sel, sims)?;
            let sums = g.reshape(sums, &[1, classes])?;
            let lg = log_gamma.ok_or_else(|| Error::Contract("exemplar without gamma".into()))?;
            let lg = g.param(&self.store, lg);
            let gamma = g.exp(lg);
            g.pow_by(sums, gamma)?
        };
        g.normalize_rows(scores)
    }

    fn check_batch(&self, seqs: &[&TraceSequence], stimuli: &Stimuli<T>) -> Result<(usize, usize)> {
        let first = seqs
            .first()
            .ok_or_else(|| Error::Contract("empty batch".into()))?;
        let (len, train) = (first.len(), first.train_len);
        if train == 0 || train > len {
            return Err(Error::Contract(format!(
                "train length {train} of {len} steps"
            )));
        }
        if self.kind() == TracerKind::StaticTime && train > self.config.train_steps {
            return Err(Error::Contract(format!(
                "{train} train steps exceed the {}-entry table",
                self.config.train_steps
            )));
        }
        for s in seqs {
            if s.len() != len
                || s.train_len != train
                || s.labels.len() != len
                || s.responses.len() != len
            {
                return Err(Error::Contract(
                    "sequences in a batch must share their shape".into(),
                ));
            }
            let c = self.config.classes;
            if s.labels.iter().chain(&s.responses).any(|&v| v >= c) {
                return Err(Error::Contract(format!("class outside 0..{c}")));
            }
            if s.items.iter().any(|&i| i >= stimuli.len()) {
                return Err(Error::Contract("stimulus index out of range".into()));
            }
        }
        Ok((train, len - train))
    }

    /// Teacher-forced forward pass over a batch of sequences. Training
    /// steps advance the trace; test queries are answered from the state
    /// after the last training step.
    pub fn forward_batch(
        &self,
        g: &mut Graph<T>,
        stimuli: &Stimuli<T>,
        seqs: &[&TraceSequence],
        include_test: bool,
    ) -> Result<BatchOutput> {
        self.check_stimuli(stimuli)?;
        let (tr, te) = self.check_batch(seqs, stimuli)?;
        let te = if include_test { te } else { 0 };
        let k = seqs.len();
        let steps = tr + te;

        // Unique stimuli, embedded once.
        let mut slot: HashMap<usize, usize> = HashMap::new();
        let mut unique = Vec::new();
        if self.kind().uses_embeddings() {
            for s in seqs {
                for &i in &s.items[..steps] {
                    slot.entry(i).or_insert_with(|| {
                        unique.push(i);
                        unique.len() - 1
                    });
                }
            }
        }
        let emb = if unique.is_empty() {
            None
        } else {
            Some(self.embed(g, stimuli, &unique)?)
        };
        let rows_of = |pairs: &mut dyn Iterator<Item = (usize, usize)>| -> Vec<usize> {
            pairs.map(|(s, t)| slot[&seqs[s].items[t]]).collect()
        };
        let mut z_cache: HashMap<usize, NodeId> = HashMap::new();
        let mut z_at = |g: &mut Graph<T>, t: usize| -> Result<Option<NodeId>> {
            let Some(emb) = emb else { return Ok(None) };
            if let Some(&n) = z_cache.get(&t) {
                return Ok(Some(n));
            }
            let idx = rows_of(&mut (0..k).map(|s| (s, t)));
            let n = g.gather_rows(emb, &idx)?;
            z_cache.insert(t, n);
            Ok(Some(n))
        };
        let meta_at = |t: usize| -> Option<Vec<Vec<f64>>> {
            self.config.variant.meta_per_class_acc.then(|| {
                seqs.iter()
                    .map(|s| {
                        let hist: Vec<(usize, usize)> =
                            (0..t).map(|j| (s.labels[j], s.responses[j])).collect();
                        per_class_accuracy(&hist, self.config.classes)
                    })
                    .collect()
            })
        };

        let mut states = Vec::new();
        let mut train_classifiers = Vec::new();
        let mut test_classifiers = None;
        let mut test_node = None;
        let mut train_probs = Vec::with_capacity(tr);
        let mut test_probs = Vec::with_capacity(te);

        match &self.head {
            Head::Static { .. } | Head::StaticTime { .. } => {
                for t in 0..tr {
                    let z = z_at(g, t)?.expect("static models embed");
                    train_probs.push(self.static_readout(g, z, meta_at(t).as_deref(), t)?);
                }
                let meta = meta_at(tr);
                for j in 0..te {
                    let z = z_at(g, tr + j)?.expect("static models embed");
                    test_probs.push(self.static_readout(g, z, meta.as_deref(), tr - 1)?);
                }
            }
            Head::Recurrent { lstm, .. } => {
                let blocks = layout(&self.config.variant);
                let needs_cur = blocks.contains(&Block::CurZ) || self.kind() == TracerKind::ClsPred;
                let needs_prev = blocks.contains(&Block::PrevZ);
                let mut state = lstm.zero_state(g, k);
                for t in 0..tr {
                    let rows = StepRows {
                        prev: seqs
                            .iter()
                            .map(|s| (t > 0).then(|| (s.labels[t - 1], s.responses[t - 1])))
                            .collect(),
                        cur_label: seqs.iter().map(|s| s.labels[t]).collect(),
                        meta: meta_at(t),
                    };
                    let prev_z = if needs_prev && t > 0 {
                        z_at(g, t - 1)?
                    } else {
                        None
                    };
                    let cur_z = if needs_cur { z_at(g, t)? } else { None };
                    let x = self.step_input(g, &rows, prev_z, cur_z)?;
                    state = lstm.step(g, &self.store, x, &state)?;
                    let top = *state.hidden.last().expect("at least one layer");
                    let (p, cls) = self.recurrent_readout(g, top, cur_z)?;
                    train_probs.push(p);
                    train_classifiers.extend(cls);
                    states.push(state.clone());
                }
                if te > 0 {
                    // Every test query is one step from the frozen state.
                    let rep: Vec<usize> = (0..te).flat_map(|_| 0..k).collect();
                    let last = tr - 1;
                    let rows = StepRows {
                        prev: rep
                            .iter()
                            .map(|&s| Some((seqs[s].labels[last], seqs[s].responses[last])))
                            .collect(),
                        cur_label: (0..te)
                            .flat_map(|j| seqs.iter().map(move |s| s.labels[tr + j]))
                            .collect(),
                        meta: meta_at(tr).map(|m| rep.iter().map(|&s| m[s].clone()).collect()),
                    };
                    let prev_z = match emb {
                        Some(e) if needs_prev => {
                            Some(g.gather_rows(e, &rows_of(&mut rep.iter().map(|&s| (s, last))))?)
                        }
                        _ => None,
                    };
                    let cur_z = match emb {
                        Some(e) if needs_cur => {
                            let idx = rows_of(
                                &mut (0..te).flat_map(|j| (0..k).map(move |s| (s, tr + j))),
                            );
                            Some(g.gather_rows(e, &idx)?)
                        }
                        _ => None,
                    };
                    let frozen = LstmNodes {
                        hidden: state
                            .hidden
                            .iter()
                            .map(|&h| g.gather_rows(h, &rep))
                            .collect::<Result<_>>()?,
                        cell: state
                            .cell
                            .iter()
                            .map(|&c| g.gather_rows(c, &rep))
                            .collect::<Result<_>>()?,
                    };
                    let x = self.step_input(g, &rows, prev_z, cur_z)?;
                    let q = lstm.step(g, &self.store, x, &frozen)?;
                    let top = *q.hidden.last().expect("at least one layer");
                    let (p, cls) = self.recurrent_readout(g, top, cur_z)?;
                    test_node = Some(p);
                    test_classifiers = cls;
                }
            }
            Head::Cognitive { .. } => {
                let emb = emb.expect("cognitive models embed");
                let mut grid = vec![Vec::with_capacity(k); steps];
                for seq in seqs.iter() {
                    let rows: Vec<usize> = seq.items[..steps].iter().map(|i| slot[i]).collect();
                    for (t, cell) in grid.iter_mut().enumerate() {
                        let h = t.min(tr);
                        let hist = if h > 0 {
                            Some(g.gather_rows(emb, &rows[..h])?)
                        } else {
                            None
                        };
                        let query = g.gather_rows(emb, &rows[t..t + 1])?;
                        cell.push(self.cognitive_readout(g, hist, &seq.labels[..h], query)?);
                    }
                }
                for (t, cell) in grid.into_iter().enumerate() {
                    let p = g.concat_rows(&cell)?;
                    if t < tr {
                        train_probs.push(p);
                    } else {
                        test_probs.push(p);
                    }
                }
            }
        }
        if !test_probs.is_empty() {
            test_node = Some(g.concat_rows(&test_probs)?);
        }
        Ok(BatchOutput {
            rows: k,
            train_steps: tr,
            test_steps: te,
            train: g.concat_rows(&train_probs)?,
            test: test_node,
            states,
            train_classifiers,
            test_classifiers,
        })
    }

    /// Mean cross-entropy of the observed top responses over the training
    /// steps of the batch.
    pub fn sequence_loss(
        &self,
        g: &mut Graph<T>,
        out: &BatchOutput,
        seqs: &[&TraceSequence],
    ) -> Result<NodeId> {
        let targets: Vec<usize> = (0..out.train_steps)
            .flat_map(|t| seqs.iter().map(move |s| s.responses[t]))
            .collect();
        g.cross_entropy(out.train, &targets)
    }

    /// Per-sequence, per-step distributions (training steps then test
    /// steps) for the given sequences, evaluated in chunks.
    pub fn predict_sequences(
        &self,
        stimuli: &Stimuli<T>,
        seqs: &[TraceSequence],
        chunk: usize,
    ) -> Result<Vec<Vec<ResponseDistribution>>> {
        let mut result = Vec::with_capacity(seqs.len());
        for part in seqs.chunks(chunk.max(1)) {
            let refs: Vec<&TraceSequence> = part.iter().collect();
            let mut g = Graph::new();
            let out = self.forward_batch(&mut g, stimuli, &refs, true)?;
            let c = self.config.classes;
            let mut per: Vec<Vec<ResponseDistribution>> = vec![Vec::new(); part.len()];
            for (node, steps) in [
                (Some(out.train), out.train_steps),
                (out.test, out.test_steps),
            ] {
                let Some(node) = node else { continue };
                let v = g.value(node).data();
                for t in 0..steps {
                    for (s, dst) in per.iter_mut().enumerate() {
                        let row = &v[(t * part.len() + s) * c..(t * part.len() + s + 1) * c];
                        dst.push(ResponseDistribution {
                            probs: row.iter().map(|p| p.as_f64()).collect(),
                        });
                    }
                }
            }
            result.extend(per);
        }
        Ok(result)
    }

    // Stepwise interface.

    pub fn initial_state(&self) -> TracerState {
        let (hidden, cell) = match &self.head {
            Head::Recurrent { lstm, .. } => {
                let z = vec![vec![0.0; lstm.hidden]; lstm.layers.len()];
                (z.clone(), z)
            }
            _ => (Vec::new(), Vec::new()),
        };
        TracerState {
            steps: 0,
            hidden,
            cell,
            history: Vec::new(),
        }
    }

    fn check_query(&self, z: &[f64], y: usize) -> Result<()> {
        if y >= self.config.classes {
            return Err(Error::Contract(format!(
                "class {y} outside 0..{}",
                self.config.classes
            )));
        }
        if self.kind().uses_embeddings() && z.len() != self.config.embed_dim() {
            return Err(Error::Shape(format!(
                "embedding has {} values, expected {}",
                z.len(),
                self.config.embed_dim()
            )));
        }
        Ok(())
    }

    fn meta_from(&self, state: &TracerState) -> Option<Vec<f64>> {
        self.config.variant.meta_per_class_acc.then(|| {
            let hist: Vec<(usize, usize)> = state
                .history
                .iter()
                .map(|h| (h.label, h.response))
                .collect();
            per_class_accuracy(&hist, self.config.classes)
        })
    }

    /// One recurrent step from `state` for each query row; returns the new
    /// state nodes and the query embedding node.
    fn recurrent_step(
        &self,
        g: &mut Graph<T>,
        state: &TracerState,
        queries: &[(&[f64], usize)],
    ) -> Result<(LstmNodes, Option<NodeId>)> {
        let Head::Recurrent { lstm, .. } = &self.head else {
            return Err(Error::Contract("not a recurrent model".into()));
        };
        let n = queries.len();
        let h = lstm.hidden;
        let rep = |g: &mut Graph<T>, v: &[f64]| -> Result<NodeId> {
            let data: Vec<T> = (0..n).flat_map(|_| v.iter().map(|&x| T::lit(x))).collect();
            Ok(g.input(Tensor::new(&[n, h], data)?))
        };
        let nodes = LstmNodes {
            hidden: state
                .hidden
                .iter()
                .map(|v| rep(g, v))
                .collect::<Result<_>>()?,
            cell: state
                .cell
                .iter()
                .map(|v| rep(g, v))
                .collect::<Result<_>>()?,
        };
        let prev = state.history.last();
        let meta = self.meta_from(state);
        let rows = StepRows {
            prev: vec![prev.map(|p| (p.label, p.response)); n],
            cur_label: queries.iter().map(|q| q.1).collect(),
            meta: meta.map(|m| vec![m; n]),
        };
        let d = self.config.embed_dim();
        let (prev_z, cur_z) = if self.kind().uses_embeddings() {
            let prev_z = match prev {
                Some(p) => Some(self.rows_input(g, &vec![p.z.clone(); n])?),
                None => None,
            };
            let cur: Vec<Vec<f64>> = queries.iter().map(|q| q.0.to_vec()).collect();
            (prev_z, Some(self.rows_input(g, &cur)?))
        } else {
            let _ = d;
            (None, None)
        };
        let x = self.step_input(g, &rows, prev_z, cur_z)?;
        Ok((lstm.step(g, &self.store, x, &nodes)?, cur_z))
    }

    /// Appends one completed interaction to the trace.
    pub fn advance(
        &self,
        state: &TracerState,
        z: &[f64],
        label: usize,
        response: usize,
    ) -> Result<TracerState> {
        self.check_query(z, label)?;
        if response >= self.config.classes {
            return Err(Error::Contract(format!(
                "response {response} outside 0..{}",
                self.config.classes
            )));
        }
        let mut next = state.clone();
        if self.kind().is_recurrent() {
            let mut g = Graph::new();
            let (nodes, _) = self.recurrent_step(&mut g, state, &[(z, label)])?;
            next.hidden = nodes
                .hidden
                .iter()
                .map(|&n| g.value(n).to_f64_vec())
                .collect();
            next.cell = nodes
                .cell
                .iter()
                .map(|&n| g.value(n).to_f64_vec())
                .collect();
        }
        next.steps += 1;
        next.history.push(HistoryItem {
            z: z.to_vec(),
            label,
            response,
        });
        Ok(next)
    }

    /// Distribution for one query; `state` is not modified.
    pub fn predict(
        &self,
        state: &TracerState,
        z: &[f64],
        label: usize,
    ) -> Result<ResponseDistribution> {
        Ok(self.predict_many(state, &[(z.to_vec(), label)])?.remove(0))
    }

    /// Distributions for several independent queries against one state.
    pub fn predict_many(
        &self,
        state: &TracerState,
        queries: &[(Vec<f64>, usize)],
    ) -> Result<Vec<ResponseDistribution>> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        for (z, y) in queries {
            self.check_query(z, *y)?;
        }
        let mut g = Graph::new();
        let probs = match &self.head {
            Head::Static { .. } | Head::StaticTime { .. } => {
                let z = self.rows_input(
                    &mut g,
                    &queries.iter().map(|q| q.0.clone()).collect::<Vec<_>>(),
                )?;
                let meta = self.meta_from(state).map(|m| vec![m; queries.len()]);
                vec![self.static_readout(&mut g, z, meta.as_deref(), state.steps)?]
            }
            Head::Recurrent { .. } => {
                let q: Vec<(&[f64], usize)> =
                    queries.iter().map(|(z, y)| (z.as_slice(), *y)).collect();
                let (nodes, cur_z) = self.recurrent_step(&mut g, state, &q)?;
                let top = *nodes.hidden.last().expect("at least one layer");
                vec![self.recurrent_readout(&mut g, top, cur_z)?.0]
            }
            Head::Cognitive { .. } => {
                let hist_y: Vec<usize> = state.history.iter().map(|h| h.label).collect();
                let hist = if state.history.is_empty() {
                    None
                } else {
                    Some(
                        self.rows_input(
                            &mut g,
                            &state
                                .history
                                .iter()
                                .map(|h| h.z.clone())
                                .collect::<Vec<_>>(),
                        )?,
                    )
                };
                queries
                    .iter()
                    .map(|(z, _)| {
                        let q = self.rows_input(&mut g, std::slice::from_ref(z))?;
                        self.cognitive_readout(&mut g, hist, &hist_y, q)
                    })
                    .collect::<Result<_>>()?
            }
        };
        let c = self.config.classes;
        Ok(probs
            .iter()
            .flat_map(|&p| {
                g.value(p)
                    .data()
                    .chunks(c)
                    .map(|r| ResponseDistribution {
                        probs: r.iter().map(|v| v.as_f64()).collect(),
                    })
                    .collect::<Vec<_>>()
            })
            .collect())
    }

    /// Classifier a `cls_pred` model emits for a query of class `label`.
    /// The query embedding plays no part.
    pub fn emit_classifier(
        &self,
        state: &TracerState,
        label: usize,
    ) -> Result<PredictedClassifier> {
        if self.kind() != TracerKind::ClsPred {
            return Err(Error::Config(format!(
                "{} does not emit classifiers",
                self.kind().name()
            )));
        }
        let placeholder = vec![0.0; self.config.embed_dim()];
        self.check_query(&placeholder, label)?;
        let mut g = Graph::new();
        let (nodes, _) = self.recurrent_step(&mut g, state, &[(&placeholder, label)])?;
        let top = *nodes.hidden.last().expect("at least one layer");
        let params = self.emit_params(&mut g, top)?;
        PredictedClassifier::from_flat(&g.value(params).to_f64_vec(), self.config.classes)
    }

    // Persistence.

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({ "model": self.config, "extra": extra });
        save_checkpoint(path, &self.store, self.seed, meta)
    }

    /// Restores a model and the extra metadata stored with it.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (header, store) = load_checkpoint::<T>(path)?;
        let config: ModelConfig = serde_json::from_value(
            header
                .meta
                .get("model")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("no model descriptor".into()))?,
        )?;
        let mut model = Self::new(config, header.seed)?;
        for (a, b) in model.store.entries().iter().zip(store.entries()) {
            if a.name != b.name {
                return Err(Error::Checkpoint(format!(
                    "expected parameter {}, found {}",
                    a.name, b.name
                )));
            }
        }
        model.store.copy_from(&store)?;
        let extra = header
            .meta
            .get("extra")
            .cloned()
            .unwrap_or(serde_json::Value::Null);
        Ok((model, extra))
    }
}
