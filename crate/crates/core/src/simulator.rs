//! Synthetic learners: each holds a linear softmax classifier over a fixed
//! 2-D projection of the generative features and takes one online
//! cross-entropy ascent step after every training-phase feedback.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::data::{
    DatasetManifest, FeatureMap, GreeblesSpec, Interaction, LearnerSession, Phase, TEST_STEPS,
    TRAIN_STEPS,
};
use crate::error::{Error, Result};
use crate::pipeline::{ap_report, APReport};
use crate::tracers::ResponseDistribution;

/// Population settings. `projection` maps standardized generative
/// features to the learners' internal space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub learners: usize,
    #[serde(default = "default_train")]
    pub train_steps: usize,
    #[serde(default = "default_test")]
    pub test_steps: usize,
    /// Standard deviation of the initial weights.
    pub sigma0: f64,
    /// Learning-rate range, sampled log-uniformly.
    pub eta: [f64; 2],
    /// Temperature range, sampled uniformly.
    pub tau: [f64; 2],
    pub projection: Vec<Vec<f64>>,
    pub seed: u64,
    /// Stimuli to generate when no manifest is supplied.
    #[serde(default)]
    pub greebles: GreeblesSpec,
}

fn default_train() -> usize {
    TRAIN_STEPS
}

fn default_test() -> usize {
    TEST_STEPS
}

impl Default for SimConfig {
    fn default() -> Self {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        Self {
            learners: 150,
            train_steps: TRAIN_STEPS,
            test_steps: TEST_STEPS,
            sigma0: 0.5,
            eta: [0.05, 0.5],
            tau: [0.5, 2.0],
            // Body size, and green minus red.
            projection: vec![
                vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                vec![0.0, -h, h, 0.0, 0.0, 0.0],
            ],
            seed: 0,
            greebles: GreeblesSpec::default(),
        }
    }
}

impl SimConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.learners < 3 {
            return bad("at least 3 learners are needed for splitting");
        }
        if self.train_steps == 0 || self.test_steps == 0 {
            return bad("both phases need at least one step");
        }
        if !(self.sigma0 >= 0.0) {
            return bad("sigma0 must be non-negative");
        }
        if !(self.eta[0] >= 0.0 && self.eta[0] <= self.eta[1])
            || (self.eta[0] == 0.0 && self.eta[1] > 0.0)
        {
            return bad("eta range must be [lo, hi] with 0 < lo <= hi, or [0, 0]");
        }
        if !(self.tau[0] > 0.0 && self.tau[0] <= self.tau[1]) {
            return bad("tau range must satisfy 0 < lo <= hi");
        }
        if self.projection.is_empty() {
            return bad("projection has no rows");
        }
        Ok(())
    }

    /// The learners' internal feature space for a manifest.
    pub fn feature_map(&self, manifest: &DatasetManifest) -> Result<FeatureMap> {
        FeatureMap::standardized(manifest, self.projection.clone())
    }
}

/// Parameters of one synthetic learner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimLearnerParams {
    /// `C` rows of internal-space weights.
    pub weights: Vec<Vec<f64>>,
    pub eta: f64,
    pub tau: f64,
    pub seed: u64,
}

/// Per-step true response distributions of one learner, with the weights
/// in force at each step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleProbe {
    pub learner_id: String,
    pub probs: Vec<Vec<f64>>,
    pub weights: Vec<Vec<Vec<f64>>>,
}

impl OracleProbe {
    pub fn distributions(&self) -> Vec<ResponseDistribution> {
        self.probs
            .iter()
            .map(|p| ResponseDistribution { probs: p.clone() })
            .collect()
    }
}

/// A learner's evolving classifier.
#[derive(Clone, Debug)]
pub struct SimLearner {
    pub weights: Vec<Vec<f64>>,
    pub eta: f64,
    pub tau: f64,
}

impl SimLearner {
    pub fn new(params: &SimLearnerParams) -> Self {
        Self {
            weights: params.weights.clone(),
            eta: params.eta,
            tau: params.tau,
        }
    }

    pub fn classes(&self) -> usize {
        self.weights.len()
    }

    /// `softmax(W phi / tau)`.
    pub fn distribution(&self, phi: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self
            .weights
            .iter()
            .map(|w| w.iter().zip(phi).map(|(a, b)| a * b).sum::<f64>() / self.tau)
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    /// One gradient ascent step on `log p(label | phi)`, given the
    /// distribution `p` computed before the update.
    pub fn learn(&mut self, phi: &[f64], label: usize, p: &[f64]) {
        for (c, row) in self.weights.iter_mut().enumerate() {
            let err = if c == label { 1.0 } else { 0.0 } - p[c];
            for (w, x) in row.iter_mut().zip(phi) {
                *w += self.eta * err * x / self.tau;
            }
        }
    }
}

/// Top choice drawn from `p`; second and third are the most probable
/// remaining classes (ties to the lower index).
pub fn ranked_response<R: Rng>(p: &[f64], rng: &mut R) -> Result<[usize; 3]> {
    if p.len() < 3 {
        return Err(Error::Config(
            "ranked responses need at least 3 classes".into(),
        ));
    }
    let first = WeightedIndex::new(p)
        .map_err(|e| Error::Config(format!("response distribution {p:?}: {e}")))?
        .sample(rng);
    let mut rest: Vec<usize> = (0..p.len()).filter(|&c| c != first).collect();
    rest.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    Ok([first, rest[0], rest[1]])
}

/// One stimulus as the simulator sees it.
#[derive(Clone, Debug)]
pub struct SimStimulus {
    pub item_id: String,
    pub label: usize,
    pub phi: Vec<f64>,
}

/// Runs one learner through a sequence: the first `train_steps` stimuli get
/// feedback and updates, the rest are answered with frozen weights.
pub fn simulate_learner(
    params: &SimLearnerParams,
    learner_id: &str,
    dataset: &str,
    stimuli: &[SimStimulus],
    train_steps: usize,
) -> Result<(LearnerSession, OracleProbe)> {
    if train_steps > stimuli.len() {
        return Err(Error::Config(
            "sequence shorter than the training phase".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut learner = SimLearner::new(params);
    let mut interactions = Vec::with_capacity(stimuli.len());
    let mut probe = OracleProbe {
        learner_id: learner_id.into(),
        probs: Vec::new(),
        weights: Vec::new(),
    };
    for (t, s) in stimuli.iter().enumerate() {
        let p = learner.distribution(&s.phi);
        let ranked = ranked_response(&p, &mut rng)?;
        let phase = if t < train_steps {
            Phase::Train
        } else {
            Phase::Test
        };
        probe.weights.push(learner.weights.clone());
        if phase == Phase::Train {
            learner.learn(&s.phi, s.label, &p);
        }
        probe.probs.push(p);
        interactions.push(Interaction {
            step: t + 1,
            item_id: s.item_id.clone(),
            label: s.label,
            ranked_response: ranked,
            phase,
            latency_ms: None,
            timestamp: None,
        });
    }
    Ok((
        LearnerSession {
            learner_id: learner_id.into(),
            dataset: dataset.into(),
            client_seed: params.seed,
            metadata: None,
            interactions,
        },
        probe,
    ))
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Output of a splitmix64 generator whose state was just advanced to
/// `x + GOLDEN_GAMMA`.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Learner `k`'s seed: output `k` of the splitmix64 stream seeded with the
/// master seed.
pub fn learner_seed(seed: u64, k: usize) -> u64 {
    splitmix64(seed.wrapping_add((k as u64).wrapping_mul(GOLDEN_GAMMA)))
}

pub fn learner_id(k: usize) -> String {
    format!("sim-{k:04}")
}

fn sample_params<R: Rng>(
    cfg: &SimConfig,
    classes: usize,
    dim: usize,
    rng: &mut R,
) -> SimLearnerParams {
    let normal = Normal::new(0.0, cfg.sigma0).expect("validated sigma0");
    let weights = (0..classes)
        .map(|_| (0..dim).map(|_| normal.sample(rng)).collect())
        .collect();
    let eta = if cfg.eta[0] == cfg.eta[1] {
        cfg.eta[0]
    } else {
        rng.random_range(cfg.eta[0].ln()..cfg.eta[1].ln()).exp()
    };
    let tau = if cfg.tau[0] == cfg.tau[1] {
        cfg.tau[0]
    } else {
        rng.random_range(cfg.tau[0]..cfg.tau[1])
    };
    SimLearnerParams {
        weights,
        eta,
        tau,
        seed: rng.random(),
    }
}

/// Sessions and probes of a simulated population, plus each learner's
/// sampled parameters.
#[derive(Clone, Debug)]
pub struct SimPopulation {
    pub sessions: Vec<LearnerSession>,
    pub probes: Vec<OracleProbe>,
    pub params: Vec<SimLearnerParams>,
}

pub fn simulate_population(manifest: &DatasetManifest, cfg: &SimConfig) -> Result<SimPopulation> {
    cfg.validate()?;
    let map = cfg.feature_map(manifest)?;
    let steps = cfg.train_steps + cfg.test_steps;
    if manifest.items.len() < steps {
        return Err(Error::Config(format!(
            "{} stimuli cannot supply {steps} distinct draws",
            manifest.items.len()
        )));
    }
    let all: Vec<SimStimulus> = manifest
        .items
        .iter()
        .map(|it| {
            Ok(SimStimulus {
                item_id: it.id.clone(),
                label: it.label,
                phi: map.apply(it.features.as_deref().unwrap_or_default())?,
            })
        })
        .collect::<Result<_>>()?;
    let classes = manifest.num_classes();
    let mut pop = SimPopulation {
        sessions: Vec::with_capacity(cfg.learners),
        probes: Vec::with_capacity(cfg.learners),
        params: Vec::with_capacity(cfg.learners),
    };
    for k in 0..cfg.learners {
        let mut rng = ChaCha8Rng::seed_from_u64(learner_seed(cfg.seed, k));
        let params = sample_params(cfg, classes, map.out_dim(), &mut rng);
        let order = rand::seq::index::sample(&mut rng, all.len(), steps);
        let seq: Vec<SimStimulus> = order.iter().map(|i| all[i].clone()).collect();
        let id = learner_id(k);
        let (mut session, probe) =
            simulate_learner(&params, &id, &manifest.name, &seq, cfg.train_steps)?;
        session.client_seed = learner_seed(cfg.seed, k);
        pop.sessions.push(session);
        pop.probes.push(probe);
        pop.params.push(params);
    }
    Ok(pop)
}

/// The simulator's own distributions scored like any tracer.
pub fn oracle_ap(
    probes: &[OracleProbe],
    sessions: &[LearnerSession],
    classes: usize,
) -> Result<APReport> {
    let mut preds = Vec::with_capacity(sessions.len());
    for s in sessions {
        let p = probes
            .iter()
            .find(|p| p.learner_id == s.learner_id)
            .ok_or_else(|| Error::Contract(format!("no probe for learner '{}'", s.learner_id)))?;
        preds.push(p.distributions());
    }
    ap_report(&preds, sessions, classes)
}

pub fn save_probes(path: &Path, probes: &[OracleProbe]) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for p in probes {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_probes(path: &Path) -> Result<Vec<OracleProbe>> {
    let file = std::fs::File::open(path).map_err(|e| Error::ingest(path, e.to_string()))?;
    let mut probes = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        probes.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::ingest(path, format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(probes)
}
