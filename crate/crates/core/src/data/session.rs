use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;
use crate::error::{Error, Result};

pub const TRAIN_STEPS: usize = 30;
pub const TEST_STEPS: usize = 15;
pub const TOTAL_STEPS: usize = TRAIN_STEPS + TEST_STEPS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interaction {
    /// One-based position in the session.
    pub step: usize,
    pub item_id: String,
    /// Zero-based true class.
    pub label: usize,
    /// Top three classes, most likely first.
    pub ranked_response: [usize; 3],
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
    /// ISO-8601 time the response was recorded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

impl Interaction {
    pub fn response(&self) -> usize {
        self.ranked_response[0]
    }

    pub fn is_correct(&self) -> bool {
        self.ranked_response[0] == self.label
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerSession {
    pub learner_id: String,
    pub dataset: String,
    pub client_seed: u64,
    /// Free-form label supplied at collection time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<String>,
    pub interactions: Vec<Interaction>,
}

impl LearnerSession {
    pub fn train(&self) -> &[Interaction] {
        &self.interactions[..TRAIN_STEPS.min(self.interactions.len())]
    }

    pub fn test(&self) -> &[Interaction] {
        &self.interactions[TRAIN_STEPS.min(self.interactions.len())..]
    }

    pub fn correct_count(&self, phase: Phase) -> usize {
        self.interactions
            .iter()
            .filter(|i| i.phase == phase && i.is_correct())
            .count()
    }
}

/// Every invariant violation of `session` against `manifest`; empty when valid.
pub fn validate_session(session: &LearnerSession, manifest: &DatasetManifest) -> Vec<String> {
    let mut v = Vec::new();
    let classes = manifest.num_classes();
    if session.dataset != manifest.name {
        v.push(format!(
            "dataset '{}' does not match manifest '{}'",
            session.dataset, manifest.name
        ));
    }
    let n_train = session
        .interactions
        .iter()
        .filter(|i| i.phase == Phase::Train)
        .count();
    let n_test = session.interactions.len() - n_train;
    if n_train != TRAIN_STEPS || n_test != TEST_STEPS {
        v.push(format!(
            "expected {TRAIN_STEPS} train and {TEST_STEPS} test steps, got {n_train} and {n_test}"
        ));
    }
    if let Some(pos) = session
        .interactions
        .iter()
        .position(|i| i.phase == Phase::Test)
    {
        if session.interactions[pos..]
            .iter()
            .any(|i| i.phase == Phase::Train)
        {
            v.push("phase order: a train step follows a test step".into());
        }
    }
    let index = manifest.item_index();
    let mut seen: HashMap<Phase, HashSet<&str>> = HashMap::new();
    for (k, it) in session.interactions.iter().enumerate() {
        let t = it.step;
        if t != k + 1 {
            v.push(format!("step {t} at position {}", k + 1));
        }
        let r = it.ranked_response;
        if r[0] == r[1] || r[0] == r[2] || r[1] == r[2] {
            v.push(format!("step {t}: ranks not distinct {r:?}"));
        }
        if r.iter().any(|&c| c >= classes) {
            v.push(format!("step {t}: rank outside 0..{classes}"));
        }
        if it.label >= classes {
            v.push(format!("step {t}: label {} outside 0..{classes}", it.label));
        }
        match index.get(it.item_id.as_str()) {
            None => v.push(format!("step {t}: unknown item '{}'", it.item_id)),
            Some(&j) if manifest.items[j].label != it.label => v.push(format!(
                "step {t}: label {} disagrees with manifest label {} for '{}'",
                it.label, manifest.items[j].label, it.item_id
            )),
            _ => {}
        }
        if !seen
            .entry(it.phase)
            .or_default()
            .insert(it.item_id.as_str())
        {
            v.push(format!(
                "step {t}: item '{}' repeated within the {:?} phase",
                it.item_id, it.phase
            ));
        }
    }
    v
}

pub fn check_session(session: &LearnerSession, manifest: &DatasetManifest) -> Result<()> {
    let violations = validate_session(session, manifest);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidSession {
            learner_id: session.learner_id.clone(),
            violations,
        })
    }
}

/// Reads a JSONL session log; each line must parse and validate.
pub fn load_sessions(path: &Path, manifest: &DatasetManifest) -> Result<Vec<LearnerSession>> {
    let file = std::fs::File::open(path).map_err(|e| Error::ingest(path, e.to_string()))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::ingest(path, format!("line {}: {e}", n + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let session: LearnerSession = serde_json::from_str(&line)
            .map_err(|e| Error::ingest(path, format!("line {}: {e}", n + 1)))?;
        check_session(&session, manifest)?;
        out.push(session);
    }
    let mut ids = HashSet::new();
    for s in &out {
        if !ids.insert(s.learner_id.as_str()) {
            return Err(Error::ingest(
                path,
                format!("duplicate learner id '{}'", s.learner_id),
            ));
        }
    }
    Ok(out)
}

pub fn write_sessions<W: Write>(out: W, sessions: &[LearnerSession]) -> Result<()> {
    let mut w = BufWriter::new(out);
    for s in sessions {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_sessions(path: &Path, sessions: &[LearnerSession]) -> Result<()> {
    write_sessions(std::fs::File::create(path)?, sessions)
}

#[cfg(test)]
pub(crate) mod tests {
    use std::path::PathBuf;

    use super::*;
    use crate::data::manifest::{ImageGeometry, ManifestItem};

    pub(crate) fn toy_manifest(per_class: usize) -> DatasetManifest {
        DatasetManifest {
            name: "toy".into(),
            classes: vec!["a".into(), "b".into(), "c".into()],
            geometry: ImageGeometry {
                height: 4,
                width: 4,
                channels: 1,
            },
            feature_names: vec!["f".into()],
            items: (0..3 * per_class)
                .map(|i| ManifestItem {
                    id: format!("item{i}"),
                    path: None,
                    label: i % 3,
                    features: Some(vec![i as f64]),
                })
                .collect(),
            root: PathBuf::new(),
        }
    }

    pub(crate) fn toy_session(id: &str) -> LearnerSession {
        LearnerSession {
            learner_id: id.into(),
            dataset: "toy".into(),
            client_seed: 1,
            metadata: None,
            interactions: (0..TOTAL_STEPS)
                .map(|k| {
                    let item = if k < TRAIN_STEPS { k } else { k - TRAIN_STEPS };
                    let label = item % 3;
                    Interaction {
                        step: k + 1,
                        item_id: format!("item{item}"),
                        label,
                        ranked_response: [label, (label + 1) % 3, (label + 2) % 3],
                        phase: if k < TRAIN_STEPS {
                            Phase::Train
                        } else {
                            Phase::Test
                        },
                        latency_ms: Some(800),
                        timestamp: None,
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn valid_session_has_no_violations() {
        assert!(validate_session(&toy_session("a"), &toy_manifest(20)).is_empty());
    }

    #[test]
    fn repeated_ranks_are_reported() {
        let mut s = toy_session("a");
        s.interactions[4].ranked_response = [1, 1, 2];
        let v = validate_session(&s, &toy_manifest(20));
        assert!(v.iter().any(|m| m.contains("ranks not distinct")), "{v:?}");
    }

    #[test]
    fn test_before_train_is_reported() {
        let mut s = toy_session("a");
        s.interactions[0].phase = Phase::Test;
        s.interactions[44].phase = Phase::Train;
        let v = validate_session(&s, &toy_manifest(20));
        assert!(v.iter().any(|m| m.contains("phase order")), "{v:?}");
    }

    #[test]
    fn short_train_phase_is_rejected() {
        let mut s = toy_session("a");
        s.interactions.remove(29);
        for (k, it) in s.interactions.iter_mut().enumerate() {
            it.step = k + 1;
        }
        assert!(check_session(&s, &toy_manifest(20)).is_err());
    }

    #[test]
    fn duplicate_train_item_is_rejected() {
        let mut s = toy_session("a");
        s.interactions[5].item_id = "item2".into();
        s.interactions[5].label = 2;
        let v = validate_session(&s, &toy_manifest(20));
        assert!(v.iter().any(|m| m.contains("repeated")), "{v:?}");
    }

    #[test]
    fn jsonl_round_trip_and_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let sessions = vec![toy_session("a"), toy_session("b")];
        save_sessions(&path, &sessions).unwrap();
        let m = toy_manifest(20);
        assert_eq!(load_sessions(&path, &m).unwrap(), sessions);

        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{not json}\n");
        std::fs::write(&path, text).unwrap();
        let err = load_sessions(&path, &m).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }
}
