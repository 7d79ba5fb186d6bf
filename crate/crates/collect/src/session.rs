//! Per-session state machine. Nothing here touches the network or disk.

use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vkt_core::data::{
    DatasetManifest, Interaction, LearnerSession, Phase, TEST_STEPS, TOTAL_STEPS, TRAIN_STEPS,
};

use crate::error::ApiError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Active,
    Complete,
    Abandoned,
}

/// What the learner sees for one step. Carries no label information.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stimulus {
    pub step: usize,
    pub phase: Phase,
    pub image_url: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feedback {
    pub label: usize,
    pub class_name: String,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub test_correct: usize,
    pub test_total: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SubmitResult {
    pub step: usize,
    pub phase: Phase,
    /// Present in the training phase only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<Feedback>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next: Option<Stimulus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub complete: Option<Completion>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Destination {
    Main,
    Abandoned,
}

pub struct Session {
    pub id: String,
    pub dataset: String,
    pub metadata: Option<String>,
    pub seed: u64,
    /// Manifest indices shown at steps 1..=45.
    pub items: Vec<usize>,
    pub interactions: Vec<Interaction>,
    pub status: Status,
    pub last_activity: Instant,
    shown_at: Instant,
    /// Set once the record has been written; repeated finalization returns it.
    pub persisted: Option<(Destination, LearnerSession)>,
}

pub fn phase_of(step: usize) -> Phase {
    if step <= TRAIN_STEPS {
        Phase::Train
    } else {
        Phase::Test
    }
}

impl Session {
    /// Draws 30 + 15 distinct stimuli from the manifest using `seed`.
    pub fn start(
        id: String,
        dataset: &DatasetManifest,
        metadata: Option<String>,
        seed: u64,
        now: Instant,
    ) -> Result<Self, ApiError> {
        if dataset.items.len() < TOTAL_STEPS {
            return Err(ApiError::invalid(format!(
                "dataset '{}' has {} items, a session needs {TOTAL_STEPS}",
                dataset.name,
                dataset.items.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items = sample(&mut rng, dataset.items.len(), TOTAL_STEPS).into_vec();
        Ok(Self {
            id,
            dataset: dataset.name.clone(),
            metadata,
            seed,
            items,
            interactions: Vec::new(),
            status: Status::Active,
            last_activity: now,
            shown_at: now,
            persisted: None,
        })
    }

    /// Next step to answer, in 1..=45.
    pub fn cursor(&self) -> usize {
        (self.interactions.len() + 1).min(TOTAL_STEPS)
    }

    pub fn stimulus(&self, step: usize) -> Stimulus {
        Stimulus {
            step,
            phase: phase_of(step),
            image_url: format!("/images/{}/{step}", self.id),
        }
    }

    /// The stimulus awaiting a response, if any.
    pub fn current(&self) -> Option<Stimulus> {
        (self.status == Status::Active).then(|| self.stimulus(self.cursor()))
    }

    pub fn completion(&self) -> Completion {
        let test = &self.interactions[TRAIN_STEPS.min(self.interactions.len())..];
        Completion {
            test_correct: test.iter().filter(|i| i.is_correct()).count(),
            test_total: TEST_STEPS,
        }
    }

    pub fn submit(
        &mut self,
        manifest: &DatasetManifest,
        step: usize,
        ranked: [usize; 3],
        now: Instant,
        timestamp: String,
    ) -> Result<SubmitResult, ApiError> {
        if self.status != Status::Active {
            return Err(ApiError::conflict(
                format!("session is {:?}", self.status).to_lowercase(),
            ));
        }
        if step != self.cursor() {
            return Err(ApiError::conflict(format!(
                "expected step {}, got {step}",
                self.cursor()
            )));
        }
        let classes = manifest.num_classes();
        if let Some(&bad) = ranked.iter().find(|&&c| c >= classes) {
            return Err(ApiError::invalid(format!(
                "class {bad} is out of range for {classes} classes"
            )));
        }
        if ranked[0] == ranked[1] || ranked[0] == ranked[2] || ranked[1] == ranked[2] {
            return Err(ApiError::invalid("ranked classes must be distinct"));
        }
        let item = &manifest.items[self.items[step - 1]];
        let phase = phase_of(step);
        self.interactions.push(Interaction {
            step,
            item_id: item.id.clone(),
            label: item.label,
            ranked_response: ranked,
            phase,
            latency_ms: Some(now.saturating_duration_since(self.shown_at).as_millis() as u64),
            timestamp: Some(timestamp),
        });
        self.last_activity = now;
        self.shown_at = now;
        let feedback = (phase == Phase::Train).then(|| Feedback {
            label: item.label,
            class_name: manifest.classes[item.label].clone(),
            correct: ranked[0] == item.label,
        });
        let (next, complete) = if self.interactions.len() == TOTAL_STEPS {
            self.status = Status::Complete;
            (None, Some(self.completion()))
        } else {
            (Some(self.stimulus(step + 1)), None)
        };
        Ok(SubmitResult {
            step,
            phase,
            feedback,
            next,
            complete,
        })
    }

    pub fn idle(&self, now: Instant) -> Duration {
        now.saturating_duration_since(self.last_activity)
    }

    pub fn record(&self) -> LearnerSession {
        LearnerSession {
            learner_id: self.id.clone(),
            dataset: self.dataset.clone(),
            client_seed: self.seed,
            metadata: self.metadata.clone(),
            interactions: self.interactions.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use vkt_core::data::{ImageGeometry, ManifestItem};

    fn manifest() -> DatasetManifest {
        DatasetManifest {
            name: "toy".into(),
            classes: vec!["a".into(), "b".into(), "c".into()],
            geometry: ImageGeometry {
                height: 4,
                width: 4,
                channels: 3,
            },
            feature_names: vec![],
            items: (0..60)
                .map(|i| ManifestItem {
                    id: format!("item{i}"),
                    path: None,
                    label: i % 3,
                    features: None,
                })
                .collect(),
            root: Default::default(),
        }
    }

    #[test]
    fn draws_distinct_items() {
        let s = Session::start("s".into(), &manifest(), None, 5, Instant::now()).unwrap();
        let mut items = s.items.clone();
        items.sort();
        items.dedup();
        assert_eq!(items.len(), TOTAL_STEPS);
    }

    #[test]
    fn rejected_submissions_leave_state_unchanged() {
        let m = manifest();
        let now = Instant::now();
        let mut s = Session::start("s".into(), &m, None, 5, now).unwrap();
        assert!(s.submit(&m, 2, [0, 1, 2], now, String::new()).is_err());
        assert!(s.submit(&m, 1, [0, 0, 2], now, String::new()).is_err());
        assert!(s.submit(&m, 1, [0, 1, 3], now, String::new()).is_err());
        assert_eq!(s.cursor(), 1);
        assert!(s.interactions.is_empty());
    }

    #[test]
    fn feedback_stops_at_the_test_phase() {
        let m = manifest();
        let now = Instant::now();
        let mut s = Session::start("s".into(), &m, None, 1, now).unwrap();
        for step in 1..=TOTAL_STEPS {
            let r = s.submit(&m, step, [0, 1, 2], now, String::new()).unwrap();
            assert_eq!(r.feedback.is_some(), step <= TRAIN_STEPS);
            assert_eq!(r.complete.is_some(), step == TOTAL_STEPS);
        }
        assert_eq!(s.status, Status::Complete);
        assert_eq!(s.cursor(), TOTAL_STEPS);
        assert!(vkt_core::data::validate_session(&s.record(), &m).is_empty());
    }
}
