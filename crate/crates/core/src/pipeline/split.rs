use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LearnerSession;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Learner id to split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub assignment: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &s)| s == split)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.assignment.values().filter(|&&s| s == split).count()
    }

    /// Sessions of one split, in input order.
    pub fn select<'a>(
        &self,
        sessions: &'a [LearnerSession],
        split: Split,
    ) -> Vec<&'a LearnerSession> {
        sessions
            .iter()
            .filter(|s| self.assignment.get(&s.learner_id) == Some(&split))
            .collect()
    }

    /// Every session is assigned exactly once.
    pub fn check(&self, sessions: &[LearnerSession]) -> Result<()> {
        if sessions.len() != self.assignment.len()
            || sessions
                .iter()
                .any(|s| !self.assignment.contains_key(&s.learner_id))
        {
            return Err(Error::Contract(
                "split does not cover the sessions exactly".into(),
            ));
        }
        Ok(())
    }
}

/// Shuffles the ids by seed and cuts them into train / val / test.
/// Train and val sizes are floored; test takes the remainder.
pub fn split_learners(ids: &[String], fractions: [f64; 2], seed: u64) -> Result<SplitAssignment> {
    if ids.len() < 3 {
        return Err(Error::Config(format!(
            "need at least 3 learners to split, got {}",
            ids.len()
        )));
    }
    let mut unique = ids.to_vec();
    unique.sort();
    unique.dedup();
    if unique.len() != ids.len() {
        return Err(Error::Config("duplicate learner ids".into()));
    }
    let [ft, fv] = fractions;
    if !(ft > 0.0 && fv >= 0.0 && ft + fv < 1.0) {
        return Err(Error::Config(format!("bad split fractions {ft}, {fv}")));
    }
    let n = ids.len();
    let n_train = ((ft * n as f64 + 1e-9).floor() as usize).max(1);
    let n_val = (fv * n as f64 + 1e-9).floor() as usize;
    if n_train + n_val >= n {
        return Err(Error::Config("split leaves no test learners".into()));
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignment = order
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let s = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (id, s)
        })
        .collect();
    Ok(SplitAssignment { assignment })
}

/// The default 70 / 13.3 / 16.7 fractions.
pub const DEFAULT_FRACTIONS: [f64; 2] = [0.7, 2.0 / 15.0];

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("l{i}")).collect()
    }

    #[test]
    fn sizes_and_partition() {
        let s = split_learners(&ids(150), DEFAULT_FRACTIONS, 3).unwrap();
        assert_eq!(
            [
                s.count(Split::Train),
                s.count(Split::Val),
                s.count(Split::Test)
            ],
            [105, 20, 25]
        );
        assert_eq!(s, split_learners(&ids(150), DEFAULT_FRACTIONS, 3).unwrap());
        assert_ne!(s, split_learners(&ids(150), DEFAULT_FRACTIONS, 4).unwrap());
        assert_eq!(s.assignment.len(), 150);
        let s = split_learners(&ids(3), DEFAULT_FRACTIONS, 0).unwrap();
        assert_eq!([s.count(Split::Train), s.count(Split::Test)], [2, 1]);
        assert!(split_learners(&ids(2), DEFAULT_FRACTIONS, 0).is_err());
    }
}
