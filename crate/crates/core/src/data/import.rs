//! Adapter from long-format CSV response logs (one row per interaction) into
//! the session schema. Every column must be mapped or explicitly ignored.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;
use super::session::{check_session, Interaction, LearnerSession, Phase, TRAIN_STEPS};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportMapping {
    pub learner_id: String,
    pub item_id: String,
    pub label: String,
    /// Columns holding the first, second and third ranked choice.
    pub ranked_response: [String; 3],
    /// Without a phase column, the first 30 rows of a learner are train.
    #[serde(default)]
    pub phase: Option<String>,
    #[serde(default)]
    pub step: Option<String>,
    #[serde(default)]
    pub latency_ms: Option<String>,
    #[serde(default)]
    pub timestamp: Option<String>,
    #[serde(default)]
    pub ignore: Vec<String>,
    /// Class fields hold class names instead of indices.
    #[serde(default)]
    pub class_names: bool,
    /// Class indices in the file start at 1.
    #[serde(default)]
    pub one_based: bool,
}

struct Columns {
    learner: usize,
    item: usize,
    label: usize,
    ranks: [usize; 3],
    phase: Option<usize>,
    step: Option<usize>,
    latency: Option<usize>,
    timestamp: Option<usize>,
}

impl ImportMapping {
    fn resolve(&self, headers: &csv::StringRecord, path: &Path) -> Result<Columns> {
        let position: HashMap<&str, usize> =
            headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
        let find = |name: &str| {
            position
                .get(name)
                .copied()
                .ok_or_else(|| Error::ingest(path, format!("mapped column '{name}' not in header")))
        };
        let opt = |name: &Option<String>| name.as_deref().map(find).transpose();
        let cols = Columns {
            learner: find(&self.learner_id)?,
            item: find(&self.item_id)?,
            label: find(&self.label)?,
            ranks: [
                find(&self.ranked_response[0])?,
                find(&self.ranked_response[1])?,
                find(&self.ranked_response[2])?,
            ],
            phase: opt(&self.phase)?,
            step: opt(&self.step)?,
            latency: opt(&self.latency_ms)?,
            timestamp: opt(&self.timestamp)?,
        };
        let mut mapped: Vec<&str> = vec![&self.learner_id, &self.item_id, &self.label];
        mapped.extend(self.ranked_response.iter().map(String::as_str));
        mapped.extend(
            [&self.phase, &self.step, &self.latency_ms, &self.timestamp]
                .into_iter()
                .flatten()
                .map(String::as_str),
        );
        mapped.extend(self.ignore.iter().map(String::as_str));
        let unmapped: Vec<&str> = headers.iter().filter(|h| !mapped.contains(h)).collect();
        if !unmapped.is_empty() {
            return Err(Error::ingest(
                path,
                format!("unmapped columns: {}", unmapped.join(", ")),
            ));
        }
        Ok(cols)
    }

    fn class(&self, raw: &str, manifest: &DatasetManifest) -> std::result::Result<usize, String> {
        let raw = raw.trim();
        if self.class_names {
            return manifest
                .classes
                .iter()
                .position(|c| c == raw)
                .ok_or_else(|| format!("unknown class name '{raw}'"));
        }
        let v: usize = raw
            .parse()
            .map_err(|_| format!("bad class index '{raw}'"))?;
        if self.one_based {
            v.checked_sub(1)
                .ok_or_else(|| "class index 0 in one-based column".to_string())
        } else {
            Ok(v)
        }
    }
}

fn parse_phase(raw: &str) -> std::result::Result<Phase, String> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "train" | "training" => Ok(Phase::Train),
        "test" | "testing" => Ok(Phase::Test),
        other => Err(format!("unknown phase '{other}'")),
    }
}

/// Converts a CSV log into validated sessions, in first-appearance order of
/// learners. Rows are ordered by the step column when mapped, file order otherwise.
pub fn import_csv(
    path: &Path,
    mapping: &ImportMapping,
    manifest: &DatasetManifest,
) -> Result<Vec<LearnerSession>> {
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| Error::ingest(path, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::ingest(path, e.to_string()))?
        .clone();
    let cols = mapping.resolve(&headers, path)?;

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(usize, Interaction)>> = HashMap::new();
    for (n, record) in reader.records().enumerate() {
        let line = n + 2;
        let record = record.map_err(|e| Error::ingest(path, format!("line {line}: {e}")))?;
        let bad = |msg: String| Error::ingest(path, format!("line {line}: {msg}"));
        let learner = record[cols.learner].to_string();
        let label = mapping.class(&record[cols.label], manifest).map_err(bad)?;
        let mut ranks = [0; 3];
        for (r, &c) in ranks.iter_mut().zip(&cols.ranks) {
            *r = mapping.class(&record[c], manifest).map_err(bad)?;
        }
        let phase = cols
            .phase
            .map(|c| parse_phase(&record[c]))
            .transpose()
            .map_err(bad)?;
        let step = cols
            .step
            .map(|c| {
                record[c]
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| format!("bad step '{}'", &record[c]))
            })
            .transpose()
            .map_err(bad)?;
        let latency_ms = cols
            .latency
            .filter(|&c| !record[c].trim().is_empty())
            .map(|c| {
                record[c]
                    .trim()
                    .parse::<f64>()
                    .map(|v| v.round() as u64)
                    .map_err(|_| format!("bad latency '{}'", &record[c]))
            })
            .transpose()
            .map_err(bad)?;
        let timestamp = cols
            .timestamp
            .map(|c| record[c].to_string())
            .filter(|s| !s.is_empty());
        let entry = rows.entry(learner.clone()).or_insert_with(|| {
            order.push(learner.clone());
            Vec::new()
        });
        let position = entry.len();
        entry.push((
            step.unwrap_or(position + 1),
            Interaction {
                step: 0,
                item_id: record[cols.item].to_string(),
                label,
                ranked_response: ranks,
                phase: phase.unwrap_or(if position < TRAIN_STEPS {
                    Phase::Train
                } else {
                    Phase::Test
                }),
                latency_ms,
                timestamp,
            },
        ));
    }

    let mut sessions = Vec::with_capacity(order.len());
    for learner in order {
        let mut list = rows.remove(&learner).unwrap_or_default();
        list.sort_by_key(|(s, _)| *s);
        let interactions = list
            .into_iter()
            .enumerate()
            .map(|(k, (_, mut it))| {
                it.step = k + 1;
                it
            })
            .collect();
        let session = LearnerSession {
            learner_id: learner,
            dataset: manifest.name.clone(),
            client_seed: 0,
            metadata: None,
            interactions,
        };
        check_session(&session, manifest)?;
        sessions.push(session);
    }
    Ok(sessions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::session::tests::{toy_manifest, toy_session};

    fn mapping() -> ImportMapping {
        ImportMapping {
            learner_id: "worker".into(),
            item_id: "image".into(),
            label: "gt".into(),
            ranked_response: ["c1".into(), "c2".into(), "c3".into()],
            phase: Some("stage".into()),
            step: None,
            latency_ms: Some("rt".into()),
            timestamp: None,
            ignore: vec![],
            class_names: true,
            one_based: false,
        }
    }

    fn write_log(dir: &Path, extra_column: bool) -> std::path::PathBuf {
        let m = toy_manifest(20);
        let path = dir.join("log.csv");
        let mut w = csv::Writer::from_path(&path).unwrap();
        let mut header = vec!["worker", "image", "gt", "c1", "c2", "c3", "stage", "rt"];
        if extra_column {
            header.push("browser");
        }
        w.write_record(&header).unwrap();
        for id in ["w1", "w2"] {
            for it in toy_session(id).interactions {
                let name = |c: usize| m.classes[c].clone();
                let mut rec = vec![
                    id.to_string(),
                    it.item_id.clone(),
                    name(it.label),
                    name(it.ranked_response[0]),
                    name(it.ranked_response[1]),
                    name(it.ranked_response[2]),
                    if it.phase == Phase::Train {
                        "train".into()
                    } else {
                        "test".into()
                    },
                    "812.4".into(),
                ];
                if extra_column {
                    rec.push("firefox".into());
                }
                w.write_record(&rec).unwrap();
            }
        }
        w.flush().unwrap();
        path
    }

    #[test]
    fn maps_named_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_log(dir.path(), false);
        let sessions = import_csv(&path, &mapping(), &toy_manifest(20)).unwrap();
        assert_eq!(sessions.len(), 2);
        let expected = toy_session("w1");
        for (a, b) in sessions[0].interactions.iter().zip(&expected.interactions) {
            assert_eq!(
                (a.step, &a.item_id, a.label, a.ranked_response, a.phase),
                (b.step, &b.item_id, b.label, b.ranked_response, b.phase)
            );
            assert_eq!(a.latency_ms, Some(812));
        }
    }

    #[test]
    fn unmapped_column_fails_loudly() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_log(dir.path(), true);
        let err = import_csv(&path, &mapping(), &toy_manifest(20))
            .unwrap_err()
            .to_string();
        assert!(err.contains("unmapped columns: browser"), "{err}");
        let mut m = mapping();
        m.ignore.push("browser".into());
        assert!(import_csv(&path, &m, &toy_manifest(20)).is_ok());
    }
}
