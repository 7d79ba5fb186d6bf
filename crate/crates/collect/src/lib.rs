//! Session collection service: hands out stimuli, records ranked responses
//! with latencies, and appends finished sessions to JSONL.

pub mod config;
pub mod error;
pub mod session;

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use vkt_core::data::{
    check_session, load_manifest, DatasetManifest, LearnerSession, Phase, TEST_STEPS, TRAIN_STEPS,
};

pub use config::Config;
pub use error::ApiError;
use session::{Completion, Destination, Session, Status, Stimulus, SubmitResult};

type SessionRef = Arc<tokio::sync::Mutex<Session>>;

/// Shared service state. Cheap to clone.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    config: Config,
    datasets: HashMap<String, DatasetManifest>,
    sessions: Mutex<HashMap<String, SessionRef>>,
    /// Serializes appends so each record lands as one line.
    write_lock: tokio::sync::Mutex<()>,
}

/// Loads `dir/manifest.json`, or every `dir/*/manifest.json`.
pub fn load_datasets(dir: &Path) -> Result<HashMap<String, DatasetManifest>, ApiError> {
    let mut paths: Vec<PathBuf> = Vec::new();
    if dir.join("manifest.json").is_file() {
        paths.push(dir.join("manifest.json"));
    } else {
        let entries = std::fs::read_dir(dir)
            .map_err(|e| ApiError::config(format!("{}: {e}", dir.display())))?;
        for e in entries.flatten() {
            let p = e.path().join("manifest.json");
            if p.is_file() {
                paths.push(p);
            }
        }
    }
    paths.sort();
    let mut out = HashMap::new();
    for p in paths {
        let m = load_manifest(&p).map_err(|e| ApiError::config(e.to_string()))?;
        let problems = m.validate(true);
        if !problems.is_empty() {
            return Err(ApiError::config(format!(
                "{}: {}",
                p.display(),
                problems.join("; ")
            )));
        }
        if out.insert(m.name.clone(), m).is_some() {
            return Err(ApiError::config(format!(
                "duplicate dataset name in {}",
                p.display()
            )));
        }
    }
    if out.is_empty() {
        return Err(ApiError::config(format!(
            "no manifest.json under {}",
            dir.display()
        )));
    }
    Ok(out)
}

fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl AppState {
    pub fn new(config: Config) -> Result<Self, ApiError> {
        let datasets = load_datasets(&config.dataset_dir)?;
        Ok(Self::with_datasets(config, datasets))
    }

    pub fn with_datasets(config: Config, datasets: HashMap<String, DatasetManifest>) -> Self {
        Self {
            inner: Arc::new(Inner {
                config,
                datasets,
                sessions: Mutex::new(HashMap::new()),
                write_lock: tokio::sync::Mutex::new(()),
            }),
        }
    }

    pub fn config(&self) -> &Config {
        &self.inner.config
    }

    fn dataset(&self, name: &str) -> Result<&DatasetManifest, ApiError> {
        self.inner
            .datasets
            .get(name)
            .ok_or_else(|| ApiError::not_found(format!("unknown dataset '{name}'")))
    }

    fn session(&self, id: &str) -> Result<SessionRef, ApiError> {
        self.inner
            .sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session '{id}'")))
    }

    /// Locks a session for mutation. A concurrent holder means a racing
    /// request, which loses with a conflict.
    fn lock(s: &SessionRef) -> Result<tokio::sync::MutexGuard<'_, Session>, ApiError> {
        s.try_lock()
            .map_err(|_| ApiError::conflict("another request for this session is in progress"))
    }

    async fn append(&self, path: &Path, record: &LearnerSession) -> Result<(), ApiError> {
        let mut line = serde_json::to_vec(record).map_err(|e| ApiError::internal(e.to_string()))?;
        line.push(b'\n');
        let _guard = self.inner.write_lock.lock().await;
        let path = path.to_path_buf();
        tokio::task::spawn_blocking(move || -> std::io::Result<()> {
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)?;
            f.write_all(&line)?;
            f.sync_data()
        })
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(|e| ApiError::unavailable(format!("could not append session: {e}")))
    }

    /// Writes the session once; later calls return the stored record.
    async fn persist(&self, s: &mut Session) -> Result<(Destination, LearnerSession), ApiError> {
        if let Some(done) = &s.persisted {
            return Ok(done.clone());
        }
        let record = s.record();
        let dest = match s.status {
            Status::Complete => {
                check_session(&record, self.dataset(&s.dataset)?)
                    .map_err(|e| ApiError::internal(e.to_string()))?;
                Destination::Main
            }
            Status::Abandoned => Destination::Abandoned,
            Status::Active => return Err(ApiError::conflict("session is still active")),
        };
        let path = match dest {
            Destination::Main => &self.inner.config.output,
            Destination::Abandoned => &self.inner.config.abandoned,
        };
        self.append(path, &record).await?;
        s.persisted = Some((dest, record.clone()));
        Ok((dest, record))
    }

    /// Abandons and persists every active session idle for longer than the
    /// timeout. Returns how many were abandoned.
    pub async fn reap_expired(&self) -> usize {
        let now = Instant::now();
        let all: Vec<SessionRef> = self
            .inner
            .sessions
            .lock()
            .unwrap()
            .values()
            .cloned()
            .collect();
        let mut n = 0;
        for s in all {
            let Ok(mut s) = s.try_lock() else { continue };
            if s.status == Status::Active && s.idle(now) >= self.inner.config.timeout {
                s.status = Status::Abandoned;
                n += 1;
            }
            if s.status == Status::Abandoned && s.persisted.is_none() {
                if let Err(e) = self.persist(&mut s).await {
                    log::warn!("session {}: {e}", s.id);
                }
            }
        }
        n
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartRequest {
    pub dataset: String,
    /// Free-form learner label, stored with the session.
    #[serde(default)]
    pub metadata: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StartResponse {
    pub session_id: String,
    pub dataset: String,
    pub seed: u64,
    pub classes: Vec<String>,
    pub train_steps: usize,
    pub test_steps: usize,
    pub stimulus: Stimulus,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StateResponse {
    pub session_id: String,
    pub dataset: String,
    pub status: Status,
    pub cursor: usize,
    pub classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stimulus: Option<Stimulus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub complete: Option<Completion>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseRequest {
    pub step: usize,
    pub ranked: [usize; 3],
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinalizeRequest {
    /// Ends an unfinished session as abandoned.
    #[serde(default)]
    pub abandon: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FinalizeResponse {
    pub status: Status,
    /// "main" or "abandoned".
    pub file: String,
    pub record: LearnerSession,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub datasets: Vec<String>,
    pub sessions: usize,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Summary {
    /// Completed sessions in the main file.
    pub sessions: usize,
    pub abandoned: usize,
    pub active: usize,
    /// Completed over completed plus abandoned; absent with no sessions.
    pub completion_rate: Option<f64>,
    /// Median summed response latency of completed sessions.
    pub median_duration_s: Option<f64>,
    /// `train_correct[k]` sessions got exactly `k` training steps right.
    pub train_correct: Vec<usize>,
    pub test_correct: Vec<usize>,
}

async fn start(
    State(app): State<AppState>,
    Json(req): Json<StartRequest>,
) -> Result<impl IntoResponse, ApiError> {
    let manifest = app.dataset(&req.dataset)?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    // 53 bits, so browser clients read it exactly.
    let seed = rand::random::<u64>() >> 11;
    let s = Session::start(id.clone(), manifest, req.metadata, seed, Instant::now())?;
    let body = StartResponse {
        session_id: id.clone(),
        dataset: manifest.name.clone(),
        seed,
        classes: manifest.classes.clone(),
        train_steps: TRAIN_STEPS,
        test_steps: TEST_STEPS,
        stimulus: s.stimulus(1),
    };
    app.inner
        .sessions
        .lock()
        .unwrap()
        .insert(id, Arc::new(tokio::sync::Mutex::new(s)));
    Ok((StatusCode::CREATED, Json(body)))
}

async fn current(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<StateResponse>, ApiError> {
    let s = app.session(&id)?;
    let s = s.lock().await;
    Ok(Json(StateResponse {
        session_id: s.id.clone(),
        dataset: s.dataset.clone(),
        status: s.status,
        cursor: s.cursor(),
        classes: app.dataset(&s.dataset)?.classes.clone(),
        stimulus: s.current(),
        complete: (s.status == Status::Complete).then(|| s.completion()),
    }))
}

async fn respond(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<ResponseRequest>,
) -> Result<Json<SubmitResult>, ApiError> {
    let s = app.session(&id)?;
    let mut s = AppState::lock(&s)?;
    let manifest = app.dataset(&s.dataset)?;
    Ok(Json(s.submit(
        manifest,
        req.step,
        req.ranked,
        Instant::now(),
        timestamp(),
    )?))
}

async fn finalize(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Option<Json<FinalizeRequest>>,
) -> Result<Json<FinalizeResponse>, ApiError> {
    let req = body.map(|Json(b)| b).unwrap_or_default();
    let s = app.session(&id)?;
    let mut s = AppState::lock(&s)?;
    if s.status == Status::Active {
        if !req.abandon {
            return Err(ApiError::conflict(format!(
                "session is at step {}; pass abandon to end it early",
                s.cursor()
            )));
        }
        s.status = Status::Abandoned;
    }
    let (dest, record) = app.persist(&mut s).await?;
    Ok(Json(FinalizeResponse {
        status: s.status,
        file: match dest {
            Destination::Main => "main",
            Destination::Abandoned => "abandoned",
        }
        .into(),
        record,
    }))
}

async fn image(
    State(app): State<AppState>,
    UrlPath((id, step)): UrlPath<(String, usize)>,
) -> Result<impl IntoResponse, ApiError> {
    let s = app.session(&id)?;
    let (dataset, index) = {
        let s = s.lock().await;
        // Only stimuli already reached; later ones stay hidden.
        if step == 0 || step > s.cursor() {
            return Err(ApiError::not_found(format!("step {step} is not available")));
        }
        (s.dataset.clone(), s.items[step - 1])
    };
    let manifest = app.dataset(&dataset)?;
    let item = &manifest.items[index];
    let path = manifest
        .image_path(item)
        .ok_or_else(|| ApiError::not_found(format!("item '{}' has no image", item.id)))?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))?;
    let mime = match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => "application/octet-stream",
    };
    Ok((
        [
            (header::CONTENT_TYPE, mime),
            (header::CACHE_CONTROL, "no-store"),
        ],
        bytes,
    ))
}

async fn health(State(app): State<AppState>) -> Json<Health> {
    let mut datasets: Vec<String> = app.inner.datasets.keys().cloned().collect();
    datasets.sort();
    Json(Health {
        status: "ok".into(),
        datasets,
        sessions: app.inner.sessions.lock().unwrap().len(),
    })
}

/// Parses every line that is a session record; skips the rest.
fn read_records(path: &Path) -> Vec<LearnerSession> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Vec::new();
    };
    text.lines()
        .filter_map(|l| serde_json::from_str(l).ok())
        .collect()
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

pub fn summarize(complete: &[LearnerSession], abandoned: usize, active: usize) -> Summary {
    let histogram = |phase: Phase, steps: usize| {
        let mut h = vec![0; steps + 1];
        for s in complete {
            h[s.correct_count(phase).min(steps)] += 1;
        }
        h
    };
    let total = complete.len() + abandoned;
    Summary {
        sessions: complete.len(),
        abandoned,
        active,
        completion_rate: (total > 0).then(|| complete.len() as f64 / total as f64),
        median_duration_s: median(
            complete
                .iter()
                .filter(|s| s.interactions.iter().all(|i| i.latency_ms.is_some()))
                .map(|s| {
                    s.interactions
                        .iter()
                        .filter_map(|i| i.latency_ms)
                        .sum::<u64>() as f64
                        / 1000.0
                })
                .collect(),
        ),
        train_correct: histogram(Phase::Train, TRAIN_STEPS),
        test_correct: histogram(Phase::Test, TEST_STEPS),
    }
}

async fn summary(State(app): State<AppState>) -> Result<Json<Summary>, ApiError> {
    let cfg = app.inner.config.clone();
    let (complete, abandoned) = tokio::task::spawn_blocking(move || {
        (
            read_records(&cfg.output),
            read_records(&cfg.abandoned).len(),
        )
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?;
    let sessions: Vec<SessionRef> = app
        .inner
        .sessions
        .lock()
        .unwrap()
        .values()
        .cloned()
        .collect();
    let mut active = 0;
    for s in sessions {
        if s.lock().await.status == Status::Active {
            active += 1;
        }
    }
    Ok(Json(summarize(&complete, abandoned, active)))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(start))
        .route("/sessions/{id}/stimulus", get(current))
        .route("/sessions/{id}/responses", post(respond))
        .route("/sessions/{id}/finalize", post(finalize))
        .route("/images/{id}/{step}", get(image))
        .route("/admin/summary", get(summary))
        .route("/healthz", get(health))
        .with_state(state)
}

/// Binds, starts the timeout sweeper and serves until the process ends.
pub async fn serve(config: Config) -> Result<(), ApiError> {
    let state = AppState::new(config.clone())?;
    let sweeper = state.clone();
    let period = (config.timeout / 4).clamp(Duration::from_secs(1), Duration::from_secs(60));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            let n = sweeper.reap_expired().await;
            if n > 0 {
                log::info!("abandoned {n} idle sessions");
            }
        }
    });
    let listener = tokio::net::TcpListener::bind(config.bind)
        .await
        .map_err(|e| ApiError::config(format!("bind {}: {e}", config.bind)))?;
    log::info!("listening on {}", config.bind);
    axum::serve(listener, router(state))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))
}
