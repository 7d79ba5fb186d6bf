use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use vkt_core::data::{
    generate_greebles, load_manifest, load_sessions, save_sessions, DatasetManifest, GreeblesSpec,
    LearnerSession,
};
use vkt_core::encoder::EncoderConfig;
use vkt_core::numerics::Scalar;
use vkt_core::pipeline::{
    ap_report, correctness_stats, evaluate_model, export_states, fit_split, gt_label_baseline,
    probability_trace, probe_set, reshuffle_protocol, split_learners, Hyperparams, Split,
    DEFAULT_FRACTIONS,
};
use vkt_core::simulator::{oracle_ap, save_probes, simulate_population, SimConfig};
use vkt_core::tracers::{
    Conditioning, EmbeddingKind, Stimuli, TracerKind, TracerModel, TracerVariant,
};

use crate::{Command, Common, Embedding, ModelOpts};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] vkt_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Service(#[from] vkt_collect::ApiError),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Usage(_) => "usage",
            CliError::Service(_) => "service",
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io(e: std::io::Error) -> CliError {
    CliError::Core(e.into())
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}

fn out_dir(common: &Common) -> Result<&Path> {
    std::fs::create_dir_all(&common.out).map_err(io)?;
    Ok(&common.out)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let f = File::create(path).map_err(io)?;
    serde_json::to_writer_pretty(BufWriter::new(f), value).map_err(|e| CliError::Core(e.into()))
}

fn inputs(common: &Common) -> Result<(DatasetManifest, Vec<LearnerSession>)> {
    let manifest = load_manifest(required(&common.dataset, "dataset")?)?;
    let sessions = load_sessions(required(&common.sessions, "sessions")?, &manifest)?;
    Ok((manifest, sessions))
}

fn sim_config(path: &Option<PathBuf>) -> Result<SimConfig> {
    Ok(match path {
        Some(p) => SimConfig::load(p)?,
        None => SimConfig::default(),
    })
}

fn variant(common: &Common, meta: bool, base: TracerVariant) -> Result<TracerVariant> {
    let mut v = match &common.variant {
        Some(name) => TracerVariant::new(name.parse::<TracerKind>()?),
        None => base,
    };
    if let Some(c) = &common.conditioning {
        v = v.with_conditioning(c.parse::<Conditioning>()?);
    }
    if meta {
        v = v.with_meta(true);
    }
    v.validate()?;
    Ok(v)
}

fn hyperparams(common: &Common, opts: &ModelOpts) -> Result<Hyperparams> {
    let mut hp: Hyperparams = match &opts.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(io)?;
            serde_json::from_str(&text).map_err(|e| CliError::Core(e.into()))?
        }
        None => Hyperparams::default(),
    };
    hp.variant = variant(common, opts.meta, hp.variant)?;
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut hp.embed_dim, common.embed_dim);
    set(&mut hp.max_epochs, opts.max_epochs);
    set(&mut hp.patience, opts.patience);
    set(&mut hp.batch_size, opts.batch_size);
    set(&mut hp.reshuffles, opts.reshuffles);
    if let Some(s) = common.seed {
        hp.seed = s;
    }
    hp.validate()?;
    Ok(hp)
}

fn embedding(
    manifest: &DatasetManifest,
    hp: &Hyperparams,
    opts: &ModelOpts,
) -> Result<EmbeddingKind> {
    let images = manifest.items.iter().all(|i| i.path.is_some());
    let use_cnn = match opts.embedding {
        Embedding::Cnn => true,
        Embedding::Features => false,
        Embedding::Auto => images,
    };
    if use_cnn {
        let g = &manifest.geometry;
        Ok(EmbeddingKind::Cnn(EncoderConfig::new(
            g.height,
            g.width,
            g.channels,
            hp.embed_dim,
        )?))
    } else {
        Ok(EmbeddingKind::Features(
            sim_config(&opts.sim_config)?.feature_map(manifest)?,
        ))
    }
}

fn stimuli<T: Scalar>(manifest: &DatasetManifest, emb: &EmbeddingKind) -> Result<Stimuli<T>> {
    Ok(match emb {
        EmbeddingKind::Cnn(c) => {
            Stimuli::from_images(manifest, c.input_height, c.input_width, c.img_chns)?
        }
        EmbeddingKind::Features(map) => Stimuli::from_features(manifest, map)?,
    })
}

fn write_trace<T: Scalar>(
    path: &Path,
    model: &TracerModel<T>,
    stimuli: &Stimuli<T>,
    sessions: &[LearnerSession],
    per_class: usize,
    seed: u64,
) -> Result<()> {
    let probes = probe_set(stimuli, model.classes(), per_class, seed);
    let trace = probability_trace(model, stimuli, sessions, &probes)?;
    trace.write_csv(BufWriter::new(File::create(path).map_err(io)?))?;
    Ok(())
}

pub fn run(cmd: Command) -> Result<Value> {
    match cmd {
        Command::GenerateGreebles {
            common,
            config,
            per_class,
            size,
        } => {
            let mut spec = match &config {
                Some(p) => GreeblesSpec::load(p)?,
                None => GreeblesSpec::default(),
            };
            if let Some(n) = per_class {
                spec.per_class = n;
            }
            if let Some(s) = size {
                spec.geometry.height = s;
                spec.geometry.width = s;
            }
            if let Some(s) = common.seed {
                spec.seed = s;
            }
            let dir = out_dir(&common)?;
            let mut set = generate_greebles(&spec)?;
            set.write(dir)?;
            Ok(json!({
                "manifest": dir.join("manifest.json"),
                "items": set.manifest.items.len(),
                "clamped": set.clamped,
            }))
        }
        Command::Simulate {
            common,
            config,
            learners,
        } => {
            let manifest = load_manifest(required(&common.dataset, "dataset")?)?;
            let mut cfg = sim_config(&config)?;
            if let Some(n) = learners {
                cfg.learners = n;
            }
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let pop = simulate_population(&manifest, &cfg)?;
            let dir = out_dir(&common)?;
            let sessions = dir.join("sessions.jsonl");
            save_sessions(&sessions, &pop.sessions)?;
            save_probes(&dir.join("oracle_probes.jsonl"), &pop.probes)?;
            write_json(&dir.join("learners.json"), &pop.params)?;
            write_json(&dir.join("sim_config.json"), &cfg)?;
            let oracle = oracle_ap(&pop.probes, &pop.sessions, manifest.num_classes())?;
            Ok(json!({
                "sessions": sessions,
                "learners": pop.sessions.len(),
                "oracle_ap": oracle,
                "correctness": correctness_stats(&pop.sessions),
            }))
        }
        Command::Train { common, model } => {
            if model.f64 {
                train::<f64>(&common, &model)
            } else {
                train::<f32>(&common, &model)
            }
        }
        Command::Evaluate {
            common,
            model,
            checkpoint,
            probes_per_class,
        } => {
            if model.f64 {
                evaluate::<f64>(&common, &model, checkpoint.as_deref(), probes_per_class)
            } else {
                evaluate::<f32>(&common, &model, checkpoint.as_deref(), probes_per_class)
            }
        }
        Command::Trace {
            common,
            checkpoint,
            probes_per_class,
            f64,
        } => {
            if f64 {
                trace::<f64>(&common, &checkpoint, probes_per_class)
            } else {
                trace::<f32>(&common, &checkpoint, probes_per_class)
            }
        }
        Command::ExportStates {
            common,
            checkpoint,
            f64,
        } => {
            if f64 {
                export::<f64>(&common, &checkpoint)
            } else {
                export::<f32>(&common, &checkpoint)
            }
        }
        Command::Stats { common } => {
            let (_, sessions) = inputs(&common)?;
            let stats = correctness_stats(&sessions);
            write_json(&out_dir(&common)?.join("stats.json"), &stats)?;
            Ok(serde_json::to_value(stats).map_err(|e| CliError::Core(e.into()))?)
        }
        Command::Serve {
            common,
            data_dir,
            bind,
            timeout_secs,
        } => serve(&common, data_dir, bind, timeout_secs),
    }
}

fn train<T: Scalar>(common: &Common, opts: &ModelOpts) -> Result<Value> {
    let (manifest, sessions) = inputs(common)?;
    let hp = hyperparams(common, opts)?;
    let emb = embedding(&manifest, &hp, opts)?;
    let stim = stimuli::<T>(&manifest, &emb)?;
    let ids: Vec<String> = sessions.iter().map(|s| s.learner_id.clone()).collect();
    let split = split_learners(&ids, DEFAULT_FRACTIONS, hp.seed)?;
    let config = hp.model_config(manifest.num_classes(), emb);
    let run = fit_split(config, &stim, &sessions, &split, &hp)?;
    let dir = out_dir(common)?;
    let checkpoint = dir.join("model.json");
    run.model.save(
        &checkpoint,
        json!({ "hyperparams": hp, "split": split, "dataset": manifest.name }),
    )?;
    write_json(&dir.join("train_report.json"), &run.report)?;
    write_json(&dir.join("ap_report.json"), &run.ap)?;
    write_json(&dir.join("split.json"), &split)?;
    Ok(json!({
        "checkpoint": checkpoint,
        "variant": hp.variant,
        "best_epoch": run.report.best_epoch,
        "epochs": run.report.epochs.len(),
        "stop_reason": run.report.stop_reason,
        "ap": run.ap,
    }))
}

fn evaluate<T: Scalar>(
    common: &Common,
    opts: &ModelOpts,
    checkpoint: Option<&Path>,
    per_class: usize,
) -> Result<Value> {
    let (manifest, sessions) = inputs(common)?;
    let classes = manifest.num_classes();
    let seed = common.seed.unwrap_or(0);
    let dir = out_dir(common)?;

    if let Some(path) = checkpoint {
        let (model, _) = TracerModel::<T>::load(path)?;
        let stim = stimuli::<T>(&manifest, &model.config.embedding)?;
        let (report, _) = evaluate_model(&model, &stim, &sessions)?;
        write_json(&dir.join("ap_report.json"), &report)?;
        write_trace(
            &dir.join("trace.csv"),
            &model,
            &stim,
            &sessions,
            per_class,
            seed,
        )?;
        return serde_json::to_value(report).map_err(|e| CliError::Core(e.into()));
    }

    if common.variant.as_deref() == Some("gt_label") {
        let reshuffles = opts.reshuffles.unwrap_or(Hyperparams::default().reshuffles);
        let report = reshuffle_protocol(
            &sessions,
            DEFAULT_FRACTIONS,
            seed,
            reshuffles,
            |split, _| {
                let test: Vec<LearnerSession> = split
                    .select(&sessions, Split::Test)
                    .into_iter()
                    .cloned()
                    .collect();
                let preds: Vec<_> = test.iter().map(|s| gt_label_baseline(s, classes)).collect();
                ap_report(&preds, &test, classes)
            },
        )?;
        write_json(&dir.join("report.json"), &report)?;
        return Ok(json!({ "variant": "gt_label", "train": report.train, "test": report.test }));
    }

    let hp = hyperparams(common, opts)?;
    let emb = embedding(&manifest, &hp, opts)?;
    let stim = stimuli::<T>(&manifest, &emb)?;
    let config = hp.model_config(classes, emb);
    let mut first = true;
    let report = reshuffle_protocol(
        &sessions,
        DEFAULT_FRACTIONS,
        hp.seed,
        hp.reshuffles,
        |split, s| {
            let hp = Hyperparams {
                seed: s,
                ..hp.clone()
            };
            let run = fit_split(config.clone(), &stim, &sessions, split, &hp)?;
            if first {
                // Traces come from the first split's model on its own test learners.
                let test: Vec<LearnerSession> = split
                    .select(&sessions, Split::Test)
                    .into_iter()
                    .cloned()
                    .collect();
                let probes = probe_set(&stim, classes, per_class, s);
                let trace = probability_trace(&run.model, &stim, &test, &probes)?;
                let f = File::create(dir.join("trace.csv"))?;
                trace.write_csv(BufWriter::new(f))?;
                first = false;
            }
            log::info!("split seed {s}: test micro {:.4}", run.ap.test.micro);
            Ok(run.ap)
        },
    )?;
    write_json(&dir.join("report.json"), &report)?;
    Ok(json!({ "variant": hp.variant, "train": report.train, "test": report.test }))
}

fn trace<T: Scalar>(common: &Common, checkpoint: &Path, per_class: usize) -> Result<Value> {
    let (manifest, sessions) = inputs(common)?;
    let (model, _) = TracerModel::<T>::load(checkpoint)?;
    let stim = stimuli::<T>(&manifest, &model.config.embedding)?;
    let path = out_dir(common)?.join("trace.csv");
    write_trace(
        &path,
        &model,
        &stim,
        &sessions,
        per_class,
        common.seed.unwrap_or(0),
    )?;
    Ok(json!({ "trace": path, "learners": sessions.len() }))
}

fn export<T: Scalar>(common: &Common, checkpoint: &Path) -> Result<Value> {
    let (manifest, sessions) = inputs(common)?;
    let (model, _) = TracerModel::<T>::load(checkpoint)?;
    let stim = stimuli::<T>(&manifest, &model.config.embedding)?;
    let dir = out_dir(common)?;
    let states = dir.join("states.csv");
    let cls = dir.join("classifiers.csv");
    let emit = model.kind() == TracerKind::ClsPred;
    let sw = BufWriter::new(File::create(&states).map_err(io)?);
    let cw = if emit {
        Some(BufWriter::new(File::create(&cls).map_err(io)?))
    } else {
        None
    };
    let (state_rows, cls_rows) = export_states(&model, &stim, &sessions, sw, cw)?;
    Ok(json!({
        "states": states,
        "state_rows": state_rows,
        "classifiers": emit.then_some(cls),
        "classifier_rows": cls_rows,
    }))
}

fn serve(
    common: &Common,
    data_dir: Option<PathBuf>,
    bind: Option<String>,
    timeout: Option<u64>,
) -> Result<Value> {
    let data_dir = match (data_dir, &common.dataset) {
        (Some(d), _) => d,
        (None, Some(m)) => m.parent().map(Path::to_path_buf).unwrap_or_default(),
        (None, None) => std::env::var(vkt_collect::config::ENV_DATASET_DIR)
            .map(PathBuf::from)
            .map_err(|_| {
                CliError::Usage("--data-dir, --dataset or VKT_DATASET_DIR is required".into())
            })?,
    };
    let output = std::env::var(vkt_collect::config::ENV_OUTPUT)
        .map(PathBuf::from)
        .unwrap_or_else(|_| common.out.join("sessions.jsonl"));
    let mut cfg = vkt_collect::Config::new(data_dir, output);
    if let Ok(a) = std::env::var(vkt_collect::config::ENV_ABANDONED) {
        cfg.abandoned = a.into();
    }
    if let Some(b) = bind.or_else(|| std::env::var(vkt_collect::config::ENV_BIND).ok()) {
        cfg.bind = b
            .parse()
            .map_err(|e| CliError::Usage(format!("bind address '{b}': {e}")))?;
    }
    if let Some(t) = timeout {
        cfg.timeout = std::time::Duration::from_secs(t);
    }
    out_dir(common)?;
    let rt = tokio::runtime::Runtime::new().map_err(io)?;
    rt.block_on(vkt_collect::serve(cfg))?;
    Ok(json!({ "status": "stopped" }))
}
