//! Multi-seed pipeline: generate training data, train the learned detectors,
//! run closed-loop evaluation episodes for every method and write the raw
//! per-episode tables that `metrics::report` summarizes.
//!
//! Everything lands under one output root:
//!
//! ```text
//! config.toml                     resolved configuration
//! data/train-seed{s}.jsonl        training episodes
//! data/manifest.json              config hash and file digests
//! models/{kind}-seed{s}.ckpt      checkpoints
//! curves/{kind}-seed{s}.csv       training curves
//! logs/train-{kind}-seed{s}.jsonl header record plus one record per epoch
//! eval/episodes.csv               one row per (method, adaptation, seed, episode)
//! eval/dynamics.csv               belief-update probes of the tracker
//! eval/separability.csv           embedding separability per seed
//! report/                         see `metrics::report`
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{BocpdDetector, ControlCondition, ControlKind, Gru, GruDetector};
use crate::checkpoint::Checkpoint;
use crate::config::{sha256_hex, Config};
use crate::detector::{Detector, EpisodeContext, Trigger};
use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::metrics::{bhattacharyya, dynamics_probe, hard_detection, silhouette};
use crate::sim::{run_episode_with, Adaptation, EgoConfig, EpisodeLog, Transition};
use crate::train::dataset::{episode_seeds, generate_dataset_with, label_all, observations, read_dataset, write_dataset};
use crate::train::{train, EpochRecord, Model, ModelKind, TrainState};
use crate::uatom::{Uatom, UatomDetector};

const TRAIN_STREAM: u64 = 0x7472_6169_6e00_0001;
const EVAL_STREAM: u64 = 0x6576_616c_0000_0002;
const MODEL_STREAM: u64 = 0x6d6f_6465_6c00_0003;

/// Independent sub-seed for one purpose.
pub fn stream(seed: u64, tag: u64) -> u64 {
    let mut x = seed ^ tag;
    // splitmix64 finalizer
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn train_data(&self, seed: u64) -> PathBuf {
        self.root.join("data").join(format!("train-seed{seed}.jsonl"))
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("data").join("manifest.json")
    }
    pub fn checkpoint(&self, kind: ModelKind, seed: u64) -> PathBuf {
        self.root.join("models").join(format!("{}-seed{seed}.ckpt", kind.name()))
    }
    pub fn curve(&self, kind: ModelKind, seed: u64) -> PathBuf {
        self.root.join("curves").join(format!("{}-seed{seed}.csv", kind.name()))
    }
    pub fn train_log(&self, kind: ModelKind, seed: u64) -> PathBuf {
        self.root.join("logs").join(format!("train-{}-seed{seed}.jsonl", kind.name()))
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(d) = p.parent() {
        std::fs::create_dir_all(d)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u32,
    pub config_hash: String,
    /// Relative path to sha256 of the file bytes.
    pub files: BTreeMap<String, String>,
}

/// Write the training sets for every configured seed.
pub fn generate(cfg: &Config, layout: &Layout) -> Result<Manifest> {
    cfg.validate()?;
    std::fs::create_dir_all(&layout.root)?;
    std::fs::write(layout.config(), cfg.to_toml())?;
    let mut files = BTreeMap::new();
    for &seed in &cfg.run.seeds {
        let logs = generate_dataset_with(
            &cfg.workspace,
            &cfg.ego,
            cfg.run.train_per_transition,
            stream(seed, TRAIN_STREAM),
        )?;
        let path = layout.train_data(seed);
        ensure_parent(&path)?;
        write_dataset(&path, &cfg.workspace, &logs)?;
        let rel = path.strip_prefix(&layout.root).unwrap_or(&path).display().to_string();
        files.insert(rel, sha256_hex(&std::fs::read(&path)?));
        log::info!("seed {seed}: {} training episodes -> {}", logs.len(), path.display());
    }
    let m = Manifest {
        schema: 1,
        config_hash: cfg.hash(),
        files,
    };
    let path = layout.manifest();
    ensure_parent(&path)?;
    std::fs::write(&path, serde_json::to_string_pretty(&m)?)?;
    Ok(m)
}

fn load_training_set(cfg: &Config, layout: &Layout, seed: u64) -> Result<Vec<EpisodeLog>> {
    let path = layout.train_data(seed);
    if !path.exists() {
        return Err(Error::InvalidInput(format!(
            "{} is missing; run the gen stage first",
            path.display()
        )));
    }
    let (ws, logs) = read_dataset(&path)?;
    if ws != cfg.workspace {
        return Err(Error::InvalidConfig(format!(
            "{} was generated under a different workspace config",
            path.display()
        )));
    }
    Ok(logs)
}

#[derive(Serialize)]
struct TrainLogHeader<'a> {
    kind: &'static str,
    schema: u32,
    model: &'a str,
    seed: u64,
    config_hash: &'a str,
    episodes: usize,
    resumed_from_epoch: usize,
}

#[derive(Serialize)]
struct TrainLogEpoch<'a> {
    kind: &'static str,
    #[serde(flatten)]
    rec: &'a EpochRecord,
}

/// What `train_seed` did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainOutcome {
    /// A checkpoint with the full epoch budget already existed.
    Cached,
    Trained { from_epoch: usize },
}

/// Train one model kind on one seed's data, resuming from an existing
/// checkpoint with the same model hash. A checkpoint from a different
/// configuration is an error unless `overwrite` is set.
pub fn train_seed(
    cfg: &Config,
    layout: &Layout,
    kind: ModelKind,
    seed: u64,
    overwrite: bool,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let hash = cfg.model_hash(kind);
    let ck_path = layout.checkpoint(kind, seed);
    let existing = if ck_path.exists() {
        match Checkpoint::load_expecting(&ck_path, &hash) {
            Ok(ck) => Some(ck),
            Err(Error::HashMismatch { .. }) if overwrite => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    if let Some(ck) = &existing {
        if ck.state.epoch >= cfg.train.epochs {
            return Ok(TrainOutcome::Cached);
        }
    }

    let logs = load_training_set(cfg, layout, seed)?;
    let fm = FeatureMap::calibrate(&observations(&logs), cfg.eval.feat_dim, seed)?;
    let data = label_all(&logs, &fm, &cfg.workspace)?;
    let mut tc = cfg.train.clone();
    tc.seed = stream(seed, cfg.train.seed);
    let (mut model, mut state) = match existing {
        Some(ck) => {
            if ck.feature_map != fm {
                return Err(Error::InvalidInput("checkpoint feature map does not match the training data".into()));
            }
            (ck.model, ck.state)
        }
        None => {
            let m = Model::new(kind, &cfg.uatom, &cfg.gru, stream(seed, MODEL_STREAM))?;
            let st = TrainState::new(&m);
            (m, st)
        }
    };
    let from_epoch = state.epoch;

    let log_path = layout.train_log(kind, seed);
    ensure_parent(&log_path)?;
    let mut log_w = BufWriter::new(if from_epoch == 0 {
        File::create(&log_path)?
    } else {
        std::fs::OpenOptions::new().append(true).create(true).open(&log_path)?
    });
    serde_json::to_writer(
        &mut log_w,
        &TrainLogHeader {
            kind: "header",
            schema: 1,
            model: kind.name(),
            seed,
            config_hash: &hash,
            episodes: data.len(),
            resumed_from_epoch: from_epoch,
        },
    )?;
    log_w.write_all(b"\n")?;

    let save = |model: &Model, state: &TrainState| -> Result<()> {
        Checkpoint {
            kind,
            config_hash: hash.clone(),
            seed,
            model: model.clone(),
            feature_map: fm.clone(),
            state: state.clone(),
            residual: None,
        }
        .save(&ck_path)
    };
    let mut io_err: Option<Error> = None;
    let result = train(&mut model, &data, &tc, &mut state, |rec| {
        if io_err.is_none() {
            let r = serde_json::to_writer(&mut log_w, &TrainLogEpoch { kind: "epoch", rec })
                .map_err(Error::from)
                .and_then(|_| log_w.write_all(b"\n").map_err(Error::from));
            if let Err(e) = r {
                io_err = Some(e);
            }
        }
        on_epoch(rec);
    });
    log_w.flush()?;
    if let Some(e) = io_err {
        return Err(e);
    }
    if let Err(e) = result {
        // Keep whatever progress was made so the run can be inspected.
        save(&model, &state)?;
        return Err(e);
    }

    let residual = match &model {
        Model::Gru(g) => Some(residual_stats(Arc::new(g.clone()), Arc::new(fm.clone()), &logs)?),
        Model::Uatom(_) => None,
    };
    let curve_path = layout.curve(kind, seed);
    ensure_parent(&curve_path)?;
    crate::train::trainer::write_curve(&curve_path, &state.curve)?;
    Checkpoint {
        kind,
        config_hash: hash.clone(),
        seed,
        model,
        feature_map: fm,
        state,
        residual,
    }
    .save(&ck_path)?;
    Ok(TrainOutcome::Trained { from_epoch })
}

/// Mean and standard deviation of the recurrent baseline's single-step
/// prediction error over a set of episodes.
pub fn residual_stats(gru: Arc<Gru>, fm: Arc<FeatureMap>, logs: &[EpisodeLog]) -> Result<(f64, f64)> {
    let per: Vec<Vec<f64>> = logs
        .par_iter()
        .map(|log| {
            let mut d = GruDetector::new(gru.clone(), fm.clone(), Trigger::default());
            d.begin_episode(&EpisodeContext {
                t_switch: log.t_switch,
                transition: log.transition,
                episode_len: log.observations.len(),
            });
            log.observations
                .iter()
                .map(|o| d.observe(o).map(|out| out.diagnostics.map(|g| g.pred_error).unwrap_or(0.0)))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    // Skip the first step of each episode, where no prediction exists yet.
    let all: Vec<f64> = per.iter().flat_map(|v| v.iter().skip(1).copied()).collect();
    Ok((crate::linalg::mean(&all), crate::linalg::sample_std(&all)))
}

/// Every evaluated condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "uatom")]
    Uatom,
    #[serde(rename = "gru")]
    Gru,
    #[serde(rename = "bocpd")]
    Bocpd,
    Oracle,
    Ctx,
    NoDetect,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Uatom,
        Method::Gru,
        Method::Bocpd,
        Method::Oracle,
        Method::Ctx,
        Method::NoDetect,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::Uatom => "uatom",
            Method::Gru => "gru",
            Method::Bocpd => "bocpd",
            Method::Oracle => "Oracle",
            Method::Ctx => "Ctx",
            Method::NoDetect => "NoDetect",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.label() == s)
    }

    pub fn is_trained(self) -> bool {
        matches!(self, Method::Uatom | Method::Gru)
    }
}

pub fn adaptation_label(a: Adaptation) -> &'static str {
    match a {
        Adaptation::Blend => "Blend",
        Adaptation::HardSwitch => "HardSwitch",
    }
}

/// One closed-loop evaluation episode, reduced to what the report needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub method: Method,
    pub adaptation: Adaptation,
    pub seed: u64,
    pub episode: usize,
    pub episode_seed: u64,
    pub transition: Transition,
    pub t_switch: usize,
    pub first_detection: Option<usize>,
    pub hits: Vec<(usize, bool)>,
    pub latency: Option<usize>,
    pub false_alarms: usize,
    pub collisions_post: usize,
    pub crt_post: usize,
    pub collisions_total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRow {
    pub seed: u64,
    pub episode: usize,
    pub transition: String,
    pub t_switch: usize,
    pub spike_ratio: f64,
    pub pointwise_ratio: f64,
    pub decay_steps: Option<usize>,
    pub delta_cv: f64,
    pub baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityRow {
    pub method: String,
    pub seed: u64,
    pub bhattacharyya_min: f64,
    pub bhattacharyya_mean: f64,
    pub silhouette: f64,
}

/// Trained artifacts of one seed; only those the configured methods need.
struct SeedModels {
    uatom: Option<(Arc<Uatom>, Arc<FeatureMap>)>,
    gru: Option<(Arc<Gru>, Arc<FeatureMap>, (f64, f64))>,
}

impl SeedModels {
    fn uatom(&self) -> (Arc<Uatom>, Arc<FeatureMap>) {
        let (m, fm) = self.uatom.as_ref().expect("uatom loaded for its methods");
        (m.clone(), fm.clone())
    }
    fn gru(&self) -> (Arc<Gru>, Arc<FeatureMap>, (f64, f64)) {
        let (m, fm, r) = self.gru.as_ref().expect("gru loaded for its methods");
        (m.clone(), fm.clone(), *r)
    }
}

fn load_trained(cfg: &Config, layout: &Layout, kind: ModelKind, seed: u64) -> Result<Checkpoint> {
    let ck = Checkpoint::load_expecting(&layout.checkpoint(kind, seed), &cfg.model_hash(kind))?;
    if ck.state.epoch < cfg.train.epochs {
        return Err(Error::InvalidInput(format!(
            "{} checkpoint for seed {seed} has {} of {} epochs; finish training first",
            kind.name(),
            ck.state.epoch,
            cfg.train.epochs
        )));
    }
    Ok(ck)
}

fn load_models(cfg: &Config, layout: &Layout, seed: u64) -> Result<SeedModels> {
    let wants = |ms: &[Method]| ms.iter().any(|m| cfg.run.methods.contains(m));
    let uatom = if wants(&[Method::Uatom]) {
        let u = load_trained(cfg, layout, ModelKind::Uatom, seed)?;
        match u.model {
            Model::Uatom(m) => Some((Arc::new(m), Arc::new(u.feature_map))),
            Model::Gru(_) => return Err(Error::InvalidInput("uatom checkpoint holds a gru".into())),
        }
    } else {
        None
    };
    let gru = if wants(&[Method::Gru, Method::Bocpd]) {
        let g = load_trained(cfg, layout, ModelKind::Gru, seed)?;
        let residual = g
            .residual
            .ok_or_else(|| Error::InvalidInput("gru checkpoint lacks residual statistics".into()))?;
        match g.model {
            Model::Gru(m) => Some((Arc::new(m), Arc::new(g.feature_map), residual)),
            Model::Uatom(_) => return Err(Error::InvalidInput("gru checkpoint holds a uatom".into())),
        }
    } else {
        None
    };
    Ok(SeedModels { uatom, gru })
}

fn make_detector(method: Method, m: &SeedModels, cfg: &Config) -> Box<dyn Detector> {
    let trig = cfg.eval.trigger();
    match method {
        Method::Uatom => {
            let (u, fm) = m.uatom();
            Box::new(UatomDetector::new(u, fm, trig))
        }
        Method::Gru => {
            let (g, fm, _) = m.gru();
            Box::new(GruDetector::new(g, fm, trig))
        }
        Method::Bocpd => {
            let (g, fm, (mean, std)) = m.gru();
            Box::new(BocpdDetector::new(g, fm, cfg.bocpd, mean, std))
        }
        Method::Oracle => Box::new(ControlCondition::new(ControlKind::Oracle)),
        Method::Ctx => Box::new(ControlCondition::new(ControlKind::ContextConditioned)),
        Method::NoDetect => Box::new(ControlCondition::new(ControlKind::NoDetection)),
    }
}

/// Evaluation episodes of one seed: `(transition, episode seed)`, balanced
/// and disjoint from the training stream.
pub fn eval_episodes(cfg: &Config, seed: u64) -> Vec<(Transition, u64)> {
    let trs = Transition::all();
    episode_seeds(stream(seed, EVAL_STREAM), cfg.run.eval_per_transition * trs.len())
        .into_iter()
        .enumerate()
        .map(|(i, s)| (trs[i % trs.len()], s))
        .collect()
}

fn summarize(
    method: Method,
    adaptation: Adaptation,
    seed: u64,
    episode: usize,
    log: &EpisodeLog,
    tolerances: &[usize],
) -> Result<EpisodeRow> {
    let trace: Vec<(usize, f64)> = log.switch_probs.iter().copied().enumerate().collect();
    let trig = log.trigger.unwrap_or_default();
    let rec = hard_detection(episode as u64, &trace, log.t_switch, tolerances, &trig)?;
    Ok(EpisodeRow {
        method,
        adaptation,
        seed,
        episode,
        episode_seed: log.seed,
        transition: log.transition,
        t_switch: log.t_switch,
        first_detection: rec.first_detection,
        hits: rec.hits,
        latency: rec.latency,
        false_alarms: rec.false_alarms,
        collisions_post: log.collisions_post,
        crt_post: log.crt_post,
        collisions_total: log.collisions_total,
    })
}

/// The (method, adaptation) conditions evaluated per seed. Every configured
/// method runs with the configured controller; the tracker and the oracle
/// also run with the other one for the adaptation comparison.
pub fn conditions(cfg: &Config) -> Vec<(Method, Adaptation)> {
    let main = cfg.ego.adaptation;
    let other = match main {
        Adaptation::Blend => Adaptation::HardSwitch,
        Adaptation::HardSwitch => Adaptation::Blend,
    };
    let on = |m: &Method| cfg.run.methods.contains(m);
    let mut v: Vec<_> = Method::ALL.iter().filter(|m| on(m)).map(|&m| (m, main)).collect();
    v.extend([Method::Uatom, Method::Oracle].iter().filter(|m| on(m)).map(|&m| (m, other)));
    v
}

pub struct EvalOutput {
    pub episodes: Vec<EpisodeRow>,
    pub dynamics: Vec<DynamicsRow>,
    pub separability: Vec<SeparabilityRow>,
}

/// Closed-loop evaluation of every condition on every seed.
pub fn evaluate(cfg: &Config, layout: &Layout) -> Result<EvalOutput> {
    cfg.validate()?;
    let mut out = EvalOutput {
        episodes: Vec::new(),
        dynamics: Vec::new(),
        separability: Vec::new(),
    };
    for &seed in &cfg.run.seeds {
        let models = load_models(cfg, layout, seed)?;
        let eps = eval_episodes(cfg, seed);
        for (method, adaptation) in conditions(cfg) {
            let ego = EgoConfig {
                adaptation,
                ..cfg.ego
            };
            let logs: Vec<EpisodeLog> = eps
                .par_iter()
                .map(|&(tr, s)| {
                    let mut d = make_detector(method, &models, cfg);
                    run_episode_with(tr, s, &cfg.workspace, Some(d.as_mut()), &ego)
                })
                .collect::<Result<_>>()?;
            for (i, log) in logs.iter().enumerate() {
                out.episodes
                    .push(summarize(method, adaptation, seed, i, log, &cfg.eval.tolerances)?);
            }
            if method == Method::Uatom && adaptation == cfg.ego.adaptation {
                for (i, log) in logs.iter().enumerate() {
                    let un: Vec<f64> = log.diagnostics.iter().map(|d| d.update_norm).collect();
                    let dm: Vec<f64> = log.diagnostics.iter().map(|d| d.delta_mean).collect();
                    let p = dynamics_probe(&un, &dm, log.t_switch)?;
                    out.dynamics.push(DynamicsRow {
                        seed,
                        episode: i,
                        transition: log.transition.label(),
                        t_switch: log.t_switch,
                        spike_ratio: p.spike_ratio,
                        pointwise_ratio: p.pointwise_ratio,
                        decay_steps: p.decay_steps,
                        delta_cv: p.delta_cv,
                        baseline: p.baseline,
                    });
                }
                out.separability.push(separability_row("uatom", seed, &logs, |log| {
                    belief_snapshots_uatom(&models, cfg, log)
                })?);
            }
            if method == Method::Gru && adaptation == cfg.ego.adaptation {
                out.separability.push(separability_row("gru", seed, &logs, |log| {
                    belief_snapshots_gru(&models, cfg, log)
                })?);
            }
            log::info!("seed {seed}: {} / {} done", method.label(), adaptation_label(adaptation));
        }
    }
    Ok(out)
}

/// Replays a logged episode and returns the internal state one step before
/// the switch and at the final step.
fn belief_snapshots_uatom(m: &SeedModels, cfg: &Config, log: &EpisodeLog) -> Result<(Vec<f64>, Vec<f64>)> {
    let (u, fm) = m.uatom();
    let mut d = UatomDetector::new(u, fm, cfg.eval.trigger());
    snapshots(&mut d, log, |d| d.state().b.clone())
}

fn belief_snapshots_gru(m: &SeedModels, cfg: &Config, log: &EpisodeLog) -> Result<(Vec<f64>, Vec<f64>)> {
    let (g, fm, _) = m.gru();
    let mut d = GruDetector::new(g, fm, cfg.eval.trigger());
    snapshots(&mut d, log, |d| d.state().h.last().cloned().unwrap_or_default())
}

fn snapshots<D: Detector>(d: &mut D, log: &EpisodeLog, read: impl Fn(&D) -> Vec<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    d.begin_episode(&EpisodeContext {
        t_switch: log.t_switch,
        transition: log.transition,
        episode_len: log.observations.len(),
    });
    let mut before = Vec::new();
    for (t, o) in log.observations.iter().enumerate() {
        d.observe(o)?;
        if t + 1 == log.t_switch {
            before = read(d);
        }
    }
    Ok((before, read(d)))
}

fn separability_row(
    method: &str,
    seed: u64,
    logs: &[EpisodeLog],
    snap: impl Fn(&EpisodeLog) -> Result<(Vec<f64>, Vec<f64>)> + Sync,
) -> Result<SeparabilityRow> {
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = logs.par_iter().map(&snap).collect::<Result<_>>()?;
    let mut xs = Vec::new();
    let mut labels = Vec::new();
    for (log, (a, b)) in logs.iter().zip(pairs) {
        xs.push(a);
        labels.push(log.transition.from.index());
        xs.push(b);
        labels.push(log.transition.to.index());
    }
    let mut groups = vec![Vec::new(); 4];
    for (x, &l) in xs.iter().zip(&labels) {
        groups[l].push(x.clone());
    }
    let sep = bhattacharyya(&groups)?;
    Ok(SeparabilityRow {
        method: method.to_string(),
        seed,
        bhattacharyya_min: sep.min,
        bhattacharyya_mean: sep.mean,
        silhouette: silhouette(&xs, &labels)?,
    })
}

fn opt<T: ToString>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_episodes(path: &Path, rows: &[EpisodeRow], tolerances: &[usize]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["method", "adaptation", "seed", "episode", "episode_seed", "transition", "t_switch", "first_detection"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(tolerances.iter().map(|k| format!("hit_{k}")));
    header.extend(
        ["latency", "false_alarms", "collisions_post", "crt_post", "collisions_total"]
            .iter()
            .map(|s| s.to_string()),
    );
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.method.label().to_string(),
            adaptation_label(r.adaptation).to_string(),
            r.seed.to_string(),
            r.episode.to_string(),
            r.episode_seed.to_string(),
            r.transition.label(),
            r.t_switch.to_string(),
            opt(r.first_detection),
        ];
        for k in tolerances {
            let h = r.hits.iter().find(|(kk, _)| kk == k).map(|(_, h)| *h);
            rec.push(opt(h.map(u8::from)));
        }
        rec.extend([
            opt(r.latency),
            r.false_alarms.to_string(),
            r.collisions_post.to_string(),
            r.crt_post.to_string(),
            r.collisions_total.to_string(),
        ]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_eval(layout: &Layout, out: &EvalOutput, tolerances: &[usize]) -> Result<()> {
    let dir = layout.eval_dir();
    write_episodes(&dir.join("episodes.csv"), &out.episodes, tolerances)?;
    write_rows(&dir.join("dynamics.csv"), &out.dynamics)?;
    write_rows(&dir.join("separability.csv"), &out.separability)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_differ() {
        let a: Vec<u64> = (0..50).map(|s| stream(s, TRAIN_STREAM)).collect();
        let b: Vec<u64> = (0..50).map(|s| stream(s, EVAL_STREAM)).collect();
        let mut all = a.clone();
        all.extend(&b);
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn eval_set_balanced_and_disjoint_from_training() {
        let cfg = Config::default();
        let eps = eval_episodes(&cfg, 0);
        assert_eq!(eps.len(), 240);
        for tr in Transition::all() {
            assert_eq!(eps.iter().filter(|(t, _)| *t == tr).count(), 20);
        }
        let train = episode_seeds(stream(0, TRAIN_STREAM), 240);
        assert!(eps.iter().all(|(_, s)| !train.contains(s)));
    }

    #[test]
    fn method_labels_roundtrip() {
        for m in Method::ALL {
            assert_eq!(Method::from_label(m.label()), Some(m));
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.label()));
        }
    }

    #[test]
    fn conditions_follow_method_subset() {
        let mut cfg = Config::default();
        cfg.run.methods = vec![Method::NoDetect, Method::Oracle];
        let c = conditions(&cfg);
        assert_eq!(
            c,
            vec![
                (Method::Oracle, Adaptation::Blend),
                (Method::NoDetect, Adaptation::Blend),
                (Method::Oracle, Adaptation::HardSwitch)
            ]
        );
    }

    #[test]
    fn conditions_cover_adaptation_pair() {
        let c = conditions(&Config::default());
        assert!(c.contains(&(Method::Uatom, Adaptation::Blend)));
        assert!(c.contains(&(Method::Uatom, Adaptation::HardSwitch)));
        assert_eq!(c.len(), 8);
    }
}
