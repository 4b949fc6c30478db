//! Training data: scripted-partner episodes with the ego on its default
//! policy, and the per-step labels derived from them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{observed_actions, AUX_SCALES};
use crate::sim::{run_episode_with, EgoConfig, EpisodeLog, Transition, WorkspaceConfig};

/// Steps labelled positive for the switch head, starting at the switch.
pub const SWITCH_WINDOW: usize = 3;

/// Per-episode seeds: consecutive draws of a ChaCha stream keyed by `seed`.
pub fn episode_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.next_u64()).collect()
}

/// `n_per_transition` episodes for each of the 12 transitions, interleaved
/// so that every prefix of 12 is balanced.
pub fn generate_dataset(cfg: &WorkspaceConfig, n_per_transition: usize, seed: u64) -> Result<Vec<EpisodeLog>> {
    generate_dataset_with(cfg, &EgoConfig::default(), n_per_transition, seed)
}

pub fn generate_dataset_with(
    cfg: &WorkspaceConfig,
    ego: &EgoConfig,
    n_per_transition: usize,
    seed: u64,
) -> Result<Vec<EpisodeLog>> {
    if n_per_transition == 0 {
        return Err(Error::InvalidInput("n_per_transition must be at least 1".into()));
    }
    cfg.validate()?;
    let trs = Transition::all();
    let seeds = episode_seeds(seed, n_per_transition * trs.len());
    seeds
        .par_iter()
        .enumerate()
        .map(|(i, &s)| run_episode_with(trs[i % trs.len()], s, cfg, None, ego))
        .collect()
}

pub fn write_dataset(path: &Path, cfg: &WorkspaceConfig, logs: &[EpisodeLog]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for log in logs {
        log.write_jsonl(cfg, &mut w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(WorkspaceConfig, Vec<EpisodeLog>)> {
    let recs = EpisodeLog::read_jsonl(BufReader::new(File::open(path)?))?;
    let cfg = match recs.first() {
        Some((c, _)) => c.clone(),
        None => return Err(Error::InvalidInput(format!("{} holds no episodes", path.display()))),
    };
    if recs.iter().any(|(c, _)| *c != cfg) {
        return Err(Error::InvalidInput("episodes disagree on workspace config".into()));
    }
    Ok((cfg, recs.into_iter().map(|(_, l)| l).collect()))
}

/// One episode in the form the trainer consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEpisode {
    pub seed: u64,
    pub transition: Transition,
    pub t_switch: usize,
    pub z: Vec<Vec<f64>>,
    /// Realized co-agent velocity, m/s.
    pub a_obs: Vec<[f64; 2]>,
    pub types: Vec<usize>,
    pub switch: Vec<f64>,
    /// Running means of the persistence-predictor error over the windows in
    /// [`AUX_SCALES`], in units of `v_max`.
    pub aux: Vec<[f64; 3]>,
    pub v_max: f64,
}

impl LabeledEpisode {
    pub fn from_log(log: &EpisodeLog, fm: &FeatureMap, cfg: &WorkspaceConfig) -> Result<Self> {
        let n = log.observations.len();
        let z = log
            .observations
            .iter()
            .map(|o| fm.encode(o))
            .collect::<Result<Vec<_>>>()?;
        let a_obs = observed_actions(&log.observations, cfg.dt);
        let types = (0..n).map(|t| log.partner_type(t).index()).collect();
        let switch = (0..n)
            .map(|t| (t >= log.t_switch && t < log.t_switch + SWITCH_WINDOW) as u8 as f64)
            .collect();
        Ok(Self {
            seed: log.seed,
            transition: log.transition,
            t_switch: log.t_switch,
            z,
            aux: aux_targets(&a_obs, cfg.v_max),
            a_obs,
            types,
            switch,
            v_max: cfg.v_max,
        })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// Next-step action target in units of `v_max`; none at the last step.
    pub fn act_target(&self, t: usize) -> Option<[f64; 2]> {
        self.a_obs.get(t + 1).map(|a| [a[0] / self.v_max, a[1] / self.v_max])
    }
}

/// `e_t = ||a_t - a_{t-1}|| / v_max` (zero at `t = 0`), averaged over the
/// trailing window of each scale, truncated at the episode start.
pub fn aux_targets(a_obs: &[[f64; 2]], v_max: f64) -> Vec<[f64; 3]> {
    let e: Vec<f64> = (0..a_obs.len())
        .map(|t| {
            if t == 0 {
                0.0
            } else {
                let (a, b) = (a_obs[t], a_obs[t - 1]);
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() / v_max
            }
        })
        .collect();
    let mut prefix = vec![0.0; e.len() + 1];
    for (i, x) in e.iter().enumerate() {
        prefix[i + 1] = prefix[i] + x;
    }
    (0..e.len())
        .map(|t| {
            let mut out = [0.0; 3];
            for (j, &k) in AUX_SCALES.iter().enumerate() {
                let lo = (t + 1).saturating_sub(k);
                out[j] = (prefix[t + 1] - prefix[lo]) / (t + 1 - lo) as f64;
            }
            out
        })
        .collect()
}

pub fn label_all(logs: &[EpisodeLog], fm: &FeatureMap, cfg: &WorkspaceConfig) -> Result<Vec<LabeledEpisode>> {
    logs.par_iter().map(|l| LabeledEpisode::from_log(l, fm, cfg)).collect()
}

/// All observations of a dataset, for feature-map calibration.
pub fn observations(logs: &[EpisodeLog]) -> Vec<crate::sim::Observation> {
    logs.iter().flat_map(|l| l.observations.iter().cloned()).collect()
}
