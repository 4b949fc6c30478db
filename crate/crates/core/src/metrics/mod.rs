//! Evaluation quantities: hard detection and latency, reliability ratio,
//! coefficient of variation, ROC area, separability and dynamics probes.

pub mod dynamics;
pub mod report;
pub mod separability;

use serde::{Deserialize, Serialize};

use crate::detector::Trigger;
use crate::error::{Error, Result};
use crate::linalg::{mean, sample_std};

pub use dynamics::{dynamics_probe, DynamicsProbe};
pub use separability::{bhattacharyya, gaussian_bhattacharyya, silhouette, Separability};

/// Tolerances reported everywhere. The widest one is the saturation check.
pub const TOLERANCES: [usize; 3] = [3, 5, 15];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub episode: u64,
    pub t_switch: usize,
    /// First qualifying crossing that is not a false alarm.
    pub first_detection: Option<usize>,
    /// `(k, detected within +-k)`, ascending in `k`.
    pub hits: Vec<(usize, bool)>,
    /// Steps from the switch until the detection takes effect; the switch
    /// step itself counts as one.
    pub latency: Option<usize>,
    /// Qualifying crossings earlier than `t_switch - k_min`.
    pub false_alarms: usize,
}

impl DetectionRecord {
    pub fn detected_at(&self, k: usize) -> Option<bool> {
        self.hits.iter().find(|(kk, _)| *kk == k).map(|(_, h)| *h)
    }

    /// Wider tolerance never loses a detection, and latency only exists for
    /// detections at or after the switch.
    pub fn is_consistent(&self) -> bool {
        let mono = self.hits.windows(2).all(|w| !w[0].1 || w[1].1);
        let lat = match (self.latency, self.first_detection) {
            (Some(l), Some(f)) => f >= self.t_switch && l == f - self.t_switch + 1,
            (Some(_), None) => false,
            (None, f) => f.is_none_or(|f| f < self.t_switch),
        };
        mono && lat
    }
}

/// Scores a switch-probability trace `(step, prob)` against the true switch.
///
/// The qualifying steps of `trigger` are computed over the trace in step
/// order. Those before `t_switch - k` count as false alarms for tolerance
/// `k`; the first remaining one is a hit iff it lies within `t_switch + k`.
pub fn hard_detection(
    episode: u64,
    trace: &[(usize, f64)],
    t_switch: usize,
    tolerances: &[usize],
    trigger: &Trigger,
) -> Result<DetectionRecord> {
    if tolerances.is_empty() {
        return Err(Error::InvalidInput("no tolerances given".into()));
    }
    if trace.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::InvalidInput("trace steps must be strictly increasing".into()));
    }
    let mut ks = tolerances.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let probs: Vec<f64> = trace.iter().map(|(_, p)| *p).collect();
    let q: Vec<usize> = trigger.qualifying_steps(&probs).into_iter().map(|i| trace[i].0).collect();
    let first_from = |lo: usize| q.iter().copied().find(|&s| s >= lo);
    let hits = ks
        .iter()
        .map(|&k| {
            let hit = first_from(t_switch.saturating_sub(k)).is_some_and(|s| s <= t_switch + k);
            (k, hit)
        })
        .collect();
    let lo = t_switch.saturating_sub(ks[0]);
    let first_detection = first_from(lo);
    let latency = first_detection.filter(|&s| s >= t_switch).map(|s| s - t_switch + 1);
    Ok(DetectionRecord {
        episode,
        t_switch,
        first_detection,
        hits,
        latency,
        false_alarms: q.iter().filter(|&&s| s < lo).count(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reliability {
    pub r: f64,
    /// Set when some rate is zero and `r` is zero by convention.
    pub degenerate: bool,
}

/// `min_c D_c / max_c D_c`.
pub fn reliability(rates: &[f64]) -> Result<Reliability> {
    if rates.is_empty() {
        return Err(Error::InvalidInput("no rates".into()));
    }
    if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::InvalidInput("rates must be finite and nonnegative".into()));
    }
    if rates.iter().any(|&r| r == 0.0) {
        return Ok(Reliability {
            r: 0.0,
            degenerate: true,
        });
    }
    let lo = rates.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = rates.iter().copied().fold(0.0, f64::max);
    Ok(Reliability {
        r: lo / hi,
        degenerate: false,
    })
}

/// Sample standard deviation over mean.
pub fn cv(values: &[f64]) -> Result<f64> {
    let m = mean(values);
    if values.is_empty() || m == 0.0 || !m.is_finite() {
        return Err(Error::InvalidInput("coefficient of variation undefined for zero mean".into()));
    }
    Ok(sample_std(values) / m.abs())
}

/// Area under the ROC curve (ties count one half).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average ranks over tie groups.
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(Error::InvalidInput("auc needs both classes".into()));
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    Ok((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}
