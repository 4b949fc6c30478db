//! Belief-state dynamics around the switch: how sharply the state update
//! norm spikes and how quickly it settles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{mean, sample_std};

/// Baseline window `[t_s - BASE_FAR, t_s - BASE_NEAR]`.
pub const BASE_FAR: usize = 20;
pub const BASE_NEAR: usize = 5;
/// Spike window `[t_s, t_s + SPIKE_WIDTH - 1]`.
pub const SPIKE_WIDTH: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsProbe {
    /// Mean update norm over the spike window over the baseline mean.
    pub spike_ratio: f64,
    /// Largest update norm in the spike window over the norm just before
    /// the switch.
    pub pointwise_ratio: f64,
    /// Steps from the switch until the update norm is below twice the
    /// baseline; `None` if that never happens.
    pub decay_steps: Option<usize>,
    /// `std / mean` of the per-step discretization step.
    pub delta_cv: f64,
    pub baseline: f64,
}

pub fn dynamics_probe(update_norm: &[f64], delta: &[f64], t_switch: usize) -> Result<DynamicsProbe> {
    let n = update_norm.len();
    if delta.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: delta.len() });
    }
    if t_switch < BASE_FAR || t_switch + SPIKE_WIDTH > n {
        return Err(Error::InvalidInput(format!(
            "switch at {t_switch} leaves no room for the probe windows in {n} steps"
        )));
    }
    let baseline = mean(&update_norm[t_switch - BASE_FAR..=t_switch - BASE_NEAR]);
    let window = &update_norm[t_switch..t_switch + SPIKE_WIDTH];
    let peak = window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ratio = |x: f64, base: f64| if base > 0.0 { x / base } else { f64::INFINITY };
    let decay_steps = update_norm[t_switch..].iter().position(|&u| u < 2.0 * baseline);
    let dm = mean(delta);
    Ok(DynamicsProbe {
        spike_ratio: ratio(mean(window), baseline),
        pointwise_ratio: ratio(peak, update_norm[t_switch - 1]),
        decay_steps,
        delta_cv: if dm > 0.0 { sample_std(delta) / dm } else { f64::INFINITY },
        baseline,
    })
}
