//! The per-step detector contract shared by the belief tracker, the baselines
//! and the control conditions.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::sim::{Observation, PartnerType, Transition};

/// Internal quantities of the belief tracker, exposed for dynamics probes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Mean of the discretization step over state coordinates.
    pub delta_mean: f64,
    /// `||b_t - b_{t-1}||`.
    pub update_norm: f64,
    /// Single-step action prediction error.
    pub pred_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorOutput {
    pub type_probs: [f64; 4],
    pub switch_prob: f64,
    /// Predicted next co-agent velocity command.
    pub a_hat: [f64; 2],
    pub diagnostics: Option<Diagnostics>,
}

impl DetectorOutput {
    pub fn inferred_type(&self) -> PartnerType {
        PartnerType::from_index(crate::linalg::argmax(&self.type_probs))
    }

    pub fn is_valid(&self) -> bool {
        let s: f64 = self.type_probs.iter().sum();
        self.switch_prob.is_finite()
            && (0.0..=1.0).contains(&self.switch_prob)
            && (s - 1.0).abs() < 1e-6
            && self.type_probs.iter().all(|p| p.is_finite() && *p >= 0.0)
    }
}

/// Hard-detection rule: `switch_prob > threshold` held for `debounce`
/// consecutive steps. The qualifying step is the step completing the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trigger {
    pub threshold: f64,
    pub debounce: usize,
}

impl Default for Trigger {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            debounce: 2,
        }
    }
}

impl Trigger {
    /// Steps at which a run of above-threshold probabilities reaches the
    /// debounce length. One entry per run.
    pub fn qualifying_steps(&self, probs: &[f64]) -> Vec<usize> {
        let debounce = self.debounce.max(1);
        let mut out = Vec::new();
        let mut run = 0usize;
        for (t, &p) in probs.iter().enumerate() {
            if p > self.threshold {
                run += 1;
                if run == debounce {
                    out.push(t);
                }
            } else {
                run = 0;
            }
        }
        out
    }
}

/// Privileged episode facts. Learned detectors ignore this; control
/// conditions read from it.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeContext {
    pub t_switch: usize,
    pub transition: Transition,
    pub episode_len: usize,
}

pub trait Detector {
    fn name(&self) -> &str;

    /// Reset per-episode state.
    fn begin_episode(&mut self, ctx: &EpisodeContext);

    /// Consume the next observation and emit the per-step estimate.
    fn observe(&mut self, obs: &Observation) -> Result<DetectorOutput>;

    fn trigger(&self) -> Trigger {
        Trigger::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qualifying_steps_debounce() {
        let trig = Trigger::default();
        let probs = [0.1, 0.6, 0.2, 0.7, 0.8, 0.9, 0.1, 0.6, 0.6];
        assert_eq!(trig.qualifying_steps(&probs), vec![4, 8]);
        let single = Trigger {
            threshold: 0.5,
            debounce: 1,
        };
        assert_eq!(single.qualifying_steps(&probs), vec![1, 3, 7]);
    }

    #[test]
    fn threshold_is_strict() {
        let trig = Trigger {
            threshold: 0.5,
            debounce: 1,
        };
        assert!(trig.qualifying_steps(&[0.5, 0.5]).is_empty());
    }
}
