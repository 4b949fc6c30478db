//! Privileged and null control conditions.

use serde::{Deserialize, Serialize};

use crate::detector::{Detector, DetectorOutput, EpisodeContext, Trigger};
use crate::error::Result;
use crate::sim::{Observation, Transition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ControlKind {
    /// Knows the true switch step only. Before the switch its type estimate is
    /// uniform; from the switch on it reports the new type.
    Oracle,
    /// Knows the true type at every step, and therefore also when it changes.
    ContextConditioned,
    NoDetection,
}

impl ControlKind {
    pub fn label(self) -> &'static str {
        match self {
            ControlKind::Oracle => "Oracle",
            ControlKind::ContextConditioned => "Ctx",
            ControlKind::NoDetection => "NoDetect",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ControlCondition {
    kind: ControlKind,
    ctx: Option<EpisodeContext>,
    t: usize,
}

impl ControlCondition {
    pub fn new(kind: ControlKind) -> Self {
        Self {
            kind,
            ctx: None,
            t: 0,
        }
    }

    pub fn kind(&self) -> ControlKind {
        self.kind
    }

    /// Output at step `t` given the privileged payload.
    pub fn output_at(kind: ControlKind, t: usize, t_switch: usize, tr: Transition) -> DetectorOutput {
        let one_hot = |i: usize| {
            let mut p = [0.0; 4];
            p[i] = 1.0;
            p
        };
        let (type_probs, switch_prob) = match kind {
            ControlKind::NoDetection => ([0.25; 4], 0.0),
            ControlKind::Oracle => {
                if t < t_switch {
                    ([0.25; 4], 0.0)
                } else {
                    (one_hot(tr.to.index()), f64::from(u8::from(t == t_switch)))
                }
            }
            ControlKind::ContextConditioned => (
                one_hot(tr.type_at(t, t_switch).index()),
                f64::from(u8::from(t == t_switch)),
            ),
        };
        DetectorOutput {
            type_probs,
            switch_prob,
            a_hat: [0.0; 2],
            diagnostics: None,
        }
    }
}

impl Detector for ControlCondition {
    fn name(&self) -> &str {
        self.kind.label()
    }

    fn begin_episode(&mut self, ctx: &EpisodeContext) {
        self.ctx = Some(ctx.clone());
        self.t = 0;
    }

    fn observe(&mut self, _obs: &Observation) -> Result<DetectorOutput> {
        let t = self.t;
        self.t += 1;
        Ok(match &self.ctx {
            Some(c) => Self::output_at(self.kind, t, c.t_switch, c.transition),
            None => Self::output_at(ControlKind::NoDetection, t, usize::MAX, Transition::all()[0]),
        })
    }

    fn trigger(&self) -> Trigger {
        Trigger {
            threshold: 0.5,
            debounce: 1,
        }
    }
}
