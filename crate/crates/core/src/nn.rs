//! Pieces shared by the learned detectors: initialization, output heads and
//! the observed co-agent action stream.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::linalg::{affine, sigmoid, softmax};
use crate::sim::{idx, Observation};

pub const N_TYPES: usize = 4;
pub const ACT_DIM: usize = 2;
/// Running-mean windows of the auxiliary error targets.
pub const AUX_SCALES: [usize; 3] = [1, 5, 20];

pub fn gaussian(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let g: f64 = StandardNormal.sample(rng);
            g * std
        })
        .collect()
}

/// `rows x cols` weight with `N(0, 1/cols)` entries.
pub fn add_weight(ps: &mut ParamStore, rng: &mut impl Rng, name: &str, rows: usize, cols: usize) -> ParamId {
    let w = gaussian(rng, rows * cols, 1.0 / (cols as f64).sqrt());
    ps.add(name, rows, cols, w)
}

pub fn add_bias(ps: &mut ParamStore, name: &str, n: usize, value: f64) -> ParamId {
    ps.add(name, n, 1, vec![value; n])
}

/// Realized partner velocity from consecutive observed positions; zero at
/// the first step.
pub fn observed_actions(obs: &[Observation], dt: f64) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(obs.len());
    for t in 0..obs.len() {
        if t == 0 {
            out.push([0.0, 0.0]);
        } else {
            let (p, q) = (&obs[t].0, &obs[t - 1].0);
            out.push([
                (p[idx::PARTNER_POS] - q[idx::PARTNER_POS]) / dt,
                (p[idx::PARTNER_POS + 1] - q[idx::PARTNER_POS + 1]) / dt,
            ]);
        }
    }
    out
}

/// Streaming version of [`observed_actions`].
#[derive(Debug, Clone, Default)]
pub struct ActionTracker {
    prev: Option<[f64; 2]>,
}

impl ActionTracker {
    pub fn reset(&mut self) {
        self.prev = None;
    }

    pub fn next(&mut self, obs: &Observation, dt: f64) -> [f64; 2] {
        let p = [obs.0[idx::PARTNER_POS], obs.0[idx::PARTNER_POS + 1]];
        let a = match self.prev {
            None => [0.0, 0.0],
            Some(q) => [(p[0] - q[0]) / dt, (p[1] - q[1]) / dt],
        };
        self.prev = Some(p);
        a
    }
}

/// `||a_hat - a||`.
pub fn prediction_error(a_hat: &[f64], a: &[f64]) -> crate::Result<f64> {
    if a_hat.len() != a.len() {
        return Err(crate::Error::DimensionMismatch {
            expected: a_hat.len(),
            got: a.len(),
        });
    }
    Ok(a_hat
        .iter()
        .zip(a)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadIds {
    pub ty_w: ParamId,
    pub ty_b: ParamId,
    pub sw_w: ParamId,
    pub sw_b: ParamId,
    pub act_w: ParamId,
    pub act_b: ParamId,
    pub aux_w: ParamId,
    pub aux_b: ParamId,
}

/// Raw head outputs. Actions are in units of `v_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOut {
    pub type_logits: Vec<f64>,
    pub switch_logit: f64,
    pub act: Vec<f64>,
    pub aux: Vec<f64>,
}

impl HeadOut {
    pub fn type_probs(&self) -> [f64; 4] {
        let p = softmax(&self.type_logits);
        [p[0], p[1], p[2], p[3]]
    }

    pub fn switch_prob(&self) -> f64 {
        sigmoid(self.switch_logit)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub type_logits: Var,
    pub switch_logit: Var,
    pub act: Var,
    pub aux: Var,
}

/// Bias nodes bound once per tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundHeads {
    ids: HeadIds,
    ty_b: Var,
    sw_b: Var,
    act_b: Var,
    aux_b: Var,
}

impl HeadIds {
    pub fn register(ps: &mut ParamStore, rng: &mut impl Rng, hidden: usize, switch_bias: f64) -> Self {
        Self {
            ty_w: add_weight(ps, rng, "head.type.w", N_TYPES, hidden),
            ty_b: add_bias(ps, "head.type.b", N_TYPES, 0.0),
            sw_w: add_weight(ps, rng, "head.switch.w", 1, hidden),
            sw_b: add_bias(ps, "head.switch.b", 1, switch_bias),
            act_w: add_weight(ps, rng, "head.action.w", ACT_DIM, hidden),
            act_b: add_bias(ps, "head.action.b", ACT_DIM, 0.0),
            aux_w: add_weight(ps, rng, "head.aux.w", AUX_SCALES.len(), hidden),
            aux_b: add_bias(ps, "head.aux.b", AUX_SCALES.len(), 0.0),
        }
    }

    pub fn lookup(ps: &ParamStore) -> Option<Self> {
        Some(Self {
            ty_w: ps.id("head.type.w")?,
            ty_b: ps.id("head.type.b")?,
            sw_w: ps.id("head.switch.w")?,
            sw_b: ps.id("head.switch.b")?,
            act_w: ps.id("head.action.w")?,
            act_b: ps.id("head.action.b")?,
            aux_w: ps.id("head.aux.w")?,
            aux_b: ps.id("head.aux.b")?,
        })
    }

    pub fn forward(&self, ps: &ParamStore, h: &[f64]) -> HeadOut {
        HeadOut {
            type_logits: affine(ps.data(self.ty_w), ps.data(self.ty_b), h),
            switch_logit: affine(ps.data(self.sw_w), ps.data(self.sw_b), h)[0],
            act: affine(ps.data(self.act_w), ps.data(self.act_b), h),
            aux: affine(ps.data(self.aux_w), ps.data(self.aux_b), h),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundHeads {
        BoundHeads {
            ids: *self,
            ty_b: tape.param(self.ty_b),
            sw_b: tape.param(self.sw_b),
            act_b: tape.param(self.act_b),
            aux_b: tape.param(self.aux_b),
        }
    }
}

impl BoundHeads {
    pub fn forward(&self, tape: &mut Tape, h: Var) -> HeadVars {
        HeadVars {
            type_logits: tape.affine(self.ids.ty_w, self.ty_b, h),
            switch_logit: tape.affine(self.ids.sw_w, self.sw_b, h),
            act: tape.affine(self.ids.act_w, self.act_b, h),
            aux: tape.affine(self.ids.aux_w, self.aux_b, h),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn prediction_error_examples() {
        assert_eq!(prediction_error(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(prediction_error(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert!(prediction_error(&[0.0], &[3.0, 4.0]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let a = gaussian(&mut rng, 2, 1.0);
            let b = gaussian(&mut rng, 2, 1.0);
            let direct = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            assert!((prediction_error(&a, &b).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_logits_give_uniform_types_and_half_switch() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ids = HeadIds::register(&mut ps, &mut rng, 8, 0.0);
        for t in ps.tensors.iter_mut() {
            t.data.iter_mut().for_each(|x| *x = 0.0);
        }
        let out = ids.forward(&ps, &[0.3; 8]);
        assert_eq!(out.type_probs(), [0.25; 4]);
        assert_eq!(out.switch_prob(), 0.5);
    }

    #[test]
    fn type_probs_normalized() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ids = HeadIds::register(&mut ps, &mut rng, 16, -2.0);
        for _ in 0..1000 {
            let h = gaussian(&mut rng, 16, 3.0);
            let s: f64 = ids.forward(&ps, &h).type_probs().iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn streaming_actions_match_batch() {
        let cfg = crate::sim::WorkspaceConfig::default();
        let log = crate::sim::run_episode(crate::sim::Transition::all()[1], 2, &cfg, None).unwrap();
        let batch = observed_actions(&log.observations, cfg.dt);
        let mut tr = ActionTracker::default();
        for (o, a) in log.observations.iter().zip(&batch) {
            assert_eq!(tr.next(o, cfg.dt), *a);
        }
    }
}
