//! Two-layer gated recurrent baseline with the same output heads as the
//! belief tracker. It sees only the encoded features.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::detector::{Detector, DetectorOutput, Diagnostics, EpisodeContext, Trigger};
use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::linalg::{affine, matvec, sigmoid};
use crate::nn::{self, ActionTracker, HeadIds, HeadOut, HeadVars};
use crate::sim::Observation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GruConfig {
    pub feat_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub switch_bias_init: f64,
    pub dt: f64,
    pub v_max: f64,
}

impl Default for GruConfig {
    fn default() -> Self {
        Self {
            feat_dim: 32,
            hidden: 64,
            layers: 2,
            switch_bias_init: -4.0,
            dt: 0.05,
            v_max: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerIds {
    wr: ParamId,
    ur: ParamId,
    br: ParamId,
    wz: ParamId,
    uz: ParamId,
    bz: ParamId,
    wn: ParamId,
    un: ParamId,
    bn: ParamId,
    bun: ParamId,
}

impl LayerIds {
    fn names(l: usize) -> [String; 10] {
        ["wr", "ur", "br", "wz", "uz", "bz", "wn", "un", "bn", "bun"].map(|n| format!("gru{l}.{n}"))
    }

    fn lookup(ps: &ParamStore, l: usize) -> Result<Self> {
        let n = Self::names(l);
        let g = |i: usize| {
            ps.id(&n[i])
                .ok_or_else(|| Error::InvalidInput(format!("missing tensor {}", n[i])))
        };
        Ok(Self {
            wr: g(0)?,
            ur: g(1)?,
            br: g(2)?,
            wz: g(3)?,
            uz: g(4)?,
            bz: g(5)?,
            wn: g(6)?,
            un: g(7)?,
            bn: g(8)?,
            bun: g(9)?,
        })
    }
}

/// Gate values of one plain layer step, kept for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct GateTrace {
    pub r: Vec<f64>,
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gru {
    pub cfg: GruConfig,
    pub params: ParamStore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruState {
    pub h: Vec<Vec<f64>>,
    /// Previous action prediction, in units of `v_max`.
    pub a_hat_prev: [f64; 2],
}

impl Gru {
    pub fn new(cfg: GruConfig, seed: u64) -> Result<Self> {
        if cfg.layers == 0 || cfg.hidden == 0 || cfg.feat_dim == 0 {
            return Err(Error::InvalidConfig("gru dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let h = cfg.hidden;
        for l in 0..cfg.layers {
            let inp = if l == 0 { cfg.feat_dim } else { h };
            let n = LayerIds::names(l);
            for (gate, k) in [(0, "r"), (3, "z"), (6, "n")] {
                nn::add_weight(&mut ps, &mut rng, &n[gate], h, inp);
                nn::add_weight(&mut ps, &mut rng, &n[gate + 1], h, h);
                nn::add_bias(&mut ps, &n[gate + 2], h, 0.0);
                if k == "n" {
                    nn::add_bias(&mut ps, &n[9], h, 0.0);
                }
            }
        }
        HeadIds::register(&mut ps, &mut rng, h, cfg.switch_bias_init);
        Ok(Self { cfg, params: ps })
    }

    fn layer_ids(&self) -> Vec<LayerIds> {
        (0..self.cfg.layers)
            .map(|l| LayerIds::lookup(&self.params, l).expect("gru parameter layout"))
            .collect()
    }

    fn heads(&self) -> HeadIds {
        HeadIds::lookup(&self.params).expect("gru head layout")
    }

    pub fn check_layout(&mut self) -> Result<()> {
        self.params.reindex();
        let fresh = Gru::new(self.cfg.clone(), 0)?;
        if fresh.params.tensors.len() != self.params.tensors.len() {
            return Err(Error::InvalidInput("gru tensor count mismatch".into()));
        }
        for (a, b) in fresh.params.tensors.iter().zip(&self.params.tensors) {
            if a.name != b.name || a.rows != b.rows || a.cols != b.cols || a.data.len() != b.data.len() {
                return Err(Error::InvalidInput(format!("tensor {} has unexpected shape", b.name)));
            }
        }
        Ok(())
    }

    pub fn initial_state(&self) -> GruState {
        GruState {
            h: vec![vec![0.0; self.cfg.hidden]; self.cfg.layers],
            a_hat_prev: [0.0; 2],
        }
    }

    fn cell(&self, ids: &LayerIds, x: &[f64], h: &[f64]) -> (Vec<f64>, GateTrace) {
        let p = &self.params;
        let n = self.cfg.hidden;
        let lin = |w: ParamId, u: ParamId, b: ParamId| {
            let mut a = affine(p.data(w), p.data(b), x);
            for (ai, ui) in a.iter_mut().zip(matvec(p.data(u), n, n, h)) {
                *ai += ui;
            }
            a
        };
        let r: Vec<f64> = lin(ids.wr, ids.ur, ids.br).into_iter().map(sigmoid).collect();
        let u: Vec<f64> = lin(ids.wz, ids.uz, ids.bz).into_iter().map(sigmoid).collect();
        let xn = affine(p.data(ids.wn), p.data(ids.bn), x);
        let hn = affine(p.data(ids.un), p.data(ids.bun), h);
        let h_new = (0..n)
            .map(|i| {
                let cand = (xn[i] + r[i] * hn[i]).tanh();
                (1.0 - u[i]) * cand + u[i] * h[i]
            })
            .collect();
        (h_new, GateTrace { r, u })
    }

    /// Plain forward step; returns head outputs and per-layer gates.
    pub fn step(&self, s: &mut GruState, z: &[f64]) -> Result<(HeadOut, Vec<GateTrace>)> {
        if z.len() != self.cfg.feat_dim {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.feat_dim,
                got: z.len(),
            });
        }
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("feature input"));
        }
        let mut x = z.to_vec();
        let mut gates = Vec::with_capacity(self.cfg.layers);
        for (l, ids) in self.layer_ids().iter().enumerate() {
            let (h, g) = self.cell(ids, &x, &s.h[l]);
            s.h[l] = h.clone();
            x = h;
            gates.push(g);
        }
        let out = self.heads().forward(&self.params, &x);
        s.a_hat_prev = [out.act[0], out.act[1]];
        Ok((out, gates))
    }

    pub fn forward_tape(&self, tape: &mut Tape, zs: &[Vec<f64>]) -> Vec<HeadVars> {
        self.forward_tape_from(tape, &self.initial_state(), zs)
    }

    /// Continue from `init`; the carried state is a constant of the graph.
    pub fn forward_tape_from(&self, tape: &mut Tape, init: &GruState, zs: &[Vec<f64>]) -> Vec<HeadVars> {
        struct Bound {
            ids: LayerIds,
            br: Var,
            bz: Var,
            bn: Var,
            bun: Var,
        }
        let layers: Vec<Bound> = self
            .layer_ids()
            .into_iter()
            .map(|ids| Bound {
                ids,
                br: tape.param(ids.br),
                bz: tape.param(ids.bz),
                bn: tape.param(ids.bn),
                bun: tape.param(ids.bun),
            })
            .collect();
        let heads = self.heads().bind(tape);
        let mut hs: Vec<Var> = init.h.iter().map(|h| tape.leaf(h.clone())).collect();
        let mut out = Vec::with_capacity(zs.len());
        for z in zs {
            let mut x = tape.leaf(z.clone());
            for (l, b) in layers.iter().enumerate() {
                let h = hs[l];
                let gate = |tape: &mut Tape, w: ParamId, u: ParamId, bias: Var| {
                    let a = tape.affine(w, bias, x);
                    let c = tape.matvec(u, h);
                    let s = tape.add(a, c);
                    tape.sigmoid(s)
                };
                let r = gate(tape, b.ids.wr, b.ids.ur, b.br);
                let u = gate(tape, b.ids.wz, b.ids.uz, b.bz);
                let xn = tape.affine(b.ids.wn, b.bn, x);
                let hn = tape.affine(b.ids.un, b.bun, h);
                let rh = tape.mul(r, hn);
                let pre = tape.add(xn, rh);
                let cand = tape.tanh(pre);
                let omu = tape.one_minus(u);
                let a = tape.mul(omu, cand);
                let keep = tape.mul(u, h);
                let h_new = tape.add(a, keep);
                hs[l] = h_new;
                x = h_new;
            }
            out.push(heads.forward(tape, x));
        }
        out
    }
}

/// Streaming detector around a trained [`Gru`]. Its diagnostics carry the
/// single-step prediction error, which feeds the changepoint baseline.
#[derive(Debug, Clone)]
pub struct GruDetector {
    model: Arc<Gru>,
    fm: Arc<FeatureMap>,
    state: GruState,
    actions: ActionTracker,
    trigger: Trigger,
}

impl GruDetector {
    pub fn new(model: Arc<Gru>, fm: Arc<FeatureMap>, trigger: Trigger) -> Self {
        let state = model.initial_state();
        Self {
            model,
            fm,
            state,
            actions: ActionTracker::default(),
            trigger,
        }
    }

    pub fn state(&self) -> &GruState {
        &self.state
    }
}

impl Detector for GruDetector {
    fn name(&self) -> &str {
        "gru"
    }

    fn begin_episode(&mut self, _ctx: &EpisodeContext) {
        self.state = self.model.initial_state();
        self.actions.reset();
    }

    fn observe(&mut self, obs: &Observation) -> Result<DetectorOutput> {
        let vm = self.model.cfg.v_max;
        let z = self.fm.encode(obs)?;
        let a_obs = self.actions.next(obs, self.model.cfg.dt);
        let prev = self.state.a_hat_prev;
        let e = nn::prediction_error(&[prev[0] * vm, prev[1] * vm], &a_obs)?;
        let (out, _) = self.model.step(&mut self.state, &z)?;
        Ok(DetectorOutput {
            type_probs: out.type_probs(),
            switch_prob: out.switch_prob(),
            a_hat: [out.act[0] * vm, out.act[1] * vm],
            diagnostics: Some(Diagnostics {
                delta_mean: 0.0,
                update_norm: 0.0,
                pred_error: e,
            }),
        })
    }

    fn trigger(&self) -> Trigger {
        self.trigger
    }
}
