//! Belief-tracking switch detector.
//!
//! Per step: encode the observation, advance a diagonal selective state-space
//! belief `b`, re-anchor it with causal attention over the last few features,
//! add the single-step action prediction error and cosine cues against
//! per-type prototypes, fuse everything into a gated hidden state `h`, and
//! read type, switch, action and auxiliary heads off `h`.
//!
//! Two forward paths exist: a plain one for inference and a tape one for
//! training. `tests::paths_agree` keeps them in lockstep.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine, ParamId, ParamStore, Tape, Var};
use crate::detector::{Detector, DetectorOutput, Diagnostics, EpisodeContext, Trigger};
use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::linalg::{affine, matvec, sigmoid, softmax, softplus};
use crate::nn::{self, ActionTracker, BoundHeads, HeadIds, HeadOut, HeadVars, N_TYPES};
use crate::sim::Observation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UatomConfig {
    pub feat_dim: usize,
    pub state_dim: usize,
    pub key_dim: usize,
    pub window: usize,
    pub mlp_hidden: usize,
    pub hidden: usize,
    pub proto_alpha: f64,
    /// Range of initial per-coordinate decay rates `Delta * |A|`.
    pub rate_lo: f64,
    pub rate_hi: f64,
    pub w_delta_init_std: f64,
    pub switch_bias_init: f64,
    /// Confidence-gated prototype updates at inference time.
    pub proto_online: bool,
    pub dt: f64,
    pub v_max: f64,
}

impl Default for UatomConfig {
    fn default() -> Self {
        Self {
            feat_dim: 32,
            state_dim: 48,
            key_dim: 16,
            window: 16,
            mlp_hidden: 64,
            hidden: 64,
            proto_alpha: 0.99,
            rate_lo: 0.1,
            rate_hi: 4.0,
            w_delta_init_std: 0.01,
            switch_bias_init: -4.0,
            proto_online: false,
            dt: 0.05,
            v_max: 0.3,
        }
    }
}

impl UatomConfig {
    /// Width of the fused input `[b; c; e; sim]`.
    pub fn fuse_in(&self) -> usize {
        self.state_dim + self.feat_dim + 1 + N_TYPES
    }

    pub fn validate(&self) -> Result<()> {
        if self.feat_dim == 0 || self.state_dim == 0 || self.key_dim == 0 || self.window == 0 {
            return Err(Error::InvalidConfig("uatom dimensions must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.proto_alpha) {
            return Err(Error::InvalidConfig("proto_alpha must lie in [0, 1]".into()));
        }
        if !(self.rate_lo > 0.0 && self.rate_lo < self.rate_hi) {
            return Err(Error::InvalidConfig("need 0 < rate_lo < rate_hi".into()));
        }
        Ok(())
    }
}

/// Borrowed SSM parameters.
#[derive(Debug, Clone, Copy)]
pub struct SsmView<'a> {
    pub a_raw: &'a [f64],
    /// `state_dim x feat_dim`.
    pub b: &'a [f64],
    /// `state_dim x feat_dim`.
    pub w_delta: &'a [f64],
    pub d: &'a [f64],
}

impl SsmView<'_> {
    pub fn state_dim(&self) -> usize {
        self.a_raw.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsmOut {
    pub b: Vec<f64>,
    pub delta: Vec<f64>,
    pub update_norm: f64,
}

/// `Delta = softplus(W_d z + d)`, `b = exp(Delta * A) * b_prev + Delta * (B z)`,
/// with `A = -exp(A_raw)`.
pub fn ssm_step(b_prev: &[f64], z: &[f64], p: &SsmView) -> Result<SsmOut> {
    let n = p.state_dim();
    let pre = affine(p.w_delta, p.d, z);
    let delta: Vec<f64> = pre.iter().map(|&x| softplus(x)).collect();
    if delta.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("ssm step size"));
    }
    let bz = matvec(p.b, n, z.len(), z);
    let mut b = vec![0.0; n];
    let mut upd = 0.0;
    for i in 0..n {
        let abar = (-delta[i] * p.a_raw[i].exp()).exp();
        b[i] = abar * b_prev[i] + delta[i] * bz[i];
        upd += (b[i] - b_prev[i]).powi(2);
    }
    Ok(SsmOut {
        b,
        delta,
        update_norm: upd.sqrt(),
    })
}

/// Scaled dot-product attention of `q` over buffered `(key, value)` pairs.
/// Returns the context and the weights; an empty buffer yields zeros.
pub fn attend(q: &[f64], buf: &VecDeque<(Vec<f64>, Vec<f64>)>, value_dim: usize) -> (Vec<f64>, Vec<f64>) {
    if buf.is_empty() {
        return (vec![0.0; value_dim], Vec::new());
    }
    let scale = 1.0 / (q.len() as f64).sqrt();
    let scores: Vec<f64> = buf
        .iter()
        .map(|(k, _)| crate::linalg::dot(q, k) * scale)
        .collect();
    let w = softmax(&scores);
    let mut c = vec![0.0; value_dim];
    for (wi, (_, v)) in w.iter().zip(buf) {
        for (cj, vj) in c.iter_mut().zip(v) {
            *cj += wi * vj;
        }
    }
    (c, w)
}

/// Per-type EMA of belief states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub m: Vec<Vec<f64>>,
    pub initialized: Vec<bool>,
    pub alpha: f64,
}

impl PrototypeBank {
    pub fn new(dim: usize, alpha: f64) -> Self {
        Self {
            m: vec![vec![0.0; dim]; N_TYPES],
            initialized: vec![false; N_TYPES],
            alpha,
        }
    }

    /// Cosine similarity of `b` with each prototype (zero if either is zero).
    pub fn similarity(&self, b: &[f64]) -> [f64; 4] {
        let mut s = [0.0; 4];
        for (k, m) in self.m.iter().enumerate() {
            s[k] = cosine(b, m);
        }
        s
    }

    /// `m <- alpha m + (1 - alpha) b`; the first update copies `b`.
    pub fn update(&mut self, b: &[f64], ty: usize) {
        if !self.initialized[ty] {
            self.m[ty] = b.to_vec();
            self.initialized[ty] = true;
            return;
        }
        let a = self.alpha;
        for (mi, bi) in self.m[ty].iter_mut().zip(b) {
            *mi = a * *mi + (1.0 - a) * bi;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FuseView<'a> {
    pub w1: &'a [f64],
    pub b1: &'a [f64],
    pub w2: &'a [f64],
    pub b2: &'a [f64],
    pub wg: &'a [f64],
    pub bg: &'a [f64],
}

/// Gated fusion: `h = g * tanh(W2 tanh(W1 u + b1) + b2) + (1 - g) * h_prev`,
/// `g = sigmoid(Wg u + bg)`. Returns `(h, g, h_tilde)`.
pub fn fuse(u: &[f64], h_prev: &[f64], p: &FuseView) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hid: Vec<f64> = affine(p.w1, p.b1, u).into_iter().map(f64::tanh).collect();
    let ht: Vec<f64> = affine(p.w2, p.b2, &hid).into_iter().map(f64::tanh).collect();
    let g: Vec<f64> = affine(p.wg, p.bg, u).into_iter().map(sigmoid).collect();
    let h = g
        .iter()
        .zip(&ht)
        .zip(h_prev)
        .map(|((gi, hti), hpi)| gi * hti + (1.0 - gi) * hpi)
        .collect();
    (h, g, ht)
}

#[derive(Debug, Clone, Copy)]
struct Ids {
    a_raw: ParamId,
    b: ParamId,
    w_delta: ParamId,
    d: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    wg: ParamId,
    bg: ParamId,
    heads: HeadIds,
}

impl Ids {
    fn lookup(ps: &ParamStore) -> Result<Self> {
        let g = |n: &str| {
            ps.id(n)
                .ok_or_else(|| Error::InvalidInput(format!("missing tensor {n}")))
        };
        Ok(Self {
            a_raw: g("ssm.a_raw")?,
            b: g("ssm.b")?,
            w_delta: g("ssm.w_delta")?,
            d: g("ssm.d")?,
            wq: g("attn.wq")?,
            wk: g("attn.wk")?,
            wv: g("attn.wv")?,
            w1: g("fuse.w1")?,
            b1: g("fuse.b1")?,
            w2: g("fuse.w2")?,
            b2: g("fuse.b2")?,
            wg: g("fuse.wg")?,
            bg: g("fuse.bg")?,
            heads: HeadIds::lookup(ps)
                .ok_or_else(|| Error::InvalidInput("missing head tensors".into()))?,
        })
    }
}

/// Per-episode recurrent state.
#[derive(Debug, Clone)]
pub struct BeliefState {
    pub b: Vec<f64>,
    pub h: Vec<f64>,
    /// Projected `(key, value)` of past features, oldest first.
    pub window_buf: VecDeque<(Vec<f64>, Vec<f64>)>,
    /// Previous action prediction, in units of `v_max`.
    pub a_hat_prev: [f64; 2],
    pub t: usize,
    actions: ActionTracker,
}

/// Everything one plain step produces.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub heads: HeadOut,
    pub delta: Vec<f64>,
    pub update_norm: f64,
    /// Prediction error in units of `v_max`.
    pub e: f64,
    pub gate: Vec<f64>,
    pub attn_weights: Vec<f64>,
}

/// Tape nodes of one training step.
#[derive(Debug, Clone, Copy)]
pub struct TapeStep {
    pub heads: HeadVars,
    pub b: Var,
    pub delta: Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Uatom {
    pub cfg: UatomConfig,
    pub params: ParamStore,
    pub protos: PrototypeBank,
}

impl Uatom {
    pub fn new(cfg: UatomConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let (n, f) = (cfg.state_dim, cfg.feat_dim);

        // Log-spaced decay rates at the initial step size softplus(0) = ln 2.
        let d0 = std::f64::consts::LN_2;
        let a_raw: Vec<f64> = (0..n)
            .map(|i| {
                let frac = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
                let rate = cfg.rate_lo * (cfg.rate_hi / cfg.rate_lo).powf(frac);
                (rate / d0).ln()
            })
            .collect();
        ps.add("ssm.a_raw", n, 1, a_raw);
        nn::add_weight(&mut ps, &mut rng, "ssm.b", n, f);
        ps.add("ssm.w_delta", n, f, nn::gaussian(&mut rng, n * f, cfg.w_delta_init_std));
        nn::add_bias(&mut ps, "ssm.d", n, 0.0);
        nn::add_weight(&mut ps, &mut rng, "attn.wq", cfg.key_dim, n);
        nn::add_weight(&mut ps, &mut rng, "attn.wk", cfg.key_dim, f);
        nn::add_weight(&mut ps, &mut rng, "attn.wv", f, f);
        let fin = cfg.fuse_in();
        nn::add_weight(&mut ps, &mut rng, "fuse.w1", cfg.mlp_hidden, fin);
        nn::add_bias(&mut ps, "fuse.b1", cfg.mlp_hidden, 0.0);
        nn::add_weight(&mut ps, &mut rng, "fuse.w2", cfg.hidden, cfg.mlp_hidden);
        nn::add_bias(&mut ps, "fuse.b2", cfg.hidden, 0.0);
        nn::add_weight(&mut ps, &mut rng, "fuse.wg", cfg.hidden, fin);
        nn::add_bias(&mut ps, "fuse.bg", cfg.hidden, 0.0);
        HeadIds::register(&mut ps, &mut rng, cfg.hidden, cfg.switch_bias_init);

        let protos = PrototypeBank::new(n, cfg.proto_alpha);
        Ok(Self {
            cfg,
            params: ps,
            protos,
        })
    }

    fn ids(&self) -> Ids {
        Ids::lookup(&self.params).expect("uatom parameter layout")
    }

    /// Check tensor names and shapes after loading.
    pub fn check_layout(&mut self) -> Result<()> {
        self.params.reindex();
        let fresh = Uatom::new(self.cfg.clone(), 0)?;
        if fresh.params.tensors.len() != self.params.tensors.len() {
            return Err(Error::InvalidInput("uatom tensor count mismatch".into()));
        }
        for (a, b) in fresh.params.tensors.iter().zip(&self.params.tensors) {
            if a.name != b.name || a.rows != b.rows || a.cols != b.cols || b.data.len() != a.data.len() {
                return Err(Error::InvalidInput(format!("tensor {} has unexpected shape", b.name)));
            }
        }
        Ids::lookup(&self.params).map(|_| ())
    }

    pub fn ssm_view(&self) -> SsmView<'_> {
        let ids = self.ids();
        SsmView {
            a_raw: self.params.data(ids.a_raw),
            b: self.params.data(ids.b),
            w_delta: self.params.data(ids.w_delta),
            d: self.params.data(ids.d),
        }
    }

    pub fn fuse_view(&self) -> FuseView<'_> {
        let ids = self.ids();
        let p = &self.params;
        FuseView {
            w1: p.data(ids.w1),
            b1: p.data(ids.b1),
            w2: p.data(ids.w2),
            b2: p.data(ids.b2),
            wg: p.data(ids.wg),
            bg: p.data(ids.bg),
        }
    }

    pub fn initial_state(&self) -> BeliefState {
        BeliefState {
            b: vec![0.0; self.cfg.state_dim],
            h: vec![0.0; self.cfg.hidden],
            window_buf: VecDeque::with_capacity(self.cfg.window + 1),
            a_hat_prev: [0.0; 2],
            t: 0,
            actions: ActionTracker::default(),
        }
    }

    /// Plain forward step. `a_obs` is the realized co-agent action in m/s.
    pub fn step(&self, s: &mut BeliefState, z: &[f64], a_obs: [f64; 2]) -> Result<StepTrace> {
        self.step_with(s, z, a_obs, &self.protos)
    }

    /// As [`Uatom::step`] but against an explicit prototype bank.
    pub fn step_with(
        &self,
        s: &mut BeliefState,
        z: &[f64],
        a_obs: [f64; 2],
        protos: &PrototypeBank,
    ) -> Result<StepTrace> {
        if z.len() != self.cfg.feat_dim {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.feat_dim,
                got: z.len(),
            });
        }
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("feature input"));
        }
        let ids = self.ids();
        let p = &self.params;
        let ssm = ssm_step(&s.b, z, &self.ssm_view())?;

        let q = matvec(p.data(ids.wq), self.cfg.key_dim, self.cfg.state_dim, &ssm.b);
        let (c, attn_weights) = attend(&q, &s.window_buf, self.cfg.feat_dim);

        let vm = self.cfg.v_max;
        let e = nn::prediction_error(&s.a_hat_prev, &[a_obs[0] / vm, a_obs[1] / vm])?;
        let sim = protos.similarity(&ssm.b);

        let mut u = Vec::with_capacity(self.cfg.fuse_in());
        u.extend_from_slice(&ssm.b);
        u.extend_from_slice(&c);
        u.push(e);
        u.extend_from_slice(&sim);
        let (h, gate, _) = fuse(&u, &s.h, &self.fuse_view());
        let heads = ids.heads.forward(p, &h);

        let k = matvec(p.data(ids.wk), self.cfg.key_dim, self.cfg.feat_dim, z);
        let v = matvec(p.data(ids.wv), self.cfg.feat_dim, self.cfg.feat_dim, z);
        s.window_buf.push_back((k, v));
        if s.window_buf.len() > self.cfg.window {
            s.window_buf.pop_front();
        }
        s.b = ssm.b;
        s.h = h;
        s.a_hat_prev = [heads.act[0], heads.act[1]];
        s.t += 1;
        if s.h.iter().chain(&s.b).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("belief state"));
        }
        Ok(StepTrace {
            heads,
            delta: ssm.delta,
            update_norm: ssm.update_norm,
            e,
            gate,
            attn_weights,
        })
    }

    /// Training forward over one episode. `a_obs` in m/s, aligned with `zs`.
    pub fn forward_tape(&self, tape: &mut Tape, zs: &[Vec<f64>], a_obs: &[[f64; 2]]) -> Vec<TapeStep> {
        self.forward_tape_from(tape, &self.initial_state(), zs, a_obs)
    }

    /// As [`Uatom::forward_tape`] but continuing from `init`, which enters
    /// the graph as constants (truncated backpropagation).
    pub fn forward_tape_from(
        &self,
        tape: &mut Tape,
        init: &BeliefState,
        zs: &[Vec<f64>],
        a_obs: &[[f64; 2]],
    ) -> Vec<TapeStep> {
        let ids = self.ids();
        let cfg = &self.cfg;
        let vm = cfg.v_max;

        let a_raw = tape.param(ids.a_raw);
        let a_pos = tape.exp(a_raw);
        let a = tape.neg(a_pos);
        let d = tape.param(ids.d);
        let b1 = tape.param(ids.b1);
        let b2 = tape.param(ids.b2);
        let bg = tape.param(ids.bg);
        let heads: BoundHeads = ids.heads.bind(tape);
        let proto_rows = self.protos.m.clone();
        let inv_sqrt_k = 1.0 / (cfg.key_dim as f64).sqrt();

        let mut b_prev = tape.leaf(init.b.clone());
        let mut h_prev = tape.leaf(init.h.clone());
        let mut a_hat_prev = tape.leaf(init.a_hat_prev.to_vec());
        let zero_c = tape.leaf(vec![0.0; cfg.feat_dim]);
        let mut keys: VecDeque<Var> = VecDeque::new();
        let mut values: VecDeque<Var> = VecDeque::new();
        for (k, v) in &init.window_buf {
            keys.push_back(tape.leaf(k.clone()));
            values.push_back(tape.leaf(v.clone()));
        }
        let mut out = Vec::with_capacity(zs.len());

        for (z, ao) in zs.iter().zip(a_obs) {
            let z = tape.leaf(z.clone());
            let pre = tape.affine(ids.w_delta, d, z);
            let delta = tape.softplus(pre);
            let da = tape.mul(delta, a);
            let abar = tape.exp(da);
            let bz = tape.matvec(ids.b, z);
            let bbar_z = tape.mul(delta, bz);
            let carry = tape.mul(abar, b_prev);
            let b = tape.add(carry, bbar_z);

            let c = if keys.is_empty() {
                zero_c
            } else {
                let q = tape.matvec(ids.wq, b);
                let sc = tape.dot_each(q, keys.iter().copied().collect());
                let sc = tape.scale(sc, inv_sqrt_k);
                let w = tape.softmax(sc);
                tape.weighted_sum(w, values.iter().copied().collect())
            };

            let obs_n = tape.leaf(vec![ao[0] / vm, ao[1] / vm]);
            let diff = tape.sub(a_hat_prev, obs_n);
            let e = tape.norm(diff);
            let sim = tape.cosine_const(b, proto_rows.clone());
            let u = tape.concat(vec![b, c, e, sim]);

            let pre1 = tape.affine(ids.w1, b1, u);
            let hid = tape.tanh(pre1);
            let pre2 = tape.affine(ids.w2, b2, hid);
            let ht = tape.tanh(pre2);
            let preg = tape.affine(ids.wg, bg, u);
            let g = tape.sigmoid(preg);
            let gh = tape.mul(g, ht);
            let omg = tape.one_minus(g);
            let keep = tape.mul(omg, h_prev);
            let h = tape.add(gh, keep);
            let hv = heads.forward(tape, h);

            keys.push_back(tape.matvec(ids.wk, z));
            values.push_back(tape.matvec(ids.wv, z));
            if keys.len() > cfg.window {
                keys.pop_front();
                values.pop_front();
            }
            out.push(TapeStep {
                heads: hv,
                b,
                delta,
            });
            b_prev = b;
            h_prev = h;
            a_hat_prev = hv.act;
        }
        out
    }
}

/// Streaming detector wrapper around a trained [`Uatom`].
#[derive(Debug, Clone)]
pub struct UatomDetector {
    model: Arc<Uatom>,
    fm: Arc<FeatureMap>,
    state: BeliefState,
    trigger: Trigger,
    /// Local copy when online prototype updates are enabled.
    protos: Option<PrototypeBank>,
}

impl UatomDetector {
    pub fn new(model: Arc<Uatom>, fm: Arc<FeatureMap>, trigger: Trigger) -> Self {
        let state = model.initial_state();
        Self {
            model,
            fm,
            state,
            trigger,
            protos: None,
        }
    }

    pub fn state(&self) -> &BeliefState {
        &self.state
    }
}

impl Detector for UatomDetector {
    fn name(&self) -> &str {
        "uatom"
    }

    fn begin_episode(&mut self, _ctx: &EpisodeContext) {
        self.state = self.model.initial_state();
        self.protos = None;
    }

    fn observe(&mut self, obs: &Observation) -> Result<DetectorOutput> {
        let z = self.fm.encode(obs)?;
        let a_obs = self.state.actions.next(obs, self.model.cfg.dt);
        let bank = self.protos.as_ref().unwrap_or(&self.model.protos);
        let tr = self.model.step_with(&mut self.state, &z, a_obs, bank)?;
        let type_probs = tr.heads.type_probs();
        if self.model.cfg.proto_online {
            let k = crate::linalg::argmax(&type_probs);
            if type_probs[k] > 0.9 {
                let bank = self.protos.get_or_insert_with(|| self.model.protos.clone());
                bank.update(&self.state.b, k);
            }
        }
        let vm = self.model.cfg.v_max;
        Ok(DetectorOutput {
            type_probs,
            switch_prob: tr.heads.switch_prob(),
            a_hat: [tr.heads.act[0] * vm, tr.heads.act[1] * vm],
            diagnostics: Some(Diagnostics {
                delta_mean: crate::linalg::mean(&tr.delta),
                update_norm: tr.update_norm,
                pred_error: tr.e * vm,
            }),
        })
    }

    fn trigger(&self) -> Trigger {
        self.trigger
    }
}
