//! Mini-batch training loop shared by the belief tracker and the GRU.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, Tape};
use crate::baselines::{Gru, GruConfig};
use crate::error::{Error, Result};
use crate::nn::{HeadOut, HeadVars, N_TYPES};
use crate::train::adam::{clip_global_norm, AdamConfig, AdamState};
use crate::train::dataset::LabeledEpisode;
use crate::train::loss::{tape_loss, LossParts, LossWeights, StepPrediction};
use crate::uatom::{Uatom, UatomConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Episodes per batch.
    pub batch: usize,
    pub epochs: usize,
    pub lambda_type: f64,
    pub lambda_switch: f64,
    pub lambda_aux: f64,
    pub clip_norm: f64,
    /// Truncation length for backpropagation through time; 0 keeps whole
    /// episodes.
    pub bptt: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            weight_decay: 1e-4,
            batch: 8,
            epochs: 50,
            lambda_type: 1.0,
            lambda_switch: 2.0,
            lambda_aux: 0.1,
            clip_norm: 5.0,
            bptt: 0,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [self.lr, self.lambda_type, self.lambda_switch, self.clip_norm];
        if pos.iter().any(|x| !(x.is_finite() && *x > 0.0)) || self.batch == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig(
                "lr, batch, epochs, lambdas and clip_norm must be positive".into(),
            ));
        }
        if !(self.weight_decay >= 0.0 && self.lambda_aux >= 0.0) {
            return Err(Error::InvalidConfig("weight_decay and lambda_aux must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            type_: self.lambda_type,
            switch: self.lambda_switch,
            aux: self.lambda_aux,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Uatom,
    Gru,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Uatom => "uatom",
            ModelKind::Gru => "gru",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uatom" => Ok(ModelKind::Uatom),
            "gru" => Ok(ModelKind::Gru),
            _ => Err(Error::InvalidInput(format!("unknown model kind {s}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "net", rename_all = "lowercase")]
pub enum Model {
    Uatom(Uatom),
    Gru(Gru),
}

/// Result of one episode's forward and backward pass.
#[derive(Debug, Clone)]
pub struct EpisodePass {
    pub parts: LossParts,
    pub grads: Grads,
    /// Per type: summed belief state and step count (belief tracker only).
    pub belief_sums: Vec<(Vec<f64>, usize)>,
}

impl Model {
    pub fn new(kind: ModelKind, uatom: &UatomConfig, gru: &GruConfig, seed: u64) -> Result<Self> {
        Ok(match kind {
            ModelKind::Uatom => Model::Uatom(Uatom::new(uatom.clone(), seed)?),
            ModelKind::Gru => Model::Gru(Gru::new(gru.clone(), seed)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Uatom(_) => ModelKind::Uatom,
            Model::Gru(_) => ModelKind::Gru,
        }
    }

    pub fn params(&self) -> &crate::autodiff::ParamStore {
        match self {
            Model::Uatom(m) => &m.params,
            Model::Gru(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut crate::autodiff::ParamStore {
        match self {
            Model::Uatom(m) => &mut m.params,
            Model::Gru(m) => &mut m.params,
        }
    }

    /// Validate names and shapes, rebuilding indices after loading.
    pub fn check_layout(&mut self) -> Result<()> {
        match self {
            Model::Uatom(m) => m.check_layout(),
            Model::Gru(m) => m.check_layout(),
        }
    }

    pub fn episode_pass(&self, ep: &LabeledEpisode, w: &LossWeights, bptt: usize) -> Result<EpisodePass> {
        let n = ep.len();
        if n == 0 {
            return Err(Error::InvalidInput("empty episode".into()));
        }
        let chunk = if bptt == 0 { n } else { bptt.min(n) };
        let ps = self.params();
        let mut grads = ps.zero_grads();
        let mut parts = LossParts::default();
        let mut belief_sums: Vec<(Vec<f64>, usize)> = Vec::new();
        match self {
            Model::Uatom(m) => {
                belief_sums = vec![(vec![0.0; m.cfg.state_dim], 0); N_TYPES];
                let mut state = m.initial_state();
                for start in (0..n).step_by(chunk) {
                    let end = (start + chunk).min(n);
                    let mut tape = Tape::new(ps);
                    let steps = m.forward_tape_from(&mut tape, &state, &ep.z[start..end], &ep.a_obs[start..end]);
                    let heads: Vec<HeadVars> = steps.iter().map(|s| s.heads).collect();
                    let tl = tape_loss(&mut tape, &heads, ep, start, w);
                    parts.add(&tl.parts(&tape));
                    grads.add_assign(&tape.backward(tl.total));
                    for (i, s) in steps.iter().enumerate() {
                        let (sum, cnt) = &mut belief_sums[ep.types[start + i]];
                        for (a, b) in sum.iter_mut().zip(tape.value(s.b)) {
                            *a += b;
                        }
                        *cnt += 1;
                    }
                    if end < n {
                        for t in start..end {
                            m.step(&mut state, &ep.z[t], ep.a_obs[t])?;
                        }
                    }
                }
            }
            Model::Gru(m) => {
                let mut state = m.initial_state();
                for start in (0..n).step_by(chunk) {
                    let end = (start + chunk).min(n);
                    let mut tape = Tape::new(ps);
                    let heads = m.forward_tape_from(&mut tape, &state, &ep.z[start..end]);
                    let tl = tape_loss(&mut tape, &heads, ep, start, w);
                    parts.add(&tl.parts(&tape));
                    grads.add_assign(&tape.backward(tl.total));
                    if end < n {
                        for z in &ep.z[start..end] {
                            m.step(&mut state, z)?;
                        }
                    }
                }
            }
        }
        Ok(EpisodePass {
            parts,
            grads,
            belief_sums,
        })
    }

    /// Plain (tape-free) per-step predictions over a labelled episode.
    pub fn predict(&self, ep: &LabeledEpisode) -> Result<Vec<StepPrediction>> {
        let conv = |h: &HeadOut| StepPrediction {
            type_probs: h.type_probs(),
            switch_prob: h.switch_prob(),
            act: [h.act[0], h.act[1]],
            aux: [h.aux[0], h.aux[1], h.aux[2]],
        };
        match self {
            Model::Uatom(m) => {
                let mut s = m.initial_state();
                ep.z.iter()
                    .zip(&ep.a_obs)
                    .map(|(z, a)| m.step(&mut s, z, *a).map(|tr| conv(&tr.heads)))
                    .collect()
            }
            Model::Gru(m) => {
                let mut s = m.initial_state();
                ep.z.iter().map(|z| m.step(&mut s, z).map(|(h, _)| conv(&h))).collect()
            }
        }
    }
}

/// One row of the training curve. Components are unweighted;
/// `total = act + lambda_type type + lambda_switch switch + lambda_aux aux`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub act: f64,
    pub type_: f64,
    pub switch: f64,
    pub aux: f64,
    pub grad_norm: f64,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub adam: AdamState,
    pub curve: Vec<EpochRecord>,
    /// Loss of the very first batch, before any update.
    pub initial_loss: Option<f64>,
    /// Consecutive epochs above the divergence bound.
    pub over: usize,
}

impl TrainState {
    pub fn new(model: &Model) -> Self {
        Self {
            epoch: 0,
            adam: AdamState::new(model.params()),
            curve: Vec::new(),
            initial_loss: None,
            over: 0,
        }
    }
}

/// Episode order for an epoch; depends only on the training seed.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

/// Runs epochs `state.epoch..cfg.epochs`. Per-episode passes may run in
/// parallel; their gradients are summed in batch order, so results do not
/// depend on the thread count.
pub fn train(
    model: &mut Model,
    data: &[LabeledEpisode],
    cfg: &TrainingConfig,
    state: &mut TrainState,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let w = cfg.weights();
    let adam = cfg.adam();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let order = epoch_order(cfg.seed, epoch, data.len());
        let mut sum = LossParts::default();
        let mut norm_sum = 0.0;
        let mut n_batches = 0usize;
        for (bi, idx) in order.chunks(cfg.batch).enumerate() {
            let m: &Model = model;
            let passes: Vec<EpisodePass> = idx
                .par_iter()
                .map(|&i| m.episode_pass(&data[i], &w, cfg.bptt))
                .collect::<Result<_>>()?;
            let mut g = model.params().zero_grads();
            let mut batch_parts = LossParts::default();
            for p in &passes {
                g.add_assign(&p.grads);
                batch_parts.add(&p.parts);
            }
            g.scale(1.0 / passes.len() as f64);
            if !g.is_finite() || !batch_parts.is_finite() {
                let bad = g
                    .0
                    .iter()
                    .position(|t| t.iter().any(|x| !x.is_finite()))
                    .map(|i| model.params().tensors[i].name.clone())
                    .unwrap_or_else(|| "loss".into());
                return Err(Error::NonFiniteGradient {
                    epoch,
                    batch: bi,
                    tensor: bad,
                });
            }
            norm_sum += clip_global_norm(&mut g, cfg.clip_norm);
            n_batches += 1;
            sum.add(&batch_parts);
            if state.initial_loss.is_none() {
                state.initial_loss = Some(batch_parts.scaled(1.0 / passes.len() as f64).total(&w));
            }
            state.adam.step(model.params_mut(), &g, &adam)?;
            if let Model::Uatom(u) = model {
                update_prototypes(u, &passes);
            }
        }
        let mean = sum.scaled(1.0 / data.len() as f64);
        let rec = EpochRecord {
            epoch: epoch + 1,
            total: mean.total(&w),
            act: mean.act,
            type_: mean.type_,
            switch: mean.switch,
            aux: mean.aux,
            grad_norm: norm_sum / n_batches as f64,
        };
        state.curve.push(rec);
        state.epoch += 1;
        on_epoch(&rec);
        let initial = state.initial_loss.unwrap_or(rec.total);
        if rec.total > 10.0 * initial {
            state.over += 1;
        } else {
            state.over = 0;
        }
        if state.over >= 3 {
            return Err(Error::Diverged {
                epoch: rec.epoch,
                loss: rec.total,
                initial,
            });
        }
    }
    Ok(())
}

/// One EMA step per type toward the batch's mean belief state.
fn update_prototypes(m: &mut Uatom, passes: &[EpisodePass]) {
    for ty in 0..N_TYPES {
        let dim = m.cfg.state_dim;
        let mut sum = vec![0.0; dim];
        let mut count = 0usize;
        for p in passes {
            let (s, c) = &p.belief_sums[ty];
            for (a, b) in sum.iter_mut().zip(s) {
                *a += b;
            }
            count += c;
        }
        if count > 0 {
            sum.iter_mut().for_each(|x| *x /= count as f64);
            m.protos.update(&sum, ty);
        }
    }
}

pub fn write_curve(path: &Path, curve: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "L_total", "L_act", "L_type", "L_sw", "L_aux"])?;
    for r in curve {
        w.write_record([
            r.epoch.to_string(),
            r.total.to_string(),
            r.act.to_string(),
            r.type_.to_string(),
            r.switch.to_string(),
            r.aux.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve(path: &Path) -> Result<Vec<(usize, [f64; 5])>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::InvalidInput(format!("bad curve cell {i}")))
        };
        let epoch = rec
            .get(0)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::InvalidInput("bad epoch".into()))?;
        out.push((epoch, [f(1)?, f(2)?, f(3)?, f(4)?, f(5)?]));
    }
    Ok(out)
}

/// Log-friendly one-liner.
pub fn describe(rec: &EpochRecord, mut w: impl Write) -> std::io::Result<()> {
    writeln!(
        w,
        "epoch {:>3}  L {:.5}  act {:.5}  type {:.5}  sw {:.5}  aux {:.5}  |g| {:.3}",
        rec.epoch, rec.total, rec.act, rec.type_, rec.switch, rec.aux, rec.grad_norm
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::FeatureMap;
    use crate::sim::WorkspaceConfig;
    use crate::train::dataset::{generate_dataset, label_all, observations};

    fn small() -> (UatomConfig, GruConfig) {
        let u = UatomConfig {
            feat_dim: 12,
            state_dim: 10,
            key_dim: 6,
            window: 6,
            mlp_hidden: 16,
            hidden: 16,
            ..Default::default()
        };
        let g = GruConfig {
            feat_dim: 12,
            hidden: 16,
            ..Default::default()
        };
        (u, g)
    }

    fn data(n_per: usize, len: usize) -> Vec<LabeledEpisode> {
        let cfg = WorkspaceConfig {
            episode_len: len,
            switch_lo: 10,
            switch_hi: 25,
            ..Default::default()
        };
        let logs = generate_dataset(&cfg, n_per, 1).unwrap();
        let fm = FeatureMap::calibrate(&observations(&logs), 12, 0).unwrap();
        label_all(&logs, &fm, &cfg).unwrap()
    }

    fn run(kind: ModelKind, data: &[LabeledEpisode], cfg: &TrainingConfig) -> (Model, TrainState) {
        let (u, g) = small();
        let mut m = Model::new(kind, &u, &g, 7).unwrap();
        let mut st = TrainState::new(&m);
        train(&mut m, data, cfg, &mut st, |_| {}).unwrap();
        (m, st)
    }

    #[test]
    fn tape_loss_matches_plain_predictions() {
        let d = data(1, 40);
        let (u, g) = small();
        let w = LossWeights::default();
        for kind in [ModelKind::Uatom, ModelKind::Gru] {
            let m = Model::new(kind, &u, &g, 2).unwrap();
            let pass = m.episode_pass(&d[3], &w, 0).unwrap();
            let plain = crate::train::loss::loss(&m.predict(&d[3]).unwrap(), &d[3]).unwrap();
            assert!((pass.parts.total(&w) - plain.total(&w)).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_decreases_over_first_epochs() {
        let d = data(2, 60);
        let cfg = TrainingConfig {
            epochs: 5,
            ..Default::default()
        };
        for kind in [ModelKind::Uatom, ModelKind::Gru] {
            let (_, st) = run(kind, &d, &cfg);
            for w in st.curve.windows(2) {
                assert!(w[1].total < w[0].total, "{kind:?}: {:?}", st.curve);
            }
            let wt = cfg.weights();
            for r in &st.curve {
                let sum = r.act + wt.type_ * r.type_ + wt.switch * r.switch + wt.aux * r.aux;
                assert!((r.total - sum).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let d = data(1, 40);
        let cfg = TrainingConfig {
            epochs: 2,
            batch: 5,
            ..Default::default()
        };
        let (a, sa) = run(ModelKind::Uatom, &d, &cfg);
        let (b, sb) = run(ModelKind::Uatom, &d, &cfg);
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn resumed_run_equals_uninterrupted() {
        let d = data(1, 40);
        let full_cfg = TrainingConfig {
            epochs: 4,
            batch: 5,
            ..Default::default()
        };
        let (full, full_st) = run(ModelKind::Uatom, &d, &full_cfg);
        let (mut part, mut st) = run(
            ModelKind::Uatom,
            &d,
            &TrainingConfig {
                epochs: 2,
                ..full_cfg.clone()
            },
        );
        train(&mut part, &d, &full_cfg, &mut st, |_| {}).unwrap();
        assert_eq!(part, full);
        assert_eq!(st, full_st);
    }

    #[test]
    fn chunked_bptt_matches_full_loss_value() {
        let d = data(1, 40);
        let (u, g) = small();
        let w = LossWeights::default();
        for kind in [ModelKind::Uatom, ModelKind::Gru] {
            let m = Model::new(kind, &u, &g, 3).unwrap();
            let full = m.episode_pass(&d[0], &w, 0).unwrap();
            let chunked = m.episode_pass(&d[0], &w, 7).unwrap();
            assert!((full.parts.total(&w) - chunked.parts.total(&w)).abs() < 1e-9);
            assert_ne!(full.grads, chunked.grads);
        }
    }

    #[test]
    fn divergence_aborts() {
        let d = data(1, 30);
        let cfg = TrainingConfig {
            epochs: 20,
            lr: 50.0,
            clip_norm: 1e6,
            batch: 4,
            ..Default::default()
        };
        let (u, g) = small();
        let mut m = Model::new(ModelKind::Gru, &u, &g, 1).unwrap();
        let mut st = TrainState::new(&m);
        let err = train(&mut m, &d, &cfg, &mut st, |_| {}).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. } | Error::NonFiniteGradient { .. }), "{err}");
    }

    #[test]
    fn curve_csv_roundtrip() {
        let d = data(1, 30);
        let (_, st) = run(
            ModelKind::Gru,
            &d,
            &TrainingConfig {
                epochs: 2,
                ..Default::default()
            },
        );
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("curve.csv");
        write_curve(&p, &st.curve).unwrap();
        let head = std::fs::read_to_string(&p).unwrap();
        assert!(head.starts_with("epoch,L_total,L_act,L_type,L_sw,L_aux\n"));
        let back = read_curve(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].1[0], st.curve[1].total);
    }
}
