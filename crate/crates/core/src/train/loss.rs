//! Multi-task objective: action regression, type cross-entropy, switch
//! binary cross-entropy and the auxiliary error-scale regression.
//!
//! Every term is a mean over the steps of one episode; batch losses average
//! episodes. [`loss`] works from probabilities and is what reports use;
//! [`tape_loss`] builds the same quantity from logits for training.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{HeadVars, ACT_DIM, AUX_SCALES};
use crate::train::dataset::LabeledEpisode;

/// Smallest probability handed to a logarithm.
pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub type_: f64,
    pub switch: f64,
    pub aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            type_: 1.0,
            switch: 2.0,
            aux: 0.1,
        }
    }
}

/// Unweighted components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub act: f64,
    pub type_: f64,
    pub switch: f64,
    pub aux: f64,
}

impl LossParts {
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.act + w.type_ * self.type_ + w.switch * self.switch + w.aux * self.aux
    }

    pub fn add(&mut self, o: &LossParts) {
        self.act += o.act;
        self.type_ += o.type_;
        self.switch += o.switch;
        self.aux += o.aux;
    }

    pub fn scaled(&self, s: f64) -> LossParts {
        LossParts {
            act: self.act * s,
            type_: self.type_ * s,
            switch: self.switch * s,
            aux: self.aux * s,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.act, self.type_, self.switch, self.aux].iter().all(|x| x.is_finite())
    }
}

/// Per-step model outputs in probability space. Actions in units of `v_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPrediction {
    pub type_probs: [f64; 4],
    pub switch_prob: f64,
    pub act: [f64; 2],
    pub aux: [f64; 3],
}

fn neg_log(p: f64) -> f64 {
    -p.clamp(PROB_FLOOR, 1.0).ln()
}

pub fn loss(preds: &[StepPrediction], ep: &LabeledEpisode) -> Result<LossParts> {
    if preds.len() != ep.len() {
        return Err(Error::DimensionMismatch {
            expected: ep.len(),
            got: preds.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::InvalidInput("empty episode".into()));
    }
    let n = preds.len() as f64;
    let mut parts = LossParts::default();
    let mut n_act = 0usize;
    for (t, p) in preds.iter().enumerate() {
        if let Some(target) = ep.act_target(t) {
            parts.act += (0..ACT_DIM).map(|i| (p.act[i] - target[i]).powi(2)).sum::<f64>() / ACT_DIM as f64;
            n_act += 1;
        }
        parts.type_ += neg_log(p.type_probs[ep.types[t]]);
        let s = ep.switch[t];
        parts.switch += s * neg_log(p.switch_prob) + (1.0 - s) * neg_log(1.0 - p.switch_prob);
        parts.aux += (0..AUX_SCALES.len()).map(|i| (p.aux[i] - ep.aux[t][i]).powi(2)).sum::<f64>()
            / AUX_SCALES.len() as f64;
    }
    parts.act /= n_act.max(1) as f64;
    parts.type_ /= n;
    parts.switch /= n;
    parts.aux /= n;
    Ok(parts)
}

/// Graph nodes of one episode's loss.
#[derive(Debug, Clone, Copy)]
pub struct TapeLoss {
    pub total: Var,
    pub act: Var,
    pub type_: Var,
    pub switch: Var,
    pub aux: Var,
}

/// Builds the episode objective over `heads[t]`, which align with steps
/// `offset..offset + heads.len()` of `ep`. Each component is normalized by
/// the full episode's step count so that chunked episodes sum to the
/// unchunked value.
pub fn tape_loss(tape: &mut Tape, heads: &[HeadVars], ep: &LabeledEpisode, offset: usize, w: &LossWeights) -> TapeLoss {
    let n = ep.len() as f64;
    let n_act = ep.len().saturating_sub(1).max(1) as f64;
    let (mut act, mut ty, mut sw, mut aux) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, hv) in heads.iter().enumerate() {
        let t = offset + i;
        if let Some(target) = ep.act_target(t) {
            act.push(tape.sq_err(hv.act, target.to_vec()));
        }
        ty.push(tape.cross_entropy(hv.type_logits, ep.types[t]));
        sw.push(tape.bce_logit(hv.switch_logit, ep.switch[t]));
        aux.push(tape.sq_err(hv.aux, ep.aux[t].to_vec()));
    }
    let mut mean = |xs: Vec<Var>, d: f64| {
        let s = tape.sum_scalars(xs);
        tape.scale(s, 1.0 / d)
    };
    let act = mean(act, n_act * ACT_DIM as f64);
    let type_ = mean(ty, n);
    let switch = mean(sw, n);
    let aux = mean(aux, n * AUX_SCALES.len() as f64);
    let terms = vec![
        act,
        tape.scale(type_, w.type_),
        tape.scale(switch, w.switch),
        tape.scale(aux, w.aux),
    ];
    let total = tape.sum_scalars(terms);
    TapeLoss {
        total,
        act,
        type_,
        switch,
        aux,
    }
}

impl TapeLoss {
    pub fn parts(&self, tape: &Tape) -> LossParts {
        LossParts {
            act: tape.scalar(self.act),
            type_: tape.scalar(self.type_),
            switch: tape.scalar(self.switch),
            aux: tape.scalar(self.aux),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use crate::linalg::{sigmoid, softmax};
    use crate::sim::{PartnerType, Transition};

    fn toy_episode(n: usize, t_switch: usize) -> LabeledEpisode {
        let a_obs: Vec<[f64; 2]> = (0..n).map(|t| [0.1 * (t as f64).sin(), -0.05]).collect();
        LabeledEpisode {
            seed: 0,
            transition: Transition::new(PartnerType::Helper, PartnerType::Blocker).unwrap(),
            t_switch,
            z: vec![vec![0.0; 4]; n],
            aux: crate::train::dataset::aux_targets(&a_obs, 0.3),
            a_obs,
            types: (0..n).map(|t| if t < t_switch { 0 } else { 2 }).collect(),
            switch: (0..n).map(|t| (t >= t_switch && t < t_switch + 3) as u8 as f64).collect(),
            v_max: 0.3,
        }
    }

    fn perfect(ep: &LabeledEpisode) -> Vec<StepPrediction> {
        (0..ep.len())
            .map(|t| {
                let mut tp = [0.0; 4];
                tp[ep.types[t]] = 1.0;
                StepPrediction {
                    type_probs: tp,
                    switch_prob: ep.switch[t],
                    act: ep.act_target(t).unwrap_or([0.0; 2]),
                    aux: ep.aux[t],
                }
            })
            .collect()
    }

    #[test]
    fn perfect_predictions_cost_nothing() {
        let ep = toy_episode(20, 8);
        let l = loss(&perfect(&ep), &ep).unwrap();
        assert!(l.act.abs() < 1e-9 && l.type_.abs() < 1e-9 && l.switch.abs() < 1e-9 && l.aux.abs() < 1e-9);
    }

    #[test]
    fn uniform_types_cost_ln4() {
        let ep = toy_episode(20, 8);
        let mut p = perfect(&ep);
        p.iter_mut().for_each(|s| s.type_probs = [0.25; 4]);
        let l = loss(&p, &ep).unwrap();
        assert!((l.type_ - 4f64.ln()).abs() < 1e-12);
        assert!((l.type_ - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn doubling_switch_weight_doubles_switch_term() {
        let ep = toy_episode(20, 8);
        let mut p = perfect(&ep);
        p.iter_mut().for_each(|s| s.switch_prob = 0.3);
        let l = loss(&p, &ep).unwrap();
        let w1 = LossWeights::default();
        let w2 = LossWeights {
            switch: 2.0 * w1.switch,
            ..w1
        };
        let term = |w: &LossWeights| l.total(w) - l.act - w.type_ * l.type_ - w.aux * l.aux;
        assert_eq!(term(&w2), 2.0 * term(&w1));
    }

    #[test]
    fn misaligned_lengths_rejected() {
        let ep = toy_episode(20, 8);
        assert!(loss(&perfect(&ep)[..19], &ep).is_err());
    }

    /// Logit route on the tape against the probability route.
    #[test]
    fn tape_and_probability_routes_agree() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let ep = toy_episode(25, 10);
        let ps = ParamStore::new();
        let mut tape = Tape::new(&ps);
        let mut heads = Vec::new();
        let mut preds = Vec::new();
        for _ in 0..ep.len() {
            let logits: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let sl: f64 = rng.random_range(-4.0..4.0);
            let act = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let aux = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            let sm = softmax(&logits);
            preds.push(StepPrediction {
                type_probs: [sm[0], sm[1], sm[2], sm[3]],
                switch_prob: sigmoid(sl),
                act,
                aux,
            });
            heads.push(HeadVars {
                type_logits: tape.leaf(logits),
                switch_logit: tape.leaf(vec![sl]),
                act: tape.leaf(act.to_vec()),
                aux: tape.leaf(aux.to_vec()),
            });
        }
        let w = LossWeights::default();
        let tl = tape_loss(&mut tape, &heads, &ep, 0, &w);
        let a = tl.parts(&tape);
        let b = loss(&preds, &ep).unwrap();
        for (x, y) in [(a.act, b.act), (a.type_, b.type_), (a.switch, b.switch), (a.aux, b.aux)] {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
        assert!((tape.scalar(tl.total) - b.total(&w)).abs() < 1e-9);
    }

    #[test]
    fn chunked_tape_loss_sums_to_full() {
        let ep = toy_episode(12, 4);
        let ps = ParamStore::new();
        let mut tape = Tape::new(&ps);
        let heads: Vec<HeadVars> = (0..ep.len())
            .map(|t| HeadVars {
                type_logits: tape.leaf(vec![0.1 * t as f64, 0.0, -0.2, 0.3]),
                switch_logit: tape.leaf(vec![0.5 - 0.1 * t as f64]),
                act: tape.leaf(vec![0.2, -0.1]),
                aux: tape.leaf(vec![0.1, 0.2, 0.3]),
            })
            .collect();
        let w = LossWeights::default();
        let full = tape_loss(&mut tape, &heads, &ep, 0, &w).total;
        let a = tape_loss(&mut tape, &heads[..5], &ep, 0, &w).total;
        let b = tape_loss(&mut tape, &heads[5..], &ep, 5, &w).total;
        assert!((tape.scalar(full) - tape.scalar(a) - tape.scalar(b)).abs() < 1e-12);
    }
}
