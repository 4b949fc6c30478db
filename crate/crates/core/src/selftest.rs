//! Numerical oracles and invariant suites. Each oracle is written from the
//! closed-form definition and shares no code with the path it checks; the
//! `selftest` subcommand and the acceptance tests both run them.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::ln_gamma;

use crate::baselines::bocpd::{BocpdConfig, RunLengthPosterior};
use crate::baselines::gru::{Gru, GruConfig, GruDetector};
use crate::detector::{Detector, EpisodeContext, Trigger};
use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::linalg::log_sum_exp;
use crate::metrics::hard_detection;
use crate::sim::{run_episode, Transition, WorkspaceConfig};
use crate::train::dataset::LabeledEpisode;
use crate::train::{LossWeights, Model, ModelKind};
use crate::uatom::{fuse, ssm_step, FuseView, SsmView, Uatom, UatomConfig, UatomDetector};

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn from_result(name: &'static str, r: Result<String>) -> Self {
        match r {
            Ok(detail) => Check { name, passed: true, detail },
            Err(e) => Check {
                name,
                passed: false,
                detail: e.to_string(),
            },
        }
    }

    fn bound(name: &'static str, value: Result<f64>, limit: f64, what: &str) -> Self {
        match value {
            Ok(v) => Check {
                name,
                passed: v < limit,
                detail: format!("{what} {v:.3e} (limit {limit:.0e})"),
            },
            Err(e) => Check {
                name,
                passed: false,
                detail: e.to_string(),
            },
        }
    }
}

fn fail(msg: String) -> Error {
    Error::InvalidInput(msg)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-s..s)).collect()
}

/// Closed form `b_T = sum_k (prod_{j>k} Abar_j) Bbar_k z_k` from a zero
/// state, with `Delta = softplus(w z + d)`, `Abar = exp(-Delta e^a)` and
/// `Bbar z = Delta (B z)`.
pub fn ssm_unroll(zs: &[Vec<f64>], p: &SsmView) -> Vec<f64> {
    let n = p.a_raw.len();
    let per_step: Vec<(Vec<f64>, Vec<f64>)> = zs
        .iter()
        .map(|z| {
            let f = z.len();
            let mut abar = vec![0.0; n];
            let mut bbz = vec![0.0; n];
            for i in 0..n {
                let mut pre = p.d[i];
                let mut bz = 0.0;
                for j in 0..f {
                    pre += p.w_delta[i * f + j] * z[j];
                    bz += p.b[i * f + j] * z[j];
                }
                let delta = (1.0 + pre.exp()).ln();
                abar[i] = (delta * -(p.a_raw[i].exp())).exp();
                bbz[i] = delta * bz;
            }
            (abar, bbz)
        })
        .collect();
    let mut b = vec![0.0; n];
    for k in 0..zs.len() {
        for i in 0..n {
            let prod: f64 = per_step[k + 1..].iter().map(|(abar, _)| abar[i]).product();
            b[i] += prod * per_step[k].1[i];
        }
    }
    b
}

/// Largest absolute gap between the recurrent scan and [`ssm_unroll`] over
/// random sizes and parameters, on sequences of `len` steps.
pub fn ssm_scan_error(instances: usize, len: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (n, f) = (rng.random_range(1..12), rng.random_range(1..10));
        let a_raw = rand_vec(&mut rng, n, 2.0);
        let b = rand_vec(&mut rng, n * f, 1.0);
        let w = rand_vec(&mut rng, n * f, 1.0);
        let d = rand_vec(&mut rng, n, 1.0);
        let p = SsmView {
            a_raw: &a_raw,
            b: &b,
            w_delta: &w,
            d: &d,
        };
        let zs: Vec<Vec<f64>> = (0..len).map(|_| rand_vec(&mut rng, f, 1.0)).collect();
        let mut state = vec![0.0; n];
        for z in &zs {
            state = ssm_step(&state, z, &p)?.b;
        }
        for (x, y) in state.iter().zip(ssm_unroll(&zs, &p)) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(worst)
}

/// A short simulated episode, labelled with a feature map fitted to itself.
fn short_episode(seed: u64, feat_dim: usize) -> Result<LabeledEpisode> {
    let cfg = WorkspaceConfig {
        episode_len: 24,
        switch_lo: 6,
        switch_hi: 14,
        ..Default::default()
    };
    let tr = Transition::all()[seed as usize % 12];
    let log = run_episode(tr, seed, &cfg, None)?;
    let fm = FeatureMap::calibrate(&log.observations, feat_dim, seed)?;
    LabeledEpisode::from_log(&log, &fm, &cfg)
}

/// Worst relative error between the backward pass of the training objective
/// and central finite differences, over `n_params` randomly drawn
/// parameters. Pairs where both magnitudes fall below `1e-7` are compared
/// absolutely instead and count as failures above `1e-8`.
pub fn gradient_error(kind: ModelKind, n_params: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ep = short_episode(seed, 32)?;
    let mut model = Model::new(kind, &UatomConfig::default(), &GruConfig::default(), seed)?;
    if let Model::Uatom(m) = &mut model {
        // Populated prototypes so the similarity branch carries gradient.
        let n = m.cfg.state_dim;
        for k in 0..4 {
            m.protos.update(&rand_vec(&mut rng, n, 1.0), k);
        }
    }
    let w = LossWeights::default();
    let loss = |m: &Model| m.episode_pass(&ep, &w, 0).map(|p| (p.parts.total(&w), p.grads));
    let (_, grads) = loss(&model)?;
    let total = model.params().num_params();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..n_params {
        let k = rng.random_range(0..total);
        let (id, j) = model
            .params()
            .flat_locate(k)
            .ok_or_else(|| fail(format!("parameter {k} out of range")))?;
        let eval = |dx: f64| -> Result<f64> {
            let mut p = model.clone();
            p.params_mut().tensors[id.0].data[j] += dx;
            p.params_mut().reindex();
            Ok(loss(&p)?.0)
        };
        let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
        let an = grads.0[id.0][j];
        let scale = fd.abs().max(an.abs());
        let err = if scale < 1e-7 {
            if (fd - an).abs() < 1e-8 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (fd - an).abs() / scale
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Closed-form normal-inverse-gamma marginal likelihood of one segment.
pub fn log_segment_evidence(xs: &[f64], c: &BocpdConfig) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    let kn = c.kappa0 + n;
    let an = c.alpha0 + n / 2.0;
    let bn = c.beta0 + 0.5 * ss + c.kappa0 * n * (mean - c.mu0).powi(2) / (2.0 * kn);
    ln_gamma(an) - ln_gamma(c.alpha0) + c.alpha0 * c.beta0.ln() - an * bn.ln() + 0.5 * (c.kappa0 / kn).ln()
        - n / 2.0 * (2.0 * std::f64::consts::PI).ln()
}

/// Run-length posterior after `xs` by enumerating all `2^n` changepoint
/// patterns. Indicator `c_t = 1` starts a new segment after `x_t`; the run
/// length is the count since the last indicator.
pub fn bocpd_enumerate(xs: &[f64], c: &BocpdConfig) -> Vec<f64> {
    let n = xs.len();
    assert!(n < 31, "enumeration is exponential");
    let mut post = vec![f64::NEG_INFINITY; n + 1];
    for mask in 0u32..(1 << n) {
        let mut lp = 0.0;
        let mut start = 0;
        for t in 0..n {
            let cp = mask >> t & 1 == 1;
            lp += if cp { c.hazard.ln() } else { (1.0 - c.hazard).ln() };
            if cp {
                lp += log_segment_evidence(&xs[start..=t], c);
                start = t + 1;
            }
        }
        if start < n {
            lp += log_segment_evidence(&xs[start..], c);
        }
        let r = n - start;
        post[r] = log_sum_exp(&[post[r], lp]);
    }
    let z = log_sum_exp(&post);
    post.iter().map(|l| (l - z).exp()).collect()
}

/// Largest absolute gap between the online recursion and
/// [`bocpd_enumerate`] over every prefix of length `1..=max_len`.
pub fn bocpd_error(instances: usize, max_len: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let cfg = BocpdConfig {
            hazard: rng.random_range(0.01..0.5),
            mu0: rng.random_range(-1.0..1.0),
            kappa0: rng.random_range(0.2..3.0),
            alpha0: rng.random_range(0.5..3.0),
            beta0: rng.random_range(0.2..3.0),
            ..Default::default()
        };
        let xs: Vec<f64> = (0..max_len).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut post = RunLengthPosterior::new(cfg);
        for n in 1..=max_len {
            post.update(xs[n - 1])?;
            let probs = post.probs();
            let oracle = bocpd_enumerate(&xs[..n], &cfg);
            if probs.len() != oracle.len() {
                return Err(fail(format!("support {} vs {}", probs.len(), oracle.len())));
            }
            for (a, b) in probs.iter().zip(&oracle) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(worst)
}

/// A hit at tolerance `k` implies a hit at every larger tolerance, on random
/// probability traces.
pub fn tolerance_monotonicity(trials: usize, seed: u64) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ks: Vec<usize> = (0..=20).collect();
    for i in 0..trials {
        let len = rng.random_range(10..120);
        let t_switch = rng.random_range(1..len);
        let density = rng.random_range(0.0..0.3);
        let trace: Vec<(usize, f64)> = (0..len)
            .map(|t| (t, if rng.random_bool(density) { 0.9 } else { 0.1 }))
            .collect();
        let trigger = Trigger {
            threshold: 0.5,
            debounce: rng.random_range(1..4),
        };
        let rec = hard_detection(i as u64, &trace, t_switch, &ks, &trigger)?;
        let hits: Vec<bool> = rec.hits.iter().map(|(_, h)| *h).collect();
        if hits.windows(2).any(|w| w[0] && !w[1]) {
            return Err(fail(format!("trial {i}: hits not monotone in k: {hits:?}")));
        }
    }
    Ok(format!("{trials} traces"))
}

fn untrained_detectors(seed: u64) -> Result<(Arc<Uatom>, Arc<Gru>, Arc<FeatureMap>)> {
    let cfg = WorkspaceConfig::default();
    let log = run_episode(Transition::all()[0], seed, &cfg, None)?;
    let fm = Arc::new(FeatureMap::calibrate(&log.observations, 32, seed)?);
    let mut u = Uatom::new(UatomConfig::default(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..4 {
        u.protos.update(&rand_vec(&mut rng, u.cfg.state_dim, 1.0), k);
    }
    Ok((Arc::new(u), Arc::new(Gru::new(GruConfig::default(), seed)?), fm))
}

/// Type posteriors sum to one and switch probabilities lie in `[0, 1]` at
/// every step of closed-loop episodes; the run-length posterior sums to one
/// after every update.
pub fn posterior_normalization(episodes: usize, seed: u64) -> Result<String> {
    let cfg = WorkspaceConfig::default();
    let (u, g, fm) = untrained_detectors(seed)?;
    let mut steps = 0;
    for i in 0..episodes {
        let tr = Transition::all()[i % 12];
        let mut dets: Vec<Box<dyn Detector>> = vec![
            Box::new(UatomDetector::new(u.clone(), fm.clone(), Trigger::default())),
            Box::new(GruDetector::new(g.clone(), fm.clone(), Trigger::default())),
        ];
        for d in dets.iter_mut() {
            let log = run_episode(tr, seed + i as u64, &cfg, Some(d.as_mut()))?;
            for (t, p) in log.type_probs.iter().enumerate() {
                let s: f64 = p.iter().sum();
                let sw = log.switch_probs[t];
                if (s - 1.0).abs() > 1e-9 || p.iter().any(|x| !(0.0..=1.0).contains(x)) || !(0.0..=1.0).contains(&sw) {
                    return Err(fail(format!("{} episode {i} step {t}: types {p:?} switch {sw}", d.name())));
                }
                steps += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut post = RunLengthPosterior::new(BocpdConfig {
        max_run: 60,
        ..Default::default()
    });
    for t in 0..300 {
        let shift = if t >= 150 { 4.0 } else { 0.0 };
        post.update(rng.random_range(-1.0..1.0) + shift)?;
        let s: f64 = post.probs().iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(fail(format!("run-length mass {s} at step {t}")));
        }
    }
    Ok(format!("{steps} detector steps, 300 run-length updates"))
}

/// The fused hidden state lies elementwise between the previous state and the
/// candidate, and the gate saturates to either endpoint.
pub fn gate_convexity(trials: usize, seed: u64) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..trials {
        let (din, dh, dm) = (rng.random_range(1..8), rng.random_range(1..8), rng.random_range(1..8));
        let w1 = rand_vec(&mut rng, dm * din, 1.0);
        let b1 = rand_vec(&mut rng, dm, 1.0);
        let w2 = rand_vec(&mut rng, dh * dm, 1.0);
        let b2 = rand_vec(&mut rng, dh, 1.0);
        let wg = rand_vec(&mut rng, dh * din, 1.0);
        let u = rand_vec(&mut rng, din, 2.0);
        let hp = rand_vec(&mut rng, dh, 1.0);
        let view = |bg: &[f64]| {
            let p = FuseView {
                w1: &w1,
                b1: &b1,
                w2: &w2,
                b2: &b2,
                wg: &wg,
                bg,
            };
            fuse(&u, &hp, &p)
        };
        let (h, g, ht) = view(&rand_vec(&mut rng, dh, 3.0));
        for j in 0..dh {
            let (lo, hi) = (ht[j].min(hp[j]), ht[j].max(hp[j]));
            if !(g[j] > 0.0 && g[j] < 1.0) || h[j] < lo - 1e-15 || h[j] > hi + 1e-15 {
                return Err(fail(format!("trial {i}: h {} outside [{lo}, {hi}] with gate {}", h[j], g[j])));
            }
        }
        let (closed, _, _) = view(&vec![-800.0; dh]);
        let (open, _, cand) = view(&vec![800.0; dh]);
        if closed != hp || open != cand {
            return Err(fail(format!("trial {i}: saturated gate does not select an endpoint")));
        }
    }
    Ok(format!("{trials} random fusions"))
}

/// Perturbing the observation at step `t` leaves every earlier output of
/// both learned detectors unchanged and changes the output at `t`.
pub fn causality(seed: u64) -> Result<String> {
    let cfg = WorkspaceConfig::default();
    let (u, g, fm) = untrained_detectors(seed)?;
    let log = run_episode(Transition::all()[5], seed, &cfg, None)?;
    let ctx = EpisodeContext {
        t_switch: log.t_switch,
        transition: log.transition,
        episode_len: cfg.episode_len,
    };
    let mut checked = 0;
    for which in ["uatom", "gru"] {
        let run = |obs: &[crate::sim::Observation]| -> Result<Vec<_>> {
            let mut d: Box<dyn Detector> = match which {
                "uatom" => Box::new(UatomDetector::new(u.clone(), fm.clone(), Trigger::default())),
                _ => Box::new(GruDetector::new(g.clone(), fm.clone(), Trigger::default())),
            };
            d.begin_episode(&ctx);
            obs.iter().map(|o| d.observe(o)).collect()
        };
        let base = run(&log.observations)?;
        for t in [0, 17, log.t_switch, cfg.episode_len - 1] {
            let mut pert = log.observations.clone();
            pert[t].0[4] += 0.05;
            pert[t].0[5] -= 0.03;
            let out = run(&pert)?;
            if out[..t] != base[..t] {
                return Err(fail(format!("{which}: output before step {t} depends on step {t}")));
            }
            if out[t] == base[t] {
                return Err(fail(format!("{which}: output at step {t} ignores its own observation")));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} perturbations"))
}

/// Same seed, same bytes: episodes with and without a detector in the loop,
/// and repeated replays of a detector over a fixed log.
pub fn determinism(seed: u64) -> Result<String> {
    let cfg = WorkspaceConfig::default();
    let (u, _, fm) = untrained_detectors(seed)?;
    for tr in Transition::all() {
        let a = run_episode(tr, seed, &cfg, None)?;
        let b = run_episode(tr, seed, &cfg, None)?;
        if a != b {
            return Err(fail(format!("open-loop episode {} differs between runs", tr.label())));
        }
        let mut d1 = UatomDetector::new(u.clone(), fm.clone(), Trigger::default());
        let mut d2 = UatomDetector::new(u.clone(), fm.clone(), Trigger::default());
        let c = run_episode(tr, seed, &cfg, Some(&mut d1))?;
        let d = run_episode(tr, seed, &cfg, Some(&mut d2))?;
        if serde_json::to_vec(&c)? != serde_json::to_vec(&d)? {
            return Err(fail(format!("closed-loop episode {} differs between runs", tr.label())));
        }
    }
    Ok("12 transitions, open and closed loop".into())
}

/// Numerical oracles at their acceptance sizes.
pub fn oracle_checks(seed: u64) -> Vec<Check> {
    vec![
        Check::bound("ssm_scan_vs_unroll", ssm_scan_error(100, 10, seed), 1e-6, "max abs error"),
        Check::bound(
            "gradient_fd_uatom",
            gradient_error(ModelKind::Uatom, 50, seed),
            1e-4,
            "max relative error",
        ),
        Check::bound("gradient_fd_gru", gradient_error(ModelKind::Gru, 50, seed), 1e-4, "max relative error"),
        Check::bound("bocpd_vs_enumeration", bocpd_error(20, 8, seed), 1e-9, "max abs error"),
    ]
}

pub fn invariant_suites(seed: u64) -> Vec<Check> {
    vec![
        Check::from_result("tolerance_monotonicity", tolerance_monotonicity(500, seed)),
        Check::from_result("posterior_normalization", posterior_normalization(12, seed)),
        Check::from_result("gate_convexity", gate_convexity(1000, seed)),
        Check::from_result("causality", causality(seed)),
        Check::from_result("determinism", determinism(seed)),
    ]
}

pub fn run_all(seed: u64) -> Vec<Check> {
    let mut v = oracle_checks(seed);
    v.extend(invariant_suites(seed));
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unroll_of_single_step_is_delta_times_bz() {
        let (a, b, w, d) = (vec![0.3], vec![2.0], vec![0.0], vec![0.0]);
        let p = SsmView {
            a_raw: &a,
            b: &b,
            w_delta: &w,
            d: &d,
        };
        let got = ssm_unroll(&[vec![0.5]], &p);
        assert!((got[0] - std::f64::consts::LN_2 * 1.0).abs() < 1e-15);
    }

    #[test]
    fn enumeration_of_one_point() {
        let c = BocpdConfig::default();
        let p = bocpd_enumerate(&[0.4], &c);
        assert!((p[0] - c.hazard).abs() < 1e-15);
        assert!((p[1] - (1.0 - c.hazard)).abs() < 1e-15);
    }

    #[test]
    fn segment_evidence_of_one_point_is_student_t() {
        // Predictive of one point under the prior: Student-t with 2 alpha
        // degrees of freedom, location mu, scale^2 beta (kappa+1)/(alpha kappa).
        let c = BocpdConfig {
            mu0: 0.2,
            kappa0: 1.5,
            alpha0: 2.0,
            beta0: 0.7,
            ..Default::default()
        };
        let x: f64 = -0.9;
        let nu = 2.0 * c.alpha0;
        let s2 = c.beta0 * (c.kappa0 + 1.0) / (c.alpha0 * c.kappa0);
        let t = ln_gamma((nu + 1.0) / 2.0) - ln_gamma(nu / 2.0) - 0.5 * (nu * std::f64::consts::PI * s2).ln()
            - (nu + 1.0) / 2.0 * (1.0 + (x - c.mu0).powi(2) / (nu * s2)).ln();
        assert!((log_segment_evidence(&[x], &c) - t).abs() < 1e-12);
    }

    #[test]
    fn invariant_suites_pass() {
        for r in [
            tolerance_monotonicity(300, 3),
            gate_convexity(300, 4),
            causality(5),
        ] {
            r.unwrap();
        }
    }
}
