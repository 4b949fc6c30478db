//! Browser bindings for the demo page in `www/`.
//!
//! Every function returns a flat `Float64Array`; the layouts are listed on
//! each function.

use switchwatch::baselines::bocpd::{BocpdConfig, RunLengthPosterior};
use switchwatch::baselines::control::{ControlCondition, ControlKind};
use switchwatch::detector::Detector;
use switchwatch::sim::{run_episode, PartnerType, Transition, WorkspaceConfig};
use switchwatch::uatom::{Uatom, UatomConfig};
use wasm_bindgen::prelude::*;

/// Values per step in [`episode`].
pub const EPISODE_STRIDE: usize = 7;

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Workspace width and depth, for scaling the canvas.
#[wasm_bindgen]
pub fn workspace_size() -> Vec<f64> {
    let c = WorkspaceConfig::default();
    vec![c.width, c.depth, c.collision_dist, c.close_range_dist]
}

/// One closed-loop episode, partner types indexed Helper, Competitor,
/// Blocker, Passive. With `oracle` the ego is told the switch step,
/// otherwise it never adapts.
///
/// Layout: `[t_switch, collisions_post, crt_post]`, then per step
/// `ego x, ego y, partner x, partner y, object x, object y, distance`.
#[wasm_bindgen]
pub fn episode(from: u32, to: u32, seed: u32, oracle: bool) -> Result<Vec<f64>, JsError> {
    if from > 3 || to > 3 {
        return Err(js("partner type index must be 0..=3"));
    }
    let tr = Transition::new(PartnerType::from_index(from as usize), PartnerType::from_index(to as usize)).map_err(js)?;
    let kind = if oracle { ControlKind::Oracle } else { ControlKind::NoDetection };
    let mut det = ControlCondition::new(kind);
    let cfg = WorkspaceConfig::default();
    let log = run_episode(tr, seed.into(), &cfg, Some(&mut det as &mut dyn Detector)).map_err(js)?;
    let mut out = Vec::with_capacity(3 + EPISODE_STRIDE * log.observations.len());
    out.extend([log.t_switch as f64, log.collisions_post as f64, log.crt_post as f64]);
    for (o, d) in log.observations.iter().zip(&log.distances) {
        let x = o.as_slice();
        out.extend([x[0], x[1], x[4], x[5], x[8], x[9], *d]);
    }
    Ok(out)
}

/// Run-length filter over a scalar stream.
///
/// Layout: per observation `change_score, expected run length`.
#[wasm_bindgen]
pub fn bocpd_scores(xs: Vec<f64>, hazard: f64) -> Result<Vec<f64>, JsError> {
    if !(hazard > 0.0 && hazard < 1.0) {
        return Err(js("hazard must lie in (0, 1)"));
    }
    let mut post = RunLengthPosterior::new(BocpdConfig {
        hazard,
        ..BocpdConfig::default()
    });
    let mut out = Vec::with_capacity(2 * xs.len());
    for x in xs {
        let score = post.update(x).map_err(js)?;
        let mean_run: f64 = post.probs().iter().enumerate().map(|(r, p)| r as f64 * p).sum();
        out.extend([score, mean_run]);
    }
    Ok(out)
}

/// Drives an untrained tracker (initialized from `seed`) with one feature
/// pattern up to `switch_at` and another after it.
///
/// Layout: per step `update_norm, mean step size, switch probability`.
#[wasm_bindgen]
pub fn tracker_response(seed: u32, steps: u32, switch_at: u32, contrast: f64) -> Result<Vec<f64>, JsError> {
    let cfg = UatomConfig::default();
    let dim = cfg.feat_dim;
    let model = Uatom::new(cfg, seed.into()).map_err(js)?;
    let mut s = model.initial_state();
    let mut out = Vec::with_capacity(3 * steps as usize);
    for t in 0..steps {
        let phase = if t < switch_at { 0.0 } else { contrast };
        let z: Vec<f64> = (0..dim)
            .map(|i| (0.3 * t as f64 + i as f64).sin() * 0.2 + phase * ((i % 3) as f64 - 1.0))
            .collect();
        let trace = model.step(&mut s, &z, [0.0, 0.0]).map_err(js)?;
        let mean_delta = trace.delta.iter().sum::<f64>() / trace.delta.len() as f64;
        let p = 1.0 / (1.0 + (-trace.heads.switch_logit).exp());
        out.extend([trace.update_norm, mean_delta, p]);
    }
    Ok(out)
}
