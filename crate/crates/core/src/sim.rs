//! Seeded shared-workspace simulator.
//!
//! Two point end-effectors share a `width x depth` planar workspace with one
//! graspable object. The ego runs a pick-and-place loop; the partner follows
//! one of four scripted behavior types and switches type exactly once, at a
//! step drawn uniformly from `[switch_lo, switch_hi]`.
//!
//! Observation layout (20 entries):
//!
//! | index | field |
//! |-------|-------|
//! | 0-1   | ego position |
//! | 2-3   | ego velocity |
//! | 4-5   | partner position |
//! | 6-7   | partner velocity |
//! | 8-9   | object position |
//! | 10-11 | partner minus ego |
//! | 12-13 | object minus ego |
//! | 14    | ego-partner distance |
//! | 15-16 | unit direction ego to partner |
//! | 17    | object held by ego (0/1) |
//! | 18    | object held by partner (0/1) |
//! | 19    | ego-target distance |

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detector::{Detector, Diagnostics, EpisodeContext, Trigger};
use crate::error::{Error, Result};
use crate::linalg::Vec2;

pub const OBS_DIM: usize = 20;
pub const LOG_SCHEMA_VERSION: u32 = 1;

pub const OBS_LAYOUT: [&str; OBS_DIM] = [
    "ego_x",
    "ego_y",
    "ego_vx",
    "ego_vy",
    "partner_x",
    "partner_y",
    "partner_vx",
    "partner_vy",
    "object_x",
    "object_y",
    "rel_partner_x",
    "rel_partner_y",
    "rel_object_x",
    "rel_object_y",
    "distance",
    "dir_x",
    "dir_y",
    "ego_holds",
    "partner_holds",
    "target_distance",
];

pub mod idx {
    pub const EGO_POS: usize = 0;
    pub const EGO_VEL: usize = 2;
    pub const PARTNER_POS: usize = 4;
    pub const PARTNER_VEL: usize = 6;
    pub const OBJECT_POS: usize = 8;
    pub const REL_PARTNER: usize = 10;
    pub const REL_OBJECT: usize = 12;
    pub const DISTANCE: usize = 14;
    pub const DIRECTION: usize = 15;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkspaceConfig {
    pub width: f64,
    pub depth: f64,
    pub collision_dist: f64,
    pub close_range_dist: f64,
    pub episode_len: usize,
    pub switch_lo: usize,
    pub switch_hi: usize,
    pub dt: f64,
    pub v_max: f64,
    pub jitter_eps: f64,
    pub grasp_eps: f64,
    /// Per-axis Gaussian velocity noise of the active partner types.
    pub motion_noise: f64,
}

impl Default for WorkspaceConfig {
    fn default() -> Self {
        Self {
            width: 0.6,
            depth: 0.4,
            collision_dist: 0.10,
            close_range_dist: 0.15,
            episode_len: 200,
            switch_lo: 30,
            switch_hi: 100,
            dt: 0.05,
            v_max: 0.3,
            jitter_eps: 0.005,
            grasp_eps: 0.03,
            motion_noise: 0.01,
        }
    }
}

impl WorkspaceConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.width > 0.0 && self.depth > 0.0) {
            return bad("width and depth must be positive");
        }
        if !(0.0 < self.collision_dist && self.collision_dist < self.close_range_dist) {
            return bad("need 0 < collision_dist < close_range_dist");
        }
        if !(self.switch_lo < self.switch_hi && self.switch_hi < self.episode_len) {
            return bad("need switch_lo < switch_hi < episode_len");
        }
        if !(self.dt > 0.0 && self.v_max > 0.0 && self.grasp_eps > 0.0) {
            return bad("dt, v_max and grasp_eps must be positive");
        }
        if !(self.jitter_eps >= 0.0 && self.motion_noise >= 0.0) {
            return bad("noise levels must be nonnegative");
        }
        Ok(())
    }

    fn clamp(&self, p: Vec2) -> Vec2 {
        Vec2::new(p.x.clamp(0.0, self.width), p.y.clamp(0.0, self.depth))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PartnerType {
    Helper,
    Competitor,
    Blocker,
    Passive,
}

impl PartnerType {
    pub const ALL: [PartnerType; 4] = [
        PartnerType::Helper,
        PartnerType::Competitor,
        PartnerType::Blocker,
        PartnerType::Passive,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn is_adversarial(self) -> bool {
        matches!(self, PartnerType::Blocker | PartnerType::Competitor)
    }

    pub fn short(self) -> &'static str {
        match self {
            PartnerType::Helper => "Help",
            PartnerType::Competitor => "Comp",
            PartnerType::Blocker => "Block",
            PartnerType::Passive => "Pass",
        }
    }
}

impl std::fmt::Display for PartnerType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::str::FromStr for PartnerType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "helper" | "help" => Ok(PartnerType::Helper),
            "competitor" | "comp" => Ok(PartnerType::Competitor),
            "blocker" | "block" => Ok(PartnerType::Blocker),
            "passive" | "pass" => Ok(PartnerType::Passive),
            other => Err(Error::InvalidInput(format!("unknown partner type {other:?}"))),
        }
    }
}

/// Ordered pair of distinct partner types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Transition {
    pub from: PartnerType,
    pub to: PartnerType,
}

impl Transition {
    pub fn new(from: PartnerType, to: PartnerType) -> Result<Self> {
        if from == to {
            return Err(Error::InvalidInput(format!(
                "transition must change type, got {from} -> {to}"
            )));
        }
        Ok(Self { from, to })
    }

    /// The 12 ordered non-identical pairs, in a fixed order.
    pub fn all() -> Vec<Transition> {
        let mut v = Vec::with_capacity(12);
        for from in PartnerType::ALL {
            for to in PartnerType::ALL {
                if from != to {
                    v.push(Transition { from, to });
                }
            }
        }
        v
    }

    pub fn type_at(&self, t: usize, t_switch: usize) -> PartnerType {
        if t < t_switch {
            self.from
        } else {
            self.to
        }
    }

    pub fn label(&self) -> String {
        format!("{}->{}", self.from.short(), self.to.short())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Holder {
    None,
    Ego,
    Partner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Grip {
    None,
    Grasp,
    Release,
    /// Task completed with the held object; a new object appears.
    Score,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub vel: Vec2,
    pub grip: Grip,
}

impl Command {
    pub fn idle() -> Self {
        Self {
            vel: Vec2::ZERO,
            grip: Grip::None,
        }
    }
}

/// Fixed landmarks derived from the workspace extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmarks {
    pub target: Vec2,
    pub ego_home: Vec2,
    pub partner_home: Vec2,
    pub handoff: Vec2,
    pub spawn_lo: Vec2,
    pub spawn_hi: Vec2,
    /// Competitor scores once this far from the ego while holding the object.
    pub score_dist: f64,
    /// Distance the helper keeps from the ego while yielding.
    pub yield_dist: f64,
}

impl Landmarks {
    pub fn new(cfg: &WorkspaceConfig) -> Self {
        let (w, d) = (cfg.width, cfg.depth);
        Self {
            target: Vec2::new(0.13 * w, 0.2 * d),
            ego_home: Vec2::new(0.13 * w, 0.8 * d),
            partner_home: Vec2::new(0.87 * w, 0.5 * d),
            handoff: Vec2::new(0.3 * w, 0.35 * d),
            spawn_lo: Vec2::new(0.37 * w, 0.15 * d),
            spawn_hi: Vec2::new(0.7 * w, 0.85 * d),
            score_dist: 0.5 * w,
            yield_dist: 0.5 * w,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub ego_pos: Vec2,
    pub ego_vel: Vec2,
    pub partner_pos: Vec2,
    pub partner_vel: Vec2,
    pub object_pos: Vec2,
    pub object_held_by: Holder,
    pub target_pos: Vec2,
    pub t: usize,
    /// Seed and counter for deterministic object respawns.
    pub spawn_seed: u64,
    pub spawn_count: u64,
}

impl WorldState {
    pub fn initial(cfg: &WorkspaceConfig, rng: &mut impl Rng) -> Self {
        let lm = Landmarks::new(cfg);
        let jitter = |rng: &mut dyn rand::RngCore, s: f64| {
            Vec2::new(rng.random_range(-s..=s), rng.random_range(-s..=s))
        };
        let ego_pos = cfg.clamp(lm.ego_home + jitter(rng, 0.02));
        let partner_pos = cfg.clamp(lm.partner_home + jitter(rng, 0.04));
        let spawn_seed: u64 = rng.random();
        let mut s = Self {
            ego_pos,
            ego_vel: Vec2::ZERO,
            partner_pos,
            partner_vel: Vec2::ZERO,
            object_pos: Vec2::ZERO,
            object_held_by: Holder::None,
            target_pos: lm.target,
            t: 0,
            spawn_seed,
            spawn_count: 0,
        };
        s.object_pos = s.spawn_position(cfg);
        s
    }

    fn spawn_position(&self, cfg: &WorkspaceConfig) -> Vec2 {
        let lm = Landmarks::new(cfg);
        let mut r = ChaCha8Rng::seed_from_u64(
            self.spawn_seed ^ self.spawn_count.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        Vec2::new(
            r.random_range(lm.spawn_lo.x..=lm.spawn_hi.x),
            r.random_range(lm.spawn_lo.y..=lm.spawn_hi.y),
        )
    }

    pub fn distance(&self) -> f64 {
        (self.partner_pos - self.ego_pos).norm()
    }

    pub fn in_bounds(&self, cfg: &WorkspaceConfig) -> bool {
        [self.ego_pos, self.partner_pos, self.object_pos]
            .iter()
            .all(|p| p.x >= 0.0 && p.x <= cfg.width && p.y >= 0.0 && p.y <= cfg.depth)
    }
}

/// Fixed-length observation vector; see the module docs for the layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn from_state(s: &WorldState) -> Self {
        let rel_p = s.partner_pos - s.ego_pos;
        let rel_o = s.object_pos - s.ego_pos;
        let dist = rel_p.norm();
        let dir = rel_p.unit();
        Observation(vec![
            s.ego_pos.x,
            s.ego_pos.y,
            s.ego_vel.x,
            s.ego_vel.y,
            s.partner_pos.x,
            s.partner_pos.y,
            s.partner_vel.x,
            s.partner_vel.y,
            s.object_pos.x,
            s.object_pos.y,
            rel_p.x,
            rel_p.y,
            rel_o.x,
            rel_o.y,
            dist,
            dir.x,
            dir.y,
            f64::from(u8::from(s.object_held_by == Holder::Ego)),
            f64::from(u8::from(s.object_held_by == Holder::Partner)),
            (s.target_pos - s.ego_pos).norm(),
        ])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn partner_pos(&self) -> Vec2 {
        Vec2::new(self.0[idx::PARTNER_POS], self.0[idx::PARTNER_POS + 1])
    }

    pub fn partner_vel(&self) -> Vec2 {
        Vec2::new(self.0[idx::PARTNER_VEL], self.0[idx::PARTNER_VEL + 1])
    }

    pub fn distance(&self) -> f64 {
        self.0[idx::DISTANCE]
    }
}

fn toward(from: Vec2, goal: Vec2, speed: f64, dt: f64) -> Vec2 {
    let d = goal - from;
    d.unit() * speed.min(d.norm() / dt)
}

/// Scripted partner behavior for one step.
pub fn partner_policy(
    state: &WorldState,
    ty: PartnerType,
    rng: &mut impl Rng,
    cfg: &WorkspaceConfig,
) -> Command {
    let lm = Landmarks::new(cfg);
    let pos = state.partner_pos;
    let holds = state.object_held_by == Holder::Partner;
    let slow = 0.5 * cfg.v_max;

    if ty == PartnerType::Passive {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let mag = rng.random_range(0.0..=cfg.jitter_eps);
        return Command {
            vel: Vec2::new(angle.cos(), angle.sin()) * mag,
            grip: if holds { Grip::Release } else { Grip::None },
        };
    }

    let mut cmd = match ty {
        PartnerType::Blocker => {
            let mid = (state.ego_pos + state.target_pos) * 0.5;
            Command {
                vel: toward(pos, mid, cfg.v_max, cfg.dt),
                grip: if holds { Grip::Release } else { Grip::None },
            }
        }
        PartnerType::Competitor => {
            if holds {
                let mut away = (pos - state.ego_pos).unit();
                if away == Vec2::ZERO {
                    away = (lm.partner_home - pos).unit();
                }
                let far = (pos - state.ego_pos).norm() >= lm.score_dist;
                Command {
                    vel: away * cfg.v_max,
                    grip: if far { Grip::Score } else { Grip::None },
                }
            } else {
                Command {
                    vel: toward(pos, state.object_pos, cfg.v_max, cfg.dt),
                    grip: Grip::Grasp,
                }
            }
        }
        PartnerType::Helper => {
            let object_free = state.object_held_by == Holder::None;
            if holds {
                let at_handoff = (pos - lm.handoff).norm() < cfg.grasp_eps;
                Command {
                    vel: toward(pos, lm.handoff, slow, cfg.dt),
                    grip: if at_handoff { Grip::Release } else { Grip::None },
                }
            } else if object_free && (state.object_pos - lm.handoff).norm() > 0.1 {
                Command {
                    vel: toward(pos, state.object_pos, slow, cfg.dt),
                    grip: Grip::Grasp,
                }
            } else {
                let mut away = (pos - state.ego_pos).unit();
                if away == Vec2::ZERO {
                    away = (lm.partner_home - pos).unit();
                }
                let goal = cfg.clamp(state.ego_pos + away * lm.yield_dist);
                Command {
                    vel: toward(pos, goal, slow, cfg.dt),
                    grip: Grip::None,
                }
            }
        }
        PartnerType::Passive => unreachable!(),
    };

    if cfg.motion_noise > 0.0 {
        let n = Normal::new(0.0, cfg.motion_noise).expect("finite noise");
        cmd.vel = (cmd.vel + Vec2::new(n.sample(rng), n.sample(rng))).cap(cfg.v_max);
    } else {
        cmd.vel = cmd.vel.cap(cfg.v_max);
    }
    cmd
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Adaptation {
    /// Waypoint command plus a repulsive term whose gain decays smoothly
    /// with distance.
    Blend,
    /// Discrete strategy swap: abandon the task and retreat to the home pose.
    HardSwitch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EgoConfig {
    pub adaptation: Adaptation,
    /// Distance at which the repulsive term equals `v_max`.
    pub clearance: f64,
    /// Length scale of the exponential repulsion.
    pub softness: f64,
    /// Acceleration bound of the waypoint follower in m/s^2; zero disables it.
    pub accel: f64,
}

impl Default for EgoConfig {
    fn default() -> Self {
        Self {
            adaptation: Adaptation::Blend,
            clearance: 0.17,
            softness: 0.04,
            accel: 3.0,
        }
    }
}

/// Velocity toward `goal` that can still stop there under `accel`, then
/// limited to an `accel * dt` change from `vel`.
fn approach(pos: Vec2, vel: Vec2, goal: Vec2, cfg: &WorkspaceConfig, accel: f64) -> Vec2 {
    if accel <= 0.0 {
        return toward(pos, goal, cfg.v_max, cfg.dt);
    }
    let d = (goal - pos).norm();
    let want = toward(pos, goal, cfg.v_max.min((2.0 * accel * d).sqrt()), cfg.dt);
    vel + (want - vel).cap(accel * cfg.dt)
}

fn waypoint_command(state: &WorldState, cfg: &WorkspaceConfig, ego: &EgoConfig) -> Command {
    let lm = Landmarks::new(cfg);
    let go = |goal: Vec2| approach(state.ego_pos, state.ego_vel, goal, cfg, ego.accel);
    match state.object_held_by {
        Holder::Ego => {
            let at_target = (state.ego_pos - state.target_pos).norm() < cfg.grasp_eps;
            Command {
                vel: go(state.target_pos),
                grip: if at_target { Grip::Score } else { Grip::None },
            }
        }
        Holder::Partner => Command {
            vel: go(lm.ego_home),
            grip: Grip::None,
        },
        Holder::None => Command {
            vel: go(state.object_pos),
            grip: Grip::Grasp,
        },
    }
}

/// Ego pick-and-place controller with detection-gated avoidance.
pub fn ego_policy(
    state: &WorldState,
    belief: Option<PartnerType>,
    detected: bool,
    cfg: &WorkspaceConfig,
    ego: &EgoConfig,
) -> Command {
    let base = waypoint_command(state, cfg, ego);
    let adversarial = detected && belief.is_some_and(PartnerType::is_adversarial);
    if !adversarial {
        return base;
    }
    match ego.adaptation {
        Adaptation::Blend => {
            let away = state.ego_pos - state.partner_pos;
            let d = away.norm();
            let gain = cfg.v_max * (-(d - ego.clearance) / ego.softness).exp();
            let dir = if d < 1e-12 {
                (state.ego_pos - Landmarks::new(cfg).partner_home).unit()
            } else {
                away * (1.0 / d)
            };
            Command {
                vel: (base.vel + dir * gain).cap(cfg.v_max),
                grip: base.grip,
            }
        }
        Adaptation::HardSwitch => {
            let lm = Landmarks::new(cfg);
            Command {
                vel: toward(state.ego_pos, lm.ego_home, cfg.v_max, cfg.dt),
                grip: Grip::None,
            }
        }
    }
}

/// Kinematic integration with clamping and grasp resolution.
pub fn step(
    state: &WorldState,
    ego_cmd: &Command,
    partner_cmd: &Command,
    cfg: &WorkspaceConfig,
) -> WorldState {
    let mut s = state.clone();
    s.ego_pos = cfg.clamp(state.ego_pos + ego_cmd.vel * cfg.dt);
    s.partner_pos = cfg.clamp(state.partner_pos + partner_cmd.vel * cfg.dt);
    s.ego_vel = (s.ego_pos - state.ego_pos) * (1.0 / cfg.dt);
    s.partner_vel = (s.partner_pos - state.partner_pos) * (1.0 / cfg.dt);

    match s.object_held_by {
        Holder::Ego => s.object_pos = s.ego_pos,
        Holder::Partner => s.object_pos = s.partner_pos,
        Holder::None => {}
    }

    let holder_grip = match s.object_held_by {
        Holder::Ego => Some(ego_cmd.grip),
        Holder::Partner => Some(partner_cmd.grip),
        Holder::None => None,
    };
    match holder_grip {
        Some(Grip::Release) => s.object_held_by = Holder::None,
        Some(Grip::Score) => {
            s.object_held_by = Holder::None;
            s.spawn_count += 1;
            s.object_pos = s.spawn_position(cfg);
        }
        _ => {}
    }

    if s.object_held_by == Holder::None {
        let near = |p: Vec2| (p - s.object_pos).norm() < cfg.grasp_eps;
        if ego_cmd.grip == Grip::Grasp && near(s.ego_pos) {
            s.object_held_by = Holder::Ego;
            s.object_pos = s.ego_pos;
        } else if partner_cmd.grip == Grip::Grasp && near(s.partner_pos) {
            s.object_held_by = Holder::Partner;
            s.object_pos = s.partner_pos;
        }
    }
    s.t += 1;
    s
}

/// Post-switch safety counters: `(collisions_post, crt_post)`.
///
/// A collision is one maximal run of `dist < collision_dist`; only runs that
/// start at or after `t_switch` count. CRT counts post-switch steps with
/// `dist < close_range_dist`.
pub fn safety_accounting(
    distances: &[f64],
    t_switch: usize,
    cfg: &WorkspaceConfig,
) -> (usize, usize) {
    let crt = distances
        .iter()
        .skip(t_switch)
        .filter(|&&d| d < cfg.close_range_dist)
        .count();
    let collisions = collision_run_starts(distances, cfg.collision_dist)
        .into_iter()
        .filter(|&s| s >= t_switch)
        .count();
    (collisions, crt)
}

/// Start steps of maximal runs below `threshold`.
pub fn collision_run_starts(distances: &[f64], threshold: f64) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut inside = false;
    for (t, &d) in distances.iter().enumerate() {
        let below = d < threshold;
        if below && !inside {
            starts.push(t);
        }
        inside = below;
    }
    starts
}

/// Draw the switch step for an episode seed (same draw `run_episode` uses).
pub fn draw_switch_time(seed: u64, cfg: &WorkspaceConfig) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.random_range(cfg.switch_lo..=cfg.switch_hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub seed: u64,
    pub transition: Transition,
    pub t_switch: usize,
    pub detector: Option<String>,
    pub trigger: Option<Trigger>,
    pub observations: Vec<Observation>,
    pub co_agent_actions: Vec<[f64; 2]>,
    pub distances: Vec<f64>,
    pub switch_probs: Vec<f64>,
    pub type_probs: Vec<[f64; 4]>,
    pub diagnostics: Vec<Diagnostics>,
    /// Hard-detection events `(step, switch_prob)`.
    pub detections: Vec<(usize, f64)>,
    pub collisions_post: usize,
    pub crt_post: usize,
    pub collisions_total: usize,
}

impl EpisodeLog {
    pub fn partner_type(&self, t: usize) -> PartnerType {
        self.transition.type_at(t, self.t_switch)
    }

    /// Realized partner velocity per step (finite difference of position).
    pub fn observed_partner_actions(&self) -> Vec<[f64; 2]> {
        self.observations
            .iter()
            .map(|o| o.partner_vel().to_array())
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LogHeader {
    kind: String,
    schema: u32,
    layout: Vec<String>,
    cfg: WorkspaceConfig,
    seed: u64,
    transition: Transition,
    t_switch: usize,
    detector: Option<String>,
    trigger: Option<Trigger>,
    detections: Vec<(usize, f64)>,
    collisions_post: usize,
    crt_post: usize,
    collisions_total: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LogStep {
    kind: String,
    t: usize,
    obs: Vec<f64>,
    co_agent_action: [f64; 2],
    distance: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    switch_prob: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    type_probs: Option<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    diagnostics: Option<Diagnostics>,
}

impl EpisodeLog {
    /// Line-delimited JSON: one header record, then one record per step.
    pub fn write_jsonl(&self, cfg: &WorkspaceConfig, mut w: impl Write) -> Result<()> {
        let header = LogHeader {
            kind: "header".into(),
            schema: LOG_SCHEMA_VERSION,
            layout: OBS_LAYOUT.iter().map(|s| s.to_string()).collect(),
            cfg: cfg.clone(),
            seed: self.seed,
            transition: self.transition,
            t_switch: self.t_switch,
            detector: self.detector.clone(),
            trigger: self.trigger,
            detections: self.detections.clone(),
            collisions_post: self.collisions_post,
            crt_post: self.crt_post,
            collisions_total: self.collisions_total,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for t in 0..self.observations.len() {
            let rec = LogStep {
                kind: "step".into(),
                t,
                obs: self.observations[t].0.clone(),
                co_agent_action: self.co_agent_actions[t],
                distance: self.distances[t],
                switch_prob: self.switch_probs.get(t).copied(),
                type_probs: self.type_probs.get(t).copied(),
                diagnostics: self.diagnostics.get(t).copied(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Parse every episode in a line-delimited stream (header, steps, header, ...).
    pub fn read_jsonl(r: impl BufRead) -> Result<Vec<(WorkspaceConfig, EpisodeLog)>> {
        let mut out: Vec<(WorkspaceConfig, EpisodeLog)> = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let v: serde_json::Value = serde_json::from_str(&line)?;
            match v.get("kind").and_then(|k| k.as_str()) {
                Some("header") => {
                    let h: LogHeader = serde_json::from_value(v)?;
                    if h.schema != LOG_SCHEMA_VERSION {
                        return Err(Error::Schema(h.schema));
                    }
                    out.push((
                        h.cfg,
                        EpisodeLog {
                            seed: h.seed,
                            transition: h.transition,
                            t_switch: h.t_switch,
                            detector: h.detector,
                            trigger: h.trigger,
                            observations: Vec::new(),
                            co_agent_actions: Vec::new(),
                            distances: Vec::new(),
                            switch_probs: Vec::new(),
                            type_probs: Vec::new(),
                            diagnostics: Vec::new(),
                            detections: h.detections,
                            collisions_post: h.collisions_post,
                            crt_post: h.crt_post,
                            collisions_total: h.collisions_total,
                        },
                    ));
                }
                Some("step") => {
                    let s: LogStep = serde_json::from_value(v)?;
                    let (_, log) = out.last_mut().ok_or_else(|| {
                        Error::InvalidInput("step record before any header".into())
                    })?;
                    log.observations.push(Observation(s.obs));
                    log.co_agent_actions.push(s.co_agent_action);
                    log.distances.push(s.distance);
                    if let Some(p) = s.switch_prob {
                        log.switch_probs.push(p);
                    }
                    if let Some(p) = s.type_probs {
                        log.type_probs.push(p);
                    }
                    if let Some(d) = s.diagnostics {
                        log.diagnostics.push(d);
                    }
                }
                _ => return Err(Error::InvalidInput("record without kind".into())),
            }
        }
        Ok(out)
    }
}

/// One closed-loop episode without a detector and with the default ego.
pub fn run_episode(
    transition: Transition,
    seed: u64,
    cfg: &WorkspaceConfig,
    detector: Option<&mut dyn Detector>,
) -> Result<EpisodeLog> {
    run_episode_with(transition, seed, cfg, detector, &EgoConfig::default())
}

pub fn run_episode_with(
    transition: Transition,
    seed: u64,
    cfg: &WorkspaceConfig,
    mut detector: Option<&mut dyn Detector>,
    ego: &EgoConfig,
) -> Result<EpisodeLog> {
    cfg.validate()?;
    Transition::new(transition.from, transition.to)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_switch = rng.random_range(cfg.switch_lo..=cfg.switch_hi);
    let mut state = WorldState::initial(cfg, &mut rng);
    let mut partner_rng = ChaCha8Rng::seed_from_u64(rng.random());

    let n = cfg.episode_len;
    let mut log = EpisodeLog {
        seed,
        transition,
        t_switch,
        detector: detector.as_ref().map(|d| d.name().to_string()),
        trigger: detector.as_ref().map(|d| d.trigger()),
        observations: Vec::with_capacity(n),
        co_agent_actions: Vec::with_capacity(n),
        distances: Vec::with_capacity(n),
        switch_probs: Vec::new(),
        type_probs: Vec::new(),
        diagnostics: Vec::new(),
        detections: Vec::new(),
        collisions_post: 0,
        crt_post: 0,
        collisions_total: 0,
    };

    if let Some(d) = detector.as_deref_mut() {
        d.begin_episode(&EpisodeContext {
            t_switch,
            transition,
            episode_len: n,
        });
    }

    let trigger = log.trigger.unwrap_or_default();
    let mut run = 0usize;
    let mut detected = false;
    let mut belief: Option<PartnerType> = None;

    for t in 0..n {
        let ty = transition.type_at(t, t_switch);
        let p_cmd = partner_policy(&state, ty, &mut partner_rng, cfg);
        let e_cmd = ego_policy(&state, belief, detected, cfg, ego);
        state = step(&state, &e_cmd, &p_cmd, cfg);
        let obs = Observation::from_state(&state);

        if let Some(d) = detector.as_deref_mut() {
            let out = d.observe(&obs)?;
            if !out.switch_prob.is_finite() {
                return Err(Error::NonFinite("detector switch probability"));
            }
            if out.switch_prob > trigger.threshold {
                run += 1;
                if run == trigger.debounce.max(1) {
                    detected = true;
                    log.detections.push((t, out.switch_prob));
                }
            } else {
                run = 0;
            }
            belief = Some(out.inferred_type());
            log.switch_probs.push(out.switch_prob);
            log.type_probs.push(out.type_probs);
            if let Some(diag) = out.diagnostics {
                log.diagnostics.push(diag);
            }
        }

        log.distances.push(state.distance());
        log.co_agent_actions.push(p_cmd.vel.to_array());
        log.observations.push(obs);
    }

    let (c, crt) = safety_accounting(&log.distances, t_switch, cfg);
    log.collisions_post = c;
    log.crt_post = crt;
    log.collisions_total = collision_run_starts(&log.distances, cfg.collision_dist).len();
    Ok(log)
}
