//! Stochastic policies and episode rollouts.
//!
//! All learned methods share one policy class: affine maps from a fixed
//! feature vector to three heads (camera direction `u`, camera step size,
//! end-effector displacement), each perturbed by fixed Gaussian
//! exploration noise. Methods differ only in how `u` becomes a camera
//! direction.

use std::f64::consts::PI;

use davs_core::sphere::{exp_map, local_frame};
use davs_core::{
    build_davs, sample_direction, tangent_frame, DavsConfig, DavsError, SoiKeypointSet,
    TangentFrame, TangentVector, Vec3,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::EnvConfig;
use crate::env::{
    apparent_loop_area, camera_position, visible_ring_count, ActionPair, CameraAction,
    DoneReason, EnvError, EpisodeLog, IpEnv, Observation,
};

pub const FEATURE_NAMES: [&str; 10] = [
    "pitch",
    "yaw",
    "ee_x",
    "ee_y",
    "ee_z",
    "a_rigid",
    "ring_fraction",
    "bearing_cos",
    "bearing_sin",
    "bias",
];
pub const N_FEATURES: usize = FEATURE_NAMES.len();
/// Direction, step and three end-effector heads.
pub const N_PARAMS: usize = N_FEATURES * 5;

/// Camera sub-action strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Method {
    /// Direction drawn inside the exploration cone of the active vision space.
    Davs { omega: f64 },
    /// Direction drawn over the whole tangent circle.
    NoDavs,
    /// Greedy visual servoing; ignores learned parameters.
    Vs,
    /// Camera held still.
    Static,
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::Davs { omega } => format!("davs-w{omega}"),
            Method::NoDavs => "no-davs".into(),
            Method::Vs => "vs".into(),
            Method::Static => "static".into(),
        }
    }

    pub fn is_learned(&self) -> bool {
        !matches!(self, Method::Vs)
    }
}

/// Exploration noise shared by every learned method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    /// Standard deviation of the direction head, in units of `u`.
    pub sigma_direction: f64,
    /// Standard deviation of the step-size head before squashing.
    pub sigma_step: f64,
    /// Standard deviation of the end-effector heads before squashing.
    pub sigma_ee: f64,
    /// Probed directions for visual servoing.
    pub vs_probes: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            sigma_direction: 0.45,
            sigma_step: 0.5,
            sigma_ee: 0.5,
            vs_probes: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub theta: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros() -> Self {
        Self {
            theta: vec![0.0; N_PARAMS],
        }
    }

    pub fn from_slice(theta: &[f64]) -> Self {
        assert_eq!(theta.len(), N_PARAMS, "parameter vector length");
        Self {
            theta: theta.to_vec(),
        }
    }

    fn head(&self, k: usize) -> &[f64] {
        &self.theta[k * N_FEATURES..(k + 1) * N_FEATURES]
    }

    pub fn direction_weights(&self) -> &[f64] {
        self.head(0)
    }

    pub fn step_weights(&self) -> &[f64] {
        self.head(1)
    }

    pub fn ee_weights(&self, axis: usize) -> &[f64] {
        self.head(2 + axis)
    }
}

fn dot(w: &[f64], f: &[f64; N_FEATURES]) -> f64 {
    w.iter().zip(f).map(|(a, b)| a * b).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn normalize_range(v: f64, lo: f64, hi: f64) -> f64 {
    2.0 * (v - lo) / (hi - lo) - 1.0
}

/// Bearing of the keypoint centroid from the camera, in the camera's
/// local east/north frame.
pub fn centroid_bearing(obs: &Observation, cfg: &EnvConfig) -> (f64, f64) {
    let center = Vec3::from(cfg.center);
    let mean: Vec3 = obs
        .keypoints
        .iter()
        .map(|k| (k - center).normalize())
        .sum();
    let u = obs.camera.unit();
    let tangent = mean - u * mean.dot(&u);
    if tangent.norm() < 1e-12 {
        return (0.0, 0.0);
    }
    let (east, north) = local_frame(&u);
    let t = tangent.normalize();
    (t.dot(&east), t.dot(&north))
}

pub fn features(obs: &Observation, cfg: &EnvConfig) -> [f64; N_FEATURES] {
    let c = &cfg.camera;
    let (lo, hi) = (&cfg.ee.box_min, &cfg.ee.box_max);
    let (bc, bs) = centroid_bearing(obs, cfg);
    [
        normalize_range(obs.pitch, c.pitch_min_deg.to_radians(), c.pitch_max_deg.to_radians()),
        normalize_range(obs.yaw, c.yaw_min_deg.to_radians(), c.yaw_max_deg.to_radians()),
        normalize_range(obs.ee.x, lo[0], hi[0]),
        normalize_range(obs.ee.y, lo[1], hi[1]),
        normalize_range(obs.ee.z, lo[2], hi[2]),
        obs.a_rigid,
        obs.n_ring as f64 / cfg.bag.vertices as f64,
        bc,
        bs,
        1.0,
    ]
}

/// Raw head outputs for one step, noise included.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicySample {
    /// Unsquashed direction variable; methods map it into their own range.
    pub u: f64,
    pub step: f64,
    pub ee: Vec3,
}

pub fn sample_policy(
    params: &PolicyParams,
    obs: &Observation,
    env_cfg: &EnvConfig,
    pcfg: &PolicyConfig,
    rng: &mut ChaCha8Rng,
) -> PolicySample {
    let f = features(obs, env_cfg);
    let mut noise = || -> f64 { StandardNormal.sample(rng) };
    let u = sigmoid(dot(params.direction_weights(), &f)) + pcfg.sigma_direction * noise();
    let step = env_cfg.camera.max_step_rad
        * sigmoid(dot(params.step_weights(), &f) + pcfg.sigma_step * noise());
    let mut ee = Vec3::zeros();
    for axis in 0..3 {
        ee[axis] = env_cfg.ee.max_step
            * (dot(params.ee_weights(axis), &f) + pcfg.sigma_ee * noise()).tanh();
    }
    PolicySample { u, step, ee }
}

/// Direction `2 pi u` measured from local east toward local north.
pub fn unconstrained_direction(obs: &Observation, u: f64) -> Vec3 {
    let (east, north) = local_frame(&obs.camera.unit());
    let a = 2.0 * PI * u.rem_euclid(1.0);
    east * a.cos() + north * a.sin()
}

/// Active vision space frame at the observation's camera pose.
pub fn davs_frame(obs: &Observation, cfg: &EnvConfig) -> Result<TangentFrame, DavsError> {
    let kps = SoiKeypointSet::new(obs.keypoints.clone(), obs.t as u64);
    let m = build_davs(&kps, &obs.camera, &cfg.chart(), &DavsConfig::default())?;
    tangent_frame(&m)
}

/// Greedy visual servoing: probe tangent directions and move toward the
/// one that most increases the visible ring count, breaking ties by the
/// apparent loop area. Opens the bag at a fixed rate until the opening
/// separation is reached.
pub fn visual_servoing_policy(obs: &Observation, cfg: &EnvConfig, pcfg: &PolicyConfig) -> ActionPair {
    let center = Vec3::from(cfg.center);
    let fov = cfg.camera.fov_half_angle_deg.to_radians();
    let disk = cfg.obstacle_disk().map(crate::env::Disk::from_config);
    let score = |cam: &Vec3| {
        (
            visible_ring_count(&obs.keypoints, cam, &center, fov, disk.as_ref()),
            apparent_loop_area(&obs.keypoints, cam),
        )
    };
    let here = score(&obs.camera.position());
    let step = cfg.camera.max_step_rad;
    let (east, north) = local_frame(&obs.camera.unit());
    let c = &cfg.camera;
    let mut best: Option<((usize, f64), Vec3)> = None;
    for k in 0..pcfg.vs_probes {
        let a = 2.0 * PI * k as f64 / pcfg.vs_probes as f64;
        let dir = east * a.cos() + north * a.sin();
        let moved = exp_map(&TangentVector::project(obs.camera, dir * step * cfg.radius));
        let (elev, azim) = moved.angles();
        let pitch = (-elev).clamp(c.pitch_min_deg.to_radians(), c.pitch_max_deg.to_radians());
        let yaw = azim.clamp(c.yaw_min_deg.to_radians(), c.yaw_max_deg.to_radians());
        let s = score(&camera_position(cfg, pitch, yaw));
        if s > here && best.as_ref().is_none_or(|(b, _)| s > *b) {
            best = Some((s, dir));
        }
    }
    let camera = match best {
        Some((_, dir)) => CameraAction {
            direction: dir,
            step,
        },
        None => CameraAction::hold(),
    };

    let fixed = Vec3::from(cfg.bag.fixed_handle);
    let span = obs.ee - fixed;
    let ee = if span.norm() < cfg.bag.open_separation && span.norm() > 1e-12 {
        let remaining = cfg.bag.open_separation - span.norm();
        span.normalize() * remaining.min(cfg.ee.max_step)
    } else {
        Vec3::zeros()
    };
    ActionPair { camera, ee }
}

/// One environment step as seen by the agent.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub prev: Observation,
    pub action: ActionPair,
    pub next: Observation,
    pub reward: f64,
    /// Exploration weight when the camera action was drawn from the cone.
    pub omega: Option<f64>,
    /// The active vision space could not be built at this step.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub method: Method,
    pub seed: u64,
    pub length: usize,
    pub discounted_return: f64,
    pub total_reward: f64,
    pub success: bool,
    pub done_reason: DoneReason,
    pub fallback_steps: usize,
    /// Kept only when requested.
    pub transitions: Vec<Transition>,
    pub log: EpisodeLog,
}

impl RolloutRecord {
    /// Discounted return recomputed from the stored transitions.
    pub fn recomputed_return(&self, gamma: f64) -> f64 {
        let mut acc = 0.0;
        let mut g = 1.0;
        for t in &self.transitions {
            acc += g * t.reward;
            g *= gamma;
        }
        acc
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RolloutOptions {
    pub keep_transitions: bool,
    pub keep_log: bool,
}

fn policy_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Run one episode of `method` from a reset with `seed`.
pub fn rollout(
    env_cfg: &EnvConfig,
    pcfg: &PolicyConfig,
    method: Method,
    params: &PolicyParams,
    seed: u64,
    opts: RolloutOptions,
) -> Result<RolloutRecord, EnvError> {
    let (mut env, mut obs) = IpEnv::new(env_cfg.clone(), seed)?;
    let mut rng = policy_rng(seed);
    let gamma = env_cfg.reward.gamma;
    let mut record = RolloutRecord {
        method,
        seed,
        length: 0,
        discounted_return: 0.0,
        total_reward: 0.0,
        success: false,
        done_reason: DoneReason::Timeout,
        fallback_steps: 0,
        transitions: Vec::new(),
        log: EpisodeLog::default(),
    };
    let mut discount = 1.0;
    loop {
        let (action, omega, fallback) = choose_action(env_cfg, pcfg, method, params, &obs, &mut rng);
        let result = env.step(&action)?;
        record.fallback_steps += fallback as usize;
        record.length += 1;
        record.total_reward += result.reward;
        record.discounted_return += discount * result.reward;
        discount *= gamma;
        if opts.keep_log {
            record.log.push(&result);
        }
        if opts.keep_transitions {
            record.transitions.push(Transition {
                prev: obs.clone(),
                action,
                next: result.observation.clone(),
                reward: result.reward,
                omega,
                fallback,
            });
        }
        obs = result.observation;
        if let Some(reason) = result.done_reason {
            record.done_reason = reason;
            record.success = reason == DoneReason::Success;
            break;
        }
    }
    Ok(record)
}

fn choose_action(
    env_cfg: &EnvConfig,
    pcfg: &PolicyConfig,
    method: Method,
    params: &PolicyParams,
    obs: &Observation,
    rng: &mut ChaCha8Rng,
) -> (ActionPair, Option<f64>, bool) {
    if method == Method::Vs {
        return (visual_servoing_policy(obs, env_cfg, pcfg), None, false);
    }
    let s = sample_policy(params, obs, env_cfg, pcfg, rng);
    let (camera, omega, fallback) = match method {
        Method::Static => (CameraAction::hold(), None, false),
        Method::NoDavs => (
            CameraAction {
                direction: unconstrained_direction(obs, s.u),
                step: s.step,
            },
            None,
            false,
        ),
        Method::Davs { omega } => match davs_frame(obs, env_cfg) {
            Ok(frame) => (
                CameraAction {
                    direction: sample_direction(&frame, omega, s.u.clamp(0.0, 1.0)).direction(),
                    step: s.step,
                },
                Some(omega),
                false,
            ),
            Err(e) => {
                log::debug!("step {}: active vision space unavailable ({e}); unconstrained", obs.t);
                (
                    CameraAction {
                        direction: unconstrained_direction(obs, s.u),
                        step: s.step,
                    },
                    None,
                    true,
                )
            }
        },
        Method::Vs => unreachable!(),
    };
    (ActionPair { camera, ee: s.ee }, omega, fallback)
}

/// Outcome of checking logged camera actions against their cones.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReplayReport {
    pub steps: usize,
    pub constrained: usize,
    pub inside: usize,
    pub fallback: usize,
    /// Steps with no camera motion, trivially feasible.
    pub held: usize,
}

impl ReplayReport {
    pub fn merge(&mut self, other: &ReplayReport) {
        self.steps += other.steps;
        self.constrained += other.constrained;
        self.inside += other.inside;
        self.fallback += other.fallback;
        self.held += other.held;
    }

    pub fn all_inside(&self) -> bool {
        self.inside == self.constrained
    }

    pub fn fallback_fraction(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.fallback as f64 / self.steps as f64
        }
    }
}

/// Rebuild the active vision space from each logged observation and check
/// that the logged camera direction lies in its cone.
pub fn replay_validate(record: &RolloutRecord, env_cfg: &EnvConfig, tol: f64) -> ReplayReport {
    let mut rep = ReplayReport::default();
    for tr in &record.transitions {
        rep.steps += 1;
        if tr.fallback {
            rep.fallback += 1;
            continue;
        }
        let Some(omega) = tr.omega else { continue };
        if tr.action.camera.step == 0.0 {
            rep.held += 1;
        }
        rep.constrained += 1;
        if let Ok(frame) = davs_frame(&tr.prev, env_cfg) {
            if frame.cone_contains(&tr.action.camera.direction, omega, tol) {
                rep.inside += 1;
            }
        }
    }
    rep
}
