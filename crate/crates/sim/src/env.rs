//! Kinematic bag-opening environment.
//!
//! The bag opening is an elliptic loop spanned between a fixed handle and a
//! handle carried by the end-effector. Its width grows smoothly with handle
//! separation. A cube rests on the bag floor and is visible only through
//! the opening. The camera moves on the viewing sphere and always gazes at
//! the sphere centre.

use std::f64::consts::PI;
use std::io::Write;

use davs_core::{SphereChart, SpherePoint, TangentVector, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{BirthMode, DiskConfig, EnvConfig};

/// Surface samples used for rigid-object visibility.
pub const CUBE_SAMPLES: usize = 128;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("episode already terminated ({0})")]
    InvalidTransition(DoneReason),
    #[error("infeasible start: {0}")]
    InfeasibleStart(String),
    #[error("camera action is not tangent at the current pose")]
    BadCameraAction,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoneReason {
    Success,
    Timeout,
    Overstretch,
}

impl std::fmt::Display for DoneReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DoneReason::Success => "success",
            DoneReason::Timeout => "timeout",
            DoneReason::Overstretch => "overstretch",
        })
    }
}

/// Circular occluder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disk {
    pub center: Vec3,
    pub normal: Vec3,
    pub radius: f64,
}

impl Disk {
    pub fn from_config(cfg: &DiskConfig) -> Self {
        Self {
            center: Vec3::from(cfg.center),
            normal: Vec3::from(cfg.normal).normalize(),
            radius: cfg.radius,
        }
    }

    /// Whether the open segment `a -> b` passes through the disk.
    pub fn blocks(&self, a: &Vec3, b: &Vec3) -> bool {
        let da = self.normal.dot(&(a - self.center));
        let db = self.normal.dot(&(b - self.center));
        if da * db >= 0.0 {
            return false;
        }
        let t = da / (da - db);
        let hit = a + (b - a) * t;
        (hit - self.center).norm() < self.radius
    }
}

/// Geometry of the bag opening.
#[derive(Debug, Clone, PartialEq)]
pub struct BagLoop {
    pub midpoint: Vec3,
    /// Unit vector from the fixed handle to the moving handle.
    pub major_axis: Vec3,
    /// Unit vector spanning the opening width.
    pub minor_axis: Vec3,
    pub normal: Vec3,
    pub separation: f64,
    /// Opening width, zero for a closed bag.
    pub aperture: f64,
    pub vertices: Vec<Vec3>,
    pub overstretched: bool,
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Loop geometry for the given end-effector position.
pub fn bag_kinematics(cfg: &EnvConfig, ee: &Vec3) -> BagLoop {
    let b = &cfg.bag;
    let fixed = Vec3::from(b.fixed_handle);
    let span = ee - fixed;
    let separation = span.norm();
    let major = if separation > 1e-12 {
        span / separation
    } else {
        Vec3::x()
    };
    let midpoint = (fixed + ee) * 0.5;
    let frac = (separation - b.rest_separation) / (b.open_separation - b.rest_separation);
    let aperture = b.max_aperture * smoothstep(frac);

    let center = Vec3::from(cfg.center);
    let axis = (midpoint - center).normalize();
    let toward_cameras = (workspace_centroid(cfg) - midpoint).normalize();
    let leaned = axis * (1.0 - b.tilt_gain) + toward_cameras * b.tilt_gain;
    let normal = (leaned - major * leaned.dot(&major)).normalize();
    let minor = normal.cross(&major);

    let half_major = separation / 2.0;
    let half_minor = aperture.max(b.rim_gap);
    let vertices = (0..b.vertices)
        .map(|k| {
            let phi = 2.0 * PI * k as f64 / b.vertices as f64;
            midpoint + major * (half_major * phi.cos()) + minor * (half_minor * phi.sin())
        })
        .collect();
    BagLoop {
        midpoint,
        major_axis: major,
        minor_axis: minor,
        normal,
        separation,
        aperture,
        vertices,
        overstretched: separation > b.overstretch_separation,
    }
}

/// Camera position at the middle of the pitch and yaw limits.
pub fn workspace_centroid(cfg: &EnvConfig) -> Vec3 {
    let c = &cfg.camera;
    camera_position(
        cfg,
        0.5 * (c.pitch_min_deg + c.pitch_max_deg).to_radians(),
        0.5 * (c.yaw_min_deg + c.yaw_max_deg).to_radians(),
    )
}

/// Camera position for pitch (negative looks down) and yaw, radians.
pub fn camera_position(cfg: &EnvConfig, pitch: f64, yaw: f64) -> Vec3 {
    let elev = -pitch;
    Vec3::from(cfg.center)
        + Vec3::new(elev.cos() * yaw.cos(), elev.cos() * yaw.sin(), elev.sin()) * cfg.radius
}

/// Deterministic, roughly uniform points on the surface of a unit cube.
pub fn cube_surface_samples() -> Vec<Vec3> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..CUBE_SAMPLES)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / CUBE_SAMPLES as f64;
            let rho = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            let d = Vec3::new(rho * phi.cos(), rho * phi.sin(), z);
            d / d.amax()
        })
        .collect()
}

/// Whether the segment `a -> b` crosses the loop plane inside the loop polygon.
fn passes_through_loop(bag: &BagLoop, a: &Vec3, b: &Vec3) -> bool {
    let da = bag.normal.dot(&(a - bag.midpoint));
    let db = bag.normal.dot(&(b - bag.midpoint));
    if da * db >= 0.0 {
        return false;
    }
    let hit = a + (b - a) * (da / (da - db));
    let local = |p: &Vec3| {
        let q = p - bag.midpoint;
        (q.dot(&bag.major_axis), q.dot(&bag.minor_axis))
    };
    let (hx, hy) = local(&hit);
    let n = bag.vertices.len();
    (0..n).all(|k| {
        let (ax, ay) = local(&bag.vertices[k]);
        let (bx, by) = local(&bag.vertices[(k + 1) % n]);
        (bx - ax) * (hy - ay) - (by - ay) * (hx - ax) > 0.0
    })
}

/// Fraction of cube surface samples seen through the opening.
pub fn visibility_rigid(
    bag: &BagLoop,
    cube_center: &Vec3,
    half_extent: f64,
    camera: &Vec3,
    disk: Option<&Disk>,
    samples: &[Vec3],
) -> f64 {
    if bag.aperture <= 0.0 {
        return 0.0;
    }
    let seen = samples
        .iter()
        .filter(|s| {
            let p = cube_center + *s * half_extent;
            passes_through_loop(bag, &p, camera) && !disk.is_some_and(|d| d.blocks(&p, camera))
        })
        .count();
    seen as f64 / samples.len() as f64
}

/// Loop vertices inside the viewing cone and not hidden by the disk.
pub fn visible_ring_count(
    vertices: &[Vec3],
    camera: &Vec3,
    gaze_target: &Vec3,
    fov_half_angle: f64,
    disk: Option<&Disk>,
) -> usize {
    let gaze = (gaze_target - camera).normalize();
    let cos_fov = fov_half_angle.cos();
    vertices
        .iter()
        .filter(|x| {
            let ray = (*x - camera).normalize();
            ray.dot(&gaze) >= cos_fov && !disk.is_some_and(|d| d.blocks(x, camera))
        })
        .count()
}

/// Projected area of the loop polygon per unit solid angle, as seen from
/// `camera`.
pub fn apparent_loop_area(vertices: &[Vec3], camera: &Vec3) -> f64 {
    let n = vertices.len();
    let mid = vertices.iter().sum::<Vec3>() / n as f64;
    let area: Vec3 = (0..n)
        .map(|k| (vertices[k] - mid).cross(&(vertices[(k + 1) % n] - mid)))
        .sum::<Vec3>()
        * 0.5;
    let view = camera - mid;
    let dist = view.norm();
    area.dot(&view).abs() / (dist * dist * dist)
}

/// Rigid-visibility reward weight at the given camera-to-cube distance.
pub fn lambda_r(cfg: &EnvConfig, camera_cube_distance: f64) -> f64 {
    let r = &cfg.reward;
    if r.freeze_lambda_r {
        r.lambda_r_ref
    } else {
        r.lambda_r_ref * (camera_cube_distance / cfg.radius).powi(2)
    }
}

/// Whether visibility reaches both success thresholds before timeout.
pub fn success_indicator(cfg: &EnvConfig, a_rigid: f64, n_ring: usize, t: usize) -> bool {
    let ring_fraction = n_ring as f64 / cfg.bag.vertices as f64;
    a_rigid >= cfg.reward.tau_rigid && ring_fraction >= cfg.reward.tau_ring && t < cfg.t_max
}

/// Shaped reward for the transition into `state`.
pub fn reward(prev: &EnvState, state: &EnvState, cfg: &EnvConfig) -> f64 {
    let dist = (state.camera.position() - state.cube_center).norm();
    let mut r = lambda_r(cfg, dist) * (state.a_rigid - prev.a_rigid)
        + cfg.reward.lambda_d * (state.n_ring as f64 - prev.n_ring as f64);
    if success_indicator(cfg, state.a_rigid, state.n_ring, state.t) {
        r += 100.0 * (cfg.t_max - state.t) as f64;
    }
    r
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub t: usize,
    /// Radians; negative looks down.
    pub pitch: f64,
    pub yaw: f64,
    pub camera: SpherePoint,
    pub ee: Vec3,
    pub bag: BagLoop,
    pub cube_center: Vec3,
    pub cube_half_extent: f64,
    pub a_rigid: f64,
    pub n_ring: usize,
    pub done: Option<DoneReason>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub t: usize,
    pub ee: Vec3,
    pub keypoints: Vec<Vec3>,
    pub a_rigid: f64,
    pub n_ring: usize,
    pub pitch: f64,
    pub yaw: f64,
    pub camera: SpherePoint,
}

/// Camera sub-action: move `step` radians of arc along a unit tangent
/// direction at the current pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraAction {
    pub direction: Vec3,
    pub step: f64,
}

impl CameraAction {
    pub fn hold() -> Self {
        Self {
            direction: Vec3::zeros(),
            step: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionPair {
    pub camera: CameraAction,
    pub ee: Vec3,
}

impl ActionPair {
    pub fn zero() -> Self {
        Self {
            camera: CameraAction::hold(),
            ee: Vec3::zeros(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub done_reason: Option<DoneReason>,
}

/// One logged environment step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub t: usize,
    pub pitch: f64,
    pub yaw: f64,
    pub ee: [f64; 3],
    pub a_rigid: f64,
    pub n_ring: usize,
    pub reward: f64,
    pub done: bool,
    pub done_reason: Option<DoneReason>,
}

/// Round to 9 significant digits.
pub fn round_sig9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeLog {
    pub records: Vec<StepRecord>,
}

impl EpisodeLog {
    pub fn push(&mut self, result: &StepResult) {
        let o = &result.observation;
        self.records.push(StepRecord {
            t: o.t,
            pitch: round_sig9(o.pitch),
            yaw: round_sig9(o.yaw),
            ee: [o.ee.x, o.ee.y, o.ee.z],
            a_rigid: o.a_rigid,
            n_ring: o.n_ring,
            reward: result.reward,
            done: result.done,
            done_reason: result.done_reason,
        });
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { records })
    }
}

/// A seeded environment instance.
#[derive(Debug, Clone)]
pub struct IpEnv {
    cfg: EnvConfig,
    chart: SphereChart,
    disk: Option<Disk>,
    samples: Vec<Vec3>,
    state: EnvState,
}

impl IpEnv {
    /// New environment reset with `seed`.
    pub fn new(cfg: EnvConfig, seed: u64) -> Result<(Self, Observation), EnvError> {
        let chart = cfg.chart();
        let disk = cfg.obstacle_disk().map(Disk::from_config);
        let samples = cube_surface_samples();
        let state = initial_state(&cfg, &chart, disk.as_ref(), &samples, seed)?;
        let env = Self {
            cfg,
            chart,
            disk,
            samples,
            state,
        };
        let obs = env.observation();
        Ok((env, obs))
    }

    pub fn reset(&mut self, seed: u64) -> Result<Observation, EnvError> {
        self.state = initial_state(&self.cfg, &self.chart, self.disk.as_ref(), &self.samples, seed)?;
        Ok(self.observation())
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn chart(&self) -> &SphereChart {
        &self.chart
    }

    pub fn disk(&self) -> Option<&Disk> {
        self.disk.as_ref()
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn observation(&self) -> Observation {
        let s = &self.state;
        Observation {
            t: s.t,
            ee: s.ee,
            keypoints: s.bag.vertices.clone(),
            a_rigid: s.a_rigid,
            n_ring: s.n_ring,
            pitch: s.pitch,
            yaw: s.yaw,
            camera: s.camera,
        }
    }

    /// Camera pose after moving along a tangent direction, clamped to the
    /// pitch and yaw limits.
    pub fn camera_after(&self, action: &CameraAction) -> Result<(f64, f64), EnvError> {
        moved_camera(&self.cfg, &self.state, action)
    }

    pub fn step(&mut self, action: &ActionPair) -> Result<StepResult, EnvError> {
        if let Some(reason) = self.state.done {
            return Err(EnvError::InvalidTransition(reason));
        }
        let cfg = &self.cfg;
        let prev = self.state.clone();

        // camera first, then the bag; sensing once at the end
        let (pitch, yaw) = moved_camera(cfg, &prev, &action.camera)?;
        let lim = cfg.ee.max_step;
        let delta = action.ee.map(|v| if v.is_finite() { v.clamp(-lim, lim) } else { 0.0 });
        let ee = clamp_to_box(cfg, &(prev.ee + delta));
        let bag = bag_kinematics(cfg, &ee);

        let mut next = EnvState {
            t: prev.t + 1,
            pitch,
            yaw,
            camera: self
                .chart
                .point(camera_position(cfg, pitch, yaw))
                .expect("camera on chart"),
            ee,
            bag,
            cube_center: prev.cube_center,
            cube_half_extent: prev.cube_half_extent,
            a_rigid: 0.0,
            n_ring: 0,
            done: None,
        };
        sense(cfg, self.disk.as_ref(), &self.samples, &mut next);
        let r = reward(&prev, &next, cfg);
        next.done = if next.bag.overstretched {
            Some(DoneReason::Overstretch)
        } else if success_indicator(cfg, next.a_rigid, next.n_ring, next.t) {
            Some(DoneReason::Success)
        } else if next.t >= cfg.t_max {
            Some(DoneReason::Timeout)
        } else {
            None
        };
        self.state = next;
        Ok(StepResult {
            observation: self.observation(),
            reward: r,
            done: self.state.done.is_some(),
            done_reason: self.state.done,
        })
    }
}

fn clamp_to_box(cfg: &EnvConfig, p: &Vec3) -> Vec3 {
    let (lo, hi) = (&cfg.ee.box_min, &cfg.ee.box_max);
    Vec3::new(
        p.x.clamp(lo[0], hi[0]),
        p.y.clamp(lo[1], hi[1]),
        p.z.clamp(lo[2], hi[2]),
    )
}

fn clamp_angles(cfg: &EnvConfig, pitch: f64, yaw: f64) -> (f64, f64) {
    let c = &cfg.camera;
    (
        pitch.clamp(c.pitch_min_deg.to_radians(), c.pitch_max_deg.to_radians()),
        yaw.clamp(c.yaw_min_deg.to_radians(), c.yaw_max_deg.to_radians()),
    )
}

fn moved_camera(
    cfg: &EnvConfig,
    state: &EnvState,
    action: &CameraAction,
) -> Result<(f64, f64), EnvError> {
    let step = if action.step.is_finite() {
        action.step.clamp(0.0, cfg.camera.max_step_rad)
    } else {
        0.0
    };
    let norm = action.direction.norm();
    if step == 0.0 || norm == 0.0 {
        return Ok((state.pitch, state.yaw));
    }
    let unit = state.camera.unit();
    if (action.direction.dot(&unit) / norm).abs() > 1e-6 {
        return Err(EnvError::BadCameraAction);
    }
    let v = TangentVector::project(state.camera, action.direction / norm * step * cfg.radius);
    let moved = davs_core::sphere::exp_map(&v);
    let (elev, azim) = moved.angles();
    Ok(clamp_angles(cfg, -elev, azim))
}

fn sense(cfg: &EnvConfig, disk: Option<&Disk>, samples: &[Vec3], state: &mut EnvState) {
    let cam = state.camera.position();
    state.a_rigid = visibility_rigid(
        &state.bag,
        &state.cube_center,
        state.cube_half_extent,
        &cam,
        disk,
        samples,
    );
    state.n_ring = visible_ring_count(
        &state.bag.vertices,
        &cam,
        &Vec3::from(cfg.center),
        cfg.camera.fov_half_angle_deg.to_radians(),
        disk,
    );
}

fn initial_state(
    cfg: &EnvConfig,
    chart: &SphereChart,
    disk: Option<&Disk>,
    samples: &[Vec3],
    seed: u64,
) -> Result<EnvState, EnvError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = &cfg.camera;
    let (pitch, yaw) = match c.birth {
        BirthMode::Fixed => (c.birth_pitch_deg.to_radians(), c.birth_yaw_deg.to_radians()),
        BirthMode::Random => (
            rng.random_range(c.pitch_min_deg..=c.pitch_max_deg).to_radians(),
            rng.random_range(c.yaw_min_deg..=c.yaw_max_deg).to_radians(),
        ),
    };
    let (lo, hi) = (&cfg.ee.box_min, &cfg.ee.box_max);
    let ee = match cfg.ee.birth {
        BirthMode::Fixed => Vec3::from(cfg.ee.birth_position),
        BirthMode::Random => {
            // redraw births that would start overstretched
            let mut found = None;
            for _ in 0..1000 {
                let p = Vec3::new(
                    rng.random_range(lo[0]..=hi[0]),
                    rng.random_range(lo[1]..=hi[1]),
                    rng.random_range(lo[2]..=hi[2]),
                );
                if !bag_kinematics(cfg, &p).overstretched {
                    found = Some(p);
                    break;
                }
            }
            found.ok_or_else(|| {
                EnvError::InfeasibleStart("no end-effector birth within the overstretch limit".into())
            })?
        }
    };
    let bag = bag_kinematics(cfg, &ee);
    if bag.overstretched {
        return Err(EnvError::InfeasibleStart("end-effector birth overstretches the bag".into()));
    }
    let (rho, phi): (f64, f64) = (rng.random::<f64>().sqrt(), rng.random_range(0.0..2.0 * PI));
    let cube_center = Vec3::from(cfg.cube.floor_center)
        + Vec3::new(phi.cos(), phi.sin(), 0.0) * (cfg.cube.spawn_radius * rho);
    let camera = chart
        .point(camera_position(cfg, pitch, yaw))
        .map_err(|e| EnvError::InfeasibleStart(e.to_string()))?;
    let mut state = EnvState {
        t: 0,
        pitch,
        yaw,
        camera,
        ee,
        bag,
        cube_center,
        cube_half_extent: cfg.cube.half_extent,
        a_rigid: 0.0,
        n_ring: 0,
        done: None,
    };
    sense(cfg, disk, samples, &mut state);
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn flat_loop(radius: f64, height: f64, n: usize) -> BagLoop {
        let midpoint = Vec3::new(0.0, 0.0, height);
        BagLoop {
            midpoint,
            major_axis: Vec3::x(),
            minor_axis: Vec3::y(),
            normal: Vec3::z(),
            separation: 2.0 * radius,
            aperture: radius,
            vertices: (0..n)
                .map(|k| {
                    let phi = 2.0 * PI * k as f64 / n as f64;
                    midpoint + Vec3::new(phi.cos(), phi.sin(), 0.0) * radius
                })
                .collect(),
            overstretched: false,
        }
    }

    #[test]
    fn rest_separation_is_closed() {
        let cfg = EnvConfig::clean();
        let ee = Vec3::from(cfg.bag.fixed_handle) + Vec3::x() * cfg.bag.rest_separation;
        let bag = bag_kinematics(&cfg, &ee);
        assert_eq!(bag.aperture, 0.0);
        assert!(!bag.overstretched);
        let cam = camera_position(&cfg, -60f64.to_radians(), 90f64.to_radians());
        let cube = Vec3::from(cfg.cube.floor_center);
        assert_eq!(visibility_rigid(&bag, &cube, 0.02, &cam, None, &cube_surface_samples()), 0.0);
    }

    #[test]
    fn aperture_grows_with_separation() {
        let cfg = EnvConfig::clean();
        let fixed = Vec3::from(cfg.bag.fixed_handle);
        let mut last = -1.0;
        for k in 0..=40 {
            let d = 0.08 + 0.15 * k as f64 / 40.0;
            let bag = bag_kinematics(&cfg, &(fixed + Vec3::x() * d));
            assert!(bag.aperture >= last);
            assert!(bag.aperture <= cfg.bag.max_aperture);
            last = bag.aperture;
        }
        assert_relative_eq!(last, cfg.bag.max_aperture);
    }

    #[test]
    fn overstretch_flag_follows_separation() {
        let cfg = EnvConfig::clean();
        let fixed = Vec3::from(cfg.bag.fixed_handle);
        let limit = cfg.bag.overstretch_separation;
        assert!(!bag_kinematics(&cfg, &(fixed + Vec3::x() * (limit - 1e-6))).overstretched);
        assert!(bag_kinematics(&cfg, &(fixed + Vec3::x() * (limit + 1e-6))).overstretched);
    }

    #[test]
    fn loop_vertices_lie_in_the_loop_plane() {
        let cfg = EnvConfig::clean();
        let bag = bag_kinematics(&cfg, &Vec3::new(0.12, 0.16, 0.30));
        assert_eq!(bag.vertices.len(), cfg.bag.vertices);
        for v in &bag.vertices {
            assert!(bag.normal.dot(&(v - bag.midpoint)).abs() < 1e-12);
        }
        assert!(bag.normal.dot(&bag.major_axis).abs() < 1e-12);
    }

    #[test]
    fn wide_open_loop_on_axis_shows_the_whole_cube() {
        let bag = flat_loop(0.5, 0.3, 32);
        let cam = Vec3::new(0.0, 0.0, 1.0);
        let a = visibility_rigid(&bag, &Vec3::zeros(), 0.02, &cam, None, &cube_surface_samples());
        assert_eq!(a, 1.0);
    }

    #[test]
    fn covering_disk_hides_everything() {
        let bag = flat_loop(0.1, 0.3, 16);
        let cam = Vec3::new(0.0, 0.0, 1.0);
        let disk = Disk {
            center: Vec3::new(0.0, 0.0, 0.6),
            normal: Vec3::z(),
            radius: 0.3,
        };
        let samples = cube_surface_samples();
        assert_eq!(visibility_rigid(&bag, &Vec3::zeros(), 0.02, &cam, Some(&disk), &samples), 0.0);
        assert_eq!(visible_ring_count(&bag.vertices, &cam, &Vec3::zeros(), 0.5, Some(&disk)), 0);
    }

    #[test]
    fn wide_field_of_view_sees_every_vertex() {
        let bag = flat_loop(0.1, 0.3, 16);
        let cam = Vec3::new(0.3, 0.0, 0.9);
        let n = visible_ring_count(&bag.vertices, &cam, &Vec3::zeros(), PI / 2.0, None);
        assert_eq!(n, 16);
    }

    #[test]
    fn half_covering_disk_matches_the_vertex_oracle() {
        // segments from the ring to the camera cross z = 0.65 at half radius;
        // the disk then hides exactly the vertices with cos(phi) > 1/8
        let n = 24;
        let bag = flat_loop(0.1, 0.3, n);
        let cam = Vec3::new(0.0, 0.0, 1.0);
        let disk = Disk {
            center: Vec3::new(0.2, 0.0, 0.65),
            normal: Vec3::z(),
            radius: 0.2,
        };
        let expected = (0..n)
            .filter(|k| (2.0 * PI * *k as f64 / n as f64).cos() <= 0.125)
            .count();
        let got = visible_ring_count(&bag.vertices, &cam, &Vec3::zeros(), PI / 2.0, Some(&disk));
        assert_eq!(got, expected);
    }

    #[test]
    fn disk_ignores_segments_on_one_side() {
        let disk = Disk {
            center: Vec3::zeros(),
            normal: Vec3::z(),
            radius: 1.0,
        };
        assert!(!disk.blocks(&Vec3::new(0.0, 0.0, 0.1), &Vec3::new(0.0, 0.0, 0.5)));
        assert!(disk.blocks(&Vec3::new(0.0, 0.0, -0.1), &Vec3::new(0.0, 0.0, 0.5)));
        assert!(!disk.blocks(&Vec3::new(2.0, 0.0, -0.1), &Vec3::new(2.0, 0.0, 0.5)));
    }

    #[test]
    fn lambda_r_scales_with_squared_distance() {
        let mut cfg = EnvConfig::clean();
        assert_relative_eq!(lambda_r(&cfg, 2.0), 4.0 * cfg.reward.lambda_r_ref);
        cfg.reward.freeze_lambda_r = true;
        assert_eq!(lambda_r(&cfg, 2.0), cfg.reward.lambda_r_ref);
    }

    #[test]
    fn success_bonus_counts_remaining_steps() {
        let cfg = EnvConfig::clean();
        let (env, _) = IpEnv::new(cfg.clone(), 3).unwrap();
        let mut prev = env.state().clone();
        prev.a_rigid = 1.0;
        prev.n_ring = cfg.bag.vertices;
        let mut next = prev.clone();
        next.t = 150;
        assert_eq!(reward(&prev, &next, &cfg), 5000.0);
        next.t = cfg.t_max;
        assert_eq!(reward(&prev, &next, &cfg), 0.0);
    }

    #[test]
    fn success_needs_both_thresholds() {
        let cfg = EnvConfig::clean();
        assert!(success_indicator(&cfg, 0.5, 13, 0));
        assert!(!success_indicator(&cfg, 0.49, 16, 0));
        assert!(!success_indicator(&cfg, 1.0, 12, 0));
    }

    #[test]
    fn fixed_birth_starts_closed_and_unseen() {
        let (env, obs) = IpEnv::new(EnvConfig::clean(), 11).unwrap();
        assert_eq!(obs.a_rigid, 0.0);
        assert_eq!(env.state().bag.aperture, 0.0);
        assert_eq!(obs.keypoints.len(), 16);
    }

    #[test]
    fn zero_action_changes_nothing_but_time() {
        let (mut env, obs) = IpEnv::new(EnvConfig::clean(), 5).unwrap();
        let res = env.step(&ActionPair::zero()).unwrap();
        assert_eq!(res.reward, 0.0);
        assert_eq!(res.observation.t, 1);
        assert_eq!(res.observation.keypoints, obs.keypoints);
        assert_eq!((res.observation.pitch, res.observation.yaw), (obs.pitch, obs.yaw));
    }

    #[test]
    fn step_after_termination_is_rejected() {
        let mut cfg = EnvConfig::clean();
        cfg.t_max = 2;
        let (mut env, _) = IpEnv::new(cfg, 0).unwrap();
        env.step(&ActionPair::zero()).unwrap();
        let last = env.step(&ActionPair::zero()).unwrap();
        assert_eq!(last.done_reason, Some(DoneReason::Timeout));
        assert!(matches!(
            env.step(&ActionPair::zero()),
            Err(EnvError::InvalidTransition(DoneReason::Timeout))
        ));
    }

    #[test]
    fn overstretching_ends_the_episode() {
        let mut cfg = EnvConfig::clean();
        cfg.ee.max_step = 0.2;
        cfg.ee.box_max[0] = 0.3;
        let (mut env, _) = IpEnv::new(cfg, 0).unwrap();
        let res = env
            .step(&ActionPair {
                camera: CameraAction::hold(),
                ee: Vec3::new(0.2, 0.0, 0.0),
            })
            .unwrap();
        assert_eq!(res.done_reason, Some(DoneReason::Overstretch));
    }

    #[test]
    fn ee_moves_are_clamped() {
        let cfg = EnvConfig::clean();
        let (mut env, obs) = IpEnv::new(cfg.clone(), 0).unwrap();
        let res = env
            .step(&ActionPair {
                camera: CameraAction::hold(),
                ee: Vec3::new(1.0, f64::NAN, -1.0),
            })
            .unwrap();
        let d = res.observation.ee - obs.ee;
        assert_relative_eq!(d.x, cfg.ee.max_step);
        assert_eq!(d.y, 0.0);
        assert!(res.observation.ee.z >= cfg.ee.box_min[2]);
    }

    #[test]
    fn non_tangent_camera_action_is_rejected() {
        let (mut env, obs) = IpEnv::new(EnvConfig::clean(), 0).unwrap();
        let action = ActionPair {
            camera: CameraAction {
                direction: obs.camera.unit(),
                step: 0.01,
            },
            ee: Vec3::zeros(),
        };
        assert!(matches!(env.step(&action), Err(EnvError::BadCameraAction)));
    }

    #[test]
    fn camera_steps_are_bounded_and_clamped() {
        let cfg = EnvConfig::clean();
        let (mut env, obs) = IpEnv::new(cfg.clone(), 0).unwrap();
        let up = obs.camera.unit();
        let east = Vec3::z().cross(&up).normalize();
        let res = env
            .step(&ActionPair {
                camera: CameraAction {
                    direction: east,
                    step: 1.0,
                },
                ee: Vec3::zeros(),
            })
            .unwrap();
        let moved = obs.camera.unit().angle(&res.observation.camera.unit());
        assert!(moved <= cfg.camera.max_step_rad + 1e-12);
        assert!(res.observation.yaw <= cfg.camera.yaw_max_deg.to_radians() + 1e-12);
    }

    #[test]
    fn rounding_keeps_nine_digits() {
        assert_eq!(round_sig9(1.234_567_891_23), 1.234_567_89);
        assert_eq!(round_sig9(-0.000_123_456_789_9), -0.000_123_456_79);
        assert_eq!(round_sig9(0.0), 0.0);
    }
}
