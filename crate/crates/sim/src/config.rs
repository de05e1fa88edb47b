//! Environment configuration, TOML-backed with documented defaults.

use std::path::Path;

use davs_core::{SphereChart, Vec3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid config value `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Clean,
    Obstacle,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Clean => "clean",
            Scenario::Obstacle => "obstacle",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "clean" => Ok(Scenario::Clean),
            "obstacle" => Ok(Scenario::Obstacle),
            other => Err(format!("unknown scenario `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BirthMode {
    Fixed,
    Random,
}

/// Camera workspace on the viewing sphere. Angles in degrees; the camera
/// always gazes at the sphere centre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub pitch_min_deg: f64,
    pub pitch_max_deg: f64,
    pub yaw_min_deg: f64,
    pub yaw_max_deg: f64,
    /// Half-angle of the viewing cone around the gaze axis.
    pub fov_half_angle_deg: f64,
    /// Largest camera motion per step, radians of arc.
    pub max_step_rad: f64,
    pub birth: BirthMode,
    pub birth_pitch_deg: f64,
    pub birth_yaw_deg: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            pitch_min_deg: -89.0,
            pitch_max_deg: -30.0,
            yaw_min_deg: 45.0,
            yaw_max_deg: 135.0,
            fov_half_angle_deg: 30.0,
            max_step_rad: 0.05,
            birth: BirthMode::Fixed,
            birth_pitch_deg: -32.0,
            birth_yaw_deg: 130.0,
        }
    }
}

/// End-effector workspace, holding the free bag handle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EeConfig {
    pub box_min: [f64; 3],
    pub box_max: [f64; 3],
    pub max_step: f64,
    pub birth: BirthMode,
    pub birth_position: [f64; 3],
}

impl Default for EeConfig {
    fn default() -> Self {
        Self {
            box_min: [0.0, 0.08, 0.22],
            box_max: [0.16, 0.22, 0.34],
            max_step: 0.01,
            birth: BirthMode::Fixed,
            birth_position: [0.02, 0.15, 0.28],
        }
    }
}

/// Bag opening modelled as an elliptic loop between the two handles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BagConfig {
    pub fixed_handle: [f64; 3],
    /// Handle separation at which the bag is closed.
    pub rest_separation: f64,
    /// Separation at which the aperture saturates.
    pub open_separation: f64,
    /// Separation beyond which the handles are overstretched.
    pub overstretch_separation: f64,
    pub max_aperture: f64,
    /// Residual half-width of a closed opening.
    pub rim_gap: f64,
    pub vertices: usize,
    /// Fraction by which the loop normal leans toward the camera workspace.
    pub tilt_gain: f64,
}

impl Default for BagConfig {
    fn default() -> Self {
        Self {
            fixed_handle: [-0.08, 0.15, 0.28],
            rest_separation: 0.10,
            open_separation: 0.20,
            overstretch_separation: 0.25,
            max_aperture: 0.05,
            rim_gap: 0.003,
            vertices: 16,
            tilt_gain: 0.3,
        }
    }
}

/// Cube resting on the bag floor; its centre is spawned uniformly in a
/// disc of `spawn_radius` around `floor_center`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CubeConfig {
    pub half_extent: f64,
    pub floor_center: [f64; 3],
    pub spawn_radius: f64,
}

impl Default for CubeConfig {
    fn default() -> Self {
        Self {
            half_extent: 0.02,
            floor_center: [0.0, 0.0, 0.02],
            spawn_radius: 0.02,
        }
    }
}

/// Occluding disk used by the obstacle scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiskConfig {
    pub center: [f64; 3],
    pub normal: [f64; 3],
    pub radius: f64,
}

impl Default for DiskConfig {
    fn default() -> Self {
        Self {
            center: [-0.024, 0.274, 0.476],
            normal: [0.0, 0.45, 0.9],
            radius: 0.07,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub lambda_r_ref: f64,
    pub lambda_d: f64,
    /// Hold the rigid-visibility weight at `lambda_r_ref`.
    pub freeze_lambda_r: bool,
    pub tau_rigid: f64,
    pub tau_ring: f64,
    pub gamma: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda_r_ref: 100.0,
            lambda_d: 5.0,
            freeze_lambda_r: false,
            tau_rigid: 0.5,
            tau_ring: 0.8,
            gamma: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub scenario: Scenario,
    /// Viewing-sphere centre, the fixed gaze point.
    pub center: [f64; 3],
    pub radius: f64,
    pub t_max: usize,
    pub camera: CameraConfig,
    pub ee: EeConfig,
    pub bag: BagConfig,
    pub cube: CubeConfig,
    pub obstacle: DiskConfig,
    pub reward: RewardConfig,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Clean,
            center: [0.0, 0.0, 0.0],
            radius: 1.0,
            t_max: 200,
            camera: CameraConfig::default(),
            ee: EeConfig::default(),
            bag: BagConfig::default(),
            cube: CubeConfig::default(),
            obstacle: DiskConfig::default(),
            reward: RewardConfig::default(),
            seed: 0,
        }
    }
}

impl EnvConfig {
    /// Fixed camera and fixed end-effector births, no obstacle.
    pub fn clean() -> Self {
        Self::default()
    }

    /// Occluding disk, fixed camera birth, random end-effector birth.
    pub fn obstacle() -> Self {
        let mut cfg = Self::default();
        cfg.scenario = Scenario::Obstacle;
        cfg.ee.birth = BirthMode::Random;
        // keep the opening roughly in place so the disk covers its direct view
        cfg.ee.box_min = [0.0, 0.13, 0.26];
        cfg.ee.box_max = [0.16, 0.17, 0.30];
        cfg
    }

    pub fn preset(scenario: Scenario) -> Self {
        match scenario {
            Scenario::Clean => Self::clean(),
            Scenario::Obstacle => Self::obstacle(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                ConfigError::Parse(e.into_inner().to_string())
            } else {
                ConfigError::Parse(format!("at `{path}`: {}", e.into_inner()))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn chart(&self) -> SphereChart {
        SphereChart::new(Vec3::from(self.center), self.radius, true).expect("validated chart")
    }

    pub fn obstacle_disk(&self) -> Option<&DiskConfig> {
        match self.scenario {
            Scenario::Clean => None,
            Scenario::Obstacle => Some(&self.obstacle),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let finite = |key: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(invalid(key, "must be finite"))
            }
        };
        for (i, v) in self.center.iter().enumerate() {
            finite(&format!("center[{i}]"), *v)?;
        }
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(invalid("radius", "must be positive"));
        }
        if self.t_max < 1 {
            return Err(invalid("t_max", "must be at least 1"));
        }

        let c = &self.camera;
        if !(c.pitch_min_deg < c.pitch_max_deg) {
            return Err(invalid("camera.pitch_min_deg", "must be below pitch_max_deg"));
        }
        if c.pitch_min_deg < -90.0 || c.pitch_max_deg > 0.0 {
            return Err(invalid(
                "camera.pitch_min_deg",
                "pitch limits must lie in [-90, 0] degrees",
            ));
        }
        if !(c.yaw_min_deg < c.yaw_max_deg) {
            return Err(invalid("camera.yaw_min_deg", "must be below yaw_max_deg"));
        }
        if !(c.fov_half_angle_deg > 0.0 && c.fov_half_angle_deg < 90.0) {
            return Err(invalid("camera.fov_half_angle_deg", "must lie in (0, 90)"));
        }
        if !(c.max_step_rad > 0.0 && c.max_step_rad.is_finite()) {
            return Err(invalid("camera.max_step_rad", "must be positive"));
        }
        if c.birth == BirthMode::Fixed
            && !(c.pitch_min_deg..=c.pitch_max_deg).contains(&c.birth_pitch_deg)
        {
            return Err(invalid("camera.birth_pitch_deg", "outside pitch limits"));
        }
        if c.birth == BirthMode::Fixed && !(c.yaw_min_deg..=c.yaw_max_deg).contains(&c.birth_yaw_deg)
        {
            return Err(invalid("camera.birth_yaw_deg", "outside yaw limits"));
        }

        let e = &self.ee;
        for i in 0..3 {
            finite("ee.box_min", e.box_min[i])?;
            finite("ee.box_max", e.box_max[i])?;
            if e.box_min[i] >= e.box_max[i] {
                return Err(invalid("ee.box_min", "must be below box_max on every axis"));
            }
            if e.birth == BirthMode::Fixed
                && !(e.box_min[i]..=e.box_max[i]).contains(&e.birth_position[i])
            {
                return Err(invalid("ee.birth_position", "outside the end-effector box"));
            }
        }
        if !(e.max_step > 0.0 && e.max_step.is_finite()) {
            return Err(invalid("ee.max_step", "must be positive"));
        }

        let b = &self.bag;
        if !(b.rest_separation > 0.0
            && b.rest_separation < b.open_separation
            && b.open_separation < b.overstretch_separation)
        {
            return Err(invalid(
                "bag.rest_separation",
                "need 0 < rest_separation < open_separation < overstretch_separation",
            ));
        }
        if !(b.max_aperture > 0.0) {
            return Err(invalid("bag.max_aperture", "must be positive"));
        }
        if !(b.rim_gap > 0.0 && b.rim_gap < b.max_aperture) {
            return Err(invalid("bag.rim_gap", "must lie in (0, max_aperture)"));
        }
        if b.vertices < 8 {
            return Err(invalid("bag.vertices", "at least 8 loop vertices required"));
        }
        if !(0.0..1.0).contains(&b.tilt_gain) {
            return Err(invalid("bag.tilt_gain", "must lie in [0, 1)"));
        }

        let q = &self.cube;
        if !(q.half_extent > 0.0) {
            return Err(invalid("cube.half_extent", "must be positive"));
        }
        if !(q.spawn_radius >= 0.0) {
            return Err(invalid("cube.spawn_radius", "must be non-negative"));
        }
        let o = &self.obstacle;
        if !(o.radius > 0.0) {
            return Err(invalid("obstacle.radius", "must be positive"));
        }
        if Vec3::from(o.normal).norm() < 1e-12 {
            return Err(invalid("obstacle.normal", "must be nonzero"));
        }

        let r = &self.reward;
        for (key, tau) in [("reward.tau_rigid", r.tau_rigid), ("reward.tau_ring", r.tau_ring)] {
            if !(tau > 0.0 && tau <= 1.0) {
                return Err(invalid(key, "must lie in (0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&r.gamma) {
            return Err(invalid("reward.gamma", "must lie in [0, 1)"));
        }
        finite("reward.lambda_r_ref", r.lambda_r_ref)?;
        finite("reward.lambda_d", r.lambda_d)?;
        Ok(())
    }
}
