//! Dynamic active vision space construction.
//!
//! From raw loop keypoints and the current camera position `P0`:
//!
//! 1. project the keypoints onto a middle sphere of radius
//!    `r* = max |X_i - V0|`, keep the convex-hull loop, and ray-trace the
//!    hull vertices outward onto the camera sphere;
//! 2. connect the traced vertices with geodesics to form the refined
//!    boundary;
//! 3. take the Karcher mean `O0` of the traced vertices;
//! 4. cut the boundary with the great circle through `O0` perpendicular to
//!    the geodesic `P0 -> O0`, giving `P1` (left) and `P2` (right);
//! 5. bound the space by the geodesics `P0P1`, `P1P2`, `P2P0`.
//!
//! The tangent frame at `P0` then spans the sampling cone between `v2`
//! and `v1`, narrowed toward `v0` by the exploration weight `omega`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::karcher::{karcher_mean_with, FrechetProblem, KarcherError, KarcherOptions};
use crate::sphere::{
    angle_between, angle_to_arc, convex_loop_contains, distinct_indices, geodesic_path, log_map,
    radial_project, signed_angle, spherical_convex_hull, tangent_of_path_at, GeodesicPath,
    GeometryError, SphereChart, SpherePoint, TangentVector, Vec3, MERGE_TOL,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DavsError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Karcher(#[from] KarcherError),
    #[error("insufficient keypoints: {found} distinct, at least 3 required")]
    InsufficientKeypoints { found: usize },
    #[error("a keypoint coincides with the viewpoint centroid")]
    KeypointAtCenter,
    #[error("centroid falls outside the SOI polygon")]
    CentroidOutside,
    #[error("malformed boundary: {0}")]
    MalformedBoundary(String),
    #[error("degenerate tangent frame: {0}")]
    DegenerateFrame(String),
    #[error("manifold invariant violated: {0}")]
    InvariantViolated(String),
}

pub type Result<T> = std::result::Result<T, DavsError>;

/// Raw SOI keypoints at one time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoiKeypointSet {
    pub keypoints: Vec<Vec3>,
    #[serde(default)]
    pub timestamp: u64,
}

impl SoiKeypointSet {
    pub fn new(keypoints: Vec<Vec3>, timestamp: u64) -> Self {
        Self {
            keypoints,
            timestamp,
        }
    }

    pub fn rotated(&self, center: &Vec3, rotation: &nalgebra::Rotation3<f64>) -> Self {
        Self {
            keypoints: self
                .keypoints
                .iter()
                .map(|k| center + rotation * (k - center))
                .collect(),
            timestamp: self.timestamp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DavsConfig {
    /// Largest spacing between geodesic samples, as a fraction of `r`.
    pub spacing_ratio: f64,
    pub karcher: KarcherOptions,
}

impl Default for DavsConfig {
    fn default() -> Self {
        Self {
            spacing_ratio: 0.02,
            karcher: KarcherOptions::default(),
        }
    }
}

/// Hull loop of the SOI, on the middle sphere and traced onto the camera sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct SoiPolygon {
    pub middle_radius: f64,
    /// Hull vertices on the middle sphere, counter-clockwise from outside.
    pub middle_points: Vec<SpherePoint>,
    /// The same vertices traced onto the camera sphere.
    pub action_points: Vec<SpherePoint>,
    /// Index of each hull vertex in the raw keypoint list.
    pub source_indices: Vec<usize>,
}

impl SoiPolygon {
    pub fn action_units(&self) -> Vec<Vec3> {
        self.action_points.iter().map(|p| p.unit()).collect()
    }
}

pub fn build_soi_polygon(kps: &SoiKeypointSet, chart: &SphereChart) -> Result<SoiPolygon> {
    let work = chart.unrestricted();
    let center = work.center();
    let scale = work.radius();
    let mut r_star: f64 = 0.0;
    for k in &kps.keypoints {
        let d = (k - center).norm();
        if !d.is_finite() {
            return Err(GeometryError::InvalidInput("non-finite keypoint".into()).into());
        }
        if d <= MERGE_TOL * scale {
            return Err(DavsError::KeypointAtCenter);
        }
        r_star = r_star.max(d);
    }
    if kps.keypoints.len() < 3 {
        return Err(DavsError::InsufficientKeypoints {
            found: kps.keypoints.len(),
        });
    }
    let middle = work.with_radius(r_star)?;
    let projected: Vec<SpherePoint> = kps
        .keypoints
        .iter()
        .map(|k| radial_project(k, &middle))
        .collect::<std::result::Result<_, _>>()?;
    // Enough raw keypoints that collapse onto fewer rays form no loop.
    let hull = spherical_convex_hull(&projected).map_err(|e| match e {
        GeometryError::InsufficientPoints { .. } => GeometryError::DegenerateHull.into(),
        other => DavsError::from(other),
    })?;
    let middle_points: Vec<SpherePoint> = hull.iter().map(|&i| projected[i]).collect();
    let action_points = middle_points
        .iter()
        .map(|p| radial_project(&p.position(), &work))
        .collect::<std::result::Result<_, _>>()?;
    Ok(SoiPolygon {
        middle_radius: r_star,
        middle_points,
        action_points,
        source_indices: hull,
    })
}

/// Closed loop of geodesics `X'_i -> X'_{i+1}`.
pub fn build_refined_manifold(poly: &SoiPolygon, max_spacing: f64) -> Result<Vec<GeodesicPath>> {
    let n = poly.action_points.len();
    if n < 3 {
        return Err(DavsError::InsufficientKeypoints { found: n });
    }
    (0..n)
        .map(|i| {
            geodesic_path(
                &poly.action_points[i],
                &poly.action_points[(i + 1) % n],
                max_spacing,
            )
            .map_err(DavsError::from)
        })
        .collect()
}

/// Boundary samples in loop order, without repeating shared endpoints.
fn loop_samples(boundary: &[GeodesicPath]) -> Vec<Vec3> {
    boundary
        .iter()
        .flat_map(|p| {
            let s = p.samples();
            s[..s.len().saturating_sub(1)].iter().map(|q| q.unit())
        })
        .collect()
}

/// Cut the boundary loop with the great circle through `O0` perpendicular
/// to the geodesic from `P0`. Returns `(P1, P2)`: left and right of the
/// oriented geodesic `P0 -> O0` seen from outside the sphere.
pub fn find_perpendicular_points(
    boundary: &[GeodesicPath],
    p0: &SpherePoint,
    o0: &SpherePoint,
) -> Result<(SpherePoint, SpherePoint)> {
    let chart = o0.chart().unrestricted();
    let back = log_map(o0, p0)?;
    if back.norm() <= MERGE_TOL * chart.radius() {
        return Err(DavsError::DegenerateFrame("camera coincides with the centroid".into()));
    }
    let back = back.normalized().expect("nonzero tangent");
    let travel = -back.direction();
    let uo = o0.unit();
    let left = uo.cross(&travel);

    let samples = loop_samples(boundary);
    if samples.len() < 3 {
        return Err(DavsError::MalformedBoundary("fewer than three samples".into()));
    }
    let mut best_left: Option<(f64, Vec3)> = None;
    let mut best_right: Option<(f64, Vec3)> = None;
    let n = samples.len();
    for i in 0..n {
        let a = samples[i];
        let b = samples[(i + 1) % n];
        let (sa, sb) = (a.dot(&travel), b.dot(&travel));
        if (sa < 0.0) == (sb < 0.0) {
            continue;
        }
        let line = a.cross(&b).cross(&travel);
        if line.norm() < 1e-15 {
            continue;
        }
        let mut x = line.normalize();
        if x.dot(&(a + b)) < 0.0 {
            x = -x;
        }
        let dist = angle_between(&x, &uo);
        let side = x.dot(&left);
        let slot = if side > 0.0 {
            &mut best_left
        } else if side < 0.0 {
            &mut best_right
        } else {
            continue;
        };
        if slot.map_or(true, |(d, _)| dist < d) {
            *slot = Some((dist, x));
        }
    }
    match (best_left, best_right) {
        (Some((_, l)), Some((_, r))) => Ok((chart.point_towards(l)?, chart.point_towards(r)?)),
        _ => Err(DavsError::MalformedBoundary(
            "perpendicular great circle does not cross the boundary on both sides".into(),
        )),
    }
}

/// The constrained camera action space at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct DavsManifold {
    pub camera: SpherePoint,
    pub centroid: SpherePoint,
    /// Boundary crossing left of `P0 -> O0`.
    pub left: SpherePoint,
    /// Boundary crossing right of `P0 -> O0`.
    pub right: SpherePoint,
    /// `P0 -> P1`, `P1 -> P2`, `P2 -> P0`.
    pub paths: [GeodesicPath; 3],
    pub centroid_path: GeodesicPath,
    /// Refined boundary of the traced SOI polygon.
    pub boundary: Vec<GeodesicPath>,
    /// Traced SOI polygon vertices.
    pub polygon: Vec<SpherePoint>,
    /// Set when samples were clipped to the upper hemisphere.
    pub clipped: bool,
}

pub fn build_davs(
    kps: &SoiKeypointSet,
    p0: &SpherePoint,
    chart: &SphereChart,
    cfg: &DavsConfig,
) -> Result<DavsManifold> {
    let work = chart.unrestricted();
    let camera = p0.on_chart(&work)?;
    let spacing = cfg.spacing_ratio * work.radius();

    let poly = build_soi_polygon(kps, chart)?;
    let boundary = build_refined_manifold(&poly, spacing)?;
    let problem = FrechetProblem::uniform(poly.action_points.clone())?;
    let centroid = karcher_mean_with(&problem, &cfg.karcher)?.mean;
    if !convex_loop_contains(&poly.action_units(), &centroid.unit(), 1e-9) {
        return Err(DavsError::CentroidOutside);
    }
    let (left, right) = find_perpendicular_points(&boundary, &camera, &centroid)?;
    let mut paths = [
        geodesic_path(&camera, &left, spacing)?,
        geodesic_path(&left, &right, spacing)?,
        geodesic_path(&right, &camera, spacing)?,
    ];
    let centroid_path = geodesic_path(&camera, &centroid, spacing)?;

    let mut clipped = false;
    if chart.requires_upper_hemisphere() {
        for path in paths.iter_mut() {
            if path.samples().iter().any(|s| !s.in_upper_hemisphere()) {
                clipped = true;
                let samples = path
                    .samples()
                    .iter()
                    .map(|s| clip_to_horizon(s, &work))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                *path = GeodesicPath::polyline(samples)?;
            }
        }
    }

    Ok(DavsManifold {
        camera,
        centroid,
        left,
        right,
        paths,
        centroid_path,
        boundary,
        polygon: poly.action_points,
        clipped,
    })
}

fn clip_to_horizon(s: &SpherePoint, chart: &SphereChart) -> std::result::Result<SpherePoint, GeometryError> {
    if s.in_upper_hemisphere() {
        return Ok(*s);
    }
    let mut u = s.unit();
    u.z = 0.0;
    if u.norm() < 1e-12 {
        u = Vec3::x();
    }
    chart.point_towards(u)
}

/// Residuals of the structural invariants of a manifold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManifoldResiduals {
    /// Largest gap between consecutive path endpoints, world units.
    pub closure_gap: f64,
    /// Distance of `P1`, `P2` from the refined boundary, world units.
    pub boundary_distance: f64,
    /// `|<t(P1P2), t(P0O0)>|` at the centroid.
    pub perpendicularity: f64,
    pub centroid_inside: bool,
}

impl DavsManifold {
    pub fn chart(&self) -> &SphereChart {
        self.camera.chart()
    }

    pub fn residuals(&self) -> Result<ManifoldResiduals> {
        let r = self.chart().radius();
        let ends = [
            (self.paths[0].end(), self.paths[1].start()),
            (self.paths[1].end(), self.paths[2].start()),
            (self.paths[2].end(), self.paths[0].start()),
        ];
        let closure_gap = ends
            .iter()
            .map(|(a, b)| (a.position() - b.position()).norm())
            .fold(0.0, f64::max);

        let samples = loop_samples(&self.boundary);
        let to_boundary = |p: &SpherePoint| {
            let u = p.unit();
            (0..samples.len())
                .map(|i| angle_to_arc(&u, &samples[i], &samples[(i + 1) % samples.len()]))
                .fold(f64::INFINITY, f64::min)
                * r
        };
        let boundary_distance = to_boundary(&self.left).max(to_boundary(&self.right));

        let along = tangent_of_path_at(&self.centroid_path, &self.centroid)?;
        let across = log_map(&self.centroid, &self.right)?
            .normalized()
            .ok_or_else(|| DavsError::DegenerateFrame("centroid on the boundary".into()))?;
        let perpendicularity = along.dot(&across).abs();

        let units: Vec<Vec3> = self.polygon.iter().map(|p| p.unit()).collect();
        let centroid_inside = convex_loop_contains(&units, &self.centroid.unit(), 1e-9);
        Ok(ManifoldResiduals {
            closure_gap,
            boundary_distance,
            perpendicularity,
            centroid_inside,
        })
    }

    /// Check the structural invariants at the stated tolerances.
    pub fn validate(&self) -> Result<ManifoldResiduals> {
        let r = self.chart().radius();
        let res = self.residuals()?;
        if res.closure_gap > 1e-9 * r {
            return Err(DavsError::InvariantViolated(format!(
                "boundary not closed (gap {:e})",
                res.closure_gap
            )));
        }
        if res.boundary_distance > 1e-6 * r {
            return Err(DavsError::InvariantViolated(format!(
                "P1/P2 off the boundary by {:e}",
                res.boundary_distance
            )));
        }
        if res.perpendicularity > 1e-6 {
            return Err(DavsError::InvariantViolated(format!(
                "perpendicularity residual {:e}",
                res.perpendicularity
            )));
        }
        if !res.centroid_inside {
            return Err(DavsError::CentroidOutside);
        }
        Ok(res)
    }
}

/// Tangent directions at the camera toward `O0`, `P1` and `P2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentFrame {
    pub base: SpherePoint,
    pub v0: Vec3,
    pub v1: Vec3,
    pub v2: Vec3,
    /// Angle from `v0` to `v1`.
    pub theta1: f64,
    /// Angle from `v2` to `v0`.
    pub theta2: f64,
}

pub fn tangent_frame(m: &DavsManifold) -> Result<TangentFrame> {
    let unit_log = |q: &SpherePoint, what: &str| -> Result<Vec3> {
        log_map(&m.camera, q)?
            .normalized()
            .map(|t| t.direction())
            .ok_or_else(|| DavsError::DegenerateFrame(format!("camera coincides with {what}")))
    };
    let v0 = unit_log(&m.centroid, "the centroid")?;
    let v1 = unit_log(&m.left, "P1")?;
    let v2 = unit_log(&m.right, "P2")?;
    let normal = m.camera.unit();
    let theta1 = signed_angle(&v0, &v1, &normal);
    let theta2 = -signed_angle(&v0, &v2, &normal);
    if theta1 < 0.0 || theta2 < 0.0 {
        return Err(DavsError::DegenerateFrame(
            "v0 does not lie between v2 and v1".into(),
        ));
    }
    Ok(TangentFrame {
        base: m.camera,
        v0,
        v1,
        v2,
        theta1,
        theta2,
    })
}

impl TangentFrame {
    pub fn normal(&self) -> Vec3 {
        self.base.unit()
    }

    /// Direction at angle `beta` from `v0`, counter-clockwise toward `v1`.
    pub fn direction_at(&self, beta: f64) -> Vec3 {
        let n = self.normal();
        self.v0 * beta.cos() + n.cross(&self.v0) * beta.sin()
    }

    /// Admissible angles measured from `v2`: `[theta2 (1 - w), theta2 + theta1 w]`.
    pub fn cone_interval(&self, omega: f64) -> (f64, f64) {
        (
            self.theta2 * (1.0 - omega),
            self.theta2 + self.theta1 * omega,
        )
    }

    /// Angle of a tangent direction measured from `v2` toward `v1`.
    pub fn angle_from_v2(&self, direction: &Vec3) -> f64 {
        self.theta2 + signed_angle(&self.v0, direction, &self.normal())
    }

    /// Whether `direction` lies in the `omega`-cone, up to `tol` radians.
    pub fn cone_contains(&self, direction: &Vec3, omega: f64, tol: f64) -> bool {
        let (lo, hi) = self.cone_interval(omega);
        let a = self.angle_from_v2(direction);
        a >= lo - tol && a <= hi + tol
    }
}

/// Unit tangent direction in the `omega`-cone at fraction `u` of its width.
pub fn sample_direction(frame: &TangentFrame, omega: f64, u: f64) -> TangentVector {
    let omega = omega.clamp(0.0, 1.0);
    let u = u.clamp(0.0, 1.0);
    let (lo, hi) = frame.cone_interval(omega);
    let alpha = lo + u * (hi - lo);
    let dir = frame.direction_at(alpha - frame.theta2);
    TangentVector::project(frame.base, dir)
}

/// Distinct-keypoint count after merging near duplicates.
pub fn distinct_keypoint_count(kps: &SoiKeypointSet, chart: &SphereChart) -> usize {
    let work = chart.unrestricted();
    let pts: Vec<SpherePoint> = kps
        .keypoints
        .iter()
        .filter_map(|k| radial_project(k, &work).ok())
        .collect();
    distinct_indices(&pts).len()
}

/// JSON form of a manifold; 3-vectors are `[x, y, z]` in metres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldDocument {
    pub chart: SphereChart,
    pub camera: Vec3,
    pub centroid: Vec3,
    pub p1: Vec3,
    pub p2: Vec3,
    pub path_p0_p1: Vec<Vec3>,
    pub path_p1_p2: Vec<Vec3>,
    pub path_p2_p0: Vec<Vec3>,
    pub path_p0_o0: Vec<Vec3>,
    pub boundary: Vec<Vec<Vec3>>,
    pub polygon: Vec<Vec3>,
    pub clipped: bool,
}

fn positions(path: &GeodesicPath) -> Vec<Vec3> {
    path.samples().iter().map(|s| s.position()).collect()
}

impl DavsManifold {
    pub fn to_document(&self) -> ManifoldDocument {
        ManifoldDocument {
            chart: *self.chart(),
            camera: self.camera.position(),
            centroid: self.centroid.position(),
            p1: self.left.position(),
            p2: self.right.position(),
            path_p0_p1: positions(&self.paths[0]),
            path_p1_p2: positions(&self.paths[1]),
            path_p2_p0: positions(&self.paths[2]),
            path_p0_o0: positions(&self.centroid_path),
            boundary: self.boundary.iter().map(positions).collect(),
            polygon: self.polygon.iter().map(|p| p.position()).collect(),
            clipped: self.clipped,
        }
    }

    pub fn from_document(doc: &ManifoldDocument) -> Result<Self> {
        let chart = doc.chart.unrestricted();
        let pt = |v: &Vec3| chart.point(*v);
        let path = |vs: &[Vec3]| -> Result<GeodesicPath> {
            let samples = vs.iter().map(pt).collect::<std::result::Result<Vec<_>, _>>()?;
            if doc.clipped {
                GeodesicPath::polyline(samples).map_err(DavsError::from)
            } else {
                GeodesicPath::from_samples(samples).map_err(DavsError::from)
            }
        };
        Ok(Self {
            camera: pt(&doc.camera)?,
            centroid: pt(&doc.centroid)?,
            left: pt(&doc.p1)?,
            right: pt(&doc.p2)?,
            paths: [
                path(&doc.path_p0_p1)?,
                path(&doc.path_p1_p2)?,
                path(&doc.path_p2_p0)?,
            ],
            centroid_path: path(&doc.path_p0_o0)?,
            boundary: doc
                .boundary
                .iter()
                .map(|b| path(b))
                .collect::<Result<Vec<_>>>()?,
            polygon: doc.polygon.iter().map(pt).collect::<std::result::Result<_, _>>()?,
            clipped: doc.clipped,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("manifold serialises")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, ManifoldImportError> {
        let doc: ManifoldDocument = serde_json::from_str(text)?;
        Ok(Self::from_document(&doc)?)
    }
}

#[derive(Debug, Error)]
pub enum ManifoldImportError {
    #[error("malformed manifold JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Davs(#[from] DavsError),
}
