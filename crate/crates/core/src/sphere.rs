//! Geometry of the camera action sphere.
//!
//! The camera moves on a sphere of radius `r` centred at the viewpoint
//! centroid `V0`, optionally restricted to the upper hemisphere
//! `z >= V0.z`. Everything here works in world units: tangent vectors have
//! length equal to the arc length they travel, distances are `r * angle`.

use std::f64::consts::PI;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Relative tolerance for "is this point on the sphere".
pub const ON_SPHERE_TOL: f64 = 1e-9;
/// Relative tolerance under which two points are merged.
pub const MERGE_TOL: f64 = 1e-9;
/// Angular gap to `pi` below which two points count as antipodal.
const ANTIPODAL_GAP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("points live on different charts")]
    ChartMismatch,
    #[error("logarithm undefined for antipodal points")]
    DegenerateLog,
    #[error("geodesic path undefined between antipodal points")]
    DegeneratePath,
    #[error("radial projection undefined for the sphere centre")]
    UndefinedDirection,
    #[error("insufficient points: {found} distinct, at least 3 required")]
    InsufficientPoints { found: usize },
    #[error("points are not contained in one open hemisphere")]
    NonHemispheric,
    #[error("degenerate hull: all points lie on one great circle")]
    DegenerateHull,
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Sphere `S^2(r)` around `V0`, with an optional `z >= V0.z` constraint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphereChart {
    center: Vec3,
    radius: f64,
    upper_hemisphere: bool,
}

impl SphereChart {
    pub fn new(center: Vec3, radius: f64, upper_hemisphere: bool) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(GeometryError::InvalidInput(format!(
                "sphere radius must be positive, got {radius}"
            )));
        }
        if !center.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::InvalidInput("non-finite sphere centre".into()));
        }
        Ok(Self {
            center,
            radius,
            upper_hemisphere,
        })
    }

    pub fn center(&self) -> Vec3 {
        self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn requires_upper_hemisphere(&self) -> bool {
        self.upper_hemisphere
    }

    /// Same sphere without the hemisphere constraint.
    pub fn unrestricted(&self) -> Self {
        Self {
            upper_hemisphere: false,
            ..*self
        }
    }

    /// Same sphere with another radius (e.g. the middle sphere of the SOI).
    pub fn with_radius(&self, radius: f64) -> Result<Self> {
        Self::new(self.center, radius, self.upper_hemisphere)
    }

    /// Two charts describe the same sphere when centre and radius agree.
    pub fn same_sphere(&self, other: &SphereChart) -> bool {
        self.center == other.center && self.radius == other.radius
    }

    /// Validate `position` against this chart.
    pub fn point(&self, position: Vec3) -> Result<SpherePoint> {
        let dist = (position - self.center).norm();
        if !dist.is_finite() || (dist - self.radius).abs() > ON_SPHERE_TOL * self.radius {
            return Err(GeometryError::InvalidInput(format!(
                "point at distance {dist} from centre, sphere radius {}",
                self.radius
            )));
        }
        if self.upper_hemisphere && position.z < self.center.z - ON_SPHERE_TOL * self.radius {
            return Err(GeometryError::InvalidInput(
                "point below the hemisphere horizon".into(),
            ));
        }
        Ok(SpherePoint {
            position,
            chart: *self,
        })
    }

    /// Point in the direction `dir` from the centre (need not be unit).
    pub fn point_towards(&self, dir: Vec3) -> Result<SpherePoint> {
        let n = dir.norm();
        if !(n.is_finite() && n > 0.0) {
            return Err(GeometryError::UndefinedDirection);
        }
        self.point(self.center + dir * (self.radius / n))
    }

    /// Point at the given elevation (from the horizon) and azimuth, radians.
    pub fn point_at_angles(&self, elevation: f64, azimuth: f64) -> Result<SpherePoint> {
        let dir = Vec3::new(
            elevation.cos() * azimuth.cos(),
            elevation.cos() * azimuth.sin(),
            elevation.sin(),
        );
        self.point(self.center + dir * self.radius)
    }

    pub(crate) fn unchecked(&self, position: Vec3) -> SpherePoint {
        SpherePoint {
            position,
            chart: *self,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpherePoint {
    position: Vec3,
    chart: SphereChart,
}

impl SpherePoint {
    pub fn position(&self) -> Vec3 {
        self.position
    }

    pub fn chart(&self) -> &SphereChart {
        &self.chart
    }

    /// Unit vector from the chart centre to this point.
    pub fn unit(&self) -> Vec3 {
        (self.position - self.chart.center) / self.chart.radius
    }

    pub fn in_upper_hemisphere(&self) -> bool {
        self.position.z >= self.chart.center.z - ON_SPHERE_TOL * self.chart.radius
    }

    /// Elevation above the chart horizon and azimuth, radians.
    pub fn angles(&self) -> (f64, f64) {
        let u = self.unit();
        let elevation = u.z.clamp(-1.0, 1.0).asin();
        let azimuth = u.y.atan2(u.x);
        (elevation, azimuth)
    }

    /// Move the point onto another chart describing the same sphere.
    pub fn on_chart(&self, chart: &SphereChart) -> Result<SpherePoint> {
        if !self.chart.same_sphere(chart) {
            return Err(GeometryError::ChartMismatch);
        }
        chart.point(self.position)
    }

    /// Rigid rotation about the chart centre.
    pub fn rotated(&self, rotation: &nalgebra::Rotation3<f64>) -> SpherePoint {
        let c = self.chart.center;
        self.chart.unchecked(c + rotation * (self.position - c))
    }
}

/// Vector in the tangent plane at `base`, in world units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentVector {
    base: SpherePoint,
    direction: Vec3,
}

impl TangentVector {
    pub fn new(base: SpherePoint, direction: Vec3) -> Result<Self> {
        let radial = base.unit();
        let off = radial.dot(&direction).abs();
        if off > ON_SPHERE_TOL * direction.norm().max(f64::MIN_POSITIVE) * 10.0 {
            return Err(GeometryError::InvalidInput(format!(
                "direction not tangent: radial component {off}"
            )));
        }
        Ok(Self { base, direction })
    }

    /// Orthogonal projection of an ambient vector onto the tangent plane.
    pub fn project(base: SpherePoint, ambient: Vec3) -> Self {
        let radial = base.unit();
        Self {
            base,
            direction: ambient - radial * radial.dot(&ambient),
        }
    }

    pub fn zero(base: SpherePoint) -> Self {
        Self {
            base,
            direction: Vec3::zeros(),
        }
    }

    pub fn base(&self) -> &SpherePoint {
        &self.base
    }

    pub fn direction(&self) -> Vec3 {
        self.direction
    }

    pub fn norm(&self) -> f64 {
        self.direction.norm()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            base: self.base,
            direction: self.direction * factor,
        }
    }

    /// Unit-length copy, `None` for the zero vector.
    pub fn normalized(&self) -> Option<Self> {
        let n = self.norm();
        (n > 0.0 && n.is_finite()).then(|| self.scaled(1.0 / n))
    }

    pub fn dot(&self, other: &TangentVector) -> f64 {
        self.direction.dot(&other.direction)
    }
}

/// Great-circle polyline between two points, sampled at bounded spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicPath {
    start: SpherePoint,
    end: SpherePoint,
    samples: Vec<SpherePoint>,
    length: f64,
}

impl GeodesicPath {
    /// Rebuild a path from stored samples, checking that they lie on the
    /// great circle through the endpoints.
    pub fn from_samples(samples: Vec<SpherePoint>) -> Result<Self> {
        let (start, end) = match (samples.first(), samples.last()) {
            (Some(a), Some(b)) => (*a, *b),
            _ => return Err(GeometryError::InvalidInput("empty geodesic path".into())),
        };
        for s in &samples {
            check_same(&start, s)?;
        }
        let length = geodesic_distance(&start, &end)?;
        let normal = start.unit().cross(&end.unit());
        if normal.norm() > 1e-12 {
            let n = normal.normalize();
            if samples
                .iter()
                .any(|s| s.unit().dot(&n).abs() > 1e-9)
            {
                return Err(GeometryError::InvalidInput(
                    "samples leave the great circle through the endpoints".into(),
                ));
            }
        }
        Ok(Self {
            start,
            end,
            samples,
            length,
        })
    }

    /// Path through arbitrary samples (e.g. after clipping); the length is
    /// the sum of the sample-to-sample geodesic distances.
    pub fn polyline(samples: Vec<SpherePoint>) -> Result<Self> {
        let (start, end) = match (samples.first(), samples.last()) {
            (Some(a), Some(b)) => (*a, *b),
            _ => return Err(GeometryError::InvalidInput("empty geodesic path".into())),
        };
        let mut length = 0.0;
        for w in samples.windows(2) {
            length += geodesic_distance(&w[0], &w[1])?;
        }
        Ok(Self {
            start,
            end,
            samples,
            length,
        })
    }

    pub fn start(&self) -> &SpherePoint {
        &self.start
    }

    pub fn end(&self) -> &SpherePoint {
        &self.end
    }

    pub fn samples(&self) -> &[SpherePoint] {
        &self.samples
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn reversed(&self) -> GeodesicPath {
        let mut samples = self.samples.clone();
        samples.reverse();
        GeodesicPath {
            start: self.end,
            end: self.start,
            samples,
            length: self.length,
        }
    }
}

fn check_same(p: &SpherePoint, q: &SpherePoint) -> Result<()> {
    if p.chart.same_sphere(&q.chart) {
        Ok(())
    } else {
        Err(GeometryError::ChartMismatch)
    }
}

/// Angle between two vectors, robust near 0 and `pi`.
pub fn angle_between(a: &Vec3, b: &Vec3) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// Signed angle from `a` to `b` about the axis `normal` (right-handed).
pub fn signed_angle(a: &Vec3, b: &Vec3, normal: &Vec3) -> f64 {
    a.cross(b).dot(normal).atan2(a.dot(b))
}

/// Geodesic distance between two points of one chart.
pub fn geodesic_distance(p: &SpherePoint, q: &SpherePoint) -> Result<f64> {
    check_same(p, q)?;
    Ok(p.chart.radius * angle_between(&p.unit(), &q.unit()))
}

/// Exponential map: travel along the great circle from the base point for
/// an arc length equal to the vector norm.
pub fn exp_map(v: &TangentVector) -> SpherePoint {
    let chart = v.base.chart;
    let len = v.norm();
    if len == 0.0 {
        return v.base;
    }
    let theta = len / chart.radius;
    let u = v.base.unit();
    let dir = u * theta.cos() + v.direction * (theta.sin() / len);
    chart.unchecked(chart.center + dir.normalize() * chart.radius)
}

/// Logarithm map: the tangent vector at `p` whose exponential is `q`.
pub fn log_map(p: &SpherePoint, q: &SpherePoint) -> Result<TangentVector> {
    check_same(p, q)?;
    let up = p.unit();
    let uq = q.unit();
    let theta = angle_between(&up, &uq);
    if theta == 0.0 {
        return Ok(TangentVector::zero(*p));
    }
    if PI - theta < ANTIPODAL_GAP {
        return Err(GeometryError::DegenerateLog);
    }
    let w = uq - up * up.dot(&uq);
    let wn = w.norm();
    if wn == 0.0 {
        return Ok(TangentVector::zero(*p));
    }
    Ok(TangentVector {
        base: *p,
        direction: w * (p.chart.radius * theta / wn),
    })
}

/// Sample the minor great-circle arc from `p` to `q` with consecutive
/// samples at most `max_spacing` apart (arc length).
pub fn geodesic_path(p: &SpherePoint, q: &SpherePoint, max_spacing: f64) -> Result<GeodesicPath> {
    check_same(p, q)?;
    if !(max_spacing.is_finite() && max_spacing > 0.0) {
        return Err(GeometryError::InvalidInput(format!(
            "max_spacing must be positive, got {max_spacing}"
        )));
    }
    let log = log_map(p, q).map_err(|e| match e {
        GeometryError::DegenerateLog => GeometryError::DegeneratePath,
        other => other,
    })?;
    let length = log.norm();
    if length == 0.0 {
        return Ok(GeodesicPath {
            start: *p,
            end: *q,
            samples: vec![*p],
            length: 0.0,
        });
    }
    let segments = (length / max_spacing).ceil().max(1.0) as usize;
    let mut samples = Vec::with_capacity(segments + 1);
    samples.push(*p);
    for i in 1..segments {
        let t = i as f64 / segments as f64;
        samples.push(exp_map(&log.scaled(t)));
    }
    samples.push(*q);
    Ok(GeodesicPath {
        start: *p,
        end: *q,
        samples,
        length,
    })
}

/// Outward radial projection of `x` onto the chart sphere.
pub fn radial_project(x: &Vec3, chart: &SphereChart) -> Result<SpherePoint> {
    let d = x - chart.center;
    let n = d.norm();
    if !(n.is_finite() && n > 0.0) {
        return Err(GeometryError::UndefinedDirection);
    }
    Ok(chart.unchecked(chart.center + d * (chart.radius / n)))
}

/// Unit tangent at the endpoint `at` of `path`, pointing toward the other end.
pub fn tangent_of_path_at(path: &GeodesicPath, at: &SpherePoint) -> Result<TangentVector> {
    check_same(&path.start, at)?;
    let tol = MERGE_TOL * at.chart.radius;
    let far = if (path.start.position - at.position).norm() <= tol {
        path.end
    } else if (path.end.position - at.position).norm() <= tol {
        path.start
    } else {
        return Err(GeometryError::InvalidInput(
            "query point is not an endpoint of the path".into(),
        ));
    };
    log_map(at, &far)?
        .normalized()
        .ok_or_else(|| GeometryError::InvalidInput("zero-length path has no tangent".into()))
}

/// Orthonormal tangent basis `(east, north)` at the unit direction `u`,
/// right-handed so that `east x north = u`.
pub fn local_frame(u: &Vec3) -> (Vec3, Vec3) {
    let up = Vec3::z();
    let mut east = up.cross(u);
    if east.norm() < 1e-9 {
        east = Vec3::y().cross(u);
    }
    let east = east.normalize();
    let north = u.cross(&east);
    (east, north)
}

/// A unit vector `c` with `c . u > 0` for every input, if one exists.
///
/// Starts from the mean and applies perceptron updates, which terminate
/// whenever the points are strictly inside some open hemisphere. The
/// feasible direction is then nudged toward the minimax centre so the
/// smallest margin is not needlessly thin.
pub fn hemisphere_center(units: &[Vec3]) -> Option<Vec3> {
    if units.is_empty() {
        return None;
    }
    let worst = |c: &Vec3| {
        units
            .iter()
            .map(|u| (*u, u.dot(c)))
            .fold((units[0], f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc })
    };
    let mean: Vec3 = units.iter().sum();
    let mut w = if mean.norm() > 1e-12 { mean } else { units[0] };
    let mut feasible = None;
    for _ in 0..100_000 {
        let (u, m) = worst(&w);
        if m > 1e-12 * w.norm() {
            feasible = Some(w.normalize());
            break;
        }
        w += u;
    }
    let mut best = feasible?;
    let mut best_margin = worst(&best).1;
    let mut c = best;
    for k in 0..200 {
        let (u, _) = worst(&c);
        c = (c + u / (k as f64 + 2.0)).normalize();
        let m = worst(&c).1;
        if m > best_margin {
            best = c;
            best_margin = m;
        }
    }
    Some(best)
}

/// Merge points closer than `MERGE_TOL * r`; returns indices of the kept
/// (first) representatives.
pub fn distinct_indices(points: &[SpherePoint]) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let tol = MERGE_TOL * p.chart.radius;
        if kept
            .iter()
            .all(|&k| (points[k].position - p.position).norm() > tol)
        {
            kept.push(i);
        }
    }
    kept
}

/// Convex hull of points in one open hemisphere.
///
/// Returns indices into `points` of the hull vertices, counter-clockwise
/// as seen from outside the sphere. Points are gnomonically projected onto
/// the tangent plane at a hemisphere centre, where great circles become
/// straight lines, and the planar hull is taken there.
pub fn spherical_convex_hull(points: &[SpherePoint]) -> Result<Vec<usize>> {
    if let Some(first) = points.first() {
        for p in &points[1..] {
            check_same(first, p)?;
        }
    }
    let kept = distinct_indices(points);
    if kept.len() < 3 {
        return Err(GeometryError::InsufficientPoints { found: kept.len() });
    }
    let units: Vec<Vec3> = kept.iter().map(|&i| points[i].unit()).collect();
    let c = hemisphere_center(&units).ok_or(GeometryError::NonHemispheric)?;
    let (e1, e2) = local_frame(&c);

    let mut planar: Vec<(f64, f64, usize)> = units
        .iter()
        .zip(&kept)
        .map(|(u, &idx)| {
            let h = u.dot(&c);
            (u.dot(&e1) / h, u.dot(&e2) / h, idx)
        })
        .collect();
    planar.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.partial_cmp(&b.1).unwrap())
    });

    let cross = |o: &(f64, f64, usize), a: &(f64, f64, usize), b: &(f64, f64, usize)| {
        let (ax, ay) = (a.0 - o.0, a.1 - o.1);
        let (bx, by) = (b.0 - o.0, b.1 - o.1);
        let z = ax * by - ay * bx;
        let scale = (ax * ax + ay * ay).sqrt() * (bx * bx + by * by).sqrt();
        if z.abs() <= 1e-12 * scale {
            0.0
        } else {
            z
        }
    };

    // Andrew's monotone chain; collinear points are dropped.
    let mut hull: Vec<(f64, f64, usize)> = Vec::with_capacity(2 * planar.len());
    for p in planar.iter() {
        while hull.len() >= 2 && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(*p);
    }
    let lower_len = hull.len() + 1;
    for p in planar.iter().rev().skip(1) {
        while hull.len() >= lower_len
            && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0
        {
            hull.pop();
        }
        hull.push(*p);
    }
    hull.pop();
    if hull.len() < 3 {
        return Err(GeometryError::DegenerateHull);
    }
    Ok(hull.into_iter().map(|p| p.2).collect())
}

/// Winding number of the closed spherical loop around `x`, measured in
/// the tangent plane at `x` (counter-clockwise seen from outside is
/// positive). Vertices must not be antipodal to `x`.
pub fn winding_number(loop_units: &[Vec3], x: &Vec3) -> f64 {
    let n = loop_units.len();
    if n == 0 {
        return 0.0;
    }
    let tangent = |v: &Vec3| v - x * x.dot(v);
    let mut total = 0.0;
    for i in 0..n {
        let a = tangent(&loop_units[i]);
        let b = tangent(&loop_units[(i + 1) % n]);
        total += signed_angle(&a, &b, x);
    }
    total / (2.0 * PI)
}

/// Whether `x` lies inside or on a convex loop that is counter-clockwise
/// seen from outside. `tol` is an angular tolerance in radians.
pub fn convex_loop_contains(loop_units: &[Vec3], x: &Vec3, tol: f64) -> bool {
    let n = loop_units.len();
    (0..n).all(|i| {
        let a = loop_units[i];
        let b = loop_units[(i + 1) % n];
        let normal = a.cross(&b);
        let nn = normal.norm();
        nn == 0.0 || normal.dot(x) / nn >= -tol
    })
}

/// Angular distance from the unit vector `x` to the minor arc `a -> b`.
pub fn angle_to_arc(x: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let normal = a.cross(b);
    let nn = normal.norm();
    let to_end = angle_between(x, a).min(angle_between(x, b));
    if nn < 1e-15 {
        return to_end;
    }
    let n = normal / nn;
    let foot = x - n * n.dot(x);
    if foot.norm() < 1e-15 {
        return to_end;
    }
    let foot = foot.normalize();
    // foot lies within the arc iff it is on the inner side of both ends.
    let inside = a.cross(&foot).dot(&n) >= 0.0 && foot.cross(b).dot(&n) >= 0.0;
    if inside {
        n.dot(x).abs().clamp(0.0, 1.0).asin()
    } else {
        to_end
    }
}
