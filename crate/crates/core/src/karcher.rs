//! Karcher (Fréchet) mean on the sphere by a Riemannian trust-region method.
//!
//! The cost is `f(p) = sum_i w_i d(p, x_i)^2`. Each iteration minimises the
//! quadratic model `f + <g, eta> + 1/2 <H eta, eta>` over the 2-D tangent
//! plane subject to `|eta| <= radius`, then maps the step back with the
//! exponential map.

use std::f64::consts::PI;

use thiserror::Error;

use crate::sphere::{
    angle_between, exp_map, geodesic_distance, hemisphere_center, local_frame, log_map, GeometryError,
    SphereChart, SpherePoint, TangentVector, Vec3,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KarcherError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("a Fréchet problem needs at least one anchor")]
    NoAnchors,
    #[error("weights must be finite, non-negative, with a positive sum and one per anchor")]
    BadWeights,
    #[error("anchors are not contained in one open hemisphere")]
    NonHemispheric,
    #[error("non-finite value in the trust-region model")]
    NumericalFailure,
    #[error("no convergence after {iterations} iterations (gradient norm {grad_norm:e})")]
    NonConvergence {
        iterations: usize,
        grad_norm: f64,
        last_iterate: SpherePoint,
    },
}

pub type Result<T> = std::result::Result<T, KarcherError>;

/// Weighted anchor points whose Fréchet mean is sought.
#[derive(Debug, Clone, PartialEq)]
pub struct FrechetProblem {
    anchors: Vec<SpherePoint>,
    weights: Vec<f64>,
}

impl FrechetProblem {
    pub fn new(anchors: Vec<SpherePoint>, weights: Option<Vec<f64>>) -> Result<Self> {
        let first = anchors.first().ok_or(KarcherError::NoAnchors)?;
        let chart = *first.chart();
        if anchors.iter().any(|a| !a.chart().same_sphere(&chart)) {
            return Err(GeometryError::ChartMismatch.into());
        }
        let weights = weights.unwrap_or_else(|| vec![1.0; anchors.len()]);
        if weights.len() != anchors.len()
            || weights.iter().any(|w| !w.is_finite() || *w < 0.0)
            || weights.iter().sum::<f64>() <= 0.0
        {
            return Err(KarcherError::BadWeights);
        }
        let units: Vec<Vec3> = anchors.iter().map(|a| a.unit()).collect();
        if hemisphere_center(&units).is_none() {
            return Err(KarcherError::NonHemispheric);
        }
        Ok(Self { anchors, weights })
    }

    pub fn uniform(anchors: Vec<SpherePoint>) -> Result<Self> {
        Self::new(anchors, None)
    }

    pub fn anchors(&self) -> &[SpherePoint] {
        &self.anchors
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn chart(&self) -> &SphereChart {
        self.anchors[0].chart()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Normalised weighted Euclidean mean of the anchors, on the sphere.
    pub fn chordal_mean(&self) -> SpherePoint {
        let chart = self.chart().unrestricted();
        let sum: Vec3 = self
            .anchors
            .iter()
            .zip(&self.weights)
            .map(|(a, w)| a.unit() * *w)
            .sum();
        // Hemispheric anchors keep this sum away from zero.
        chart
            .point_towards(sum)
            .unwrap_or_else(|_| self.anchors[0])
    }

    /// Apply a rotation about the chart centre to every anchor.
    pub fn rotated(&self, rotation: &nalgebra::Rotation3<f64>) -> Self {
        Self {
            anchors: self.anchors.iter().map(|a| a.rotated(rotation)).collect(),
            weights: self.weights.clone(),
        }
    }
}

/// `sum_i w_i d(p, x_i)^2`, in squared world units.
pub fn frechet_variance(p: &SpherePoint, prob: &FrechetProblem) -> Result<f64> {
    let mut total = 0.0;
    for (a, w) in prob.anchors.iter().zip(&prob.weights) {
        let d = geodesic_distance(p, a)?;
        total += w * d * d;
    }
    Ok(total)
}

/// `-2 sum_i w_i log_p(x_i)`.
pub fn riemannian_gradient(p: &SpherePoint, prob: &FrechetProblem) -> Result<TangentVector> {
    let mut dir = Vec3::zeros();
    for (a, w) in prob.anchors.iter().zip(&prob.weights) {
        dir -= log_map(p, a)?.direction() * (2.0 * w);
    }
    Ok(TangentVector::project(*p, dir))
}

/// Riemannian Hessian of the Fréchet variance applied to `eta`.
///
/// For one anchor at angular distance `theta` the Hessian of `d^2` has
/// eigenvalue 2 along the geodesic to the anchor and `2 theta cot(theta)`
/// across it.
pub fn hessian_apply(
    p: &SpherePoint,
    prob: &FrechetProblem,
    eta: &TangentVector,
) -> Result<TangentVector> {
    if !eta.base().chart().same_sphere(p.chart())
        || (eta.base().position() - p.position()).norm() > 1e-12 * p.chart().radius()
    {
        return Err(GeometryError::InvalidInput("tangent vector not based at p".into()).into());
    }
    let r = p.chart().radius();
    let v = eta.direction();
    let mut out = Vec3::zeros();
    for (a, w) in prob.anchors.iter().zip(&prob.weights) {
        let log = log_map(p, a)?;
        let d = log.norm();
        if d == 0.0 {
            out += v * (2.0 * w);
            continue;
        }
        let u = log.direction() / d;
        let theta = d / r;
        let across = theta * theta.cos() / theta.sin();
        let along = u * u.dot(&v);
        out += (along + (v - along) * across) * (2.0 * w);
    }
    Ok(TangentVector::project(*p, out))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrustRegionConfig {
    /// Initial trust radius, radians (scaled by the sphere radius).
    pub initial_radius: f64,
    /// Largest trust radius, radians.
    pub max_radius: f64,
    pub accept_ratio: f64,
    pub shrink_ratio: f64,
    pub expand_ratio: f64,
}

impl Default for TrustRegionConfig {
    fn default() -> Self {
        Self {
            initial_radius: 0.1,
            max_radius: PI / 4.0,
            accept_ratio: 0.1,
            shrink_ratio: 0.25,
            expand_ratio: 0.75,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrustRegionState {
    pub iterate: SpherePoint,
    /// Trust radius in world units.
    pub radius: f64,
    pub iteration: usize,
    /// Actual over predicted reduction of the last step, if one was tried.
    pub rho: Option<f64>,
    /// Whether the last trial step was accepted.
    pub accepted: bool,
    /// Length of the last trial step, world units.
    pub step_norm: f64,
    /// Decrease of the Fréchet variance by the last accepted step.
    pub reduction: f64,
}

impl TrustRegionState {
    pub fn start(iterate: SpherePoint, cfg: &TrustRegionConfig) -> Self {
        Self {
            iterate,
            radius: cfg.initial_radius * iterate.chart().radius(),
            iteration: 0,
            rho: None,
            accepted: false,
            step_norm: 0.0,
            reduction: 0.0,
        }
    }
}

type Vec2 = nalgebra::Vector2<f64>;
type Mat2 = nalgebra::Matrix2<f64>;

/// Exact minimiser of `g.x + 1/2 x.H x` over `|x| <= radius` in 2-D.
fn exact_subproblem(g: &Vec2, h: &Mat2, radius: f64) -> Vec2 {
    let (a, b, c) = (h[(0, 0)], h[(0, 1)], h[(1, 1)]);
    let mid = 0.5 * (a + c);
    let half = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let (lam_lo, lam_hi) = (mid - half, mid + half);
    let phi = 0.5 * (2.0 * b).atan2(a - c);
    let q_hi = Vec2::new(phi.cos(), phi.sin());
    let q_lo = Vec2::new(-phi.sin(), phi.cos());
    let (g_lo, g_hi) = (q_lo.dot(g), q_hi.dot(g));

    let step = |mu: f64| -> Vec2 {
        let mut x = Vec2::zeros();
        if g_lo != 0.0 {
            x -= q_lo * (g_lo / (lam_lo + mu));
        }
        if g_hi != 0.0 {
            x -= q_hi * (g_hi / (lam_hi + mu));
        }
        x
    };

    let mu_lo = (-lam_lo).max(0.0);
    if lam_lo > 0.0 {
        let newton = step(0.0);
        if newton.norm() <= radius {
            return newton;
        }
    }
    // Hard case: no gradient weight on the lowest eigenvector.
    let gscale = g.norm();
    if g_lo.abs() <= 1e-14 * gscale.max(f64::MIN_POSITIVE) {
        let partial = if g_hi != 0.0 {
            -q_hi * (g_hi / (lam_hi + mu_lo))
        } else {
            Vec2::zeros()
        };
        let pn = partial.norm();
        if pn <= radius && lam_hi + mu_lo > 0.0 {
            let tau = (radius * radius - pn * pn).max(0.0).sqrt();
            return partial + q_lo * tau;
        }
    }
    // Secular equation |x(mu)| = radius; the norm decreases in mu.
    let mut lo = mu_lo;
    let mut hi = mu_lo + gscale / radius + 1e-300;
    while step(hi).norm() > radius {
        hi = 2.0 * hi + 1.0;
    }
    for _ in 0..200 {
        let m = 0.5 * (lo + hi);
        if m <= lo || m >= hi {
            break;
        }
        if step(m).norm() > radius {
            lo = m;
        } else {
            hi = m;
        }
    }
    let x = step(hi);
    let n = x.norm();
    if n > radius {
        x * (radius / n)
    } else {
        x
    }
}

/// Truncated conjugate gradient, handing over to the exact solver when the
/// iteration leaves the trust region or meets non-positive curvature.
fn steihaug(g: &Vec2, h: &Mat2, radius: f64) -> Vec2 {
    let gnorm = g.norm();
    if gnorm == 0.0 {
        return Vec2::zeros();
    }
    let mut z = Vec2::zeros();
    let mut r = *g;
    let mut d = -r;
    for _ in 0..2 {
        let hd = h * d;
        let curvature = d.dot(&hd);
        if curvature <= 0.0 {
            return exact_subproblem(g, h, radius);
        }
        let alpha = r.dot(&r) / curvature;
        let z_next = z + d * alpha;
        if z_next.norm() >= radius {
            return exact_subproblem(g, h, radius);
        }
        let r_next = r + hd * alpha;
        if r_next.norm() <= 1e-14 * gnorm {
            return z_next;
        }
        let beta = r_next.dot(&r_next) / r.dot(&r);
        d = -r_next + d * beta;
        z = z_next;
        r = r_next;
    }
    z
}

/// `f(exp_p(eta)) - f(p)` for the Fréchet variance `f`, evaluated per
/// anchor from the step itself so that it stays accurate when the change
/// is far below the roundoff of `f`.
pub fn variance_change(eta: &TangentVector, prob: &FrechetProblem) -> Result<f64> {
    let p = eta.base();
    let r = p.chart().radius();
    let len = eta.norm();
    if len == 0.0 {
        return Ok(0.0);
    }
    let theta = len / r;
    let u0 = p.unit();
    let s = eta.direction() / len;
    let u1 = (u0 * theta.cos() + s * theta.sin()).normalize();
    let half = (0.5 * theta).sin();
    let mut total = 0.0;
    for (a, w) in prob.anchors.iter().zip(&prob.weights) {
        let ua = a.unit();
        let d0 = angle_between(&u0, &ua);
        let d1 = angle_between(&u1, &ua);
        let mid = 0.5 * (d0 + d1);
        let dd = if mid > 1e-3 && PI - mid > 1e-3 {
            // cos d1 - cos d0 without cancellation
            let dc = -2.0 * half * half * u0.dot(&ua) + theta.sin() * s.dot(&ua);
            2.0 * (-dc / (2.0 * mid.sin())).clamp(-1.0, 1.0).asin()
        } else {
            d1 - d0
        };
        total += w * dd * (2.0 * d0 + dd);
    }
    Ok(total * r * r)
}

/// One trust-region iteration.
pub fn trust_region_step(
    state: &TrustRegionState,
    prob: &FrechetProblem,
    cfg: &TrustRegionConfig,
) -> Result<TrustRegionState> {
    let p = state.iterate;
    let r = p.chart().radius();
    let f0 = frechet_variance(&p, prob)?;
    let grad = riemannian_gradient(&p, prob)?;
    let (e1, e2) = local_frame(&p.unit());
    let g = Vec2::new(grad.direction().dot(&e1), grad.direction().dot(&e2));
    let mut next = TrustRegionState {
        iteration: state.iteration + 1,
        rho: None,
        accepted: false,
        step_norm: 0.0,
        reduction: 0.0,
        ..*state
    };
    if !f0.is_finite() || !g.iter().all(|v| v.is_finite()) {
        return Err(KarcherError::NumericalFailure);
    }
    if g.norm() == 0.0 {
        return Ok(next);
    }

    let h1 = hessian_apply(&p, prob, &TangentVector::project(p, e1))?.direction();
    let h2 = hessian_apply(&p, prob, &TangentVector::project(p, e2))?.direction();
    let off = 0.5 * (h1.dot(&e2) + h2.dot(&e1));
    let h = Mat2::new(h1.dot(&e1), off, off, h2.dot(&e2));
    if !h.iter().all(|v| v.is_finite()) {
        return Err(KarcherError::NumericalFailure);
    }

    let x = steihaug(&g, &h, state.radius);
    let predicted = -(g.dot(&x) + 0.5 * x.dot(&(h * x)));
    let eta = TangentVector::project(p, e1 * x[0] + e2 * x[1]);
    next.step_norm = eta.norm();
    let candidate = exp_map(&eta);
    let change = variance_change(&eta, prob)?;
    if !predicted.is_finite() || !change.is_finite() {
        return Err(KarcherError::NumericalFailure);
    }
    let rho = if predicted > 0.0 {
        -change / predicted
    } else {
        f64::NEG_INFINITY
    };
    next.rho = Some(rho);

    if rho > cfg.accept_ratio && change <= 0.0 {
        next.iterate = candidate;
        next.accepted = true;
        next.reduction = -change;
    }
    let max_radius = cfg.max_radius * r;
    if rho < cfg.shrink_ratio {
        next.radius = (state.radius / 4.0).max(f64::MIN_POSITIVE);
    } else if rho > cfg.expand_ratio && next.step_norm >= state.radius * (1.0 - 1e-9) {
        next.radius = (2.0 * state.radius).min(max_radius);
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KarcherOptions {
    /// Stationarity tolerance, radians.
    pub tol: f64,
    pub max_iter: usize,
    pub trust_region: TrustRegionConfig,
}

impl Default for KarcherOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 100,
            trust_region: TrustRegionConfig::default(),
        }
    }
}

/// Outcome of a Karcher mean solve with its iteration trace.
#[derive(Debug, Clone, PartialEq)]
pub struct KarcherSolution {
    pub mean: SpherePoint,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Fréchet variance at the start, then after every accepted step as
    /// tracked by the accurate per-step change.
    pub variance_trace: Vec<f64>,
}

/// Karcher mean of `prob` by trust-region iterations from the chordal mean.
pub fn karcher_mean(prob: &FrechetProblem, tol: f64, max_iter: usize) -> Result<SpherePoint> {
    let options = KarcherOptions {
        tol,
        max_iter,
        ..KarcherOptions::default()
    };
    karcher_mean_with(prob, &options).map(|s| s.mean)
}

pub fn karcher_mean_with(prob: &FrechetProblem, options: &KarcherOptions) -> Result<KarcherSolution> {
    let r = prob.chart().radius();
    let bound = options.tol * 2.0 * prob.total_weight() * r;
    let mut state = TrustRegionState::start(prob.chordal_mean(), &options.trust_region);
    let mut trace = vec![frechet_variance(&state.iterate, prob)?];
    let mut grad_norm = riemannian_gradient(&state.iterate, prob)?.norm();
    while grad_norm > bound && state.iteration < options.max_iter {
        state = trust_region_step(&state, prob, &options.trust_region)?;
        if state.accepted {
            let last = *trace.last().expect("initial variance");
            trace.push(last - state.reduction);
            grad_norm = riemannian_gradient(&state.iterate, prob)?.norm();
        } else if state.rho.is_none() {
            break;
        }
    }
    if grad_norm > 10.0 * bound {
        return Err(KarcherError::NonConvergence {
            iterations: state.iteration,
            grad_norm,
            last_iterate: state.iterate,
        });
    }
    Ok(KarcherSolution {
        mean: state.iterate,
        iterations: state.iteration,
        grad_norm,
        variance_trace: trace,
    })
}
