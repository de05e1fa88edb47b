//! Acceptance checks, one report line per criterion.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::Instant;

use davs_core::karcher::{karcher_mean_with, KarcherOptions};
use davs_core::sphere::{angle_between, exp_map, geodesic_distance, local_frame, log_map, spherical_convex_hull};
use davs_core::{
    build_davs, sample_direction, tangent_frame, DavsConfig, FrechetProblem, SoiKeypointSet,
    SphereChart, SpherePoint, TangentFrame, TangentVector, Vec3,
};
use davs_sim::config::{EnvConfig, Scenario};
use davs_sim::env::{reward, EpisodeLog, IpEnv};
use davs_sim::policy::{replay_validate, rollout, Method, PolicyConfig, PolicyParams, ReplayReport, RolloutOptions};
use davs_sim::train::{eval_seeds, evaluate, train, CemConfig, EvalMetrics};
use nalgebra::{Rotation3, Unit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn unit_from(elev: f64, az: f64) -> Vec3 {
    Vec3::new(elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin())
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    let z: f64 = rng.random_range(-1.0..1.0);
    let phi: f64 = rng.random_range(0.0..2.0 * PI);
    let s = (1.0 - z * z).sqrt();
    Vec3::new(s * phi.cos(), s * phi.sin(), z)
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Unit::new_normalize(random_unit(rng)), rng.random_range(-PI..PI))
}

/// Uniform point in the cap of half-angle `cap` around `axis`.
fn cap_point(rng: &mut ChaCha8Rng, axis: &Vec3, cap: f64) -> Vec3 {
    let (e, n) = local_frame(axis);
    let cos_a = rng.random_range(cap.cos()..1.0);
    let a = cos_a.acos();
    let phi: f64 = rng.random_range(0.0..2.0 * PI);
    (axis * a.cos() + (e * phi.cos() + n * phi.sin()) * a.sin()).normalize()
}

fn random_chart(rng: &mut ChaCha8Rng) -> SphereChart {
    let c = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    SphereChart::new(c, rng.random_range(0.2..3.0), false).unwrap()
}

// ---------------------------------------------------------------- geometry

/// Planar hull by gift wrapping, counter-clockwise, collinear points dropped.
fn gift_wrap(pts: &[(f64, f64)]) -> Vec<usize> {
    let cross = |o: usize, a: usize, b: usize| {
        (pts[a].0 - pts[o].0) * (pts[b].1 - pts[o].1) - (pts[a].1 - pts[o].1) * (pts[b].0 - pts[o].0)
    };
    let d2 = |a: usize, b: usize| (pts[a].0 - pts[b].0).powi(2) + (pts[a].1 - pts[b].1).powi(2);
    let start = (0..pts.len())
        .min_by(|&a, &b| pts[a].partial_cmp(&pts[b]).unwrap())
        .unwrap();
    let mut hull = vec![start];
    let mut p = start;
    loop {
        let mut q = (p + 1) % pts.len();
        for r in 0..pts.len() {
            if r == p {
                continue;
            }
            let c = cross(p, q, r);
            if c < 0.0 || (c == 0.0 && d2(p, r) > d2(p, q)) {
                q = r;
            }
        }
        if q == start {
            return hull;
        }
        hull.push(q);
        p = q;
        assert!(hull.len() <= pts.len(), "gift wrapping did not close");
    }
}

fn same_cycle(a: &[usize], b: &[usize]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let Some(shift) = b.iter().position(|x| *x == a[0]) else { return false };
    (0..a.len()).all(|i| a[i] == b[(i + shift) % b.len()])
}

fn criterion_geometry() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut bad_maps = 0;
    for _ in 0..10_000 {
        let ch = random_chart(&mut rng);
        let r = ch.radius();
        let p = ch.point_towards(random_unit(&mut rng)).unwrap();
        let q = ch.point_towards(random_unit(&mut rng)).unwrap();
        if angle_between(&p.unit(), &q.unit()) > PI - 1e-3 {
            continue;
        }
        let d = geodesic_distance(&p, &q).unwrap();
        let d_ref = r * p.unit().cross(&q.unit()).norm().atan2(p.unit().dot(&q.unit()));
        let v = log_map(&p, &q).unwrap();
        let back = exp_map(&v);
        let ok = (d - d_ref).abs() <= 1e-8 * r
            && (d - geodesic_distance(&q, &p).unwrap()).abs() <= 1e-8 * r
            && (v.norm() - d).abs() <= 1e-8 * r
            && (back.position() - q.position()).norm() <= 1e-8 * r;
        bad_maps += !ok as usize;
    }

    let mut bad_hulls = 0;
    for _ in 0..1000 {
        let ch = random_chart(&mut rng);
        let axis = random_unit(&mut rng);
        let cap: f64 = rng.random_range(0.1..1.4);
        let n = rng.random_range(3..40);
        let units: Vec<Vec3> = (0..n).map(|_| cap_point(&mut rng, &axis, cap)).collect();
        let pts: Vec<SpherePoint> = units.iter().map(|u| ch.point_towards(*u).unwrap()).collect();
        let (e1, e2) = local_frame(&axis);
        let planar: Vec<(f64, f64)> = units
            .iter()
            .map(|u| (u.dot(&e1) / u.dot(&axis), u.dot(&e2) / u.dot(&axis)))
            .collect();
        let oracle = gift_wrap(&planar);
        match spherical_convex_hull(&pts) {
            Ok(h) if same_cycle(&oracle, &h) => {}
            _ => bad_hulls += 1,
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Outcome {
        pass: bad_maps == 0 && bad_hulls == 0 && secs < 10.0,
        detail: format!("{bad_maps}/10000 map failures, {bad_hulls}/1000 hull mismatches, {secs:.1}s"),
    }
}

// ---------------------------------------------------------------- karcher

fn variance_ref(x: &Vec3, anchors: &[Vec3], r: f64) -> f64 {
    anchors
        .iter()
        .map(|a| (r * x.cross(a).norm().atan2(x.dot(a))).powi(2))
        .sum()
}

/// Grid search over the sphere followed by compass refinement.
fn karcher_oracle(anchors: &[Vec3], r: f64) -> Vec3 {
    let n = 40_000;
    let golden = PI * (3.0 - 5f64.sqrt());
    let mut best = anchors[0];
    let mut best_f = f64::INFINITY;
    for i in 0..n {
        let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
        let s = (1.0 - z * z).sqrt();
        let x = Vec3::new(s * (golden * i as f64).cos(), s * (golden * i as f64).sin(), z);
        let f = variance_ref(&x, anchors, r);
        if f < best_f {
            best_f = f;
            best = x;
        }
    }
    let mut step: f64 = 0.02;
    while step > 1e-10 {
        let (e, nn) = local_frame(&best);
        let mut moved = false;
        for k in 0..8 {
            let a = PI / 4.0 * k as f64;
            let d = e * a.cos() + nn * a.sin();
            let x = (best * step.cos() + d * step.sin()).normalize();
            let f = variance_ref(&x, anchors, r);
            if f < best_f {
                best_f = f;
                best = x;
                moved = true;
                break;
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    best
}

fn criterion_karcher() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut monotone = true;
    let mut failures = 0;
    for _ in 0..200 {
        let ch = random_chart(&mut rng);
        let r = ch.radius();
        let axis = random_unit(&mut rng);
        let cap: f64 = rng.random_range(0.2..0.9);
        let n = rng.random_range(3..=12);
        let units: Vec<Vec3> = (0..n).map(|_| cap_point(&mut rng, &axis, cap)).collect();
        let anchors: Vec<SpherePoint> = units.iter().map(|u| ch.point_towards(*u).unwrap()).collect();
        let prob = FrechetProblem::uniform(anchors).unwrap();
        match karcher_mean_with(&prob, &KarcherOptions::default()) {
            Ok(sol) => {
                worst = worst.max(angle_between(&sol.mean.unit(), &karcher_oracle(&units, r)));
                monotone &= sol.variance_trace.windows(2).all(|w| w[1] <= w[0]);
            }
            Err(_) => failures += 1,
        }
    }

    let ch = SphereChart::new(Vec3::new(0.1, 0.2, -0.3), 1.7, false).unwrap();
    let r = ch.radius();
    let axis = unit_from(0.4, 1.1);
    let (e, _) = local_frame(&axis);
    let pair = [axis * 0.8f64.cos() + e * 0.8f64.sin(), axis * 0.8f64.cos() - e * 0.8f64.sin()];
    let pair: Vec<SpherePoint> = pair.iter().map(|u| ch.point_towards(*u).unwrap()).collect();
    let mid = karcher_mean_with(&FrechetProblem::uniform(pair).unwrap(), &KarcherOptions::default()).unwrap();
    let mid_err = (mid.mean.unit() - axis).norm() * r;
    let tri: Vec<SpherePoint> = (0..3)
        .map(|k| ch.point_at_angles(PI / 2.0 - 0.7, 0.3 + 2.0 * PI * k as f64 / 3.0).unwrap())
        .collect();
    let pole = karcher_mean_with(&FrechetProblem::uniform(tri).unwrap(), &KarcherOptions::default()).unwrap();
    let tri_err = (pole.mean.unit() - Vec3::z()).norm() * r;

    let secs = t0.elapsed().as_secs_f64();
    Outcome {
        pass: failures == 0
            && worst <= 2e-3
            && monotone
            && mid_err <= 1e-6 * r
            && tri_err <= 1e-6 * r
            && secs < 60.0,
        detail: format!(
            "worst oracle gap {worst:.2e} rad, {failures} solver failures, monotone {monotone}, \
             midpoint {mid_err:.1e}, triangle {tri_err:.1e}, {secs:.1}s"
        ),
    }
}

// ---------------------------------------------------------------- davs

/// Keypoint loop around `axis` with angular and radial jitter.
fn random_soi(rng: &mut ChaCha8Rng, ch: &SphereChart, axis: &Vec3) -> SoiKeypointSet {
    let (e, nn) = local_frame(axis);
    let n = rng.random_range(4..16);
    let colat: f64 = rng.random_range(0.15..0.6);
    let kps = (0..n)
        .map(|k| {
            let phi: f64 = 2.0 * PI * k as f64 / n as f64 + rng.random_range(-0.2..0.2);
            let c: f64 = colat * rng.random_range(0.8..1.2);
            let u = axis * c.cos() + (e * phi.cos() + nn * phi.sin()) * c.sin();
            ch.center() + u * ch.radius() * rng.random_range(0.1..0.4)
        })
        .collect();
    SoiKeypointSet::new(kps, 0)
}

fn random_davs_case(rng: &mut ChaCha8Rng) -> (SphereChart, SoiKeypointSet, SpherePoint) {
    let ch = random_chart(rng);
    let axis = random_unit(rng);
    let kps = random_soi(rng, &ch, &axis);
    let cam = loop {
        let u = cap_point(rng, &axis, 1.4);
        if angle_between(&u, &axis) > 0.05 {
            break u;
        }
    };
    let p0 = ch.point_towards(cam).unwrap();
    (ch, kps, p0)
}

fn criterion_davs() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = DavsConfig::default();
    let mut failures = Vec::new();
    let mut worst_equiv = 0.0f64;
    for case in 0..500 {
        let (ch, kps, p0) = random_davs_case(&mut rng);
        let r = ch.radius();
        let rot = random_rotation(&mut rng);
        let built = build_davs(&kps, &p0, &ch, &cfg).and_then(|m| m.validate().map(|_| m));
        let m = match built {
            Ok(m) => m,
            Err(e) => {
                failures.push(format!("case {case}: {e}"));
                continue;
            }
        };
        let mr = match build_davs(&kps.rotated(&ch.center(), &rot), &p0.rotated(&rot), &ch, &cfg) {
            Ok(m) => m,
            Err(e) => {
                failures.push(format!("case {case} rotated: {e}"));
                continue;
            }
        };
        let gap = |a: &SpherePoint, b: &SpherePoint| (a.rotated(&rot).position() - b.position()).norm() / r;
        let g = gap(&m.centroid, &mr.centroid).max(gap(&m.left, &mr.left)).max(gap(&m.right, &mr.right));
        worst_equiv = worst_equiv.max(g);
    }
    let secs = t0.elapsed().as_secs_f64();
    Outcome {
        pass: failures.is_empty() && worst_equiv <= 1e-6 && secs < 30.0,
        detail: format!(
            "{} invariant failures{}, worst equivariance gap {worst_equiv:.1e}*r, {secs:.1}s",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    }
}

// ---------------------------------------------------------------- omega

fn criterion_omega() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut frames: Vec<TangentFrame> = Vec::new();
    while frames.len() < 200 {
        let (ch, kps, p0) = random_davs_case(&mut rng);
        if let Ok(f) = build_davs(&kps, &p0, &ch, &DavsConfig::default()).and_then(|m| tangent_frame(&m)) {
            frames.push(f);
        }
    }
    let dir = |f: &TangentFrame, w: f64, u: f64| -> TangentVector { sample_direction(f, w, u) };
    let mut zero_gap = 0.0f64;
    let mut end_gap = 0.0f64;
    let mut nested = true;
    let omegas = [0.0, 0.25, 0.5, 0.75, 1.0];
    for f in &frames {
        for u in [0.0, 0.2, 0.5, 0.9, 1.0] {
            zero_gap = zero_gap.max(angle_between(&dir(f, 0.0, u).direction(), &f.v0));
        }
        end_gap = end_gap
            .max(angle_between(&dir(f, 1.0, 0.0).direction(), &f.v2))
            .max(angle_between(&dir(f, 1.0, 1.0).direction(), &f.v1));
        for (i, &a) in omegas.iter().enumerate() {
            for k in 0..=20 {
                let d = dir(f, a, k as f64 / 20.0).direction();
                nested &= omegas[i..].iter().all(|&b| f.cone_contains(&d, b, 1e-12));
            }
        }
    }
    Outcome {
        pass: zero_gap <= 1e-9 && end_gap <= 1e-9 && nested,
        detail: format!("omega=0 gap {zero_gap:.1e}, endpoint gap {end_gap:.1e}, nesting {nested}, 200 frames"),
    }
}

// ---------------------------------------------------------------- environment

fn criterion_environment() -> Outcome {
    let pcfg = PolicyConfig::default();
    let opts = RolloutOptions {
        keep_log: true,
        ..RolloutOptions::default()
    };
    let mut identical = true;
    for cfg in [EnvConfig::clean(), EnvConfig::obstacle()] {
        for method in [Method::Davs { omega: 1.0 }, Method::NoDavs, Method::Vs, Method::Static] {
            for seed in [0, 9, 77] {
                let bytes = || {
                    let rec = rollout(&cfg, &pcfg, method, &PolicyParams::zeros(), seed, opts).unwrap();
                    let mut out = Vec::new();
                    rec.log.write_jsonl(&mut out).unwrap();
                    out
                };
                let (a, b) = (bytes(), bytes());
                identical &= a == b;
                let back = EpisodeLog::read_jsonl(std::str::from_utf8(&a).unwrap()).unwrap();
                let mut again = Vec::new();
                back.write_jsonl(&mut again).unwrap();
                identical &= again == a;
            }
        }
    }

    let cfg = EnvConfig::clean();
    let (env, _) = IpEnv::new(cfg.clone(), 0).unwrap();
    let mut bonus_ok = true;
    for t in 1..=cfg.t_max {
        let mut prev = env.state().clone();
        prev.a_rigid = 0.9;
        prev.n_ring = cfg.bag.vertices;
        let mut next = prev.clone();
        next.t = t;
        let expected = if t < cfg.t_max { 100.0 * (cfg.t_max - t) as f64 } else { 0.0 };
        bonus_ok &= reward(&prev, &next, &cfg) == expected;
    }

    let mut frozen = EnvConfig::clean();
    frozen.reward.freeze_lambda_r = true;
    frozen.reward.tau_rigid = 2.0;
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let rec = rollout(
            &frozen,
            &pcfg,
            Method::NoDavs,
            &PolicyParams::zeros(),
            seed,
            RolloutOptions {
                keep_transitions: true,
                ..RolloutOptions::default()
            },
        )
        .unwrap();
        let first = &rec.transitions[0].prev;
        let last = &rec.transitions.last().unwrap().next;
        let total: f64 = rec.transitions.iter().map(|t| t.reward).sum();
        let expected = frozen.reward.lambda_r_ref * (last.a_rigid - first.a_rigid)
            + frozen.reward.lambda_d * (last.n_ring as f64 - first.n_ring as f64);
        if rec.length != frozen.t_max {
            worst = f64::INFINITY;
        }
        worst = worst.max((total - expected).abs());
    }
    Outcome {
        pass: identical && bonus_ok && worst <= 1e-10,
        detail: format!("bit-identical replays {identical}, success bonus law {bonus_ok}, telescoping gap {worst:.1e}"),
    }
}

// ---------------------------------------------------------------- training

struct Trained {
    rows: Vec<EvalMetrics>,
    replay: ReplayReport,
}

fn train_and_evaluate(scenario: Scenario, methods: &[Method]) -> Trained {
    let cfg = EnvConfig::preset(scenario);
    let pcfg = PolicyConfig::default();
    let cem = CemConfig::default();
    let opts = RolloutOptions {
        keep_transitions: true,
        ..RolloutOptions::default()
    };
    let mut rows = Vec::new();
    let mut replay = ReplayReport::default();
    for &method in methods {
        let outcome = train(&cfg, &pcfg, method, &cem, opts, |rec| {
            replay.merge(&replay_validate(rec, &cfg, 1e-9));
        })
        .unwrap();
        let (metrics, _) = evaluate(
            &cfg,
            &pcfg,
            method,
            &outcome.params,
            &eval_seeds(2024, 100),
            RolloutOptions::default(),
        )
        .unwrap();
        rows.push(metrics);
    }
    Trained { rows, replay }
}

fn row<'a>(rows: &'a [EvalMetrics], method: Method) -> &'a EvalMetrics {
    rows.iter().find(|r| r.method == method.name()).unwrap()
}

fn criterion_headline(clean: &Trained) -> Outcome {
    let davs = row(&clean.rows, Method::Davs { omega: 1.0 });
    let plain = row(&clean.rows, Method::NoDavs);
    Outcome {
        pass: davs.median_len <= 0.5 * plain.median_len && davs.success_pct >= plain.success_pct + 20.0,
        detail: format!(
            "median length {} vs {}, success {:.0}% vs {:.0}% (davs-w1 vs no-davs)",
            davs.median_len, plain.median_len, davs.success_pct, plain.success_pct
        ),
    }
}

fn criterion_obstacle(obst: &Trained) -> Outcome {
    let s = |m: Method| row(&obst.rows, m).success_pct;
    let w1 = s(Method::Davs { omega: 1.0 });
    let w0 = s(Method::Davs { omega: 0.0 });
    let others = [w1, s(Method::NoDavs), s(Method::Vs)];
    let stat = s(Method::Static);
    Outcome {
        pass: w1 >= w0 && others.iter().all(|&o| stat <= o),
        detail: format!(
            "success davs-w1 {w1:.0}%, davs-w0 {w0:.0}%, no-davs {:.0}%, vs {:.0}%, static {stat:.0}%",
            others[1], others[2]
        ),
    }
}

fn criterion_replay(clean: &Trained, obst: &Trained) -> Outcome {
    let mut all = clean.replay;
    all.merge(&obst.replay);
    let fb = clean.replay.fallback_fraction();
    Outcome {
        pass: all.all_inside() && all.constrained > 0 && fb < 0.01,
        detail: format!(
            "{}/{} constrained camera actions inside their cones over {} steps, \
             {} fallback steps (clean fallback {:.3}%)",
            all.inside,
            all.constrained,
            all.steps,
            all.fallback,
            100.0 * fb
        ),
    }
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, o: Outcome| {
        println!("criterion {n} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += !o.pass as usize;
    };
    report(1, "geometry exactness", criterion_geometry());
    report(2, "karcher mean", criterion_karcher());
    report(3, "manifold invariants", criterion_davs());
    report(4, "omega contract", criterion_omega());
    report(5, "determinism and reward law", criterion_environment());

    let t0 = Instant::now();
    let clean = train_and_evaluate(Scenario::Clean, &[Method::Davs { omega: 1.0 }, Method::NoDavs]);
    let obst = train_and_evaluate(
        Scenario::Obstacle,
        &[Method::Davs { omega: 1.0 }, Method::Davs { omega: 0.0 }, Method::NoDavs, Method::Vs, Method::Static],
    );
    println!("training and evaluation took {:.0}s", t0.elapsed().as_secs_f64());
    report(6, "clean headline trend", criterion_headline(&clean));
    report(7, "obstacle ordinal trend", criterion_obstacle(&obst));
    report(8, "constraint replay", criterion_replay(&clean, &obst));

    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
