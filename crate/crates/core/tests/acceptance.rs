//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits nonzero when any fails. Reference values come from
//! closed forms or direct sums computed here, not from the library.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbv_core::boundary::{CollarReflection, LipschitzDomain};
use sbv_core::energy::{BulkDensity, MetricsRecord, SurfaceDensity};
use sbv_core::field::{
    unit_box, AffineField, Background, FieldPreset, GraphStep, InterfaceRef, LineStep, Modulus, SbvField, SineGraph,
};
use sbv_core::geom::ConvexPolygon;
use sbv_core::interp::{build_interpolant, CellData, Grad, Value};
use sbv_core::mesh::{internal_face_measure_mc, p2, Aabb, BaryCoords, Point, Simplex};
use sbv_core::pipeline::{run_convergence, ApproximationResult, Ladder, PipelineConfig};
use sbv_core::projector::{
    self, averaged_bounds_report, cell_data_distance, idempotence_check, project, sample_shift, BoundsConfig,
    PiecewiseAffine,
};

type P2 = Point<2>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(t: Instant, limit: Duration) -> (bool, String) {
    let e = t.elapsed();
    (e <= limit, format!("{:.1}s of {}s", e.as_secs_f64(), limit.as_secs()))
}

fn rand_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn random_simplex<const N: usize>(rng: &mut ChaCha8Rng) -> Simplex<N> {
    loop {
        let verts: Vec<Point<N>> = (0..=N)
            .map(|_| Point::<N>::from_fn(|_, _| rand_in(rng, -1.0, 1.0)))
            .collect();
        if let Ok(s) = Simplex::new(verts) {
            if s.volume() > 0.02 {
                return s;
            }
        }
    }
}

fn random_value<const M: usize>(rng: &mut ChaCha8Rng) -> Value<M> {
    Value::<M>::from_fn(|_, _| rand_in(rng, -1.0, 1.0))
}

/// Returns (edge trace error, max |jump| / (3 |s|), two-sided jump error,
/// cycle identity error).
fn simplex_case<const N: usize, const M: usize>(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let s = random_simplex::<N>(rng);
    let u: Vec<Value<M>> = (0..=N).map(|_| random_value::<M>(rng)).collect();
    let mut jumps = vec![vec![Value::<M>::zeros(); N + 1]; N + 1];
    for i in 0..=N {
        for j in i + 1..=N {
            jumps[i][j] = random_value::<M>(rng);
            jumps[j][i] = -jumps[i][j];
        }
    }
    let d = CellData::new(s.clone(), &u, |i, j| jumps[i][j]).expect("cell data");
    let ci = build_interpolant(&d).expect("interpolant");
    let v = s.vertices();
    let mut out = [0.0f64; 4];

    // Edge traces: u_i + t (u_j - u_i - s_ij) + s_ij [t > 1/2].
    for i in 0..=N {
        for j in i + 1..=N {
            for _ in 0..20 {
                let mut t: f64 = rng.random();
                if (t - 0.5).abs() < 1e-6 {
                    t += 1e-3;
                }
                let x = v[i] + (v[j] - v[i]) * t;
                let mut expect = u[i] + (u[j] - u[i] - jumps[i][j]) * t;
                if t > 0.5 {
                    expect += jumps[i][j];
                }
                let got = ci.eval(&x).expect("on the simplex");
                out[0] = out[0].max((got - expect).norm());
            }
        }
    }

    // Face jumps from the two one-sided affine pieces.
    let s_norm = {
        let mut acc = 0.0;
        for i in 0..=N {
            for j in i + 1..=N {
                acc += jumps[i][j].norm_squared();
            }
        }
        acc.sqrt()
    };
    for i in 0..=N {
        for j in i + 1..=N {
            for _ in 0..5 {
                let mut w: Vec<f64> = (0..=N).map(|_| rng.random::<f64>()).collect();
                let top = w.iter().cloned().fold(0.0, f64::max);
                w[i] = top;
                w[j] = top;
                let sum: f64 = w.iter().sum();
                let lam: Vec<f64> = w.iter().map(|x| x / sum).collect();
                let mut x = Point::<N>::zeros();
                for (k, l) in lam.iter().enumerate() {
                    x += v[k] * *l;
                }
                let two_sided = ci.eval_subcell(i, &x) - ci.eval_subcell(j, &x);
                let reported = ci.face_jump(i, j, &BaryCoords::new(&lam)).expect("on the face");
                out[1] = out[1].max(two_sided.norm() / (3.0 * s_norm));
                out[2] = out[2].max((two_sided - reported).norm());
            }
        }
    }

    // Cycle identity over every triple.
    for i in 0..=N {
        for j in 0..=N {
            for k in 0..=N {
                if i == j || j == k || i == k {
                    continue;
                }
                let r = d.xi(i, j) + d.xi(j, k) + d.xi(k, i) + d.s(i, j) + d.s(j, k) + d.s(k, i);
                out[3] = out[3].max(r.norm());
            }
        }
    }
    out
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = [0.0f64; 4];
    let cases: [fn(&mut ChaCha8Rng) -> [f64; 4]; 6] = [
        simplex_case::<2, 1>,
        simplex_case::<2, 2>,
        simplex_case::<2, 3>,
        simplex_case::<3, 1>,
        simplex_case::<3, 2>,
        simplex_case::<3, 3>,
    ];
    for k in 0..1000 {
        let r = cases[k % 6](&mut rng);
        for i in 0..4 {
            worst[i] = worst[i].max(r[i]);
        }
    }
    let (fast, time) = within(t, Duration::from_secs(10));
    let pass = worst[0] <= 1e-10 && worst[1] <= 1.0 && worst[2] <= 1e-10 && worst[3] <= 1e-10 && fast;
    outcome(
        pass,
        format!(
            "edge {:.1e}, jump/3|s| {:.3}, jump match {:.1e}, cycle {:.1e}, {time}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut exact_ok = true;
    let mut max_ratio2 = 0.0f64;
    for _ in 0..1000 {
        let s = random_simplex::<2>(&mut rng);
        let u: Vec<Value<1>> = (0..3).map(|_| random_value::<1>(&mut rng)).collect();
        let jumps: Vec<Value<1>> = (0..3).map(|_| random_value::<1>(&mut rng)).collect();
        let d = CellData::new(s.clone(), &u, |i, j| jumps[i + j - 1]).unwrap();
        let ci = build_interpolant(&d).unwrap();
        let jv: f64 = ci
            .internal_faces()
            .iter()
            .filter(|f| f.jump_a.norm() > 0.0 || f.jump_b.norm() > 0.0)
            .map(|f| f.length())
            .sum();
        let v = s.vertices();
        let perimeter = (v[1] - v[0]).norm() + (v[2] - v[1]).norm() + (v[0] - v[2]).norm();
        exact_ok &= jv <= perimeter;
        max_ratio2 = max_ratio2.max(jv / perimeter);
    }
    let mut mc_ok = true;
    let mut worst_sigma = f64::NEG_INFINITY;
    for _ in 0..300 {
        let s = random_simplex::<3>(&mut rng);
        let v = s.vertices();
        let mut boundary = 0.0;
        for skip in 0..4 {
            let f: Vec<Point<3>> = (0..4).filter(|k| *k != skip).map(|k| v[k]).collect();
            boundary += 0.5 * (f[1] - f[0]).cross(&(f[2] - f[0])).norm();
        }
        let (mean, se) = internal_face_measure_mc(&s, 20_000, 0.02, &mut rng).unwrap();
        let z = (mean - boundary) / se.max(1e-300);
        worst_sigma = worst_sigma.max(z);
        mc_ok &= mean <= boundary + 3.0 * se;
    }
    let (fast, time) = within(t, Duration::from_secs(60));
    outcome(
        exact_ok && mc_ok && fast,
        format!("n=2 max H1(J)/perimeter {max_ratio2:.3}, n=3 worst excess {worst_sigma:.2} sigma, {time}"),
    )
}

fn random_line_step(rng: &mut ChaCha8Rng) -> (P2, P2, f64, P2, f64) {
    let p = p2(rand_in(rng, 0.2, 0.8), rand_in(rng, 0.2, 0.8));
    let a = rand_in(rng, 0.0, 2.0 * PI);
    let n = p2(a.cos(), a.sin());
    let amp = rand_in(rng, -2.0, 2.0);
    let g = p2(rand_in(rng, -1.0, 1.0), rand_in(rng, -1.0, 1.0));
    let c = rand_in(rng, -1.0, 1.0);
    (p, n, amp, g, c)
}

fn line_step(p: P2, n: P2, amp: f64, g: P2, c: f64) -> LineStep {
    LineStep::new(p, n, amp, Background::affine(c, g), unit_box(), unit_box().inflate(1.0)).unwrap()
}

/// A field equal to `base` on `keep` and perturbed smoothly outside it.
struct Patched {
    base: Arc<dyn SbvField<1>>,
    keep: Aabb<2>,
}

impl Patched {
    fn excess(&self, x: &P2) -> (f64, P2) {
        let mut d = p2(0.0, 0.0);
        for i in 0..2 {
            if x[i] < self.keep.lo[i] {
                d[i] = x[i] - self.keep.lo[i];
            } else if x[i] > self.keep.hi[i] {
                d[i] = x[i] - self.keep.hi[i];
            }
        }
        let r2 = d.norm_squared();
        (r2 * r2.sqrt(), d * (3.0 * r2.sqrt()))
    }
}

impl SbvField<1> for Patched {
    fn eval(&self, x: &P2) -> Value<1> {
        self.base.eval(x) + Value::<1>::new(self.excess(x).0)
    }
    fn grad(&self, x: &P2) -> Grad<1, 2> {
        let g = self.excess(x).1;
        self.base.grad(x) + Grad::<1, 2>::new(g[0], g[1])
    }
    fn interfaces(&self) -> &[InterfaceRef<1>] {
        self.base.interfaces()
    }
}

fn project_any(f: &dyn SbvField<1>, eps: f64, zeta: P2, region: &Aabb<2>) -> Option<projector::PwAffineFunction<1>> {
    project(f, eps, zeta, region).ok()
}

fn criterion_3() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let region = unit_box();

    // Idempotence on projected random steps.
    let mut idem = 0.0f64;
    let mut n_idem = 0;
    while n_idem < 100 {
        let (p, n, amp, g, c) = random_line_step(&mut rng);
        let f = line_step(p, n, amp, g, c);
        let eps = rand_in(&mut rng, 0.15, 0.35);
        let zeta = sample_shift(&mut rng, eps);
        let Some(pi) = project_any(&f, eps, zeta, &region) else { continue };
        let Ok(again) = idempotence_check(&pi) else { continue };
        idem = idem.max(cell_data_distance(&pi, &again));
        n_idem += 1;
    }

    // Translation: Pi_{eps,zeta}[f(. - zeta)] = [Pi_{eps,0} f](. - zeta).
    let mut trans = 0.0f64;
    let mut n_trans = 0;
    let big = unit_box().inflate(0.2);
    while n_trans < 100 {
        let (p, n, amp, g, c) = random_line_step(&mut rng);
        let eps = rand_in(&mut rng, 0.15, 0.35);
        let zeta = sample_shift(&mut rng, eps);
        let f = line_step(p, n, amp, g, c);
        let shifted = line_step(p + zeta, n, amp, g, c - g.dot(&zeta));
        let (Some(a), Some(b)) = (
            project_any(&shifted, eps, zeta, &big),
            project_any(&f, eps, p2(0.0, 0.0), &big),
        ) else {
            continue;
        };
        for _ in 0..20 {
            let x = p2(rand_in(&mut rng, 0.1, 0.9), rand_in(&mut rng, 0.1, 0.9));
            trans = trans.max((a.eval(&x).unwrap() - b.eval(&(x - zeta)).unwrap()).norm());
        }
        n_trans += 1;
    }

    // Affine reproduction.
    let mut aff = 0.0f64;
    for _ in 0..100 {
        let a = Grad::<1, 2>::new(rand_in(&mut rng, -2.0, 2.0), rand_in(&mut rng, -2.0, 2.0));
        let b = Value::<1>::new(rand_in(&mut rng, -1.0, 1.0));
        let f = AffineField::<1>::new(a, b);
        let eps = rand_in(&mut rng, 0.05, 0.3);
        let pi = project(&f, eps, sample_shift(&mut rng, eps), &region).unwrap();
        for _ in 0..20 {
            let x = p2(rng.random(), rng.random());
            aff = aff.max((pi.eval(&x).unwrap() - (a * x + b)).norm());
        }
    }

    // Locality: a change outside the eps sqrt(2) neighbourhood of omega
    // leaves the projection on omega bit-identical.
    let mut local_ok = true;
    let mut n_loc = 0;
    while n_loc < 100 {
        let (p, n, amp, g, c) = random_line_step(&mut rng);
        let base: Arc<dyn SbvField<1>> = Arc::new(line_step(p, n, amp, g, c));
        let eps = rand_in(&mut rng, 0.05, 0.15);
        let lo = p2(rand_in(&mut rng, 0.2, 0.5), rand_in(&mut rng, 0.2, 0.5));
        let omega = Aabb::new(lo, lo.add_scalar(0.25));
        let patched = Patched {
            base: base.clone(),
            keep: omega.inflate(eps * 2f64.sqrt() * (1.0 + 1e-9)),
        };
        let zeta = sample_shift(&mut rng, eps);
        let (Some(a), Some(b)) = (project_any(&*base, eps, zeta, &omega), project_any(&patched, eps, zeta, &omega)) else {
            continue;
        };
        for _ in 0..20 {
            let x = omega.lo + p2(rng.random::<f64>(), rng.random::<f64>()) * 0.25;
            local_ok &= a.eval(&x).unwrap() == b.eval(&x).unwrap();
        }
        n_loc += 1;
    }

    let (fast, time) = within(t, Duration::from_secs(30));
    let pass = idem <= 1e-9 && trans <= 1e-9 && aff <= 1e-9 && local_ok && fast;
    outcome(
        pass,
        format!("idempotence {idem:.1e}, translation {trans:.1e}, affine {aff:.1e}, locality exact {local_ok}, {time}"),
    )
}

fn criterion_4() -> Outcome {
    let t = Instant::now();
    let declared_c = 4.0;
    let presets = [
        (
            "line_step",
            FieldPreset::LineStep {
                point: [0.5, 0.5],
                normal: [0.3, 1.0],
                amplitude: 1.0,
                slope: [0.5, -0.25],
            },
        ),
        (
            "smooth_plus_jump",
            FieldPreset::SmoothPlusJump {
                center: [0.5, 0.5],
                radius: 0.3,
                amplitude: 1.0,
            },
        ),
    ];
    let sq = ConvexPolygon::from_box(&unit_box());
    let mut pass = true;
    let mut notes = Vec::new();
    for (name, p) in presets {
        let f = p.build().unwrap();
        let mut ratios = Vec::new();
        for eps in [1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0] {
            let mut rng = ChaCha8Rng::seed_from_u64(404);
            let cfg = BoundsConfig::new(eps, 16, 2.0, Modulus::CappedPower { q: 0.5 });
            let r = averaged_bounds_report(&*f, &sq, &cfg, &mut rng).unwrap();
            ratios.push([r.bulk_ratio(), r.surface_ratio(), r.l1_ratio()]);
        }
        for k in 0..3 {
            let col: Vec<f64> = ratios.iter().map(|r| r[k]).collect();
            let hi = col.iter().cloned().fold(f64::MIN, f64::max);
            let lo = col.iter().cloned().fold(f64::MAX, f64::min);
            pass &= hi <= declared_c && lo > 0.0 && hi / lo <= 2.0;
            notes.push(format!("{name}[{k}] {lo:.3}..{hi:.3}"));
        }
    }
    let (fast, time) = within(t, Duration::from_secs(120));
    outcome(pass && fast, format!("{}, {time}", notes.join(", ")))
}

fn criterion_5() -> Outcome {
    let t = Instant::now();
    let eps = 0.25;
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let sq = ConvexPolygon::from_box(&unit_box());
    let mut pass = true;
    let mut notes = Vec::new();
    for j in [8usize, 16, 32] {
        let f = FieldPreset::Sawtooth { j }.build().unwrap();
        let (pi, _) = projector::project_jittered(&*f, eps, &unit_box(), &mut rng).unwrap();
        let mut sup = 0.0f64;
        pi.for_each_piece(&sq, &mut |pc| {
            for v in pc.poly.iter() {
                sup = sup.max(pc.affine.eval(v).norm());
            }
        });
        pass &= sup >= eps / 4.0;
        notes.push(format!("j={j}: {sup:.3}"));
    }
    let (fast, time) = within(t, Duration::from_secs(10));
    outcome(pass && fast, format!("sup norms {} vs eps/4 = {}, {time}", notes.join(", "), eps / 4.0))
}

fn criterion_6() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut pass = true;
    let mut notes = Vec::new();
    for (name, d) in [
        ("square", LipschitzDomain::unit_square()),
        ("hexagon", LipschitzDomain::hexagon(p2(0.5, 0.5), 0.5)),
    ] {
        match CollarReflection::auto(&d, 0.2 * d.min_edge()).and_then(|c| c.diagnostics(&mut rng, 1000, 10_000)) {
            Ok(g) => {
                pass &= g.involution_residual <= 1e-8 * d.diam() && g.boundary_residual <= 1e-9 && g.lipschitz <= 3.0;
                notes.push(format!(
                    "{name}: involution {:.1e}, boundary {:.1e}, L {:.3}",
                    g.involution_residual, g.boundary_residual, g.lipschitz
                ));
            }
            Err(e) => {
                pass = false;
                notes.push(format!("{name}: {e}"));
            }
        }
    }
    let (fast, time) = within(t, Duration::from_secs(30));
    outcome(pass && fast, format!("{}, {time}", notes.join("; ")))
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + h * i as f64) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn inversions(v: &[f64]) -> usize {
    v.windows(2).filter(|w| w[1] > w[0]).count()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

struct GraphLadder {
    results: Vec<Result<ApproximationResult<1>, String>>,
    elapsed: Duration,
}

fn graph_ladder() -> GraphLadder {
    let t = Instant::now();
    let f = GraphStep::new(
        SineGraph {
            c0: 0.3,
            amp: 0.1,
            freq: 1.0,
            phase: 0.0,
        },
        1.0,
        0.0,
        FieldPreset::graph_background(),
        unit_box(),
        unit_box().inflate(1.0),
    );
    let cfg = PipelineConfig {
        psi: BulkDensity::Power { p: 2.0 },
        g: SurfaceDensity::Cohesive(Modulus::CappedPower { q: 0.5 }),
        g0: Modulus::CappedPower { q: 0.5 },
        seed: 7,
        ..PipelineConfig::default()
    };
    let ladder = Ladder::Theta(vec![0.2, 0.1, 0.05, 0.025]);
    let results = run_convergence(&f, &unit_box(), &ladder, &cfg)
        .into_iter()
        .map(|r| r.map_err(|e| e.to_string()))
        .collect();
    GraphLadder {
        results,
        elapsed: t.elapsed(),
    }
}

/// Closed-form and quadrature values for the graph-step field
/// `x + y^2/2 + 1{y > 0.3 + 0.1 sin(2 pi x)}` on the unit square.
struct GraphOracle {
    length: f64,
    bulk: f64,
    grad_l1: f64,
    area: f64,
}

fn graph_oracle() -> GraphOracle {
    let slope = |x: f64| 0.2 * PI * (2.0 * PI * x).cos();
    GraphOracle {
        length: simpson(|x| (1.0 + slope(x).powi(2)).sqrt(), 0.0, 1.0, 20_000),
        bulk: 4.0 / 3.0,
        grad_l1: 0.5 * (2f64.sqrt() + 1f64.asinh()),
        area: simpson(|y| (2.0 + y * y).sqrt(), 0.0, 1.0, 20_000),
    }
}

fn ladder_metrics(l: &GraphLadder) -> Result<Vec<MetricsRecord>, String> {
    l.results.iter().map(|r| r.as_ref().map(|a| a.metrics.clone()).map_err(|e| e.clone())).collect()
}

fn criterion_7(l: &GraphLadder) -> Outcome {
    let ms = match ladder_metrics(l) {
        Ok(m) => m,
        Err(e) => return outcome(false, format!("level failed: {e}")),
    };
    let o = graph_oracle();
    let mu = o.grad_l1 + o.length;
    let cols: [(&str, Vec<f64>); 5] = [
        ("l1", ms.iter().map(|m| m.l1).collect()),
        ("lp", ms.iter().map(|m| m.lp_grad).collect()),
        ("d1", ms.iter().map(|m| m.d1).collect()),
        ("d2", ms.iter().map(|m| m.d2).collect()),
        ("hn1", ms.iter().map(|m| m.hn1_sym_diff).collect()),
    ];
    let monotone = cols.iter().all(|(_, c)| inversions(c) <= 1);
    let last = ms.last().unwrap();
    let surface = rel(last.surface_approx, o.length);
    let bulk = rel(last.bulk_approx, o.bulk);
    let pass = monotone && last.l1 <= 0.02 && last.d1 <= 0.05 * mu && surface <= 0.03 && bulk <= 0.03 && l.elapsed <= Duration::from_secs(300);
    let trend: Vec<String> = cols
        .iter()
        .map(|(n, c)| format!("{n} {}", c.iter().map(|v| format!("{v:.2e}")).collect::<Vec<_>>().join(">")))
        .collect();
    outcome(
        pass,
        format!(
            "{}; final l1 {:.1e}, d1 {:.3} vs {:.3}, surface {:.2}%, bulk {:.2}%, {:.1}s of 300s",
            trend.join(", "),
            last.l1,
            last.d1,
            0.05 * mu,
            100.0 * surface,
            100.0 * bulk,
            l.elapsed.as_secs_f64()
        ),
    )
}

fn criterion_8(l: &GraphLadder) -> Outcome {
    let ms = match ladder_metrics(l) {
        Ok(m) => m,
        Err(e) => return outcome(false, format!("level failed: {e}")),
    };
    let o = graph_oracle();
    let s = &ms.last().unwrap().strict_approx;
    let e = [rel(s.grad_l1, o.grad_l1), rel(s.area, o.area), rel(s.jump_l1, o.length)];
    outcome(
        e.iter().all(|x| *x <= 0.03),
        format!(
            "|grad| {:.3}%, area {:.3}%, |jump| {:.3}%",
            100.0 * e[0],
            100.0 * e[1],
            100.0 * e[2]
        ),
    )
}

fn criterion_9() -> Outcome {
    let t = Instant::now();
    let k = 100;
    let f = FieldPreset::StackedLines { k, power: 3.0 }.build().unwrap();
    let omega = f.domain().unwrap();
    // Every line crosses the unit-width domain: sum_k sqrt(k^-3).
    let oracle: f64 = (1..=k).map(|j| (j as f64).powf(-1.5)).sum();
    let cfg = PipelineConfig {
        g: SurfaceDensity::Cohesive(Modulus::Power { q: 0.5 }),
        g0: Modulus::Power { q: 0.5 },
        layer_multiple: 3.0,
        finite_jump: false,
        seed: 9,
        ..PipelineConfig::default()
    };
    let res = run_convergence(&*f, &omega, &Ladder::Theta(vec![0.2, 0.1, 0.05]), &cfg);
    let (fast, time) = within(t, Duration::from_secs(300));
    match res.last() {
        Some(Ok(r)) => {
            let e = rel(r.metrics.g0_approx, oracle);
            let len = r.metrics.jump_length_approx;
            outcome(
                e <= 0.05 && len >= 0.8 * k as f64 && fast,
                format!(
                    "g0 energy {:.4} vs {oracle:.4} ({:.2}%), H1(J) {len:.1} vs {}, {time}",
                    r.metrics.g0_approx,
                    100.0 * e,
                    0.8 * k as f64
                ),
            )
        }
        Some(Err(e)) => outcome(false, format!("final level failed: {e}")),
        None => outcome(false, "no levels".into()),
    }
}

fn criterion_10() -> Outcome {
    let sq = ConvexPolygon::from_box(&unit_box());
    let cfg = PipelineConfig::default();
    let ladder = Ladder::Theta(vec![0.2]);
    let mut notes = Vec::new();

    let ind = LineStep::indicator(0.43);
    let mut nonzero = 0usize;
    let mut pieces = 0usize;
    match run_convergence(&ind, &unit_box(), &ladder, &cfg).remove(0) {
        Ok(r) => {
            let a = r.approximant(&ind).unwrap();
            a.for_each_piece(&sq, &mut |pc| {
                pieces += 1;
                if pc.affine.grad.iter().any(|g| *g != 0.0) {
                    nonzero += 1;
                }
            });
        }
        Err(e) => notes.push(format!("indicator failed: {e}")),
    }
    notes.push(format!("indicator: {nonzero} of {pieces} pieces with gradient"));

    let smooth = FieldPreset::SmoothPlusJump {
        center: [0.5, 0.5],
        radius: 0.3,
        amplitude: 0.0,
    }
    .build()
    .unwrap();
    let mut faces = usize::MAX;
    match run_convergence(&*smooth, &unit_box(), &ladder, &cfg).remove(0) {
        Ok(r) => faces = projector::jump_faces(&r.approximant(&*smooth).unwrap(), &sq).len(),
        Err(e) => notes.push(format!("jump-free run failed: {e}")),
    }
    notes.push(format!("jump-free: {faces} faces"));
    outcome(pieces > 0 && nonzero == 0 && faces == 0, notes.join(", "))
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |n: usize, o: Outcome| {
        println!("criterion {n:>2}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    report(4, criterion_4());
    report(5, criterion_5());
    report(6, criterion_6());
    let ladder = graph_ladder();
    report(7, criterion_7(&ladder));
    report(8, criterion_8(&ladder));
    report(9, criterion_9());
    report(10, criterion_10());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
