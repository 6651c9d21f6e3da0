//! Bulk and surface energies, variation measures and discrepancy metrics
//! between a field and a piecewise-affine approximant.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::Matrix2;

use crate::field::{split_at_levels, Modulus, SbvField};
use crate::geom::{
    boxes_overlap, integrate_adaptive, integrate_triangle, segment_distance, ConvexPolygon, P2, TRI_RULE_3, TRI_RULE_6,
};
use crate::interp::Grad;
use crate::mesh::{p2, Aabb};
use crate::projector::{JumpFace, Piece, PiecewiseAffine};
use crate::{Error, Result};

/// Isotropic bulk densities `Psi(xi)` of p-growth.
#[derive(Clone)]
pub enum BulkDensity {
    /// `|xi|^p`.
    Power { p: f64 },
    /// `sqrt(1 + |xi|^2)`.
    Area,
    /// `f(|xi|)` with declared growth `|f(r)| <= c (r^p + 1)`.
    Custom {
        f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        p: f64,
        c: f64,
    },
}

impl std::fmt::Debug for BulkDensity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BulkDensity::Power { p } => write!(f, "Power {{ p: {p} }}"),
            BulkDensity::Area => write!(f, "Area"),
            BulkDensity::Custom { p, c, .. } => write!(f, "Custom {{ p: {p}, c: {c} }}"),
        }
    }
}

impl BulkDensity {
    pub fn eval_norm(&self, r: f64) -> f64 {
        match self {
            BulkDensity::Power { p } => r.powf(*p),
            BulkDensity::Area => (1.0 + r * r).sqrt(),
            BulkDensity::Custom { f, .. } => f(r),
        }
    }

    pub fn eval<const M: usize>(&self, xi: &Grad<M, 2>) -> f64 {
        self.eval_norm(xi.norm())
    }

    /// `(p, C)` with `|Psi(xi)| <= C (|xi|^p + 1)`.
    pub fn growth(&self) -> (f64, f64) {
        match self {
            BulkDensity::Power { p } => (*p, 1.0),
            BulkDensity::Area => (1.0, 1.0),
            BulkDensity::Custom { p, c, .. } => (*p, *c),
        }
    }
}

/// Surface densities `g(s, nu)`, depending on `s` through `|s|`.
#[derive(Clone, Debug, PartialEq)]
pub enum SurfaceDensity {
    /// `g0(|s|)`.
    Cohesive(Modulus),
    /// Constant `alpha`.
    Brittle { alpha: f64 },
    /// `g0(|s|) (1 + kappa nu_1^2)`.
    Anisotropic { g0: Modulus, kappa: f64 },
}

impl SurfaceDensity {
    pub fn eval(&self, s: f64, nu: &P2) -> f64 {
        match self {
            SurfaceDensity::Cohesive(g0) => g0.eval(s),
            SurfaceDensity::Brittle { alpha } => *alpha,
            SurfaceDensity::Anisotropic { g0, kappa } => g0.eval(s) * (1.0 + kappa * nu[0] * nu[0]),
        }
    }

    pub fn kinks(&self) -> Vec<f64> {
        match self {
            SurfaceDensity::Cohesive(g0) | SurfaceDensity::Anisotropic { g0, .. } => g0.kinks(),
            SurfaceDensity::Brittle { .. } => Vec::new(),
        }
    }
}

/// `sum Psi(G - eta) |piece|`, exact for piecewise-affine input.
pub fn bulk_energy_pw<const M: usize>(
    p: &dyn PiecewiseAffine<M>,
    psi: &BulkDensity,
    eta: &Grad<M, 2>,
    region: &ConvexPolygon,
) -> f64 {
    let mut s = 0.0;
    p.for_each_piece(region, &mut |pc| {
        s += psi.eval(&(pc.affine.grad - eta)) * crate::mesh::polygon_area(&pc.poly).abs();
    });
    s
}

/// True when an interface of `f` meets the convex polygon.
pub fn meets_interface<const M: usize, F: SbvField<M> + ?Sized>(f: &F, poly: &ConvexPolygon) -> bool {
    let b = poly.bbox();
    f.interfaces()
        .iter()
        .any(|i| boxes_overlap(i.curve().bbox(), &b) && !i.curve().intervals_in(poly).is_empty())
}

fn triangle_poly(a: &P2, b: &P2, c: &P2) -> Option<ConvexPolygon> {
    ConvexPolygon::new(vec![*a, *b, *c])
}

/// Integrates `g` over the triangle, refining where interfaces cross it.
fn integrate_tri_adaptive<const M: usize, F: SbvField<M> + ?Sized>(
    f: &F,
    t: [P2; 3],
    depth: usize,
    g: &mut dyn FnMut(&P2) -> f64,
) -> f64 {
    let crossed = depth > 0
        && match triangle_poly(&t[0], &t[1], &t[2]) {
            Some(poly) => meets_interface(f, &poly),
            None => false,
        };
    if !crossed {
        return integrate_triangle(&t[0], &t[1], &t[2], &TRI_RULE_6, g);
    }
    let m01 = (t[0] + t[1]) * 0.5;
    let m12 = (t[1] + t[2]) * 0.5;
    let m20 = (t[2] + t[0]) * 0.5;
    integrate_tri_adaptive(f, [t[0], m01, m20], depth - 1, g)
        + integrate_tri_adaptive(f, [m01, t[1], m12], depth - 1, g)
        + integrate_tri_adaptive(f, [m20, m12, t[2]], depth - 1, g)
        + integrate_tri_adaptive(f, [m01, m12, m20], depth - 1, g)
}

/// Depth of triangle refinement around interfaces for field integrals.
pub const FIELD_REFINE_DEPTH: usize = 10;

/// `int_region g(x) dx` for an integrand that is smooth off the interfaces
/// of `f`.
pub fn integrate_over_region<const M: usize, F: SbvField<M> + ?Sized>(
    f: &F,
    region: &ConvexPolygon,
    g: &mut dyn FnMut(&P2) -> f64,
) -> f64 {
    let b = region.bbox();
    let size = (b.hi - b.lo).max();
    let n = 16usize;
    let h = size / n as f64;
    let nx = ((b.hi[0] - b.lo[0]) / h).ceil().max(1.0) as usize;
    let ny = ((b.hi[1] - b.lo[1]) / h).ceil().max(1.0) as usize;
    let mut total = 0.0;
    for i in 0..nx {
        for j in 0..ny {
            let lo = b.lo + p2(i as f64 * h, j as f64 * h);
            let sq = ConvexPolygon::from_box(&Aabb::new(lo, lo + p2(h, h)));
            let poly = region.clip(sq.vertices());
            for k in 1..poly.len().saturating_sub(1) {
                total += integrate_tri_adaptive(f, [poly[0], poly[k], poly[k + 1]], FIELD_REFINE_DEPTH, g);
            }
        }
    }
    total
}

/// `int_region Psi(grad u - eta)`.
pub fn bulk_energy_field<const M: usize, F: SbvField<M> + ?Sized>(
    f: &F,
    psi: &BulkDensity,
    eta: &Grad<M, 2>,
    region: &ConvexPolygon,
) -> f64 {
    integrate_over_region(f, region, &mut |x| psi.eval(&(f.grad(x) - eta)))
}

/// `int g(|[v]|, nu)` over one face.
pub fn face_surface_energy<const M: usize>(face: &JumpFace<M>, g: &SurfaceDensity) -> f64 {
    let len = face.length();
    if len == 0.0 {
        return 0.0;
    }
    if face.jump_a == face.jump_b {
        return g.eval(face.jump_a.norm(), &face.normal) * len;
    }
    let knots = split_at_levels(0.0, 1.0, &g.kinks(), &|t| face.jump_at(t).norm());
    let mut s = 0.0;
    for w in knots.windows(2) {
        s += integrate_adaptive(
            &mut |t| g.eval(face.jump_at(t).norm(), &face.normal),
            w[0],
            w[1],
            1e-10,
            1e-16,
        );
    }
    s * len
}

pub fn surface_energy_faces<const M: usize>(faces: &[JumpFace<M>], g: &SurfaceDensity) -> f64 {
    faces.iter().map(|f| face_surface_energy(f, g)).sum()
}

pub fn surface_energy_pw<const M: usize>(p: &dyn PiecewiseAffine<M>, g: &SurfaceDensity, region: &ConvexPolygon) -> f64 {
    let mut s = 0.0;
    p.for_each_jump_face(region, &mut |f| s += face_surface_energy(f, g));
    s
}

/// `int_{J_u cap region} g([u], nu_u) dH^1`.
pub fn surface_energy_field<const M: usize, F: SbvField<M> + ?Sized>(f: &F, g: &SurfaceDensity, region: &ConvexPolygon) -> f64 {
    let kinks = g.kinks();
    let mut total = 0.0;
    for iface in f.interfaces() {
        let c = iface.curve();
        for (t0, t1) in c.intervals_in(region) {
            let knots = split_at_levels(t0, t1, &kinks, &|t| iface.jump(t).norm());
            for w in knots.windows(2) {
                total += c.integrate(w[0], w[1], &|t| {
                    let j = iface.jump(t).norm();
                    if j > 0.0 {
                        g.eval(j, &iface.normal(t))
                    } else {
                        0.0
                    }
                });
            }
        }
    }
    total
}

/// `H^1(J_v cap region)` of an approximant.
pub fn jump_length_pw<const M: usize>(p: &dyn PiecewiseAffine<M>, region: &ConvexPolygon) -> f64 {
    let mut s = 0.0;
    p.for_each_jump_face(region, &mut |f| s += f.length());
    s
}

/// `H^1(J_u cap region)`.
pub fn jump_length_field<const M: usize, F: SbvField<M> + ?Sized>(f: &F, region: &ConvexPolygon) -> f64 {
    surface_energy_field(f, &SurfaceDensity::Brittle { alpha: 1.0 }, region)
}

/// The three quantities behind strict and area-strict convergence.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StrictMetrics {
    /// `int |grad v|`.
    pub grad_l1: f64,
    /// `int sqrt(1 + |grad v|^2)`.
    pub area: f64,
    /// `int_{J_v} |[v]|`.
    pub jump_l1: f64,
}

impl StrictMetrics {
    pub fn total_variation(&self) -> f64 {
        self.grad_l1 + self.jump_l1
    }
}

pub fn strict_metrics_field<const M: usize, F: SbvField<M> + ?Sized>(f: &F, region: &ConvexPolygon) -> StrictMetrics {
    let zero = Grad::<M, 2>::zeros();
    StrictMetrics {
        grad_l1: bulk_energy_field(f, &BulkDensity::Power { p: 1.0 }, &zero, region),
        area: bulk_energy_field(f, &BulkDensity::Area, &zero, region),
        jump_l1: surface_energy_field(f, &SurfaceDensity::Cohesive(Modulus::Power { q: 1.0 }), region),
    }
}

pub fn strict_metrics_pw<const M: usize>(p: &dyn PiecewiseAffine<M>, region: &ConvexPolygon) -> StrictMetrics {
    let mut m = StrictMetrics::default();
    p.for_each_piece(region, &mut |pc| {
        let a = crate::mesh::polygon_area(&pc.poly).abs();
        let r = pc.affine.grad.norm();
        m.grad_l1 += r * a;
        m.area += (1.0 + r * r).sqrt() * a;
    });
    m.jump_l1 = surface_energy_pw(p, &SurfaceDensity::Cohesive(Modulus::Power { q: 1.0 }), region);
    m
}

/// Refinement depth for pieces crossed by interfaces of the field.
pub const PIECE_REFINE_DEPTH: usize = 6;

/// `int_piece g(x)` where `g` is smooth off the interfaces of `f`.
pub fn integrate_piece<const M: usize, F: SbvField<M> + ?Sized>(
    f: &F,
    pc: &Piece<M>,
    g: &mut dyn FnMut(&P2) -> f64,
) -> f64 {
    let poly = &pc.poly;
    let mut s = 0.0;
    for k in 1..poly.len().saturating_sub(1) {
        let t = [poly[0], poly[k], poly[k + 1]];
        s += if pc.smooth_hint {
            integrate_triangle(&t[0], &t[1], &t[2], &TRI_RULE_3, g)
        } else {
            integrate_tri_adaptive(f, t, PIECE_REFINE_DEPTH, g)
        };
    }
    s
}

/// `||v - u||_{L^1(region)}`.
pub fn l1_distance<const M: usize, F: SbvField<M> + ?Sized>(f: &F, p: &dyn PiecewiseAffine<M>, region: &ConvexPolygon) -> f64 {
    let mut s = 0.0;
    p.for_each_piece(region, &mut |pc| {
        s += integrate_piece(f, pc, &mut |x| (pc.affine.eval(x) - f.eval(x)).norm());
    });
    s
}

/// `int_region |grad v - grad u|^p`.
pub fn lp_grad_distance<const M: usize, F: SbvField<M> + ?Sized>(
    f: &F,
    p: &dyn PiecewiseAffine<M>,
    pexp: f64,
    region: &ConvexPolygon,
) -> f64 {
    let mut s = 0.0;
    p.for_each_piece(region, &mut |pc| {
        s += integrate_piece(f, pc, &mut |x| (pc.affine.grad - f.grad(x)).norm().powf(pexp));
    });
    s
}

/// A bilipschitz map of the plane with its inverse.
pub trait Deformation: Sync {
    fn apply(&self, x: &P2) -> P2;
    fn inverse(&self, y: &P2) -> P2;
    /// Step for finite-difference Jacobians.
    fn fd_step(&self) -> f64 {
        1e-7
    }
    fn jacobian(&self, x: &P2) -> Matrix2<f64> {
        let h = self.fd_step();
        let dx = (self.apply(&(x + p2(h, 0.0))) - self.apply(&(x - p2(h, 0.0)))) / (2.0 * h);
        let dy = (self.apply(&(x + p2(0.0, h))) - self.apply(&(x - p2(0.0, h)))) / (2.0 * h);
        Matrix2::from_columns(&[dx, dy])
    }
}

pub struct IdentityMap;

impl Deformation for IdentityMap {
    fn apply(&self, x: &P2) -> P2 {
        *x
    }
    fn inverse(&self, y: &P2) -> P2 {
        *y
    }
    fn jacobian(&self, _x: &P2) -> Matrix2<f64> {
        Matrix2::identity()
    }
}

/// Points closer than this to a jump curve count as lying on it.
pub const MATCH_TOL: f64 = 1e-9;

/// Uniform bucket grid over jump faces.
pub struct FaceIndex<'a, const M: usize> {
    faces: &'a [JumpFace<M>],
    h: f64,
    buckets: HashMap<(i64, i64), Vec<u32>>,
}

impl<'a, const M: usize> FaceIndex<'a, M> {
    pub fn new(faces: &'a [JumpFace<M>]) -> Self {
        let mut lens: Vec<f64> = faces.iter().map(|f| f.length()).filter(|l| *l > 0.0).collect();
        lens.sort_by(f64::total_cmp);
        let h = if lens.is_empty() { 1.0 } else { (lens[lens.len() / 2] * 2.0).max(1e-9) };
        let mut buckets: HashMap<(i64, i64), Vec<u32>> = HashMap::new();
        for (k, f) in faces.iter().enumerate() {
            let lo = f.a.inf(&f.b).add_scalar(-MATCH_TOL);
            let hi = f.a.sup(&f.b).add_scalar(MATCH_TOL);
            let (i0, j0) = ((lo[0] / h).floor() as i64, (lo[1] / h).floor() as i64);
            let (i1, j1) = ((hi[0] / h).floor() as i64, (hi[1] / h).floor() as i64);
            for i in i0..=i1 {
                for j in j0..=j1 {
                    buckets.entry((i, j)).or_default().push(k as u32);
                }
            }
        }
        FaceIndex { faces, h, buckets }
    }

    /// Face within `MATCH_TOL` of `y` (closest first) and the face parameter.
    pub fn find(&self, y: &P2) -> Option<(usize, f64)> {
        let key = ((y[0] / self.h).floor() as i64, (y[1] / self.h).floor() as i64);
        let list = self.buckets.get(&key)?;
        let mut best: Option<(usize, f64, f64)> = None;
        for &k in list {
            let f = &self.faces[k as usize];
            let d = segment_distance(y, &f.a, &f.b);
            if d <= MATCH_TOL && best.is_none_or(|b| d < b.2) {
                let e = f.b - f.a;
                let t = ((y - f.a).dot(&e) / e.norm_squared()).clamp(0.0, 1.0);
                best = Some((k as usize, t, d));
            }
        }
        best.map(|b| (b.0, b.1))
    }
}

/// Jump-set discrepancies between a field and a deformed approximant.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Discrepancy {
    /// `int g0(|[u] - [v] o Phi|)` over `J_u cup Phi^{-1}(J_v)`.
    pub d1: f64,
    /// `int g0(|[u]| + |[v] o Phi|) |nu_u - nu_v o Phi|` over the same set.
    pub d2: f64,
    /// `H^1(J_u symmetric-difference Phi^{-1}(J_v))`.
    pub hn1: f64,
}

const GAUSS3: [(f64, f64); 3] = [
    (0.112_701_665_379_258_31, 5.0 / 18.0),
    (0.5, 8.0 / 18.0),
    (0.887_298_334_620_741_7, 5.0 / 18.0),
];

/// Integrates over `[a, b]` with 3-point Gauss panels, bisecting panels on
/// which the discrete `status` changes until they are shorter than `min_w`.
fn status_panels(
    a: f64,
    b: f64,
    min_w: f64,
    status: &dyn Fn(f64) -> i64,
    f: &mut dyn FnMut(f64) -> [f64; 3],
    out: &mut [f64; 3],
) {
    let mut stack = vec![(a, b)];
    while let Some((l, r)) = stack.pop() {
        let sl = status(l);
        let uniform = status(r) == sl && GAUSS3.iter().all(|(x, _)| status(l + (r - l) * x) == sl);
        if uniform || r - l <= min_w {
            for (x, w) in GAUSS3 {
                let v = f(l + (r - l) * x);
                for k in 0..3 {
                    out[k] += w * (r - l) * v[k];
                }
            }
        } else {
            let m = 0.5 * (l + r);
            stack.push((m, r));
            stack.push((l, m));
        }
    }
}

/// Whether `x` lies (within tolerance) on a jump curve of `f`, probing
/// across it along `n`.
fn on_jump_set<const M: usize, F: SbvField<M> + ?Sized>(f: &F, x: &P2, n: &P2) -> bool {
    let probe = 4.0 * MATCH_TOL;
    for iface in f.interfaces() {
        let b = iface.curve().bbox().inflate(probe);
        if !b.contains(x) {
            continue;
        }
        if iface.side(&(x + n * probe)) != iface.side(&(x - n * probe)) {
            // Confirm against the curve itself (sides are global half-spaces
            // for straight interfaces).
            let (tau, d) = iface.curve().closest(x);
            if d <= probe && iface.jump(tau).norm() > 0.0 {
                return true;
            }
        }
    }
    false
}

/// `d1`, `d2` and the symmetric-difference length on `region`.
/// `faces` are the approximant's jump faces (already restricted to the
/// region of interest).
pub fn jump_discrepancy<const M: usize, F: SbvField<M> + ?Sized>(
    f: &F,
    faces: &[JumpFace<M>],
    phi: &dyn Deformation,
    g0: &Modulus,
    region: &ConvexPolygon,
) -> Result<Discrepancy> {
    let index = FaceIndex::new(faces);
    let mut acc = [0.0f64; 3];
    let panel = index.h.min(1.0);
    // (a) Along J_u.
    for iface in f.interfaces() {
        let c = iface.curve();
        for (t0, t1) in c.intervals_in(region) {
            let len = c.length_between(t0, t1);
            if len <= 0.0 {
                continue;
            }
            let n = (len / panel).ceil().max(1.0) as usize;
            let dt = (t1 - t0) / n as f64;
            let min_w = dt * 1e-9 / panel.max(1e-12);
            let status = |t: f64| match index.find(&phi.apply(&c.point(t))) {
                Some(_) => 1,
                None => 0,
            };
            let mut integrand = |t: f64| -> [f64; 3] {
                let ju = iface.jump(t);
                let nj = ju.norm();
                if nj == 0.0 {
                    return [0.0; 3];
                }
                let w = c.deriv(t).norm();
                let nu = iface.normal(t);
                match index.find(&phi.apply(&c.point(t))) {
                    Some((k, s)) => {
                        let fc = &faces[k];
                        let sigma = if fc.normal.dot(&nu) < 0.0 { -1.0 } else { 1.0 };
                        let ja = fc.jump_at(s) * sigma;
                        [
                            g0.eval((ju - ja).norm()) * w,
                            g0.eval(nj + ja.norm()) * (nu - fc.normal * sigma).norm() * w,
                            0.0,
                        ]
                    }
                    None => [g0.eval(nj) * w, g0.eval(nj) * w, w],
                }
            };
            for k in 0..n {
                let a = t0 + dt * k as f64;
                status_panels(a, a + dt, min_w, &status, &mut integrand, &mut acc);
            }
        }
    }
    // (b) Approximant faces whose preimage is off J_u.
    for fc in faces {
        let e = fc.b - fc.a;
        let len = e.norm();
        if len == 0.0 {
            continue;
        }
        let status = |t: f64| {
            let x = phi.inverse(&fc.point(t));
            if region.contains(&x) && !on_jump_set(f, &x, &fc.normal) {
                1
            } else {
                0
            }
        };
        let mut integrand = |t: f64| -> [f64; 3] {
            let x = phi.inverse(&fc.point(t));
            if !region.contains(&x) || on_jump_set(f, &x, &fc.normal) {
                return [0.0; 3];
            }
            let ja = fc.jump_at(t).norm();
            if ja == 0.0 {
                return [0.0; 3];
            }
            let jac = phi.jacobian(&x);
            let w = match jac.try_inverse() {
                Some(ji) => (ji * e).norm(),
                None => f64::NAN,
            };
            [g0.eval(ja) * w, g0.eval(ja) * w, w]
        };
        status_panels(0.0, 1.0, 1e-9 / len.max(1e-12), &status, &mut integrand, &mut acc);
    }
    if acc.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-invertible deformation in face pullback".into()));
    }
    Ok(Discrepancy {
        d1: acc[0],
        d2: acc[1],
        hn1: acc[2],
    })
}

/// Everything measured for one approximant.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRecord {
    pub l1: f64,
    /// `int |grad u_j - grad u|^p` (the p-th power of the norm).
    pub lp_grad: f64,
    pub phi_sup: f64,
    pub dphi_sup: f64,
    pub d1: f64,
    pub d2: f64,
    pub hn1_sym_diff: f64,
    pub bulk_approx: f64,
    pub bulk_field: f64,
    pub surface_approx: f64,
    pub surface_field: f64,
    pub g0_approx: f64,
    pub g0_field: f64,
    pub jump_length_approx: f64,
    pub jump_length_field: f64,
    pub strict_approx: StrictMetrics,
    pub strict_field: StrictMetrics,
}

impl MetricsRecord {
    /// Selection score `l1 + lp + d1 + d2 (+ hn1)`; NaN stays NaN.
    pub fn score(&self, with_hn1: bool) -> f64 {
        let mut s = self.l1 + self.lp_grad + self.d1 + self.d2;
        if with_hn1 {
            s += self.hn1_sym_diff;
        }
        s
    }

    pub fn is_finite(&self) -> bool {
        [
            self.l1,
            self.lp_grad,
            self.phi_sup,
            self.dphi_sup,
            self.d1,
            self.d2,
            self.hn1_sym_diff,
            self.bulk_approx,
            self.surface_approx,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Field-side quantities of a metrics record (computed once per field).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FieldMetrics {
    pub bulk: f64,
    pub surface: f64,
    pub g0: f64,
    pub jump_length: f64,
    pub strict: StrictMetrics,
}

pub fn field_metrics<const M: usize, F: SbvField<M> + ?Sized>(
    f: &F,
    psi: &BulkDensity,
    g: &SurfaceDensity,
    g0: &Modulus,
    region: &ConvexPolygon,
) -> FieldMetrics {
    FieldMetrics {
        bulk: bulk_energy_field(f, psi, &Grad::<M, 2>::zeros(), region),
        surface: surface_energy_field(f, g, region),
        g0: crate::field::g0_jump_energy(f, g0, region),
        jump_length: jump_length_field(f, region),
        strict: strict_metrics_field(f, region),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::Value;
    use crate::field::{unit_box, AffineField, FieldPreset, LineStep};
    use crate::projector::project;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sq() -> ConvexPolygon {
        ConvexPolygon::from_box(&unit_box())
    }

    #[test]
    fn affine_bulk_and_strict() {
        let a = Grad::<1, 2>::new(0.6, 0.8);
        let f = AffineField::<1>::new(a, Value::<1>::new(0.0));
        let psi = BulkDensity::Power { p: 2.0 };
        assert!((bulk_energy_field(&f, &psi, &Grad::<1, 2>::zeros(), &sq()) - 1.0).abs() < 1e-12);
        let m = strict_metrics_field(&f, &sq());
        assert!((m.grad_l1 - 1.0).abs() < 1e-12 && (m.area - 2f64.sqrt()).abs() < 1e-12 && m.jump_l1 == 0.0);
        let p = project(&f, 0.2, p2(0.01, 0.03), &unit_box()).unwrap();
        assert!((bulk_energy_pw(&p, &psi, &Grad::<1, 2>::zeros(), &sq()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn step_only_bulk_is_zero() {
        let f = LineStep::indicator(0.3);
        let psi = BulkDensity::Power { p: 2.0 };
        assert_eq!(bulk_energy_field(&f, &psi, &Grad::<1, 2>::zeros(), &sq()), 0.0);
        let m = strict_metrics_field(&f, &sq());
        assert!((m.jump_l1 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn surface_examples() {
        let f = LineStep::indicator(0.5);
        let g = SurfaceDensity::Cohesive(Modulus::CappedPower { q: 0.5 });
        assert!((surface_energy_field(&f, &g, &sq()) - 1.0).abs() < 1e-9);
        assert_eq!(surface_energy_faces::<1>(&[], &g), 0.0);
        let p = project(&f, 0.1, p2(0.013, 0.02), &unit_box()).unwrap();
        let faces = crate::projector::jump_faces(&p, &sq());
        let len: f64 = faces.iter().map(|f| f.length()).sum();
        let alpha = 0.7;
        assert!((surface_energy_faces(&faces, &SurfaceDensity::Brittle { alpha }) - alpha * len).abs() < 1e-12);
    }

    #[test]
    fn capped_face_quadrature_splits_at_the_kink() {
        let face = JumpFace::<1> {
            a: p2(0.0, 0.0),
            b: p2(2.0, 0.0),
            jump_a: Value::<1>::new(0.0),
            jump_b: Value::<1>::new(2.0),
            normal: p2(0.0, 1.0),
        };
        let g = SurfaceDensity::Cohesive(Modulus::CappedPower { q: 0.5 });
        // |jump| = 2t over length 2: int_0^1 min(1, sqrt(2t)) 2 dt.
        let exact = 2.0 * ((2.0f64 / 3.0) * 0.5f64.powf(1.5) * 2f64.sqrt() + 0.5);
        assert!((face_surface_energy(&face, &g) - exact).abs() < 1e-10);
    }

    #[test]
    fn bulk_matches_monte_carlo() {
        let f = crate::field::SmoothPlusJump::new(p2(0.5, 0.5), 0.3, 1.0, 1.0).unwrap();
        let p = project(&f, 0.1, p2(0.011, -0.023), &unit_box()).unwrap();
        let psi = BulkDensity::Power { p: 2.0 };
        let exact = bulk_energy_pw(&p, &psi, &Grad::<1, 2>::zeros(), &sq());
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 200_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let x = p2(rng.random(), rng.random());
            let v = psi.eval(&p.grad(&x).unwrap());
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean).max(0.0) / n as f64).sqrt();
        assert!((mean - exact).abs() <= 3.0 * se + 1e-12, "{mean} vs {exact} ({se})");
    }

    struct Shift(P2);
    impl Deformation for Shift {
        fn apply(&self, x: &P2) -> P2 {
            x + self.0
        }
        fn inverse(&self, y: &P2) -> P2 {
            y - self.0
        }
    }

    fn line_faces(x: f64, amp: f64) -> Vec<JumpFace<1>> {
        vec![JumpFace {
            a: p2(x, 0.0),
            b: p2(x, 1.0),
            jump_a: Value::<1>::new(amp),
            jump_b: Value::<1>::new(amp),
            normal: p2(1.0, 0.0),
        }]
    }

    #[test]
    fn discrepancy_identity_and_amplitude() {
        let f = LineStep::indicator(0.5);
        let g0 = Modulus::CappedPower { q: 0.5 };
        let d = jump_discrepancy(&f, &line_faces(0.5, 1.0), &IdentityMap, &g0, &sq()).unwrap();
        assert!(d.d1 < 1e-12 && d.d2 < 1e-12 && d.hn1 < 1e-12, "{d:?}");
        let d = jump_discrepancy(&f, &line_faces(0.5, 0.75), &IdentityMap, &g0, &sq()).unwrap();
        assert!((d.d1 - 0.5).abs() < 1e-9 && d.hn1 < 1e-12);
        // Opposite orientation with opposite jump is the same function.
        let mut flipped = line_faces(0.5, -1.0);
        flipped[0].normal = p2(-1.0, 0.0);
        let d = jump_discrepancy(&f, &flipped, &IdentityMap, &g0, &sq()).unwrap();
        assert!(d.d1 < 1e-12 && d.d2 < 1e-12);
    }

    #[test]
    fn discrepancy_disjoint_and_deformed() {
        let f = LineStep::indicator(0.5);
        let g0 = Modulus::CappedPower { q: 0.5 };
        let d = jump_discrepancy(&f, &line_faces(0.25, 1.0), &IdentityMap, &g0, &sq()).unwrap();
        assert!((d.hn1 - 2.0).abs() < 1e-9 && (d.d1 - 2.0).abs() < 1e-9 && (d.d2 - 2.0).abs() < 1e-9);
        // A deformation carrying the line onto the faces matches them.
        let faces = vec![JumpFace {
            a: p2(0.6, -0.5),
            b: p2(0.6, 1.5),
            jump_a: Value::<1>::new(1.0),
            jump_b: Value::<1>::new(1.0),
            normal: p2(1.0, 0.0),
        }];
        let big = ConvexPolygon::from_box(&Aabb::new(p2(-1.0, 0.0), p2(2.0, 1.0)));
        let d = jump_discrepancy(&f, &faces, &Shift(p2(0.1, 0.0)), &g0, &big).unwrap();
        assert!(d.d1 < 1e-9 && d.hn1 < 1e-9, "{d:?}");
    }

    #[test]
    fn density_hypotheses_on_a_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let dens = [
            SurfaceDensity::Cohesive(Modulus::CappedPower { q: 0.5 }),
            SurfaceDensity::Brittle { alpha: 0.4 },
            SurfaceDensity::Anisotropic {
                g0: Modulus::Power { q: 0.7 },
                kappa: 0.5,
            },
        ];
        for g in &dens {
            for _ in 0..2000 {
                let a: f64 = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
                let nu = p2(a.cos(), a.sin());
                let s: f64 = rng.random::<f64>() * 3.0;
                let s2: f64 = rng.random::<f64>() * 3.0;
                // Symmetry g(-s, -nu) = g(s, nu) (g depends on |s|).
                assert_eq!(g.eval(s, &nu), g.eval(s, &-nu));
                // Perturbation bound with C = 2.
                if let SurfaceDensity::Cohesive(g0) | SurfaceDensity::Anisotropic { g0, .. } = g {
                    assert!((g.eval(s + s2, &nu) - g.eval(s, &nu)).abs() <= 2.0 * g0.eval(s2) + 1e-12);
                }
            }
        }
        for psi in [BulkDensity::Power { p: 2.0 }, BulkDensity::Area] {
            let (p, c) = psi.growth();
            for k in 0..100 {
                let r = k as f64 * 0.1;
                assert!(psi.eval_norm(r).abs() <= c * (r.powf(p) + 1.0) + 1e-12);
            }
        }
    }

    #[test]
    fn graph_surface_quadrature_is_stable() {
        let f = FieldPreset::GraphStep { c0: 0.3, amp: 0.1, freq: 1.0, phase: 0.0, a0: 1.0, a1: 0.8 }.build().unwrap();
        let g = SurfaceDensity::Cohesive(Modulus::CappedPower { q: 0.5 });
        let a = surface_energy_field(f.as_ref(), &g, &sq());
        // Reference by composite midpoint sum with many nodes.
        let n = 400_000;
        let mut r = 0.0;
        for k in 0..n {
            let x = (k as f64 + 0.5) / n as f64;
            let gp = 0.2 * std::f64::consts::PI * (2.0 * std::f64::consts::PI * x).cos();
            r += (1.0 + 0.8 * x).sqrt().min(1.0) * (1.0 + gp * gp).sqrt() / n as f64;
        }
        assert!((a - r).abs() < 1e-6 * r);
    }
}
