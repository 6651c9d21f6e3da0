//! Polygonal Lipschitz domains, a smooth transversal field on the boundary,
//! the collar reflection it induces, and extension of fields across the
//! boundary by reflection.

use std::sync::Arc;

use nalgebra::Matrix2;
use rand::Rng;

use crate::field::{Curve, Interface, InterfaceRef, Modulus, SbvField, Side};
use crate::geom::{cross, gauss_legendre, point_in_polygon, segment_distance, P2};
use crate::interp::{Grad, Value};
use crate::mesh::{p2, polygon_area, Aabb};
use crate::{Error, Result};

/// A simple polygon, stored counterclockwise.
#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzDomain {
    verts: Vec<P2>,
    normals: Vec<P2>,
    lengths: Vec<f64>,
    /// Arclength at the start of each edge.
    offsets: Vec<f64>,
}

fn segments_intersect(a: &P2, b: &P2, c: &P2, d: &P2) -> bool {
    let o = |p: &P2, q: &P2, r: &P2| cross(&(q - p), &(r - p));
    let (d1, d2, d3, d4) = (o(c, d, a), o(c, d, b), o(a, b, c), o(a, b, d));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    let on = |p: &P2, q: &P2, r: &P2, v: f64| v == 0.0 && (r - p).dot(&(r - q)) <= 0.0;
    on(c, d, a, d1) || on(c, d, b, d2) || on(a, b, c, d3) || on(a, b, d, d4)
}

impl LipschitzDomain {
    pub fn new(mut verts: Vec<P2>) -> Result<Self> {
        let n = verts.len();
        if n < 3 {
            return Err(Error::InvalidDomain(format!("{n} vertices")));
        }
        if verts.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidDomain("non-finite vertex".into()));
        }
        let area = polygon_area(&verts);
        if area == 0.0 {
            return Err(Error::InvalidDomain("zero area".into()));
        }
        if area < 0.0 {
            verts.reverse();
        }
        for i in 0..n {
            let (a, b) = (verts[i], verts[(i + 1) % n]);
            if (b - a).norm() == 0.0 {
                return Err(Error::InvalidDomain(format!("repeated vertex {i}")));
            }
            for j in i + 2..n {
                if i == 0 && j == n - 1 {
                    continue;
                }
                if segments_intersect(&a, &b, &verts[j], &verts[(j + 1) % n]) {
                    return Err(Error::InvalidDomain(format!("edges {i} and {j} intersect")));
                }
            }
        }
        let mut normals = Vec::with_capacity(n);
        let mut lengths = Vec::with_capacity(n);
        let mut offsets = Vec::with_capacity(n);
        let mut acc = 0.0;
        for i in 0..n {
            let e = verts[(i + 1) % n] - verts[i];
            let l = e.norm();
            normals.push(p2(e[1], -e[0]) / l);
            lengths.push(l);
            offsets.push(acc);
            acc += l;
        }
        Ok(LipschitzDomain {
            verts,
            normals,
            lengths,
            offsets,
        })
    }

    pub fn unit_square() -> Self {
        Self::new(vec![p2(0.0, 0.0), p2(1.0, 0.0), p2(1.0, 1.0), p2(0.0, 1.0)]).expect("valid square")
    }

    /// Regular hexagon with the given center and circumradius.
    pub fn hexagon(center: P2, r: f64) -> Self {
        let v = (0..6)
            .map(|k| {
                let a = std::f64::consts::PI / 3.0 * k as f64;
                center + p2(a.cos(), a.sin()) * r
            })
            .collect();
        Self::new(v).expect("valid hexagon")
    }

    pub fn vertices(&self) -> &[P2] {
        &self.verts
    }

    pub fn n_edges(&self) -> usize {
        self.verts.len()
    }

    pub fn edge(&self, i: usize) -> (P2, P2) {
        (self.verts[i], self.verts[(i + 1) % self.verts.len()])
    }

    /// Outer unit normal of edge `i`.
    pub fn normal(&self, i: usize) -> P2 {
        self.normals[i]
    }

    pub fn perimeter(&self) -> f64 {
        self.offsets.last().unwrap() + self.lengths.last().unwrap()
    }

    pub fn area(&self) -> f64 {
        polygon_area(&self.verts)
    }

    pub fn min_edge(&self) -> f64 {
        self.lengths.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn bbox(&self) -> Aabb<2> {
        crate::geom::bbox_of(&self.verts)
    }

    pub fn diam(&self) -> f64 {
        let mut d: f64 = 0.0;
        for a in &self.verts {
            for b in &self.verts {
                d = d.max((a - b).norm());
            }
        }
        d
    }

    pub fn contains(&self, x: &P2) -> bool {
        point_in_polygon(&self.verts, x)
    }

    /// Distance to the boundary, negative inside.
    pub fn signed_distance(&self, x: &P2) -> f64 {
        let d = (0..self.n_edges())
            .map(|i| {
                let (a, b) = self.edge(i);
                segment_distance(x, &a, &b)
            })
            .fold(f64::INFINITY, f64::min);
        if self.contains(x) {
            -d
        } else {
            d
        }
    }

    /// Boundary point at arclength `s` (taken modulo the perimeter) and its edge.
    pub fn boundary_point(&self, s: f64) -> (P2, usize) {
        let s = s.rem_euclid(self.perimeter());
        let i = match self.offsets.binary_search_by(|o| o.total_cmp(&s)) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        let (a, b) = self.edge(i);
        (a + (b - a) * ((s - self.offsets[i]) / self.lengths[i]), i)
    }

    /// Radius of the uniform cover: half the shortest edge.
    pub fn eps0(&self) -> f64 {
        0.5 * self.min_edge()
    }

    /// Lipschitz constant of the local graph representations, from the
    /// turning angles at the corners.
    pub fn l0(&self) -> f64 {
        let n = self.n_edges();
        (0..n)
            .map(|i| {
                let (a, b) = (self.normals[(i + n - 1) % n], self.normals[i]);
                let turn = cross(&a, &b).atan2(a.dot(&b)).abs();
                (0.5 * turn).tan()
            })
            .fold(0.0, f64::max)
    }
}

/// Smooth unit field transversal to the boundary, from edge normals
/// blended with compactly supported weights of the squared edge distance.
#[derive(Clone, Debug)]
pub struct PseudoNormal {
    domain: LipschitzDomain,
    radius: f64,
    /// `inf psi . nu` over boundary samples.
    pub gamma: f64,
    /// `sup (|psi| + |D psi|)` over samples near the boundary.
    pub c1_norm: f64,
}

impl PseudoNormal {
    pub fn build(domain: &LipschitzDomain, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius < 0.5 * domain.min_edge()) {
            return Err(Error::InvalidParameter(format!(
                "mollification radius {radius} must lie in (0, {})",
                0.5 * domain.min_edge()
            )));
        }
        let mut p = PseudoNormal {
            domain: domain.clone(),
            radius,
            gamma: 0.0,
            c1_norm: 0.0,
        };
        let n = 1000;
        let per = domain.perimeter();
        let mut gamma = f64::INFINITY;
        let mut c1: f64 = 0.0;
        for k in 0..n {
            let (x, i) = domain.boundary_point((k as f64 + 0.5) * per / n as f64);
            gamma = gamma.min(p.eval(&x).dot(&domain.normal(i)));
            for off in [-0.25, 0.0, 0.25] {
                let y = x + domain.normal(i) * (off * radius);
                c1 = c1.max(p.eval(&y).norm() + p.jacobian(&y).norm());
            }
        }
        if gamma <= 0.0 {
            return Err(Error::Collar(format!("transversality lost (gamma = {gamma:.3e}); reduce the radius")));
        }
        p.gamma = gamma;
        p.c1_norm = c1;
        Ok(p)
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn domain(&self) -> &LipschitzDomain {
        &self.domain
    }

    fn raw(&self, x: &P2) -> P2 {
        let r2 = self.radius * self.radius;
        let mut v = P2::zeros();
        for i in 0..self.domain.n_edges() {
            let (a, b) = self.domain.edge(i);
            let d = segment_distance(x, &a, &b);
            let s = 1.0 - d * d / r2;
            if s > 0.0 {
                v += self.domain.normal(i) * (s * s);
            }
        }
        v
    }

    /// `psi(x)`; zero far from the boundary.
    pub fn eval(&self, x: &P2) -> P2 {
        let v = self.raw(x);
        let n = v.norm();
        if n < 1e-14 {
            P2::zeros()
        } else {
            v / n
        }
    }

    pub fn jacobian(&self, x: &P2) -> Matrix2<f64> {
        let h = 1e-6 * self.radius;
        let dx = (self.eval(&(x + p2(h, 0.0))) - self.eval(&(x - p2(h, 0.0)))) / (2.0 * h);
        let dy = (self.eval(&(x + p2(0.0, h))) - self.eval(&(x - p2(0.0, h)))) / (2.0 * h);
        Matrix2::from_columns(&[dx, dy])
    }

    /// `sup |x - y| / |(Id - psi(x) psi(x)^T)(x - y)|` over nearby boundary
    /// sample pairs.
    pub fn projection_constant(&self, n: usize) -> f64 {
        let per = self.domain.perimeter();
        let h = self.radius / 4.0;
        let mut c: f64 = 1.0;
        for k in 0..n {
            let s = (k as f64 + 0.5) * per / n as f64;
            let (x, _) = self.domain.boundary_point(s);
            let (y, _) = self.domain.boundary_point(s + h);
            let psi = self.eval(&x);
            let d = x - y;
            let t = d - psi * psi.dot(&d);
            if t.norm() > 0.0 {
                c = c.max(d.norm() / t.norm());
            }
        }
        c
    }
}

/// Collar coordinates of a point: `y = x + t psi(x)` with `x` on edge `edge`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollarCoords {
    pub x: P2,
    pub edge: usize,
    pub t: f64,
}

/// The involution `x + t psi(x) -> x - t psi(x)` of the collar
/// `{x + t psi(x) : x on the boundary, |t| < width}`.
#[derive(Clone, Debug)]
pub struct CollarReflection {
    psi: PseudoNormal,
    width: f64,
}

/// Diagnostics of a collar reflection on random samples.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CollarDiagnostics {
    pub gamma: f64,
    pub width: f64,
    pub involution_residual: f64,
    pub boundary_residual: f64,
    /// Fraction of inner samples mapped outside and outer samples inside.
    pub swap_fraction: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    /// `max(ratio_max, 1 / ratio_min)`.
    pub lipschitz: f64,
}

impl CollarReflection {
    pub fn new(psi: PseudoNormal, width: f64) -> Result<Self> {
        if !(width > 0.0 && width <= psi.radius) {
            return Err(Error::InvalidParameter(format!("collar width {width}")));
        }
        Ok(CollarReflection { psi, width })
    }

    /// Widest collar (halving from the default start) on which the inverse
    /// coordinates are recovered on a validation set.
    pub fn auto(domain: &LipschitzDomain, radius: f64) -> Result<Self> {
        let psi = PseudoNormal::build(domain, radius)?;
        let start = (domain.eps0() / (1.0 + domain.l0())).min(0.5 * domain.min_edge()) / 4.0;
        let mut w = start.min(radius / 4.0);
        for _ in 0..20 {
            let c = CollarReflection::new(psi.clone(), w)?;
            if c.validates(200) {
                return Ok(c);
            }
            w *= 0.5;
        }
        Err(Error::Collar("no admissible collar width".into()))
    }

    fn validates(&self, n: usize) -> bool {
        let d = &self.psi.domain;
        let per = d.perimeter();
        let tol = 1e-10 * d.diam();
        for k in 0..n {
            let (x, _) = d.boundary_point((k as f64 + 0.37) * per / n as f64);
            for frac in [-0.9, -0.5, 0.5, 0.9] {
                let y = self.forward(&x, frac * self.width);
                match self.reflect(&y).and_then(|z| self.reflect(&z)) {
                    Ok(yy) if (yy - y).norm() <= tol => {}
                    _ => return false,
                }
            }
        }
        true
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn psi(&self) -> &PseudoNormal {
        &self.psi
    }

    pub fn domain(&self) -> &LipschitzDomain {
        &self.psi.domain
    }

    /// `f(x, t) = x + t psi(x)`.
    pub fn forward(&self, x: &P2, t: f64) -> P2 {
        x + self.psi.eval(x) * t
    }

    fn newton_on_edge(&self, y: &P2, i: usize) -> Option<CollarCoords> {
        let d = self.domain();
        let (a, b) = d.edge(i);
        let e = b - a;
        let el2 = e.norm_squared();
        let mut lam = ((y - a).dot(&e) / el2).clamp(0.0, 1.0);
        let mut t = (y - a).dot(&d.normal(i));
        let scale = d.diam().max(1.0);
        for _ in 0..60 {
            let x = a + e * lam;
            let psi = self.psi.eval(&x);
            let r = x + psi * t - y;
            if r.norm() <= 1e-14 * scale {
                return self.accept(&x, i, lam, t);
            }
            let col = e + self.psi.jacobian(&x) * e * t;
            let j = Matrix2::from_columns(&[col, psi]);
            let step = j.try_inverse()? * r;
            lam -= step[0];
            t -= step[1];
            if !lam.is_finite() || !(-1.0..=2.0).contains(&lam) {
                return None;
            }
        }
        let x = a + e * lam;
        let r = x + self.psi.eval(&x) * t - y;
        (r.norm() <= 1e-11 * scale).then_some(()).and_then(|_| self.accept(&x, i, lam, t))
    }

    fn accept(&self, x: &P2, i: usize, lam: f64, t: f64) -> Option<CollarCoords> {
        ((-1e-12..=1.0 + 1e-12).contains(&lam) && t.abs() < self.width).then_some(CollarCoords { x: *x, edge: i, t })
    }

    /// Bisection on `cross(psi(x), y - x)` along the edge.
    fn bisect_on_edge(&self, y: &P2, i: usize) -> Option<CollarCoords> {
        let (a, b) = self.domain().edge(i);
        let e = b - a;
        let h = |lam: f64| {
            let x = a + e * lam;
            cross(&self.psi.eval(&x), &(y - x))
        };
        let n = 64;
        for k in 0..n {
            let (mut l0, mut l1) = (k as f64 / n as f64, (k + 1) as f64 / n as f64);
            let (mut h0, h1) = (h(l0), h(l1));
            if h0 * h1 > 0.0 {
                continue;
            }
            for _ in 0..100 {
                let m = 0.5 * (l0 + l1);
                let hm = h(m);
                if (hm <= 0.0) == (h0 <= 0.0) {
                    l0 = m;
                    h0 = hm;
                } else {
                    l1 = m;
                }
            }
            let lam = 0.5 * (l0 + l1);
            let x = a + e * lam;
            let psi = self.psi.eval(&x);
            let t = (y - x).dot(&psi);
            if (x + psi * t - y).norm() <= 1e-10 * self.domain().diam().max(1.0) {
                if let Some(c) = self.accept(&x, i, lam, t) {
                    return Some(c);
                }
            }
        }
        None
    }

    /// Collar coordinates of `y`.
    pub fn coords(&self, y: &P2) -> Result<CollarCoords> {
        let d = self.domain();
        let mut best: Option<CollarCoords> = None;
        for i in 0..d.n_edges() {
            let (a, b) = d.edge(i);
            if segment_distance(y, &a, &b) > self.width {
                continue;
            }
            if let Some(c) = self.newton_on_edge(y, i).or_else(|| self.bisect_on_edge(y, i)) {
                if best.is_none_or(|bc| c.t.abs() < bc.t.abs()) {
                    best = Some(c);
                }
            }
        }
        best.ok_or_else(|| Error::Collar(format!("point {:?} is outside the collar", [y[0], y[1]])))
    }

    pub fn contains(&self, y: &P2) -> bool {
        self.coords(y).is_ok()
    }

    /// `Phi(y)`.
    pub fn reflect(&self, y: &P2) -> Result<P2> {
        let c = self.coords(y)?;
        Ok(self.forward(&c.x, -c.t))
    }

    pub fn jacobian(&self, y: &P2) -> Result<Matrix2<f64>> {
        let h = 1e-7 * self.width;
        let dx = (self.reflect(&(y + p2(h, 0.0)))? - self.reflect(&(y - p2(h, 0.0)))?) / (2.0 * h);
        let dy = (self.reflect(&(y + p2(0.0, h)))? - self.reflect(&(y - p2(0.0, h)))?) / (2.0 * h);
        Ok(Matrix2::from_columns(&[dx, dy]))
    }

    /// A uniformly parametrized random collar point.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> P2 {
        let (x, _) = self.domain().boundary_point(rng.random::<f64>() * self.domain().perimeter());
        self.forward(&x, (rng.random::<f64>() * 2.0 - 1.0) * 0.999 * self.width)
    }

    /// Involution, boundary, swap and bilipschitz diagnostics.
    pub fn diagnostics<R: Rng + ?Sized>(&self, rng: &mut R, samples: usize, pairs: usize) -> Result<CollarDiagnostics> {
        let d = self.domain();
        let mut inv: f64 = 0.0;
        let mut swapped = 0usize;
        let mut counted = 0usize;
        for _ in 0..samples {
            let y = self.sample(rng);
            let z = self.reflect(&y)?;
            inv = inv.max((self.reflect(&z)? - y).norm());
            let (sy, sz) = (d.signed_distance(&y), d.signed_distance(&z));
            if sy.abs() > 1e-9 * self.width {
                counted += 1;
                if sy * sz < 0.0 {
                    swapped += 1;
                }
            }
        }
        let mut bnd: f64 = 0.0;
        for _ in 0..samples {
            let (x, _) = d.boundary_point(rng.random::<f64>() * d.perimeter());
            bnd = bnd.max((self.reflect(&x)? - x).norm());
        }
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        let h = 1e-3 * self.width;
        for _ in 0..pairs {
            let y = self.sample(rng);
            let a: f64 = rng.random::<f64>() * std::f64::consts::TAU;
            let y2 = y + p2(a.cos(), a.sin()) * (h * rng.random::<f64>().max(1e-3));
            let (Ok(fy), Ok(fy2)) = (self.reflect(&y), self.reflect(&y2)) else {
                continue;
            };
            let r = (fy - fy2).norm() / (y - y2).norm();
            lo = lo.min(r);
            hi = hi.max(r);
        }
        Ok(CollarDiagnostics {
            gamma: self.psi.gamma,
            width: self.width,
            involution_residual: inv,
            boundary_residual: bnd,
            swap_fraction: if counted == 0 { 1.0 } else { swapped as f64 / counted as f64 },
            ratio_min: lo,
            ratio_max: hi,
            lipschitz: hi.max(1.0 / lo),
        })
    }
}

/// Parameter intervals of `c` on which `pred` holds, from a uniform scan
/// refined by bisection at the transitions.
fn param_intervals(c: &Curve, pred: &dyn Fn(&P2) -> bool, n: usize) -> Vec<(f64, f64)> {
    let (t0, t1) = c.range();
    let at = |k: usize| t0 + (t1 - t0) * k as f64 / n as f64;
    let refine = |mut a: f64, mut b: f64, va: bool| {
        for _ in 0..60 {
            let m = 0.5 * (a + b);
            if pred(&c.point(m)) == va {
                a = m;
            } else {
                b = m;
            }
        }
        0.5 * (a + b)
    };
    let mut out = Vec::new();
    let mut start = pred(&c.point(t0)).then_some(t0);
    let mut prev = start.is_some();
    for k in 1..=n {
        let v = pred(&c.point(at(k)));
        if v != prev {
            let tr = refine(at(k - 1), at(k), prev);
            if v {
                start = Some(tr);
            } else if let Some(s) = start.take() {
                out.push((s, tr));
            }
            prev = v;
        }
    }
    if let Some(s) = start {
        out.push((s, t1));
    }
    out.retain(|(a, b)| b > a);
    out
}

const REFIT_NODES: usize = 33;

fn refit(c: &Curve, a: f64, b: f64, map: &dyn Fn(&P2) -> P2) -> Curve {
    let pts = (0..REFIT_NODES)
        .map(|k| map(&c.point(a + (b - a) * k as f64 / (REFIT_NODES - 1) as f64)))
        .collect();
    Curve::spline_through(pts)
}

/// An interface of the base field restricted to the domain.
struct ClippedInterface<const M: usize> {
    orig: InterfaceRef<M>,
    curve: Curve,
}

impl<const M: usize> Interface<M> for ClippedInterface<M> {
    fn curve(&self) -> &Curve {
        &self.curve
    }
    fn eval_plus(&self, x: &P2) -> Value<M> {
        self.orig.eval_plus(x)
    }
    fn eval_minus(&self, x: &P2) -> Value<M> {
        self.orig.eval_minus(x)
    }
    fn grad_plus(&self, x: &P2) -> Grad<M, 2> {
        self.orig.grad_plus(x)
    }
    fn grad_minus(&self, x: &P2) -> Grad<M, 2> {
        self.orig.grad_minus(x)
    }
    fn side(&self, x: &P2) -> Side {
        self.orig.side(x)
    }
    fn tube_width(&self) -> f64 {
        self.orig.tube_width()
    }
}

/// Mirror image of an interface piece in the inner collar. The reflection
/// reverses orientation, so the sides swap.
struct ReflectedInterface<const M: usize> {
    orig: InterfaceRef<M>,
    curve: Curve,
    collar: Arc<CollarReflection>,
}

impl<const M: usize> ReflectedInterface<M> {
    fn pre(&self, x: &P2) -> P2 {
        self.collar.reflect(x).unwrap_or(*x)
    }
    fn dphi(&self, x: &P2) -> Matrix2<f64> {
        self.collar.jacobian(x).unwrap_or_else(|_| Matrix2::identity())
    }
}

impl<const M: usize> Interface<M> for ReflectedInterface<M> {
    fn curve(&self) -> &Curve {
        &self.curve
    }
    fn eval_plus(&self, x: &P2) -> Value<M> {
        self.orig.eval_minus(&self.pre(x))
    }
    fn eval_minus(&self, x: &P2) -> Value<M> {
        self.orig.eval_plus(&self.pre(x))
    }
    fn grad_plus(&self, x: &P2) -> Grad<M, 2> {
        self.orig.grad_minus(&self.pre(x)) * self.dphi(x)
    }
    fn grad_minus(&self, x: &P2) -> Grad<M, 2> {
        self.orig.grad_plus(&self.pre(x)) * self.dphi(x)
    }
    fn side(&self, x: &P2) -> Side {
        match self.orig.side(&self.pre(x)) {
            Side::Plus => Side::Minus,
            Side::Minus => Side::Plus,
        }
    }
}

/// `u` on the domain, `u o Phi` on the outer collar, zero elsewhere.
pub struct ExtendedField<const M: usize> {
    base: Arc<dyn SbvField<M>>,
    collar: Arc<CollarReflection>,
    interfaces: Vec<InterfaceRef<M>>,
    reflected: Vec<bool>,
    /// `int |grad U|^p` over the outer collar.
    pub bulk_increment: f64,
    /// `int g0(|[U]|)` over the reflected interfaces.
    pub surface_increment: f64,
}

impl<const M: usize> ExtendedField<M> {
    pub fn new(base: Arc<dyn SbvField<M>>, collar: CollarReflection) -> Self {
        let collar = Arc::new(collar);
        let mut interfaces: Vec<InterfaceRef<M>> = Vec::new();
        let mut reflected = Vec::new();
        let dom = collar.domain().clone();
        for iface in base.interfaces() {
            let c = iface.curve();
            for (a, b) in param_intervals(c, &|x| dom.contains(x), 512) {
                interfaces.push(Arc::new(ClippedInterface {
                    orig: iface.clone(),
                    curve: refit(c, a, b, &|x| *x),
                }));
                reflected.push(false);
            }
            let inner = |x: &P2| dom.contains(x) && collar.contains(x);
            for (a, b) in param_intervals(c, &inner, 512) {
                let cl = collar.clone();
                let curve = refit(c, a, b, &move |x| cl.reflect(x).unwrap_or(*x));
                interfaces.push(Arc::new(ReflectedInterface {
                    orig: iface.clone(),
                    curve,
                    collar: collar.clone(),
                }));
                reflected.push(true);
            }
        }
        ExtendedField {
            base,
            collar,
            interfaces,
            reflected,
            bulk_increment: 0.0,
            surface_increment: 0.0,
        }
    }

    pub fn collar(&self) -> &CollarReflection {
        &self.collar
    }

    fn outer(&self, x: &P2) -> Option<P2> {
        if self.collar.domain().contains(x) {
            return None;
        }
        self.collar.reflect(x).ok()
    }

    /// `int_{outer collar} |grad U|^p`, by Gauss rules in collar coordinates.
    pub fn measure_bulk(&self, p: f64) -> f64 {
        let d = self.collar.domain();
        let (gx, gw) = gauss_legendre(6);
        let w = self.collar.width;
        let mut total = 0.0;
        for i in 0..d.n_edges() {
            let (a, b) = d.edge(i);
            let e = b - a;
            let nl = 24;
            let nt = 4;
            for pl in 0..nl {
                for pt in 0..nt {
                    for (xa, wa) in gx.iter().zip(&gw) {
                        for (xb, wb) in gx.iter().zip(&gw) {
                            let lam = (pl as f64 + xa) / nl as f64;
                            let t = w * (pt as f64 + xb) / nt as f64;
                            let x = a + e * lam;
                            let psi = self.collar.psi.eval(&x);
                            let y = x + psi * t;
                            let ds = e + self.collar.psi.jacobian(&x) * e * t;
                            let jac = cross(&ds, &psi).abs();
                            let g = self.grad(&y).norm().powf(p);
                            total += g * jac * (wa / nl as f64) * (wb * w / nt as f64);
                        }
                    }
                }
            }
        }
        total
    }

    /// `int g0(|[U]|)` over the reflected interfaces.
    pub fn measure_surface(&self, g0: &Modulus) -> f64 {
        self.interfaces
            .iter()
            .zip(&self.reflected)
            .filter(|(_, r)| **r)
            .map(|(i, _)| {
                let c = i.curve();
                let (t0, t1) = c.range();
                c.integrate(t0, t1, &|t| g0.eval(i.jump(t).norm()))
            })
            .sum()
    }
}

impl<const M: usize> SbvField<M> for ExtendedField<M> {
    fn eval(&self, x: &P2) -> Value<M> {
        if self.collar.domain().contains(x) {
            return self.base.eval(x);
        }
        match self.outer(x) {
            Some(y) => self.base.eval(&y),
            None => Value::<M>::zeros(),
        }
    }

    fn grad(&self, x: &P2) -> Grad<M, 2> {
        if self.collar.domain().contains(x) {
            return self.base.grad(x);
        }
        match self.outer(x) {
            Some(y) => match self.collar.jacobian(x) {
                Ok(j) => self.base.grad(&y) * j,
                Err(_) => Grad::<M, 2>::zeros(),
            },
            None => Grad::<M, 2>::zeros(),
        }
    }

    fn interfaces(&self) -> &[InterfaceRef<M>] {
        &self.interfaces
    }

    fn domain(&self) -> Option<Aabb<2>> {
        Some(self.collar.domain().bbox().inflate(self.collar.width))
    }
}

/// Extends `f` across the boundary, shrinking the collar until both the
/// bulk `|grad U|^p` and the `g0`-surface increments are at most `theta`.
pub fn extend_field<const M: usize>(
    f: Arc<dyn SbvField<M>>,
    domain: &LipschitzDomain,
    theta: f64,
    radius: f64,
    p: f64,
    g0: &Modulus,
) -> Result<ExtendedField<M>> {
    if !(theta > 0.0) {
        return Err(Error::InvalidParameter(format!("theta = {theta}")));
    }
    let base = CollarReflection::auto(domain, radius)?;
    let min_width = 1e-6 * domain.diam();
    let mut w = base.width;
    let mut last = (f64::NAN, f64::NAN);
    while w >= min_width {
        let mut ext = ExtendedField::new(f.clone(), CollarReflection::new(base.psi.clone(), w)?);
        ext.bulk_increment = ext.measure_bulk(p);
        ext.surface_increment = ext.measure_surface(g0);
        if ext.bulk_increment <= theta && ext.surface_increment <= theta {
            return Ok(ext);
        }
        last = (ext.bulk_increment, ext.surface_increment);
        w *= 0.5;
    }
    Err(Error::Budget(format!(
        "extension increments (bulk {:.3e}, surface {:.3e}) exceed {theta} at the minimum collar width",
        last.0, last.1
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{AffineField, LineStep};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_bad_polygons() {
        assert!(LipschitzDomain::new(vec![p2(0.0, 0.0), p2(1.0, 0.0)]).is_err());
        let bow = vec![p2(0.0, 0.0), p2(1.0, 1.0), p2(1.0, 0.0), p2(0.0, 1.0)];
        assert!(matches!(LipschitzDomain::new(bow), Err(Error::InvalidDomain(_))));
        let cw = LipschitzDomain::new(vec![p2(0.0, 0.0), p2(0.0, 1.0), p2(1.0, 1.0), p2(1.0, 0.0)]).unwrap();
        assert!(cw.area() > 0.0);
        for i in 0..4 {
            let (a, b) = cw.edge(i);
            assert!(cw.signed_distance(&((a + b) * 0.5 + cw.normal(i) * 0.01)) > 0.0);
        }
    }

    #[test]
    fn signed_distance_and_boundary_points() {
        let d = LipschitzDomain::unit_square();
        assert!((d.signed_distance(&p2(0.5, 0.25)) + 0.25).abs() < 1e-15);
        assert!((d.signed_distance(&p2(1.5, 0.5)) - 0.5).abs() < 1e-15);
        let (x, i) = d.boundary_point(1.5);
        assert_eq!((x, i), (p2(1.0, 0.5), 1));
        assert!((d.l0() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn square_pseudo_normal() {
        let d = LipschitzDomain::unit_square();
        let psi = PseudoNormal::build(&d, 0.1).unwrap();
        assert!(psi.gamma >= 0.5f64.sqrt() - 0.05, "{}", psi.gamma);
        // Flat part: exactly the edge normal.
        assert!((psi.eval(&p2(0.5, 0.0)) - p2(0.0, -1.0)).norm() < 1e-15);
        for k in 0..100 {
            let (x, _) = d.boundary_point(k as f64 * 0.0397);
            assert!((psi.eval(&x).norm() - 1.0).abs() < 1e-8);
        }
        assert!(PseudoNormal::build(&d, 0.6).is_err());
    }

    #[test]
    fn hexagon_pseudo_normal_near_corners() {
        let d = LipschitzDomain::hexagon(p2(0.0, 0.0), 1.0);
        let psi = PseudoNormal::build(&d, 0.2).unwrap();
        let c30 = (std::f64::consts::PI / 6.0).cos();
        assert!(psi.gamma > c30 - 0.05 && psi.gamma <= c30 + 1e-3, "{}", psi.gamma);
    }

    #[test]
    fn flat_edge_reflection_closed_form() {
        let d = LipschitzDomain::unit_square();
        let c = CollarReflection::auto(&d, 0.1).unwrap();
        let t = 0.5 * c.width();
        let y = p2(0.5, t);
        let z = c.reflect(&y).unwrap();
        assert!((z - p2(0.5, -t)).norm() < 1e-14);
        assert!((c.reflect(&p2(0.3, 0.0)).unwrap() - p2(0.3, 0.0)).norm() < 1e-15);
        assert!(c.reflect(&p2(0.5, 0.5)).is_err());
    }

    #[test]
    fn square_and_hexagon_diagnostics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for d in [LipschitzDomain::unit_square(), LipschitzDomain::hexagon(p2(0.5, 0.5), 0.5)] {
            let c = CollarReflection::auto(&d, 0.2 * d.min_edge()).unwrap();
            let g = c.diagnostics(&mut rng, 1000, 10_000).unwrap();
            assert!(g.involution_residual <= 1e-8 * d.diam(), "{g:?}");
            assert!(g.boundary_residual <= 1e-9, "{g:?}");
            assert_eq!(g.swap_fraction, 1.0);
            assert!(g.lipschitz <= 3.0, "{g:?}");
        }
    }

    #[test]
    fn projection_constant_is_finite() {
        let d = LipschitzDomain::unit_square();
        let psi = PseudoNormal::build(&d, 0.1).unwrap();
        let c = psi.projection_constant(400);
        assert!(c.is_finite() && (1.0..10.0).contains(&c));
    }

    #[test]
    fn zero_field_extends_to_zero() {
        let z: Arc<dyn SbvField<1>> = Arc::new(AffineField::<1>::new(Grad::<1, 2>::zeros(), Value::<1>::zeros()));
        let e = extend_field(z, &LipschitzDomain::unit_square(), 0.1, 0.1, 2.0, &Modulus::Power { q: 0.5 }).unwrap();
        assert_eq!(e.bulk_increment, 0.0);
        assert_eq!(e.surface_increment, 0.0);
        assert_eq!(e.eval(&p2(-0.01, 0.5))[0], 0.0);
    }

    #[test]
    fn affine_extension_meets_the_budget() {
        let a = Grad::<1, 2>::new(3.0, 4.0);
        let f: Arc<dyn SbvField<1>> = Arc::new(AffineField::<1>::new(a, Value::<1>::zeros()));
        let d = LipschitzDomain::unit_square();
        let theta = 0.1;
        let e = extend_field(f, &d, theta, 0.1, 2.0, &Modulus::Power { q: 0.5 }).unwrap();
        assert!(e.bulk_increment <= theta);
        // Reflection is an isometry on flat edges: compare with |A|^2 times
        // the outer collar area, up to the corner distortion.
        let area = 4.0 * e.collar().width();
        assert!(e.bulk_increment >= 0.5 * 25.0 * area && e.bulk_increment <= 2.0 * 25.0 * area);
        // Flat part: U(x) = u(Phi(x)) = A Phi(x).
        let w = e.collar().width();
        let y = p2(0.5, 1.0 + 0.5 * w);
        assert!((e.eval(&y)[0] - (3.0 * 0.5 + 4.0 * (1.0 - 0.5 * w))).abs() < 1e-12);
    }

    #[test]
    fn transversal_step_extends_continuously() {
        let f: Arc<dyn SbvField<1>> = Arc::new(LineStep::indicator(0.5));
        let d = LipschitzDomain::unit_square();
        let g0 = Modulus::CappedPower { q: 0.5 };
        let e = extend_field(f, &d, 0.05, 0.1, 2.0, &g0).unwrap();
        assert!(e.surface_increment <= 0.05 && e.surface_increment > 0.0);
        // Inside plus two reflected stubs at the top and bottom edges.
        assert_eq!(e.interfaces().len(), 3);
        for itf in &e.interfaces()[1..] {
            let c = itf.curve();
            let (t0, t1) = c.range();
            assert!((itf.jump(0.5 * (t0 + t1)).norm() - 1.0).abs() < 1e-12);
            // The stub starts or ends on the boundary at x = 0.5.
            let ends = [c.point(t0), c.point(t1)];
            assert!(ends.iter().any(|p| (p[0] - 0.5).abs() < 1e-9 && (p[1].abs() < 1e-9 || (p[1] - 1.0).abs() < 1e-9)));
        }
        // Trace match across the bottom edge away from the interface.
        let h = 1e-7;
        for x in [0.2, 0.8] {
            let (a, b) = (e.eval(&p2(x, h)), e.eval(&p2(x, -h)));
            assert!((a - b).norm() < 1e-6);
        }
    }
}
