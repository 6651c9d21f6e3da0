//! Piecewise-smooth planar fields with explicit jump interfaces.
//!
//! A field is smooth off a finite family of parametric curves. Each curve
//! carries an orientation (its normal is the left normal of the tangent and
//! points to the `+` side) and smooth two-sided extensions of the field.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::Matrix2;
use smallvec::SmallVec;

use crate::geom::{boxes_overlap, cross, perp, segment_distance, ConvexPolygon, P2};
use crate::interp::{Grad, Value};
use crate::mesh::{p2, Aabb};
use crate::{Error, Result};

/// Crossings closer than this (in segment parameter) are the same point.
pub const CROSSING_MERGE: f64 = 1e-12;
/// `|nu . (b - a)| / |b - a|` below this is a tangential crossing.
pub const TANGENCY_TOL: f64 = 1e-8;
const T_SLACK: f64 = 1e-12;

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Plus,
    Minus,
}

impl Side {
    pub fn sign(self) -> f64 {
        match self {
            Side::Plus => 1.0,
            Side::Minus => -1.0,
        }
    }
}

#[derive(Clone)]
pub enum CurveKind {
    /// `a + tau (b - a)`, `tau in [0, 1]`.
    Segment { a: P2, b: P2 },
    /// `(tau, f(tau))`, `tau in [x0, x1]`; `lip` bounds `|f'|`.
    Graph {
        f: ScalarFn,
        df: ScalarFn,
        x0: f64,
        x1: f64,
        lip: f64,
    },
    /// Counterclockwise arc, `tau` is the angle in `[t0, t1]`.
    Arc {
        center: P2,
        radius: f64,
        t0: f64,
        t1: f64,
    },
    /// `tau in [0, n - 1]`, piece `k` on `[k, k + 1]`.
    Polyline(Vec<P2>),
    /// Cubic Hermite through `pts` with derivatives `tans`, `tau in [0, n - 1]`.
    Spline { pts: Vec<P2>, tans: Vec<P2> },
}

/// A C^1 parametric curve (piecewise for polylines).
#[derive(Clone)]
pub struct Curve {
    kind: CurveKind,
    bbox: Aabb<2>,
}

/// Raw intersection of a curve with a segment.
#[derive(Clone, Copy, Debug)]
pub struct Hit {
    pub t: f64,
    pub tau: f64,
}

type Hits = SmallVec<[Hit; 4]>;

impl Curve {
    pub fn segment(a: P2, b: P2) -> Self {
        let bbox = crate::geom::bbox_of(&[a, b]);
        Curve {
            kind: CurveKind::Segment { a, b },
            bbox,
        }
    }

    pub fn graph(f: ScalarFn, df: ScalarFn, x0: f64, x1: f64, lip: f64) -> Self {
        let n = 256;
        let h = (x1 - x0) / n as f64;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for k in 0..=n {
            let y = f(x0 + h * k as f64);
            lo = lo.min(y);
            hi = hi.max(y);
        }
        let m = 0.5 * lip * h;
        Curve {
            kind: CurveKind::Graph { f, df, x0, x1, lip },
            bbox: Aabb::new(p2(x0, lo - m), p2(x1, hi + m)),
        }
    }

    pub fn arc(center: P2, radius: f64, t0: f64, t1: f64) -> Self {
        let r = p2(radius, radius);
        Curve {
            kind: CurveKind::Arc {
                center,
                radius,
                t0,
                t1,
            },
            bbox: Aabb::new(center - r, center + r),
        }
    }

    pub fn circle(center: P2, radius: f64) -> Self {
        Self::arc(center, radius, 0.0, 2.0 * PI)
    }

    pub fn polyline(pts: Vec<P2>) -> Self {
        assert!(pts.len() >= 2, "polyline needs two points");
        let bbox = crate::geom::bbox_of(&pts);
        Curve {
            kind: CurveKind::Polyline(pts),
            bbox,
        }
    }

    pub fn spline(pts: Vec<P2>, tans: Vec<P2>) -> Self {
        assert!(pts.len() >= 2 && pts.len() == tans.len());
        let mut ctrl = Vec::with_capacity(pts.len() * 3);
        for k in 0..pts.len() - 1 {
            ctrl.extend(bezier_points(&pts[k], &tans[k], &pts[k + 1], &tans[k + 1]));
        }
        let bbox = crate::geom::bbox_of(&ctrl);
        Curve {
            kind: CurveKind::Spline { pts, tans },
            bbox,
        }
    }

    /// Spline through `pts` with centered finite-difference tangents.
    pub fn spline_through(pts: Vec<P2>) -> Self {
        let n = pts.len();
        let tans = (0..n)
            .map(|k| {
                if n == 2 {
                    pts[1] - pts[0]
                } else if k == 0 {
                    (pts[1] * 4.0 - pts[0] * 3.0 - pts[2]) * 0.5
                } else if k == n - 1 {
                    (pts[n - 1] * 3.0 - pts[n - 2] * 4.0 + pts[n - 3]) * 0.5
                } else {
                    (pts[k + 1] - pts[k - 1]) * 0.5
                }
            })
            .collect();
        Self::spline(pts, tans)
    }

    pub fn kind(&self) -> &CurveKind {
        &self.kind
    }

    pub fn bbox(&self) -> &Aabb<2> {
        &self.bbox
    }

    pub fn range(&self) -> (f64, f64) {
        match &self.kind {
            CurveKind::Segment { .. } => (0.0, 1.0),
            CurveKind::Graph { x0, x1, .. } => (*x0, *x1),
            CurveKind::Arc { t0, t1, .. } => (*t0, *t1),
            CurveKind::Polyline(p) => (0.0, (p.len() - 1) as f64),
            CurveKind::Spline { pts, .. } => (0.0, (pts.len() - 1) as f64),
        }
    }

    pub fn point(&self, tau: f64) -> P2 {
        match &self.kind {
            CurveKind::Segment { a, b } => a + (b - a) * tau,
            CurveKind::Graph { f, .. } => p2(tau, f(tau)),
            CurveKind::Arc { center, radius, .. } => center + p2(tau.cos(), tau.sin()) * *radius,
            CurveKind::Polyline(p) => {
                let (k, s) = piece(tau, p.len());
                p[k] + (p[k + 1] - p[k]) * s
            }
            CurveKind::Spline { pts, tans } => {
                let (k, s) = piece(tau, pts.len());
                hermite(&pts[k], &tans[k], &pts[k + 1], &tans[k + 1], s)
            }
        }
    }

    pub fn deriv(&self, tau: f64) -> P2 {
        match &self.kind {
            CurveKind::Segment { a, b } => b - a,
            CurveKind::Graph { df, .. } => p2(1.0, df(tau)),
            CurveKind::Arc { radius, .. } => p2(-tau.sin(), tau.cos()) * *radius,
            CurveKind::Polyline(p) => {
                let (k, _) = piece(tau, p.len());
                p[k + 1] - p[k]
            }
            CurveKind::Spline { pts, tans } => {
                let (k, s) = piece(tau, pts.len());
                hermite_deriv(&pts[k], &tans[k], &pts[k + 1], &tans[k + 1], s)
            }
        }
    }

    /// Unit left normal of the tangent.
    pub fn normal(&self, tau: f64) -> P2 {
        perp(&self.deriv(tau)).normalize()
    }

    /// Parameters where the curve is only piecewise smooth (interior).
    pub fn breaks(&self) -> Vec<f64> {
        match &self.kind {
            CurveKind::Polyline(p) => (1..p.len() - 1).map(|k| k as f64).collect(),
            CurveKind::Spline { pts, .. } => (1..pts.len() - 1).map(|k| k as f64).collect(),
            _ => Vec::new(),
        }
    }

    pub fn length_between(&self, t0: f64, t1: f64) -> f64 {
        match &self.kind {
            CurveKind::Segment { a, b } => (b - a).norm() * (t1 - t0),
            CurveKind::Arc { radius, .. } => radius * (t1 - t0),
            _ => self.integrate(t0, t1, &|_| 1.0),
        }
    }

    pub fn length(&self) -> f64 {
        let (a, b) = self.range();
        self.length_between(a, b)
    }

    /// `int f(tau) |gamma'(tau)| dtau` over `[t0, t1]`, split at breaks.
    pub fn integrate(&self, t0: f64, t1: f64, f: &dyn Fn(f64) -> f64) -> f64 {
        let mut knots = vec![t0];
        knots.extend(self.breaks().into_iter().filter(|b| *b > t0 && *b < t1));
        knots.push(t1);
        let mut s = 0.0;
        for w in knots.windows(2) {
            s += crate::geom::integrate_adaptive(
                &mut |t| f(t) * self.deriv(t).norm(),
                w[0],
                w[1],
                1e-10,
                1e-15,
            );
        }
        s
    }

    /// Intersections with the segment `a + t (b - a)`, `t` in `[0, 1]` up to
    /// a tiny slack. Collinear overlaps are reported once at their midpoint.
    pub fn hits(&self, a: &P2, b: &P2) -> Hits {
        let mut out = Hits::new();
        match &self.kind {
            CurveKind::Segment { a: p, b: q } => {
                if let Some((t, s)) = segment_hit(a, b, p, q) {
                    out.push(Hit { t, tau: s });
                }
            }
            CurveKind::Polyline(pts) => {
                let last = pts.len() - 2;
                for k in 0..=last {
                    if let Some((t, s)) = segment_hit(a, b, &pts[k], &pts[k + 1]) {
                        // Shared vertices belong to the later piece.
                        if s < 1.0 || k == last {
                            out.push(Hit { t, tau: k as f64 + s });
                        }
                    }
                }
            }
            CurveKind::Graph { f, x0, x1, lip, .. } => graph_hits(a, b, f.as_ref(), *x0, *x1, *lip, &mut out),
            CurveKind::Arc {
                center,
                radius,
                t0,
                t1,
            } => {
                let d = b - a;
                let w = a - center;
                let qa = d.norm_squared();
                let qb = 2.0 * d.dot(&w);
                let qc = w.norm_squared() - radius * radius;
                let disc = qb * qb - 4.0 * qa * qc;
                if qa > 0.0 && disc >= 0.0 {
                    let sq = disc.sqrt();
                    let roots = if sq == 0.0 {
                        [-qb / (2.0 * qa), f64::NAN]
                    } else {
                        // Stable quadratic formula.
                        let q = -0.5 * (qb + qb.signum() * sq);
                        let (r1, r2) = if q != 0.0 { (q / qa, qc / q) } else { (0.0, 0.0) };
                        [r1.min(r2), r1.max(r2)]
                    };
                    for t in roots {
                        if !(-T_SLACK..=1.0 + T_SLACK).contains(&t) {
                            continue;
                        }
                        let x = a + d * t - center;
                        let mut ang = x[1].atan2(x[0]);
                        while ang < *t0 {
                            ang += 2.0 * PI;
                        }
                        while ang >= t0 + 2.0 * PI {
                            ang -= 2.0 * PI;
                        }
                        if ang <= *t1 + 1e-14 {
                            out.push(Hit { t, tau: ang.min(*t1) });
                        }
                    }
                }
            }
            CurveKind::Spline { pts, tans } => {
                let last = pts.len() - 2;
                for k in 0..=last {
                    let from = out.len();
                    spline_piece_hits(a, b, &pts[k], &tans[k], &pts[k + 1], &tans[k + 1], k as f64, &mut out);
                    if k < last {
                        let mut i = from;
                        while i < out.len() {
                            if out[i].tau >= (k + 1) as f64 {
                                out.remove(i);
                            } else {
                                i += 1;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Parameter intervals on which the curve lies in the convex polygon.
    pub fn intervals_in(&self, poly: &ConvexPolygon) -> Vec<(f64, f64)> {
        if !boxes_overlap(&self.bbox, &poly.bbox()) {
            return Vec::new();
        }
        let (r0, r1) = self.range();
        let mut cuts = vec![r0, r1];
        let v = poly.vertices();
        for i in 0..v.len() {
            for h in self.hits(&v[i], &v[(i + 1) % v.len()]) {
                cuts.push(h.tau.clamp(r0, r1));
            }
        }
        cuts.sort_by(f64::total_cmp);
        cuts.dedup_by(|x, y| (*x - *y).abs() < 1e-15);
        let mut out: Vec<(f64, f64)> = Vec::new();
        for w in cuts.windows(2) {
            if w[1] - w[0] <= 0.0 {
                continue;
            }
            if poly.contains(&self.point(0.5 * (w[0] + w[1]))) {
                match out.last_mut() {
                    Some(last) if last.1 == w[0] => last.1 = w[1],
                    _ => out.push((w[0], w[1])),
                }
            }
        }
        out
    }

    /// Nearest parameter and distance (local search from a sampled start).
    pub fn closest(&self, x: &P2) -> (f64, f64) {
        match &self.kind {
            CurveKind::Segment { a, b } => {
                let d = b - a;
                let t = ((x - a).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
                (t, (x - self.point(t)).norm())
            }
            CurveKind::Polyline(p) => {
                let mut best = (0.0, f64::INFINITY);
                for k in 0..p.len() - 1 {
                    let d = p[k + 1] - p[k];
                    let t = ((x - p[k]).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
                    let dist = segment_distance(x, &p[k], &p[k + 1]);
                    if dist < best.1 {
                        best = (k as f64 + t, dist);
                    }
                }
                best
            }
            _ => {
                let (r0, r1) = self.range();
                let n = 128;
                let h = (r1 - r0) / n as f64;
                let mut best = (r0, f64::INFINITY);
                for k in 0..=n {
                    let t = r0 + h * k as f64;
                    let d = (x - self.point(t)).norm();
                    if d < best.1 {
                        best = (t, d);
                    }
                }
                // Golden-section refinement around the best sample.
                let (mut lo, mut hi) = ((best.0 - h).max(r0), (best.0 + h).min(r1));
                let g = 0.5 * (5f64.sqrt() - 1.0);
                let dist = |t: f64| (x - self.point(t)).norm();
                let mut c = hi - g * (hi - lo);
                let mut d = lo + g * (hi - lo);
                let (mut fc, mut fd) = (dist(c), dist(d));
                for _ in 0..80 {
                    if fc < fd {
                        hi = d;
                        d = c;
                        fd = fc;
                        c = hi - g * (hi - lo);
                        fc = dist(c);
                    } else {
                        lo = c;
                        c = d;
                        fc = fd;
                        d = lo + g * (hi - lo);
                        fd = dist(d);
                    }
                }
                let t = 0.5 * (lo + hi);
                let dt = dist(t);
                if dt < best.1 {
                    (t, dt)
                } else {
                    best
                }
            }
        }
    }
}

fn piece(tau: f64, n: usize) -> (usize, f64) {
    let k = (tau.floor().max(0.0) as usize).min(n - 2);
    (k, tau - k as f64)
}

fn hermite(p0: &P2, m0: &P2, p1: &P2, m1: &P2, s: f64) -> P2 {
    let s2 = s * s;
    let s3 = s2 * s;
    p0 * (2.0 * s3 - 3.0 * s2 + 1.0) + m0 * (s3 - 2.0 * s2 + s) + p1 * (-2.0 * s3 + 3.0 * s2) + m1 * (s3 - s2)
}

fn hermite_deriv(p0: &P2, m0: &P2, p1: &P2, m1: &P2, s: f64) -> P2 {
    let s2 = s * s;
    p0 * (6.0 * s2 - 6.0 * s) + m0 * (3.0 * s2 - 4.0 * s + 1.0) + p1 * (-6.0 * s2 + 6.0 * s) + m1 * (3.0 * s2 - 2.0 * s)
}

fn bezier_points(p0: &P2, m0: &P2, p1: &P2, m1: &P2) -> [P2; 4] {
    [*p0, p0 + m0 / 3.0, p1 - m1 / 3.0, *p1]
}

/// Intersection `(t, s)` of `[a, b]` and `[p, q]`, both parameters in `[0, 1]`.
fn segment_hit(a: &P2, b: &P2, p: &P2, q: &P2) -> Option<(f64, f64)> {
    let d = b - a;
    let e = q - p;
    let denom = cross(&d, &e);
    let w = p - a;
    let scale = d.norm() * e.norm();
    if denom.abs() <= 1e-15 * scale {
        // Parallel: only collinear overlaps matter.
        if cross(&w, &d).abs() > 1e-15 * scale.max(1e-300) + 1e-300 {
            return None;
        }
        let dd = d.norm_squared();
        let (s0, s1) = ((p - a).dot(&d) / dd, (q - a).dot(&d) / dd);
        let (lo, hi) = (s0.min(s1).max(0.0), s0.max(s1).min(1.0));
        if lo > hi {
            return None;
        }
        let t = 0.5 * (lo + hi);
        let s = ((a + d * t - p).dot(&e) / e.norm_squared()).clamp(0.0, 1.0);
        return Some((t, s));
    }
    let t = cross(&w, &e) / denom;
    let s = cross(&w, &d) / denom;
    let sl = 1e-12;
    if (-sl..=1.0 + sl).contains(&s) && (-T_SLACK..=1.0 + T_SLACK).contains(&t) {
        Some((t, s.clamp(0.0, 1.0)))
    } else {
        None
    }
}

fn bisect(h: &dyn Fn(f64) -> f64, mut l: f64, mut r: f64, mut hl: f64) -> f64 {
    if hl == 0.0 {
        return l;
    }
    for _ in 0..200 {
        let m = 0.5 * (l + r);
        if m <= l || m >= r {
            break;
        }
        let hm = h(m);
        if hm == 0.0 {
            return m;
        }
        if (hm > 0.0) == (hl > 0.0) {
            l = m;
            hl = hm;
        } else {
            r = m;
        }
    }
    0.5 * (l + r)
}

fn graph_hits(a: &P2, b: &P2, f: &(dyn Fn(f64) -> f64 + Send + Sync), x0: f64, x1: f64, lip: f64, out: &mut Hits) {
    let d = b - a;
    if d[0].abs() <= 1e-15 * d.norm() {
        if a[0] < x0 || a[0] > x1 || d[1] == 0.0 {
            return;
        }
        let t = (f(a[0]) - a[1]) / d[1];
        if (-T_SLACK..=1.0 + T_SLACK).contains(&t) {
            out.push(Hit { t, tau: a[0] });
        }
        return;
    }
    let (ta, tb) = ((x0 - a[0]) / d[0], (x1 - a[0]) / d[0]);
    let lo = ta.min(tb).max(-T_SLACK);
    let hi = ta.max(tb).min(1.0 + T_SLACK);
    if lo > hi {
        return;
    }
    let h = |t: f64| a[1] + t * d[1] - f((a[0] + t * d[0]).clamp(x0, x1));
    let k = d[1].abs() + lip * d[0].abs();
    let min_w = (hi - lo) / 64.0;
    let mut roots: SmallVec<[f64; 4]> = SmallVec::new();
    let mut stack: SmallVec<[(f64, f64, f64, f64); 16]> = SmallVec::new();
    stack.push((lo, hi, h(lo), h(hi)));
    while let Some((l, r, hl, hr)) = stack.pop() {
        let same = (hl > 0.0 && hr > 0.0) || (hl < 0.0 && hr < 0.0);
        if same && hl.abs() + hr.abs() > k * (r - l) {
            continue;
        }
        if r - l <= min_w {
            if !same {
                roots.push(bisect(&h, l, r, hl));
            }
            continue;
        }
        let m = 0.5 * (l + r);
        let hm = h(m);
        stack.push((m, r, hm, hr));
        stack.push((l, m, hl, hm));
    }
    roots.sort_by(f64::total_cmp);
    roots.dedup_by(|x, y| (*x - *y).abs() < CROSSING_MERGE);
    for t in roots {
        out.push(Hit {
            t,
            tau: (a[0] + t * d[0]).clamp(x0, x1),
        });
    }
}

#[allow(clippy::too_many_arguments)]
fn spline_piece_hits(a: &P2, b: &P2, p0: &P2, m0: &P2, p1: &P2, m1: &P2, base: f64, out: &mut Hits) {
    let d = b - a;
    let ctrl = bezier_points(p0, m0, p1, m1);
    let c: [f64; 4] = std::array::from_fn(|k| cross(&d, &(ctrl[k] - a)));
    let g = |s: f64| cross(&d, &(hermite(p0, m0, p1, m1, s) - a));
    let mut stack: SmallVec<[(f64, f64, [f64; 4]); 16]> = SmallVec::new();
    stack.push((0.0, 1.0, c));
    let mut roots: SmallVec<[f64; 4]> = SmallVec::new();
    while let Some((l, r, c)) = stack.pop() {
        if c.iter().all(|v| *v > 0.0) || c.iter().all(|v| *v < 0.0) {
            continue;
        }
        let mono = (c[0] <= c[1] && c[1] <= c[2] && c[2] <= c[3]) || (c[0] >= c[1] && c[1] >= c[2] && c[2] >= c[3]);
        if mono || r - l < 1e-6 {
            let (gl, gr) = (g(l), g(r));
            if (gl <= 0.0) != (gr <= 0.0) || gl == 0.0 {
                roots.push(bisect(&g, l, r, gl));
            } else if gr == 0.0 {
                roots.push(r);
            }
            continue;
        }
        // de Casteljau split at the midpoint.
        let c01 = 0.5 * (c[0] + c[1]);
        let c12 = 0.5 * (c[1] + c[2]);
        let c23 = 0.5 * (c[2] + c[3]);
        let c012 = 0.5 * (c01 + c12);
        let c123 = 0.5 * (c12 + c23);
        let mid = 0.5 * (c012 + c123);
        let m = 0.5 * (l + r);
        stack.push((m, r, [mid, c123, c23, c[3]]));
        stack.push((l, m, [c[0], c01, c012, mid]));
    }
    roots.sort_by(f64::total_cmp);
    roots.dedup_by(|x, y| (*x - *y).abs() < 1e-13);
    let dd = d.norm_squared();
    for s in roots {
        let x = hermite(p0, m0, p1, m1, s);
        let t = (x - a).dot(&d) / dd;
        if (-T_SLACK..=1.0 + T_SLACK).contains(&t) {
            out.push(Hit { t, tau: base + s });
        }
    }
}

/// A jump curve with two-sided smooth extensions of the field.
pub trait Interface<const M: usize>: Send + Sync {
    fn curve(&self) -> &Curve;
    /// Extension of the field from the `+` side (the side `normal` points to).
    fn eval_plus(&self, x: &P2) -> Value<M>;
    fn eval_minus(&self, x: &P2) -> Value<M>;
    fn grad_plus(&self, x: &P2) -> Grad<M, 2>;
    fn grad_minus(&self, x: &P2) -> Grad<M, 2>;
    /// Side of the interface on which `x` lies (meaningful within the tube).
    fn side(&self, x: &P2) -> Side;
    /// Half-width of the tube on which the extensions are valid.
    fn tube_width(&self) -> f64 {
        f64::INFINITY
    }
    fn normal(&self, tau: f64) -> P2 {
        self.curve().normal(tau)
    }
    /// `u+ - u-` at `gamma(tau)`.
    fn jump(&self, tau: f64) -> Value<M> {
        let x = self.curve().point(tau);
        self.eval_plus(&x) - self.eval_minus(&x)
    }
}

pub type InterfaceRef<const M: usize> = Arc<dyn Interface<M>>;

/// A planar field, smooth off its interfaces.
pub trait SbvField<const M: usize>: Send + Sync {
    /// Value off the interfaces (on an interface, some one-sided value).
    fn eval(&self, x: &P2) -> Value<M>;
    fn grad(&self, x: &P2) -> Grad<M, 2>;
    fn interfaces(&self) -> &[InterfaceRef<M>];
    fn domain(&self) -> Option<Aabb<2>> {
        None
    }

    /// Value of the field with the listed interfaces removed, continuing
    /// smoothly from the requested side. Valid when every jump extension
    /// difference `eval_plus - eval_minus` is additive, as for all presets.
    fn eval_layer(&self, x: &P2, forced: &[(usize, Side)]) -> Value<M> {
        let mut v = self.eval(x);
        let ifs = self.interfaces();
        for &(i, target) in forced {
            let actual = ifs[i].side(x);
            if actual != target {
                let d = ifs[i].eval_plus(x) - ifs[i].eval_minus(x);
                v += d * target.sign();
            }
        }
        v
    }

    fn grad_layer(&self, x: &P2, forced: &[(usize, Side)]) -> Grad<M, 2> {
        let mut g = self.grad(x);
        let ifs = self.interfaces();
        for &(i, target) in forced {
            let actual = ifs[i].side(x);
            if actual != target {
                let d = ifs[i].grad_plus(x) - ifs[i].grad_minus(x);
                g += d * target.sign();
            }
        }
        g
    }
}

/// A field with some interfaces removed by smooth continuation from a side.
pub struct LayerField<'a, const M: usize> {
    base: &'a dyn SbvField<M>,
    forced: Vec<(usize, Side)>,
    rest: Vec<InterfaceRef<M>>,
}

impl<'a, const M: usize> LayerField<'a, M> {
    pub fn new(base: &'a dyn SbvField<M>, forced: Vec<(usize, Side)>) -> Self {
        let rest = base
            .interfaces()
            .iter()
            .enumerate()
            .filter(|(i, _)| !forced.iter().any(|(j, _)| j == i))
            .map(|(_, f)| f.clone())
            .collect();
        LayerField { base, forced, rest }
    }
}

impl<const M: usize> SbvField<M> for LayerField<'_, M> {
    fn eval(&self, x: &P2) -> Value<M> {
        self.base.eval_layer(x, &self.forced)
    }
    fn grad(&self, x: &P2) -> Grad<M, 2> {
        self.base.grad_layer(x, &self.forced)
    }
    fn interfaces(&self) -> &[InterfaceRef<M>] {
        &self.rest
    }
    fn domain(&self) -> Option<Aabb<2>> {
        self.base.domain()
    }
}

/// A transversal crossing of a segment with an interface.
#[derive(Clone, Debug)]
pub struct Crossing<const M: usize> {
    pub t: f64,
    pub iface: usize,
    pub tau: f64,
    pub jump: Value<M>,
    pub normal: P2,
}

fn degenerate(a: &P2, b: &P2, reason: &'static str) -> Error {
    Error::DegenerateSlice {
        a: [a[0], a[1]],
        b: [b[0], b[1]],
        reason,
    }
}

/// All crossings with `t` in `[0, 1]`, sorted, merged at common points.
fn crossings_closed<const M: usize, F: SbvField<M> + ?Sized>(f: &F, a: &P2, b: &P2) -> Result<Vec<Crossing<M>>> {
    let d = b - a;
    let len = d.norm();
    let seg_box = crate::geom::bbox_of(&[*a, *b]);
    let mut out: Vec<Crossing<M>> = Vec::new();
    for (k, iface) in f.interfaces().iter().enumerate() {
        let c = iface.curve();
        if !boxes_overlap(c.bbox(), &seg_box) {
            continue;
        }
        for h in c.hits(a, b) {
            let normal = iface.normal(h.tau);
            if normal.dot(&d).abs() < TANGENCY_TOL * len {
                return Err(degenerate(a, b, "tangential crossing"));
            }
            out.push(Crossing {
                t: h.t.clamp(0.0, 1.0),
                iface: k,
                tau: h.tau,
                jump: iface.jump(h.tau),
                normal,
            });
        }
    }
    out.sort_by(|x, y| x.t.total_cmp(&y.t).then(x.iface.cmp(&y.iface)));
    // Junctions of interface pieces are crossed once.
    out.dedup_by(|x, y| (x.t - y.t).abs() < CROSSING_MERGE);
    Ok(out)
}

/// Crossings of the open segment `(a, b)`, sorted by segment parameter.
pub fn interface_crossings<const M: usize, F: SbvField<M> + ?Sized>(f: &F, a: &P2, b: &P2) -> Result<Vec<Crossing<M>>> {
    let mut v = crossings_closed(f, a, b)?;
    v.retain(|c| c.t > CROSSING_MERGE && c.t < 1.0 - CROSSING_MERGE);
    Ok(v)
}

/// Cumulated jump of `f` along `[a, b]`.
pub fn slice_jump<const M: usize, F: SbvField<M> + ?Sized>(f: &F, a: &P2, b: &P2) -> Result<Value<M>> {
    let d = b - a;
    let mut s = Value::<M>::zeros();
    for c in interface_crossings(f, a, b)? {
        s += c.jump * c.normal.dot(&d).signum();
    }
    if s.iter().all(|v| v.is_finite()) {
        Ok(s)
    } else {
        // A divergent sum is set to zero.
        Ok(Value::<M>::zeros())
    }
}

/// Absolutely continuous increment `u(b) - u(a) - s` along `[a, b]`.
pub fn slice_grad<const M: usize, F: SbvField<M> + ?Sized>(f: &F, a: &P2, b: &P2) -> Result<Value<M>> {
    let all = crossings_closed(f, a, b)?;
    if all.iter().any(|c| c.t <= CROSSING_MERGE || c.t >= 1.0 - CROSSING_MERGE) {
        return Err(degenerate(a, b, "endpoint on an interface"));
    }
    let s = slice_jump(f, a, b)?;
    Ok(f.eval(b) - f.eval(a) - s)
}

/// Jump moduli `g0`: continuous, nondecreasing, subadditive, zero only at 0.
#[derive(Clone, Debug, PartialEq)]
pub enum Modulus {
    /// `t^q`, `0 < q <= 1`.
    Power { q: f64 },
    /// `min(1, t^q)`.
    CappedPower { q: f64 },
    /// `g0(t) + t`.
    PlusIdentity(Box<Modulus>),
}

impl Modulus {
    pub fn validate(&self) -> Result<()> {
        match self {
            Modulus::Power { q } | Modulus::CappedPower { q } => {
                if *q > 0.0 && *q <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter(format!("modulus exponent {q} not in (0, 1]")))
                }
            }
            Modulus::PlusIdentity(inner) => inner.validate(),
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let t = t.max(0.0);
        match self {
            Modulus::Power { q } => t.powf(*q),
            Modulus::CappedPower { q } => t.powf(*q).min(1.0),
            Modulus::PlusIdentity(inner) => inner.eval(t) + t,
        }
    }

    /// Arguments where the modulus is not smooth (besides 0).
    pub fn kinks(&self) -> Vec<f64> {
        match self {
            Modulus::Power { .. } => Vec::new(),
            Modulus::CappedPower { .. } => vec![1.0],
            Modulus::PlusIdentity(inner) => inner.kinks(),
        }
    }
}

/// Splits `[t0, t1]` where `level(tau)` crosses any of `kinks`.
pub fn split_at_levels(t0: f64, t1: f64, kinks: &[f64], level: &dyn Fn(f64) -> f64) -> Vec<f64> {
    let mut knots = vec![t0];
    if !kinks.is_empty() {
        let n = 64;
        let h = (t1 - t0) / n as f64;
        for &k in kinks {
            let g = |t: f64| level(t) - k;
            let mut gl = g(t0);
            for i in 1..=n {
                let r = t0 + h * i as f64;
                let gr = g(r);
                if (gl > 0.0) != (gr > 0.0) {
                    knots.push(bisect(&g, r - h, r, gl));
                }
                gl = gr;
            }
        }
    }
    knots.push(t1);
    knots.sort_by(f64::total_cmp);
    knots
}

/// `int_{J_u cap region} g0(|[u]|) dH^1`.
pub fn g0_jump_energy<const M: usize, F: SbvField<M> + ?Sized>(f: &F, g0: &Modulus, region: &ConvexPolygon) -> f64 {
    let kinks = g0.kinks();
    let mut total = 0.0;
    for iface in f.interfaces() {
        let c = iface.curve();
        for (t0, t1) in c.intervals_in(region) {
            let knots = split_at_levels(t0, t1, &kinks, &|t| iface.jump(t).norm());
            for w in knots.windows(2) {
                total += c.integrate(w[0], w[1], &|t| g0.eval(iface.jump(t).norm()));
            }
        }
    }
    total
}

/// `c + g . x + x^T H x / 2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Background {
    pub c: f64,
    pub g: P2,
    pub h: Matrix2<f64>,
}

impl Background {
    pub fn zero() -> Self {
        Background {
            c: 0.0,
            g: p2(0.0, 0.0),
            h: Matrix2::zeros(),
        }
    }

    pub fn affine(c: f64, g: P2) -> Self {
        Background { c, g, h: Matrix2::zeros() }
    }

    pub fn eval(&self, x: &P2) -> f64 {
        self.c + self.g.dot(x) + 0.5 * x.dot(&(self.h * x))
    }

    pub fn grad(&self, x: &P2) -> P2 {
        self.g + self.h * x
    }
}

fn scalar(v: f64) -> Value<1> {
    Value::<1>::new(v)
}

fn row(g: P2) -> Grad<1, 2> {
    Grad::<1, 2>::new(g[0], g[1])
}

/// `u(x) = A x + b`.
#[derive(Clone)]
pub struct AffineField<const M: usize> {
    pub a: Grad<M, 2>,
    pub b: Value<M>,
    domain: Option<Aabb<2>>,
    none: Vec<InterfaceRef<M>>,
}

impl<const M: usize> AffineField<M> {
    pub fn new(a: Grad<M, 2>, b: Value<M>) -> Self {
        AffineField {
            a,
            b,
            domain: Some(unit_box()),
            none: Vec::new(),
        }
    }
}

impl<const M: usize> SbvField<M> for AffineField<M> {
    fn eval(&self, x: &P2) -> Value<M> {
        self.a * x + self.b
    }
    fn grad(&self, _x: &P2) -> Grad<M, 2> {
        self.a
    }
    fn interfaces(&self) -> &[InterfaceRef<M>] {
        &self.none
    }
    fn domain(&self) -> Option<Aabb<2>> {
        self.domain
    }
}

pub fn unit_box() -> Aabb<2> {
    Aabb::new(p2(0.0, 0.0), p2(1.0, 1.0))
}

/// Interfaces of the scalar presets: the field is `base(x) + plus_extra`
/// on the `+` side and `base(x) + minus_extra` on the other, where the
/// extras are affine in `x`.
struct StepInterface {
    curve: Curve,
    side: Arc<dyn Fn(&P2) -> Side + Send + Sync>,
    /// Full field value.
    field: Arc<dyn Fn(&P2) -> f64 + Send + Sync>,
    field_grad: Arc<dyn Fn(&P2) -> P2 + Send + Sync>,
    /// Jump `a(x) = a0 + a1 . x` carried by this curve.
    a0: f64,
    a1: P2,
    tube: f64,
}

impl StepInterface {
    fn amp(&self, x: &P2) -> f64 {
        self.a0 + self.a1.dot(x)
    }
}

impl Interface<1> for StepInterface {
    fn curve(&self) -> &Curve {
        &self.curve
    }
    fn eval_plus(&self, x: &P2) -> Value<1> {
        let u = (self.field)(x);
        scalar(match (self.side)(x) {
            Side::Plus => u,
            Side::Minus => u + self.amp(x),
        })
    }
    fn eval_minus(&self, x: &P2) -> Value<1> {
        let u = (self.field)(x);
        scalar(match (self.side)(x) {
            Side::Plus => u - self.amp(x),
            Side::Minus => u,
        })
    }
    fn grad_plus(&self, x: &P2) -> Grad<1, 2> {
        let g = (self.field_grad)(x);
        row(match (self.side)(x) {
            Side::Plus => g,
            Side::Minus => g + self.a1,
        })
    }
    fn grad_minus(&self, x: &P2) -> Grad<1, 2> {
        let g = (self.field_grad)(x);
        row(match (self.side)(x) {
            Side::Plus => g - self.a1,
            Side::Minus => g,
        })
    }
    fn side(&self, x: &P2) -> Side {
        (self.side)(x)
    }
    fn tube_width(&self) -> f64 {
        self.tube
    }
    fn jump(&self, tau: f64) -> Value<1> {
        scalar(self.amp(&self.curve.point(tau)))
    }
}

/// `u = b(x) + a 1{(x - p) . n > 0}`.
#[derive(Clone)]
pub struct LineStep {
    pub p: P2,
    pub n: P2,
    pub amplitude: f64,
    pub background: Background,
    domain: Aabb<2>,
    ifs: Vec<InterfaceRef<1>>,
}

impl LineStep {
    /// The line is represented on `extent`, which should contain the region
    /// of interest with a margin.
    pub fn new(p: P2, n: P2, amplitude: f64, background: Background, domain: Aabb<2>, extent: Aabb<2>) -> Result<Self> {
        let nn = n.norm();
        if nn == 0.0 || !nn.is_finite() {
            return Err(Error::InvalidParameter("line normal must be nonzero".into()));
        }
        let n = n / nn;
        let dir = p2(n[1], -n[0]);
        let big = 4.0 * ((extent.hi - extent.lo).norm() + (p - extent.lo).norm());
        let poly = ConvexPolygon::from_box(&extent);
        let (a, b) = (p - dir * big, p + dir * big);
        let (t0, t1) = poly
            .clip_segment(&a, &b)
            .ok_or_else(|| Error::InvalidParameter("line misses the extent box".into()))?;
        let curve = Curve::segment(a + (b - a) * t0, a + (b - a) * t1);
        let bg = background;
        let side = Arc::new(move |x: &P2| if (x - p).dot(&n) > 0.0 { Side::Plus } else { Side::Minus });
        let s2 = side.clone();
        let iface = StepInterface {
            curve,
            side,
            field: Arc::new(move |x: &P2| bg.eval(x) + if s2(x) == Side::Plus { amplitude } else { 0.0 }),
            field_grad: Arc::new(move |x: &P2| bg.grad(x)),
            a0: amplitude,
            a1: p2(0.0, 0.0),
            tube: f64::INFINITY,
        };
        Ok(LineStep {
            p,
            n,
            amplitude,
            background,
            domain,
            ifs: vec![Arc::new(iface)],
        })
    }

    /// Vertical line `x = c` on the unit square with a unit jump.
    pub fn indicator(c: f64) -> Self {
        Self::new(
            p2(c, 0.5),
            p2(1.0, 0.0),
            1.0,
            Background::zero(),
            unit_box(),
            unit_box().inflate(1.0),
        )
        .expect("valid line")
    }
}

impl SbvField<1> for LineStep {
    fn eval(&self, x: &P2) -> Value<1> {
        let j = if (x - self.p).dot(&self.n) > 0.0 { self.amplitude } else { 0.0 };
        scalar(self.background.eval(x) + j)
    }
    fn grad(&self, x: &P2) -> Grad<1, 2> {
        row(self.background.grad(x))
    }
    fn interfaces(&self) -> &[InterfaceRef<1>] {
        &self.ifs
    }
    fn domain(&self) -> Option<Aabb<2>> {
        Some(self.domain)
    }
}

/// `phi(x) = c0 + amp sin(2 pi freq x + phase)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SineGraph {
    pub c0: f64,
    pub amp: f64,
    pub freq: f64,
    pub phase: f64,
}

impl SineGraph {
    pub fn eval(&self, x: f64) -> f64 {
        self.c0 + self.amp * (2.0 * PI * self.freq * x + self.phase).sin()
    }
    pub fn deriv(&self, x: f64) -> f64 {
        2.0 * PI * self.freq * self.amp * (2.0 * PI * self.freq * x + self.phase).cos()
    }
    pub fn lip(&self) -> f64 {
        2.0 * PI * self.freq * self.amp.abs()
    }
}

/// `u = b(x) + a(x) 1{y > phi(x)}` with `a(x) = a0 + a1 x`.
#[derive(Clone)]
pub struct GraphStep {
    pub graph: SineGraph,
    pub a0: f64,
    pub a1: f64,
    pub background: Background,
    domain: Aabb<2>,
    ifs: Vec<InterfaceRef<1>>,
}

impl GraphStep {
    pub fn new(graph: SineGraph, a0: f64, a1: f64, background: Background, domain: Aabb<2>, extent: Aabb<2>) -> Self {
        let g = graph;
        let curve = Curve::graph(
            Arc::new(move |x| g.eval(x)),
            Arc::new(move |x| g.deriv(x)),
            extent.lo[0],
            extent.hi[0],
            g.lip(),
        );
        let bg = background;
        let side = Arc::new(move |x: &P2| if x[1] > g.eval(x[0]) { Side::Plus } else { Side::Minus });
        let s2 = side.clone();
        let s3 = side.clone();
        let iface = StepInterface {
            curve,
            side,
            field: Arc::new(move |x: &P2| bg.eval(x) + if s2(x) == Side::Plus { a0 + a1 * x[0] } else { 0.0 }),
            field_grad: Arc::new(move |x: &P2| {
                bg.grad(x) + if s3(x) == Side::Plus { p2(a1, 0.0) } else { p2(0.0, 0.0) }
            }),
            a0,
            a1: p2(a1, 0.0),
            tube: f64::INFINITY,
        };
        GraphStep {
            graph,
            a0,
            a1,
            background,
            domain,
            ifs: vec![Arc::new(iface)],
        }
    }

    fn above(&self, x: &P2) -> bool {
        x[1] > self.graph.eval(x[0])
    }
}

impl SbvField<1> for GraphStep {
    fn eval(&self, x: &P2) -> Value<1> {
        let j = if self.above(x) { self.a0 + self.a1 * x[0] } else { 0.0 };
        scalar(self.background.eval(x) + j)
    }
    fn grad(&self, x: &P2) -> Grad<1, 2> {
        let mut g = self.background.grad(x);
        if self.above(x) {
            g[0] += self.a1;
        }
        row(g)
    }
    fn interfaces(&self) -> &[InterfaceRef<1>] {
        &self.ifs
    }
    fn domain(&self) -> Option<Aabb<2>> {
        Some(self.domain)
    }
}

/// `u = s(x) + a 1{|x - c| < r}` with a fixed smooth part
/// `s(x, y) = x / 2 + sin(pi x) sin(pi y) / 4`.
#[derive(Clone)]
pub struct SmoothPlusJump {
    pub center: P2,
    pub radius: f64,
    pub amplitude: f64,
    pub smooth_scale: f64,
    ifs: Vec<InterfaceRef<1>>,
}

fn smooth_part(x: &P2, k: f64) -> f64 {
    k * (0.5 * x[0] + 0.25 * (PI * x[0]).sin() * (PI * x[1]).sin())
}

fn smooth_part_grad(x: &P2, k: f64) -> P2 {
    p2(
        k * (0.5 + 0.25 * PI * (PI * x[0]).cos() * (PI * x[1]).sin()),
        k * 0.25 * PI * (PI * x[0]).sin() * (PI * x[1]).cos(),
    )
}

impl SmoothPlusJump {
    pub fn new(center: P2, radius: f64, amplitude: f64, smooth_scale: f64) -> Result<Self> {
        if radius <= 0.0 {
            return Err(Error::InvalidParameter("disc radius must be positive".into()));
        }
        let k = smooth_scale;
        let side = Arc::new(move |x: &P2| if (x - center).norm() < radius { Side::Plus } else { Side::Minus });
        let s2 = side.clone();
        let iface = StepInterface {
            curve: Curve::circle(center, radius),
            side,
            field: Arc::new(move |x: &P2| smooth_part(x, k) + if s2(x) == Side::Plus { amplitude } else { 0.0 }),
            field_grad: Arc::new(move |x: &P2| smooth_part_grad(x, k)),
            a0: amplitude,
            a1: p2(0.0, 0.0),
            tube: radius,
        };
        Ok(SmoothPlusJump {
            center,
            radius,
            amplitude,
            smooth_scale,
            ifs: vec![Arc::new(iface)],
        })
    }
}

impl SbvField<1> for SmoothPlusJump {
    fn eval(&self, x: &P2) -> Value<1> {
        let j = if (x - self.center).norm() < self.radius { self.amplitude } else { 0.0 };
        scalar(smooth_part(x, self.smooth_scale) + j)
    }
    fn grad(&self, x: &P2) -> Grad<1, 2> {
        row(smooth_part_grad(x, self.smooth_scale))
    }
    fn interfaces(&self) -> &[InterfaceRef<1>] {
        &self.ifs
    }
    fn domain(&self) -> Option<Aabb<2>> {
        Some(unit_box())
    }
}

/// `u = sum_k a_k 1{y > 1/k}` for `k = 1..=K`, lines drawn on `[x0, x1]`.
#[derive(Clone)]
pub struct StackedLines {
    pub amplitudes: Vec<f64>,
    /// `tail[k]` is `sum_{j >= k} a_j` (1-based, `tail[K + 1] = 0`).
    tail: Vec<f64>,
    domain: Aabb<2>,
    ifs: Vec<InterfaceRef<1>>,
}

/// Level of line `k` (1-based).
pub fn stacked_level(k: usize) -> f64 {
    1.0 / k as f64
}

fn stacked_value(tail: &[f64], y: f64) -> f64 {
    let kmax = tail.len() - 2;
    if y <= stacked_level(kmax) {
        return 0.0;
    }
    // Smallest k with 1/k < y.
    let mut k = if y > 1.0 { 1 } else { ((1.0 / y).floor() as usize).clamp(1, kmax) };
    while k > 1 && stacked_level(k - 1) < y {
        k -= 1;
    }
    while k <= kmax && stacked_level(k) >= y {
        k += 1;
    }
    tail[k]
}

impl StackedLines {
    pub fn new(amplitudes: Vec<f64>, domain: Aabb<2>, x0: f64, x1: f64) -> Result<Self> {
        if amplitudes.is_empty() {
            return Err(Error::InvalidParameter("need at least one line".into()));
        }
        let kmax = amplitudes.len();
        let mut tail = vec![0.0; kmax + 2];
        for k in (1..=kmax).rev() {
            tail[k] = tail[k + 1] + amplitudes[k - 1];
        }
        let tail_arc: Arc<Vec<f64>> = Arc::new(tail.clone());
        let mut ifs: Vec<InterfaceRef<1>> = Vec::with_capacity(kmax);
        for k in 1..=kmax {
            let y = stacked_level(k);
            let t = tail_arc.clone();
            let tube = if k == 1 { 0.5 } else { stacked_level(k - 1) - y }.min(y - stacked_level(k + 1));
            ifs.push(Arc::new(StepInterface {
                curve: Curve::segment(p2(x0, y), p2(x1, y)),
                side: Arc::new(move |x: &P2| if x[1] > y { Side::Plus } else { Side::Minus }),
                field: Arc::new(move |x: &P2| stacked_value(&t, x[1])),
                field_grad: Arc::new(|_x: &P2| p2(0.0, 0.0)),
                a0: amplitudes[k - 1],
                a1: p2(0.0, 0.0),
                tube: 0.5 * tube,
            }));
        }
        Ok(StackedLines {
            amplitudes,
            tail,
            domain,
            ifs,
        })
    }

    /// `a_k = k^(-power)`, `K` lines over the default domain
    /// `(0, 1) x (-1/4, 5/4)`.
    pub fn power_law(k: usize, power: f64) -> Self {
        let amps = (1..=k).map(|j| (j as f64).powf(-power)).collect();
        let domain = Aabb::new(p2(0.0, -0.25), p2(1.0, 1.25));
        Self::new(amps, domain, -1.0, 2.0).expect("nonempty")
    }
}

impl SbvField<1> for StackedLines {
    fn eval(&self, x: &P2) -> Value<1> {
        scalar(stacked_value(&self.tail, x[1]))
    }
    fn grad(&self, _x: &P2) -> Grad<1, 2> {
        Grad::<1, 2>::zeros()
    }
    fn interfaces(&self) -> &[InterfaceRef<1>] {
        &self.ifs
    }
    fn domain(&self) -> Option<Aabb<2>> {
        Some(self.domain)
    }
}

/// `u_j(x) = <j x_1> / j` (fractional part), vertical jumps of `-1/j`.
#[derive(Clone)]
pub struct Sawtooth {
    pub j: f64,
    ifs: Vec<InterfaceRef<1>>,
}

impl Sawtooth {
    pub fn new(j: usize, extent: Aabb<2>) -> Result<Self> {
        if j == 0 {
            return Err(Error::InvalidParameter("sawtooth frequency must be positive".into()));
        }
        let jf = j as f64;
        let lo = (extent.lo[0] * jf).ceil() as i64;
        let hi = (extent.hi[0] * jf).floor() as i64;
        let mut ifs: Vec<InterfaceRef<1>> = Vec::new();
        for k in lo..=hi {
            let c = k as f64 / jf;
            ifs.push(Arc::new(StepInterface {
                // Downward direction so the left normal is +e1.
                curve: Curve::segment(p2(c, extent.hi[1]), p2(c, extent.lo[1])),
                side: Arc::new(move |x: &P2| if x[0] > c { Side::Plus } else { Side::Minus }),
                field: Arc::new(move |x: &P2| sawtooth(jf, x[0])),
                field_grad: Arc::new(|_x: &P2| p2(1.0, 0.0)),
                a0: -1.0 / jf,
                a1: p2(0.0, 0.0),
                tube: 0.5 / jf,
            }));
        }
        Ok(Sawtooth { j: jf, ifs })
    }
}

fn sawtooth(j: f64, x: f64) -> f64 {
    let t = j * x;
    (t - t.floor()) / j
}

impl SbvField<1> for Sawtooth {
    fn eval(&self, x: &P2) -> Value<1> {
        scalar(sawtooth(self.j, x[0]))
    }
    fn grad(&self, _x: &P2) -> Grad<1, 2> {
        Grad::<1, 2>::new(1.0, 0.0)
    }
    fn interfaces(&self) -> &[InterfaceRef<1>] {
        &self.ifs
    }
    fn domain(&self) -> Option<Aabb<2>> {
        Some(unit_box())
    }
}

/// Smooth radial truncation `T(z) = tau(|z|) z / |z|`: identity for
/// `|z| <= a`, zero for `|z| >= b`, with `|tau'| <= 1` and `tau(r) <= r`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Truncation {
    pub a: f64,
    pub b: f64,
    w1: f64,
    w2: f64,
    amp: f64,
}

/// Fraction of `b - a` spent on the rounded top.
const TRUNC_TOP: f64 = 0.05;

impl Truncation {
    /// Requires `b >= a (1 + pi / (2 (1 - 2 s)))` with `s = 0.05`: the
    /// descent from `a` to 0 must fit a slope of at most one.
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && b > a) {
            return Err(Error::InvalidParameter(format!("need 0 < a < b, got a = {a}, b = {b}")));
        }
        let w1 = TRUNC_TOP * (b - a);
        let w2 = b - a - w1;
        let amp = (0.5 * PI * a + w1) / w2;
        if amp > 1.0 + 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "thresholds too close for a 1-Lipschitz truncation: b = {b} < {}",
                a * (1.0 + PI / (2.0 * (1.0 - 2.0 * TRUNC_TOP)))
            )));
        }
        Ok(Truncation { a, b, w1, w2, amp })
    }

    pub fn tau(&self, r: f64) -> f64 {
        let (a, w1, w2) = (self.a, self.w1, self.w2);
        if r <= a {
            r
        } else if r <= a + w1 {
            a + 2.0 * w1 / PI * (0.5 * PI * (r - a) / w1).sin()
        } else if r < self.b {
            let top = a + 2.0 * w1 / PI;
            top - self.amp * w2 / PI * (1.0 - (PI * (r - a - w1) / w2).cos())
        } else {
            0.0
        }
        .max(0.0)
    }

    pub fn dtau(&self, r: f64) -> f64 {
        let (a, w1, w2) = (self.a, self.w1, self.w2);
        if r <= a {
            1.0
        } else if r <= a + w1 {
            (0.5 * PI * (r - a) / w1).cos()
        } else if r < self.b {
            -self.amp * (PI * (r - a - w1) / w2).sin()
        } else {
            0.0
        }
    }

    pub fn apply<const M: usize>(&self, z: &Value<M>) -> Value<M> {
        let r = z.norm();
        if r <= self.a {
            *z
        } else {
            z * (self.tau(r) / r)
        }
    }

    pub fn jacobian<const M: usize>(&self, z: &Value<M>) -> nalgebra::SMatrix<f64, M, M> {
        let r = z.norm();
        let id = nalgebra::SMatrix::<f64, M, M>::identity();
        if r <= self.a {
            return id;
        }
        let e = z / r;
        let p = e * e.transpose();
        p * self.dtau(r) + (id - p) * (self.tau(r) / r)
    }
}

struct TruncatedInterface<const M: usize> {
    inner: InterfaceRef<M>,
    t: Truncation,
}

impl<const M: usize> Interface<M> for TruncatedInterface<M> {
    fn curve(&self) -> &Curve {
        self.inner.curve()
    }
    fn eval_plus(&self, x: &P2) -> Value<M> {
        self.t.apply(&self.inner.eval_plus(x))
    }
    fn eval_minus(&self, x: &P2) -> Value<M> {
        self.t.apply(&self.inner.eval_minus(x))
    }
    fn grad_plus(&self, x: &P2) -> Grad<M, 2> {
        self.t.jacobian(&self.inner.eval_plus(x)) * self.inner.grad_plus(x)
    }
    fn grad_minus(&self, x: &P2) -> Grad<M, 2> {
        self.t.jacobian(&self.inner.eval_minus(x)) * self.inner.grad_minus(x)
    }
    fn side(&self, x: &P2) -> Side {
        self.inner.side(x)
    }
    fn tube_width(&self) -> f64 {
        self.inner.tube_width()
    }
}

/// `T(u)` for a smooth truncation `T`.
pub struct TruncatedField<F, const M: usize> {
    pub inner: F,
    pub t: Truncation,
    ifs: Vec<InterfaceRef<M>>,
}

impl<F: SbvField<M>, const M: usize> SbvField<M> for TruncatedField<F, M> {
    fn eval(&self, x: &P2) -> Value<M> {
        self.t.apply(&self.inner.eval(x))
    }
    fn grad(&self, x: &P2) -> Grad<M, 2> {
        self.t.jacobian(&self.inner.eval(x)) * self.inner.grad(x)
    }
    fn interfaces(&self) -> &[InterfaceRef<M>] {
        &self.ifs
    }
    fn domain(&self) -> Option<Aabb<2>> {
        self.inner.domain()
    }
    // The layer extension is not additive after truncation: rebuild it
    // from the inner field.
    fn eval_layer(&self, x: &P2, forced: &[(usize, Side)]) -> Value<M> {
        self.t.apply(&self.inner.eval_layer(x, forced))
    }
    fn grad_layer(&self, x: &P2, forced: &[(usize, Side)]) -> Grad<M, 2> {
        self.t.jacobian(&self.inner.eval_layer(x, forced)) * self.inner.grad_layer(x, forced)
    }
}

/// Truncates `f` between the thresholds `a_k < a_{k+1}`.
pub fn truncate<F: SbvField<M>, const M: usize>(f: F, a_k: f64, a_k1: f64) -> Result<TruncatedField<F, M>> {
    let t = Truncation::new(a_k, a_k1)?;
    let ifs = f
        .interfaces()
        .iter()
        .map(|i| {
            Arc::new(TruncatedInterface {
                inner: i.clone(),
                t,
            }) as InterfaceRef<M>
        })
        .collect();
    Ok(TruncatedField { inner: f, t, ifs })
}

/// Named field constructors with plain parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum FieldPreset {
    Affine { a: [f64; 2], b: f64 },
    LineStep { point: [f64; 2], normal: [f64; 2], amplitude: f64, slope: [f64; 2] },
    /// Unit jump across `x = c`.
    Indicator { c: f64 },
    GraphStep { c0: f64, amp: f64, freq: f64, phase: f64, a0: f64, a1: f64 },
    SmoothPlusJump { center: [f64; 2], radius: f64, amplitude: f64 },
    StackedLines { k: usize, power: f64 },
    Sawtooth { j: usize },
}

impl FieldPreset {
    pub fn names() -> &'static [&'static str] {
        &["affine", "line_step", "indicator", "graph_step", "smooth_plus_jump", "stacked_lines", "sawtooth"]
    }

    /// Background used by the graph-step preset: `x + y^2 / 2`.
    pub fn graph_background() -> Background {
        Background {
            c: 0.0,
            g: p2(1.0, 0.0),
            h: Matrix2::new(0.0, 0.0, 0.0, 1.0),
        }
    }

    pub fn build(&self) -> Result<Arc<dyn SbvField<1>>> {
        let ext = unit_box().inflate(1.0);
        Ok(match self {
            FieldPreset::Affine { a, b } => Arc::new(AffineField::<1>::new(Grad::<1, 2>::new(a[0], a[1]), scalar(*b))),
            FieldPreset::LineStep {
                point,
                normal,
                amplitude,
                slope,
            } => Arc::new(LineStep::new(
                p2(point[0], point[1]),
                p2(normal[0], normal[1]),
                *amplitude,
                Background::affine(0.0, p2(slope[0], slope[1])),
                unit_box(),
                ext,
            )?),
            FieldPreset::Indicator { c } => Arc::new(LineStep::indicator(*c)),
            FieldPreset::GraphStep {
                c0,
                amp,
                freq,
                phase,
                a0,
                a1,
            } => Arc::new(GraphStep::new(
                SineGraph {
                    c0: *c0,
                    amp: *amp,
                    freq: *freq,
                    phase: *phase,
                },
                *a0,
                *a1,
                Self::graph_background(),
                unit_box(),
                ext,
            )),
            FieldPreset::SmoothPlusJump {
                center,
                radius,
                amplitude,
            } => Arc::new(SmoothPlusJump::new(p2(center[0], center[1]), *radius, *amplitude, 1.0)?),
            FieldPreset::StackedLines { k, power } => {
                if *k == 0 {
                    return Err(Error::InvalidParameter("need at least one line".into()));
                }
                Arc::new(StackedLines::power_law(*k, *power))
            }
            FieldPreset::Sawtooth { j } => Arc::new(Sawtooth::new(*j, ext)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn step_plus_y() -> LineStep {
        // u = 2 chi_{x > 0.5} + y
        LineStep::new(
            p2(0.5, 0.0),
            p2(1.0, 0.0),
            2.0,
            Background::affine(0.0, p2(0.0, 1.0)),
            unit_box(),
            unit_box().inflate(1.0),
        )
        .unwrap()
    }

    /// Gauss-Legendre line integral of the gradient, split at crossings.
    fn xi_oracle(f: &dyn SbvField<1>, a: &P2, b: &P2) -> f64 {
        let d = b - a;
        let mut knots = vec![0.0];
        knots.extend(interface_crossings(f, a, b).unwrap().iter().map(|c| c.t));
        knots.push(1.0);
        let (x, w) = crate::geom::gauss_legendre(12);
        let mut s = 0.0;
        for k in knots.windows(2) {
            for (xi, wi) in x.iter().zip(&w) {
                let t = k[0] + (k[1] - k[0]) * xi;
                s += wi * (k[1] - k[0]) * (f.grad(&(a + d * t)) * d)[0];
            }
        }
        s
    }

    #[test]
    fn slice_examples() {
        let f = step_plus_y();
        let (a, b) = (p2(0.0, 0.0), p2(1.0, 1.0));
        assert!((slice_jump(&f, &a, &b).unwrap()[0] - 2.0).abs() < 1e-14);
        assert!((slice_jump(&f, &b, &a).unwrap()[0] + 2.0).abs() < 1e-14);
        assert_eq!(slice_jump(&f, &p2(0.2, 0.0), &p2(0.2, 1.0)).unwrap()[0], 0.0);
        assert!((slice_grad(&f, &a, &b).unwrap()[0] - 1.0).abs() < 1e-14);
        assert!((xi_oracle(&f, &a, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn affine_and_pure_step_slices() {
        let f = AffineField::<1>::new(Grad::<1, 2>::new(0.3, -1.2), scalar(0.7));
        let (a, b) = (p2(0.1, 0.9), p2(0.8, 0.2));
        assert_eq!(slice_jump(&f, &a, &b).unwrap()[0], 0.0);
        assert!((slice_grad(&f, &a, &b).unwrap()[0] - (f.a * (b - a))[0]).abs() < 1e-14);
        let g = LineStep::indicator(0.4);
        assert!(slice_grad(&g, &a, &b).unwrap()[0].abs() < 1e-14);
    }

    #[test]
    fn tangential_and_endpoint_slices_are_degenerate() {
        let f = step_plus_y();
        let e = slice_jump(&f, &p2(0.5, 0.0), &p2(0.5, 1.0)).unwrap_err();
        assert!(e.is_degenerate());
        let e = slice_grad(&f, &p2(0.5, 0.3), &p2(0.9, 0.3)).unwrap_err();
        assert!(e.is_degenerate());
    }

    #[test]
    fn stacked_lines_vertical_segment() {
        let f = StackedLines::power_law(3, 1.0);
        let c = interface_crossings(&f, &p2(0.3, 0.0), &p2(0.3, 1.0)).unwrap();
        let ys: Vec<f64> = c.iter().map(|c| c.t).collect();
        assert_eq!(ys.len(), 2);
        assert!((ys[0] - 1.0 / 3.0).abs() < 1e-15 && (ys[1] - 0.5).abs() < 1e-15);
        assert!(interface_crossings(&AffineField::<1>::new(Grad::<1, 2>::zeros(), scalar(0.0)), &p2(0.0, 0.0), &p2(1.0, 1.0))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn circle_crossed_twice() {
        let f = SmoothPlusJump::new(p2(0.5, 0.5), 0.25, 1.0, 1.0).unwrap();
        let (a, b) = (p2(0.0, 0.45), p2(1.0, 0.55));
        let c = interface_crossings(&f, &a, &b).unwrap();
        assert_eq!(c.len(), 2);
        let d = b - a;
        assert!(c[0].normal.dot(&d) * c[1].normal.dot(&d) < 0.0);
        // Quadratic-solve oracle for the entry parameter.
        let w = a - p2(0.5, 0.5);
        let (qa, qb, qc) = (d.dot(&d), 2.0 * d.dot(&w), w.dot(&w) - 0.0625);
        let t0 = (-qb - (qb * qb - 4.0 * qa * qc).sqrt()) / (2.0 * qa);
        assert!((c[0].t - t0).abs() < 1e-13);
        assert!(slice_jump(&f, &a, &b).unwrap()[0].abs() < 1e-14);
    }

    #[test]
    fn graph_crossings_match_bisection_oracle() {
        let g = SineGraph {
            c0: 0.3,
            amp: 0.1,
            freq: 1.0,
            phase: 0.0,
        };
        let f = GraphStep::new(g, 1.0, 0.0, Background::zero(), unit_box(), unit_box().inflate(1.0));
        let (a, b) = (p2(0.0, 0.0), p2(1.0, 0.8));
        let c = interface_crossings(&f, &a, &b).unwrap();
        assert_eq!(c.len(), 1);
        let x = a + (b - a) * c[0].t;
        assert!((x[1] - g.eval(x[0])).abs() < 1e-13);
        // Upward crossing of an upward-oriented graph: + 1.
        assert_eq!(slice_jump(&f, &a, &b).unwrap()[0], 1.0);
        // A wave crossed three times by a horizontal segment at its mean.
        let c = interface_crossings(&f, &p2(-0.1, 0.3 + 1e-3), &p2(1.1, 0.3 + 1e-3)).unwrap();
        assert_eq!(c.len(), 3);
    }

    #[test]
    fn spline_crossings() {
        let pts: Vec<P2> = (0..9).map(|k| {
            let t = k as f64 / 8.0 * 2.0 * PI;
            p2(0.5 + 0.3 * t.cos(), 0.5 + 0.3 * t.sin())
        }).collect();
        let c = Curve::spline_through(pts);
        let hits = c.hits(&p2(0.0, 0.5), &p2(1.0, 0.5));
        assert_eq!(hits.len(), 2, "{hits:?}");
        for h in hits {
            let x = c.point(h.tau);
            assert!((x[1] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn xi_oracle_on_random_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let presets: Vec<Arc<dyn SbvField<1>>> = vec![
            Arc::new(step_plus_y()),
            FieldPreset::GraphStep { c0: 0.3, amp: 0.1, freq: 1.0, phase: 0.0, a0: 1.0, a1: 0.5 }.build().unwrap(),
            FieldPreset::SmoothPlusJump { center: [0.5, 0.5], radius: 0.25, amplitude: 0.7 }.build().unwrap(),
            Arc::new(StackedLines::power_law(12, 1.0)),
            FieldPreset::Sawtooth { j: 5 }.build().unwrap(),
        ];
        for f in &presets {
            for _ in 0..200 {
                let a = p2(rng.random(), rng.random());
                let b = p2(rng.random(), rng.random());
                let Ok(xi) = slice_grad(f.as_ref(), &a, &b) else { continue };
                assert!((xi[0] - xi_oracle(f.as_ref(), &a, &b)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn g0_energy_examples() {
        let sq = ConvexPolygon::from_box(&unit_box());
        let g0 = Modulus::CappedPower { q: 0.5 };
        assert!((g0_jump_energy(&LineStep::indicator(0.5), &g0, &sq) - 1.0).abs() < 1e-9);
        let zero = LineStep::new(p2(0.5, 0.5), p2(1.0, 0.0), 0.0, Background::zero(), unit_box(), unit_box().inflate(1.0)).unwrap();
        assert_eq!(g0_jump_energy(&zero, &g0, &sq), 0.0);
        let f = StackedLines::power_law(100, 3.0);
        let dom = ConvexPolygon::from_box(&f.domain().unwrap());
        let oracle: f64 = (1..=100).map(|k| (k as f64).powf(-1.5)).sum();
        let v = g0_jump_energy(&f, &Modulus::Power { q: 0.5 }, &dom);
        assert!((v - oracle).abs() < 1e-6 * oracle);
    }

    #[test]
    fn graph_length_in_box() {
        let f = FieldPreset::GraphStep { c0: 0.3, amp: 0.1, freq: 1.0, phase: 0.0, a0: 1.0, a1: 0.0 }.build().unwrap();
        let sq = ConvexPolygon::from_box(&unit_box());
        let v = g0_jump_energy(f.as_ref(), &Modulus::Power { q: 1.0 }, &sq);
        // Arc length of 0.3 + 0.1 sin(2 pi x) on [0, 1] by a fine midpoint sum.
        let n = 200_000;
        let l: f64 = (0..n)
            .map(|k| {
                let x = (k as f64 + 0.5) / n as f64;
                (1.0 + (0.2 * PI * (2.0 * PI * x).cos()).powi(2)).sqrt() / n as f64
            })
            .sum();
        assert!((v - l).abs() < 1e-8);
    }

    #[test]
    fn truncation_examples() {
        let t = Truncation::new(1.0, 4.0).unwrap();
        let f = truncate(AffineField::<1>::new(Grad::<1, 2>::zeros(), scalar(0.5)), 1.0, 4.0).unwrap();
        assert_eq!(f.eval(&p2(0.3, 0.3))[0], 0.5);
        let f = truncate(AffineField::<1>::new(Grad::<1, 2>::zeros(), scalar(8.0)), 1.0, 4.0).unwrap();
        assert_eq!(f.eval(&p2(0.3, 0.3))[0], 0.0);
        let s = LineStep::new(p2(0.5, 0.5), p2(1.0, 0.0), 2.0, Background::zero(), unit_box(), unit_box().inflate(1.0)).unwrap();
        let f = truncate(s, 1.0, 4.0).unwrap();
        let j = f.interfaces()[0].jump(0.5)[0];
        assert!(j.abs() <= 2.0 && (j - t.tau(2.0)).abs() < 1e-15 && j < 2.0);
        assert!(Truncation::new(1.0, 2.0).is_err());
    }

    #[test]
    fn truncation_is_one_lipschitz() {
        let t = Truncation::new(0.5, 2.0).unwrap();
        let n = 20_000;
        let mut prev = t.tau(0.0);
        for k in 1..=n {
            let r = 3.0 * k as f64 / n as f64;
            let v = t.tau(r);
            assert!((v - prev).abs() <= 3.0 / n as f64 * (1.0 + 1e-9));
            assert!(v <= r + 1e-15 && v >= 0.0);
            assert!(t.dtau(r).abs() <= 1.0 + 1e-12);
            prev = v;
        }
        assert!(t.tau(2.0).abs() < 1e-12);
    }

    #[test]
    fn moduli_are_subadditive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for g in [
            Modulus::Power { q: 0.5 },
            Modulus::CappedPower { q: 0.5 },
            Modulus::PlusIdentity(Box::new(Modulus::CappedPower { q: 0.3 })),
        ] {
            g.validate().unwrap();
            assert_eq!(g.eval(0.0), 0.0);
            for _ in 0..10_000 {
                let a: f64 = rng.random::<f64>() * 3.0;
                let b: f64 = rng.random::<f64>() * 3.0;
                assert!(g.eval(a + b) <= g.eval(a) + g.eval(b) + 1e-12);
                assert!(g.eval(a.max(b)) >= g.eval(a.min(b)));
                assert!(a == 0.0 || g.eval(a) > 0.0);
            }
        }
        assert!(Modulus::Power { q: 1.5 }.validate().is_err());
    }

    #[test]
    fn extensions_agree_with_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fs: Vec<Arc<dyn SbvField<1>>> = vec![
            FieldPreset::GraphStep { c0: 0.3, amp: 0.1, freq: 1.0, phase: 0.0, a0: 1.0, a1: 0.5 }.build().unwrap(),
            Arc::new(StackedLines::power_law(10, 1.0)),
            FieldPreset::Sawtooth { j: 4 }.build().unwrap(),
        ];
        for f in &fs {
            for iface in f.interfaces() {
                for _ in 0..50 {
                    let (t0, t1) = iface.curve().range();
                    let tau = t0 + (t1 - t0) * rng.random::<f64>();
                    let x0 = iface.curve().point(tau);
                    let nu = iface.normal(tau);
                    let h = 1e-3 * rng.random::<f64>().max(0.01) * iface.tube_width().min(1.0);
                    let xp = x0 + nu * h;
                    let xm = x0 - nu * h;
                    assert!((iface.eval_plus(&xp) - f.eval(&xp)).norm() < 1e-8);
                    assert!((iface.eval_minus(&xm) - f.eval(&xm)).norm() < 1e-8);
                    assert!((iface.eval_plus(&x0) - iface.eval_minus(&x0) - iface.jump(tau)).norm() < 1e-8);
                    assert!((nu.norm() - 1.0).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fs: Vec<Arc<dyn SbvField<1>>> = vec![
            FieldPreset::GraphStep { c0: 0.3, amp: 0.1, freq: 1.0, phase: 0.0, a0: 1.0, a1: 0.5 }.build().unwrap(),
            FieldPreset::SmoothPlusJump { center: [0.5, 0.5], radius: 0.25, amplitude: 0.7 }.build().unwrap(),
        ];
        let h = 1e-6;
        for f in &fs {
            for _ in 0..200 {
                let x = p2(rng.random(), rng.random());
                let fx = f.eval(&p2(x[0] + h, x[1]))[0] - f.eval(&p2(x[0] - h, x[1]))[0];
                let fy = f.eval(&p2(x[0], x[1] + h))[0] - f.eval(&p2(x[0], x[1] - h))[0];
                if fx.abs() > 0.1 || fy.abs() > 0.1 {
                    continue; // straddles the interface
                }
                let g = f.grad(&x);
                assert!((fx / (2.0 * h) - g[0]).abs() < 1e-6 && (fy / (2.0 * h) - g[1]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn layer_field_removes_the_jump() {
        let f = step_plus_y();
        let l = LayerField::new(&f, vec![(0, Side::Plus)]);
        assert!(l.interfaces().is_empty());
        assert!((l.eval(&p2(0.2, 0.3))[0] - 2.3).abs() < 1e-15);
        assert!((l.eval(&p2(0.8, 0.3))[0] - 2.3).abs() < 1e-15);
        let l = LayerField::new(&f, vec![(0, Side::Minus)]);
        assert!((l.eval(&p2(0.8, 0.3))[0] - 0.3).abs() < 1e-15);
    }
}
