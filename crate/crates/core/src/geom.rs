//! Planar geometry and quadrature helpers shared by the energy, boundary
//! and pipeline modules.

use nalgebra::Matrix2;
use smallvec::SmallVec;

use crate::mesh::{p2, polygon_area, Aabb, Point};

pub type P2 = Point<2>;
pub type Poly = SmallVec<[P2; 10]>;

pub fn cross(a: &P2, b: &P2) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

/// Counterclockwise rotation by 90 degrees.
pub fn perp(a: &P2) -> P2 {
    p2(-a[1], a[0])
}

pub fn rotation(angle: f64) -> Matrix2<f64> {
    let (s, c) = angle.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// Convex polygon with counterclockwise vertices.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvexPolygon {
    verts: Vec<P2>,
}

impl ConvexPolygon {
    /// Accepts either orientation; rejects non-convex or degenerate input.
    pub fn new(mut verts: Vec<P2>) -> Option<Self> {
        if verts.len() < 3 {
            return None;
        }
        if polygon_area(&verts) < 0.0 {
            verts.reverse();
        }
        let n = verts.len();
        for i in 0..n {
            let a = verts[i];
            let b = verts[(i + 1) % n];
            let c = verts[(i + 2) % n];
            if cross(&(b - a), &(c - b)) < -1e-14 * (b - a).norm() * (c - b).norm() {
                return None;
            }
        }
        if polygon_area(&verts) <= 0.0 {
            return None;
        }
        Some(ConvexPolygon { verts })
    }

    pub fn from_box(b: &Aabb<2>) -> Self {
        ConvexPolygon {
            verts: vec![
                b.lo,
                p2(b.hi[0], b.lo[1]),
                b.hi,
                p2(b.lo[0], b.hi[1]),
            ],
        }
    }

    pub fn vertices(&self) -> &[P2] {
        &self.verts
    }

    pub fn area(&self) -> f64 {
        polygon_area(&self.verts)
    }

    pub fn bbox(&self) -> Aabb<2> {
        bbox_of(&self.verts)
    }

    pub fn contains(&self, x: &P2) -> bool {
        let n = self.verts.len();
        (0..n).all(|i| {
            let a = self.verts[i];
            let b = self.verts[(i + 1) % n];
            cross(&(b - a), &(x - a)) >= -1e-14 * (b - a).norm()
        })
    }

    /// Signed distance, negative inside.
    pub fn signed_distance(&self, x: &P2) -> f64 {
        let n = self.verts.len();
        let mut d = f64::INFINITY;
        for i in 0..n {
            let a = self.verts[i];
            let b = self.verts[(i + 1) % n];
            d = d.min(segment_distance(x, &a, &b));
        }
        if self.contains(x) {
            -d
        } else {
            d
        }
    }

    /// Polygonal outer approximation of the `r`-neighbourhood: each corner
    /// is replaced by `per_corner` points on the rounding arc.
    pub fn offset(&self, r: f64, per_corner: usize) -> ConvexPolygon {
        let n = self.verts.len();
        let outward = |i: usize| {
            let d = self.verts[(i + 1) % n] - self.verts[i];
            p2(d[1], -d[0]).normalize()
        };
        let mut out = Vec::with_capacity(n * (per_corner + 2));
        for i in 0..n {
            let n_in = outward((i + n - 1) % n);
            let n_out = outward(i);
            let a0 = n_in[1].atan2(n_in[0]);
            let mut a1 = n_out[1].atan2(n_out[0]);
            while a1 < a0 {
                a1 += 2.0 * std::f64::consts::PI;
            }
            let k = per_corner.max(1);
            let step = (a1 - a0) / k as f64;
            let v = self.verts[i];
            out.push(v + p2(a0.cos(), a0.sin()) * r);
            if step > 1e-12 {
                // Tangent-line intersections keep the polygon outside the disc.
                let rr = r / (0.5 * step).cos();
                for s in 0..k {
                    let a = a0 + (s as f64 + 0.5) * step;
                    out.push(v + p2(a.cos(), a.sin()) * rr);
                }
                out.push(v + p2(a1.cos(), a1.sin()) * r);
            }
        }
        ConvexPolygon::new(out).expect("offset of a convex polygon is convex")
    }

    /// Intersection with another convex polygon (Sutherland-Hodgman).
    pub fn clip(&self, subject: &[P2]) -> Poly {
        let mut out: Poly = subject.iter().copied().collect();
        let n = self.verts.len();
        for i in 0..n {
            if out.is_empty() {
                break;
            }
            let a = self.verts[i];
            let b = self.verts[(i + 1) % n];
            let nrm = perp(&(b - a));
            out = clip_halfplane(&out, &nrm, nrm.dot(&a));
        }
        out
    }

    /// Parameter range `[t0, t1]` of the part of `a + t (b - a)`,
    /// `t in [0, 1]`, inside the polygon.
    pub fn clip_segment(&self, a: &P2, b: &P2) -> Option<(f64, f64)> {
        let d = b - a;
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        let n = self.verts.len();
        for i in 0..n {
            let p = self.verts[i];
            let q = self.verts[(i + 1) % n];
            let nrm = perp(&(q - p));
            // inside: nrm . (x - p) >= 0
            let f0 = nrm.dot(&(a - p));
            let fd = nrm.dot(&d);
            if fd.abs() < 1e-300 {
                if f0 < 0.0 {
                    return None;
                }
                continue;
            }
            let t = -f0 / fd;
            if fd > 0.0 {
                t0 = t0.max(t);
            } else {
                t1 = t1.min(t);
            }
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}

/// Keeps `{x : nrm . x >= c}`.
pub fn clip_halfplane(poly: &[P2], nrm: &P2, c: f64) -> Poly {
    let mut out = Poly::new();
    let n = poly.len();
    if n == 0 {
        return out;
    }
    for i in 0..n {
        let p = poly[i];
        let q = poly[(i + 1) % n];
        let fp = nrm.dot(&p) - c;
        let fq = nrm.dot(&q) - c;
        if fp >= 0.0 {
            out.push(p);
        }
        if (fp >= 0.0) != (fq >= 0.0) {
            let t = fp / (fp - fq);
            out.push(p + (q - p) * t);
        }
    }
    if out.len() < 3 {
        out.clear();
    }
    out
}

pub fn bbox_of(pts: &[P2]) -> Aabb<2> {
    let mut lo = p2(f64::INFINITY, f64::INFINITY);
    let mut hi = p2(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in pts {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    Aabb::new(lo, hi)
}

pub fn boxes_overlap(a: &Aabb<2>, b: &Aabb<2>) -> bool {
    a.lo[0] <= b.hi[0] && b.lo[0] <= a.hi[0] && a.lo[1] <= b.hi[1] && b.lo[1] <= a.hi[1]
}

pub fn segment_distance(x: &P2, a: &P2, b: &P2) -> f64 {
    let d = b - a;
    let l2 = d.norm_squared();
    let t = if l2 > 0.0 {
        ((x - a).dot(&d) / l2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (x - (a + d * t)).norm()
}

pub fn polygon_centroid(p: &[P2]) -> P2 {
    let a = polygon_area(p);
    if a.abs() < 1e-300 {
        return p.iter().sum::<P2>() / p.len() as f64;
    }
    let n = p.len();
    let mut c = p2(0.0, 0.0);
    for i in 0..n {
        let q = p[i];
        let r = p[(i + 1) % n];
        let w = q[0] * r[1] - q[1] * r[0];
        c += (q + r) * w;
    }
    c / (6.0 * a)
}

/// Simple-polygon point test (even-odd rule).
pub fn point_in_polygon(p: &[P2], x: &P2) -> bool {
    let n = p.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (p[i], p[j]);
        if (a[1] > x[1]) != (b[1] > x[1]) {
            let xc = a[0] + (x[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if x[0] < xc {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Gauss-Legendre nodes and weights on [0, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { z } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pm) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = 0.5 * (1.0 - z);
        w[i] = 1.0 / ((1.0 - z * z) * dp * dp);
    }
    (x, w)
}

const GK_XK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_5,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_48,
    0.000000000000000000000000000000000,
];
const GK_WK: [f64; 8] = [
    0.022_935_322_010_529_224,
    0.063_092_092_629_978_56,
    0.104_790_010_322_250_19,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_42,
    0.204_432_940_075_298_89,
    0.209_482_141_084_727_82,
];
const GK_WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_64,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15(f: &mut dyn FnMut(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut rk = fc * GK_WK[7];
    let mut rg = fc * GK_WG[3];
    for j in 0..7 {
        let x = h * GK_XK[j];
        let s = f(c - x) + f(c + x);
        rk += GK_WK[j] * s;
        if j % 2 == 1 {
            rg += GK_WG[j / 2] * s;
        }
    }
    (rk * h, ((rk - rg) * h).abs())
}

/// Adaptive Gauss-Kronrod (7/15) quadrature of `f` on `[a, b]`.
pub fn integrate_adaptive(f: &mut dyn FnMut(f64) -> f64, a: f64, b: f64, rel_tol: f64, abs_tol: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let mut stack = vec![(a, b, 0usize)];
    let (whole, _) = gk15(f, a, b);
    let tol = (rel_tol * whole.abs()).max(abs_tol);
    let mut total = 0.0;
    while let Some((l, r, depth)) = stack.pop() {
        let (v, e) = gk15(f, l, r);
        let local_tol = tol * (r - l) / (b - a);
        if e <= local_tol || depth >= 40 || (r - l) < 1e-15 * (b - a).max(1.0) {
            total += v;
        } else {
            let m = 0.5 * (l + r);
            stack.push((l, m, depth + 1));
            stack.push((m, r, depth + 1));
        }
    }
    total
}

/// Degree-4 symmetric rule on a triangle: barycentric points and weights
/// (weights sum to 1).
pub const TRI_RULE_6: [([f64; 3], f64); 6] = [
    ([0.108103018168070, 0.445948490915965, 0.445948490915965], 0.223381589678011),
    ([0.445948490915965, 0.108103018168070, 0.445948490915965], 0.223381589678011),
    ([0.445948490915965, 0.445948490915965, 0.108103018168070], 0.223381589678011),
    ([0.816847572980459, 0.091576213509771, 0.091576213509771], 0.109951743655322),
    ([0.091576213509771, 0.816847572980459, 0.091576213509771], 0.109951743655322),
    ([0.091576213509771, 0.091576213509771, 0.816847572980459], 0.109951743655322),
];

/// Degree-2 rule with interior points.
pub const TRI_RULE_3: [([f64; 3], f64); 3] = [
    ([2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0], 1.0 / 3.0),
    ([1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0], 1.0 / 3.0),
    ([1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0], 1.0 / 3.0),
];

/// Integrates `f` over a triangle with the given rule.
pub fn integrate_triangle(
    a: &P2,
    b: &P2,
    c: &P2,
    rule: &[([f64; 3], f64)],
    f: &mut dyn FnMut(&P2) -> f64,
) -> f64 {
    let area = 0.5 * cross(&(b - a), &(c - a)).abs();
    if area == 0.0 {
        return 0.0;
    }
    let mut s = 0.0;
    for (l, w) in rule {
        let x = a * l[0] + b * l[1] + c * l[2];
        s += w * f(&x);
    }
    s * area
}

/// Integrates `f` over a convex polygon by fan triangulation.
pub fn integrate_polygon(poly: &[P2], rule: &[([f64; 3], f64)], f: &mut dyn FnMut(&P2) -> f64) -> f64 {
    let mut s = 0.0;
    for k in 1..poly.len().saturating_sub(1) {
        s += integrate_triangle(&poly[0], &poly[k], &poly[k + 1], rule, f);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_exact_for_polynomials() {
        let (x, w) = gauss_legendre(5);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(9)).sum();
        assert!((s - 0.1).abs() < 1e-14);
    }

    #[test]
    fn adaptive_handles_kink() {
        let v = integrate_adaptive(&mut |t: f64| (t - 0.3).abs().sqrt(), 0.0, 1.0, 1e-10, 1e-14);
        let exact = (2.0 / 3.0) * (0.3f64.powf(1.5) + 0.7f64.powf(1.5));
        assert!((v - exact).abs() < 1e-8);
    }

    #[test]
    fn clip_square_by_triangle() {
        let sq = ConvexPolygon::from_box(&Aabb::new(p2(0.0, 0.0), p2(1.0, 1.0)));
        let tri = [p2(0.5, -1.0), p2(2.0, 0.5), p2(0.5, 2.0)];
        let c = sq.clip(&tri);
        assert!(polygon_area(&c) > 0.0);
        assert!((polygon_area(&c) - 0.5).abs() < 0.5);
        let full = sq.clip(sq.vertices());
        assert!((polygon_area(&full) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn triangle_rule_degree() {
        let v = integrate_triangle(&p2(0.0, 0.0), &p2(1.0, 0.0), &p2(0.0, 1.0), &TRI_RULE_6, &mut |x| {
            x[0] * x[0] * x[1] * x[1]
        });
        assert!((v - 1.0 / 180.0).abs() < 1e-12);
    }

    #[test]
    fn segment_clip() {
        let sq = ConvexPolygon::from_box(&Aabb::new(p2(0.0, 0.0), p2(1.0, 1.0)));
        let (t0, t1) = sq.clip_segment(&p2(-1.0, 0.5), &p2(3.0, 0.5)).unwrap();
        assert!((t0 - 0.25).abs() < 1e-15 && (t1 - 0.5).abs() < 1e-15);
        assert!(sq.clip_segment(&p2(-1.0, 2.0), &p2(3.0, 2.0)).is_none());
    }
}
