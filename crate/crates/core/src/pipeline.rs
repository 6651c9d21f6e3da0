//! Multiscale construction of approximants: cube frames fitted to the jump
//! set, piecewise-linear interface graphs, the split projection glued
//! across them, and the deformation carrying fitted graphs onto the
//! approximant's jump faces.
//!
//! The approximant is streamed cube by cube; nothing per cell is stored,
//! so fine grids cost time but not memory.

use std::collections::HashMap;
use std::f64::consts::SQRT_2;
use std::sync::{Arc, Mutex};

use nalgebra::{Matrix2, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::energy::{
    self, meets_interface, BulkDensity, Deformation, FieldMetrics, MetricsRecord, StrictMetrics, SurfaceDensity,
};
use crate::field::{Modulus, SbvField, Side};
use crate::geom::{clip_halfplane, cross, integrate_triangle, perp, ConvexPolygon, Poly, P2, TRI_RULE_3};
use crate::interp::{build_interpolant, AffinePiece, CellData, CellInterpolant, Grad, Value};
use crate::mesh::{p2, polygon_area, subcell_geometry, subcell_index, Aabb, CellId, GridPlacement};
use crate::projector::{self, sample_shift, JumpFace, Piece, PiecewiseAffine, MAX_JITTER};
use crate::{Error, Result};

/// Samples per axis for gradient means and residuals.
const GRAD_SAMPLES: usize = 8;
/// Nodes of the Hermite table of a fitted graph.
const TABLE_NODES: usize = 65;
/// `|beta| <= BETA_SCALE * eps`.
const BETA_SCALE: f64 = 1e-6;
/// Refinement depth for pieces of cubes met by an interface.
const PIECE_DEPTH: usize = 4;

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub psi: BulkDensity,
    pub g: SurfaceDensity,
    pub g0: Modulus,
    /// Exponent of the gradient distance.
    pub p: f64,
    pub n_zeta: usize,
    pub seed: u64,
    /// Each residual sum must stay below `residual_multiple * theta`.
    pub residual_multiple: f64,
    /// Jump mass allowed in boundary-layer cubes, in units of `theta`.
    pub layer_multiple: f64,
    /// Interface length allowed in the bands `Q \ Q'`, in units of `theta`.
    pub band_multiple: f64,
    /// Starting value of `delta' / delta`.
    pub delta_prime_ratio: f64,
    /// Adds the symmetric-difference length to the selection score.
    pub finite_jump: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            psi: BulkDensity::Power { p: 2.0 },
            g: SurfaceDensity::Cohesive(Modulus::CappedPower { q: 0.5 }),
            g0: Modulus::CappedPower { q: 0.5 },
            p: 2.0,
            n_zeta: 8,
            seed: 0,
            residual_multiple: 1.0,
            layer_multiple: 1.0,
            band_multiple: 2.0,
            delta_prime_ratio: 0.9,
            finite_jump: true,
        }
    }
}

fn other(s: Side) -> Side {
    match s {
        Side::Plus => Side::Minus,
        Side::Minus => Side::Plus,
    }
}

/// Cubic Hermite table of a function of one variable, extended affinely
/// beyond its range.
#[derive(Clone, Debug)]
pub struct HermiteTable {
    s0: f64,
    h: f64,
    vals: Vec<f64>,
    ders: Vec<f64>,
}

impl HermiteTable {
    /// Tabulates `f(s) = (value, derivative)` at `n >= 2` uniform nodes.
    pub fn from_fn(s0: f64, s1: f64, n: usize, f: impl Fn(f64) -> (f64, f64)) -> Self {
        let n = n.max(2);
        let h = (s1 - s0) / (n - 1) as f64;
        let (vals, ders) = (0..n).map(|i| f(s0 + h * i as f64)).unzip();
        HermiteTable { s0, h, vals, ders }
    }

    pub fn range(&self) -> (f64, f64) {
        (self.s0, self.s0 + self.h * (self.vals.len() - 1) as f64)
    }

    pub fn nodes(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        (0..self.vals.len()).map(|i| (self.s0 + self.h * i as f64, self.vals[i], self.ders[i]))
    }

    fn locate(&self, s: f64) -> Option<(usize, f64)> {
        let (a, b) = self.range();
        if s < a || s > b {
            return None;
        }
        let n = self.vals.len();
        let i = (((s - self.s0) / self.h).floor() as usize).min(n - 2);
        Some((i, (s - self.s0) / self.h - i as f64))
    }

    pub fn eval(&self, s: f64) -> f64 {
        let n = self.vals.len();
        match self.locate(s) {
            Some((i, t)) => {
                let (t2, t3) = (t * t, t * t * t);
                self.vals[i] * (2.0 * t3 - 3.0 * t2 + 1.0)
                    + self.ders[i] * self.h * (t3 - 2.0 * t2 + t)
                    + self.vals[i + 1] * (3.0 * t2 - 2.0 * t3)
                    + self.ders[i + 1] * self.h * (t3 - t2)
            }
            None if s < self.s0 => self.vals[0] + self.ders[0] * (s - self.s0),
            None => self.vals[n - 1] + self.ders[n - 1] * (s - self.range().1),
        }
    }

    pub fn deriv(&self, s: f64) -> f64 {
        let n = self.vals.len();
        match self.locate(s) {
            Some((i, t)) => {
                let t2 = t * t;
                (self.vals[i] * (6.0 * t2 - 6.0 * t) + self.vals[i + 1] * (6.0 * t - 6.0 * t2)) / self.h
                    + self.ders[i] * (3.0 * t2 - 4.0 * t + 1.0)
                    + self.ders[i + 1] * (3.0 * t2 - 2.0 * t)
            }
            None if s < self.s0 => self.ders[0],
            None => self.ders[n - 1],
        }
    }
}

/// One interface piece written as a graph `h = phi(s)` in a cube frame.
#[derive(Clone, Debug)]
pub struct GraphFit<const M: usize> {
    pub iface: usize,
    /// Side of the interface lying above the graph.
    pub above: Side,
    /// Mean jump over the piece in `Q*`.
    pub mean_jump: Value<M>,
    /// `s`-range actually covered by the interface.
    pub covered: (f64, f64),
    pub max_slope: f64,
    pub phi: HermiteTable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CubeClass {
    /// Interior cube whose `Q*` meets no interface.
    NoInterface,
    /// Interior cube with fitted graphs.
    Interface,
    /// Interior cube whose interfaces could not be fitted; projected plainly.
    Fallback,
    /// Cube meeting the boundary of the domain.
    BoundaryLayer,
}

/// A cube `Q_z` of the current scale with its fitted frame.
#[derive(Clone, Debug)]
pub struct CubeFrame<const M: usize> {
    pub index: [i64; 2],
    pub center: P2,
    pub class: CubeClass,
    /// Columns: tangent `e_1` and normal `e_2` of the frame.
    pub rotation: Matrix2<f64>,
    pub eta: Grad<M, 2>,
    /// Sorted from bottom to top.
    pub graphs: Vec<GraphFit<M>>,
}

impl<const M: usize> CubeFrame<M> {
    pub fn to_local(&self, x: &P2) -> P2 {
        self.rotation.transpose() * (x - self.center)
    }

    pub fn to_global(&self, q: &P2) -> P2 {
        self.center + self.rotation * q
    }

    pub fn tangent(&self) -> P2 {
        self.rotation.column(0).into_owned()
    }

    pub fn normal(&self) -> P2 {
        self.rotation.column(1).into_owned()
    }
}

/// Cube decomposition at one scale `delta`.
#[derive(Clone, Debug)]
pub struct ScaleAnalysis<const M: usize> {
    pub theta: f64,
    pub delta: f64,
    pub gamma: P2,
    pub omega: Aabb<2>,
    pub frames: Vec<CubeFrame<M>>,
    lookup: HashMap<[i64; 2], usize>,
    /// Gradient deviation, unfitted jump mass, normal deviation, amplitude
    /// deviation.
    pub residuals: [f64; 4],
    pub layer_mass: f64,
    /// Number of scales tried.
    pub attempts: usize,
}

impl<const M: usize> ScaleAnalysis<M> {
    pub fn cube_index(&self, x: &P2) -> [i64; 2] {
        let y = (x - self.gamma) / self.delta;
        [y[0].floor() as i64, y[1].floor() as i64]
    }

    pub fn frame_index(&self, x: &P2) -> Option<usize> {
        self.lookup.get(&self.cube_index(x)).copied()
    }

    pub fn frame_by_index(&self, idx: &[i64; 2]) -> Option<usize> {
        self.lookup.get(idx).copied()
    }

    pub fn cube_box(&self, fi: usize) -> Aabb<2> {
        let idx = self.frames[fi].index;
        let lo = self.gamma + p2(idx[0] as f64, idx[1] as f64) * self.delta;
        Aabb::new(lo, lo.add_scalar(self.delta))
    }

    pub fn count(&self, class: CubeClass) -> usize {
        self.frames.iter().filter(|f| f.class == class).count()
    }
}

fn box_poly(b: &Aabb<2>) -> ConvexPolygon {
    ConvexPolygon::from_box(b)
}

/// `int_{J cap poly} w(tau)` over interface `k`.
fn jump_integral<const M: usize>(f: &dyn SbvField<M>, k: usize, poly: &ConvexPolygon, w: &dyn Fn(f64) -> f64) -> f64 {
    let c = f.interfaces()[k].curve();
    c.intervals_in(poly).into_iter().map(|(t0, t1)| c.integrate(t0, t1, w)).sum()
}

fn g0_mass<const M: usize>(f: &dyn SbvField<M>, poly: &ConvexPolygon, g0: &Modulus) -> f64 {
    let pb = poly.bbox();
    let mut s = 0.0;
    for (k, iface) in f.interfaces().iter().enumerate() {
        if crate::geom::boxes_overlap(iface.curve().bbox(), &pb) {
            s += jump_integral(f, k, poly, &|t| g0.eval(iface.jump(t).norm()));
        }
    }
    s
}

/// Fits one common frame to the interface pieces meeting `Q*`. Fails when
/// an interface meets `Q*` more than once, is not a graph of slope at most
/// `theta`, or when graphs cross.
fn fit_graphs<const M: usize>(
    f: &dyn SbvField<M>,
    center: &P2,
    delta: f64,
    theta: f64,
    pieces: &[(usize, Vec<(f64, f64)>)],
) -> Option<(Matrix2<f64>, Vec<GraphFit<M>>)> {
    if pieces.iter().any(|(_, iv)| iv.len() != 1) {
        return None;
    }
    let ifs = f.interfaces();
    // Total-least-squares direction of the tangent field.
    let mut t = Matrix2::<f64>::zeros();
    for (k, iv) in pieces {
        let c = ifs[*k].curve();
        let (t0, t1) = iv[0];
        let n = 16;
        for j in 0..n {
            let tau = t0 + (t1 - t0) * (j as f64 + 0.5) / n as f64;
            let d = c.deriv(tau);
            let l = d.norm();
            if l > 0.0 {
                let u = d / l;
                t += u * u.transpose() * (l * (t1 - t0) / n as f64);
            }
        }
    }
    let eig = SymmetricEigen::new(t);
    let i = if eig.eigenvalues[0] >= eig.eigenvalues[1] { 0 } else { 1 };
    let mut e1: P2 = eig.eigenvectors.column(i).into_owned().normalize();
    if e1[0] < 0.0 || (e1[0] == 0.0 && e1[1] < 0.0) {
        e1 = -e1;
    }
    let e2 = perp(&e1);
    let rot = Matrix2::from_columns(&[e1, e2]);
    let half = SQRT_2 * delta * 1.125;
    let mut graphs = Vec::with_capacity(pieces.len());
    for (k, iv) in pieces {
        let iface = &ifs[*k];
        let c = iface.curve();
        let (t0, t1) = iv[0];
        let m = 32;
        let mut sgn = 0.0;
        for j in 0..=m {
            let tau = t0 + (t1 - t0) * j as f64 / m as f64;
            let d = c.deriv(tau);
            let (ds, dh) = (e1.dot(&d), e2.dot(&d));
            if ds.abs() <= 1e-14 * d.norm() {
                return None;
            }
            if sgn == 0.0 {
                sgn = ds.signum();
            } else if ds.signum() != sgn {
                return None;
            }
            if dh.abs() > theta * ds.abs() {
                return None;
            }
        }
        let s_of = |tau: f64| e1.dot(&(c.point(tau) - center));
        let h_of = |tau: f64| e2.dot(&(c.point(tau) - center));
        let slope = |tau: f64| {
            let d = c.deriv(tau);
            e2.dot(&d) / e1.dot(&d)
        };
        // Parameters at the low and high ends in `s`.
        let (tlo, thi) = if sgn > 0.0 { (t0, t1) } else { (t1, t0) };
        let (slo, shi) = (s_of(tlo), s_of(thi));
        let node = |s: f64| -> (f64, f64) {
            if s <= slo {
                let m = slope(tlo);
                return (h_of(tlo) + m * (s - slo), m);
            }
            if s >= shi {
                let m = slope(thi);
                return (h_of(thi) + m * (s - shi), m);
            }
            let (mut a, mut b) = (tlo, thi);
            for _ in 0..64 {
                let mid = 0.5 * (a + b);
                if s_of(mid) < s {
                    a = mid;
                } else {
                    b = mid;
                }
            }
            let tau = 0.5 * (a + b);
            (h_of(tau), slope(tau))
        };
        let phi = HermiteTable::from_fn(-half, half, TABLE_NODES, node);
        let tmid = 0.5 * (t0 + t1);
        let above = if iface.normal(tmid).dot(&e2) > 0.0 { Side::Plus } else { Side::Minus };
        let len = c.length_between(t0, t1);
        let mut mean_jump = Value::<M>::zeros();
        if len > 0.0 {
            for comp in 0..M {
                mean_jump[comp] = c.integrate(t0, t1, &|tau| iface.jump(tau)[comp]) / len;
            }
        }
        let max_slope = phi
            .nodes()
            .filter(|(s, _, _)| *s >= slo && *s <= shi)
            .fold(0.0f64, |a, (_, _, d)| a.max(d.abs()));
        graphs.push(GraphFit {
            iface: *k,
            above,
            mean_jump,
            covered: (slo, shi),
            max_slope,
            phi,
        });
    }
    graphs.sort_by(|a, b| a.phi.eval(0.0).total_cmp(&b.phi.eval(0.0)));
    for w in graphs.windows(2) {
        if w[0].phi.vals.iter().zip(&w[1].phi.vals).any(|(a, b)| a >= b) {
            return None;
        }
    }
    Some((rot, graphs))
}

struct CubeReport {
    residuals: [f64; 4],
    layer: f64,
}

fn analyze_cube<const M: usize>(
    f: &dyn SbvField<M>,
    omega: &Aabb<2>,
    index: [i64; 2],
    lo: P2,
    delta: f64,
    theta: f64,
    cfg: &PipelineConfig,
) -> (CubeFrame<M>, CubeReport) {
    let qbox = Aabb::new(lo, lo.add_scalar(delta));
    let center = lo.add_scalar(0.5 * delta);
    let mut frame = CubeFrame {
        index,
        center,
        class: CubeClass::BoundaryLayer,
        rotation: Matrix2::identity(),
        eta: Grad::<M, 2>::zeros(),
        graphs: Vec::new(),
    };
    let mut rep = CubeReport {
        residuals: [0.0; 4],
        layer: 0.0,
    };
    if !(omega.contains(&qbox.lo) && omega.contains(&qbox.hi)) {
        let lo = qbox.lo.sup(&omega.lo);
        let hi = qbox.hi.inf(&omega.hi);
        if hi[0] > lo[0] && hi[1] > lo[1] {
            rep.layer = g0_mass(f, &box_poly(&Aabb::new(lo, hi)), &cfg.g0);
        }
        return (frame, rep);
    }
    let qstar = Aabb::new(center.add_scalar(-delta), center.add_scalar(delta));
    let n = GRAD_SAMPLES;
    let grid_pts = |b: &Aabb<2>| {
        let (lo, w) = (b.lo, b.hi - b.lo);
        (0..n * n).map(move |k| {
            let (i, j) = (k % n, k / n);
            lo + p2(w[0] * (i as f64 + 0.5) / n as f64, w[1] * (j as f64 + 0.5) / n as f64)
        })
    };
    let mut eta = Grad::<M, 2>::zeros();
    for x in grid_pts(&qstar) {
        eta += f.grad(&x);
    }
    eta /= (n * n) as f64;
    frame.eta = eta;
    let cell_area = delta * delta / (n * n) as f64;
    rep.residuals[0] = grid_pts(&qbox).map(|x| (f.grad(&x) - eta).norm().powf(cfg.p) * cell_area).sum();

    let star_poly = box_poly(&qstar);
    let mut pieces = Vec::new();
    for (k, iface) in f.interfaces().iter().enumerate() {
        if !crate::geom::boxes_overlap(iface.curve().bbox(), &qstar) {
            continue;
        }
        let iv = iface.curve().intervals_in(&star_poly);
        if !iv.is_empty() {
            pieces.push((k, iv));
        }
    }
    if pieces.is_empty() {
        frame.class = CubeClass::NoInterface;
        return (frame, rep);
    }
    let qpoly = box_poly(&qbox);
    match fit_graphs(f, &center, delta, theta, &pieces) {
        None => {
            frame.class = CubeClass::Fallback;
            rep.residuals[1] = g0_mass(f, &qpoly, &cfg.g0);
        }
        Some((rot, graphs)) => {
            let e2: P2 = rot.column(1).into_owned();
            for g in &graphs {
                let iface = &f.interfaces()[g.iface];
                let nbar = e2 * g.above.sign();
                rep.residuals[2] += jump_integral(f, g.iface, &qpoly, &|t| {
                    cfg.g0.eval(iface.jump(t).norm()) * (iface.normal(t) - nbar).norm()
                });
                rep.residuals[3] +=
                    jump_integral(f, g.iface, &qpoly, &|t| cfg.g0.eval((iface.jump(t) - g.mean_jump).norm()));
            }
            frame.class = CubeClass::Interface;
            frame.rotation = rot;
            frame.graphs = graphs;
        }
    }
    (frame, rep)
}

fn analyze_at<const M: usize>(
    f: &dyn SbvField<M>,
    omega: &Aabb<2>,
    theta: f64,
    delta: f64,
    gamma: P2,
    cfg: &PipelineConfig,
) -> ScaleAnalysis<M> {
    let lo = (omega.lo - gamma) / delta;
    let hi = (omega.hi - gamma) / delta;
    let (i0, i1) = (lo[0].floor() as i64, hi[0].ceil() as i64 - 1);
    let (j0, j1) = (lo[1].floor() as i64, hi[1].ceil() as i64 - 1);
    let mut frames = Vec::new();
    let mut lookup = HashMap::new();
    let mut residuals = [0.0; 4];
    let mut layer_mass = 0.0;
    for j in j0..=j1 {
        for i in i0..=i1 {
            let idx = [i, j];
            let cube_lo = gamma + p2(i as f64, j as f64) * delta;
            let (fr, rep) = analyze_cube(f, omega, idx, cube_lo, delta, theta, cfg);
            for k in 0..4 {
                residuals[k] += rep.residuals[k];
            }
            layer_mass += rep.layer;
            lookup.insert(idx, frames.len());
            frames.push(fr);
        }
    }
    ScaleAnalysis {
        theta,
        delta,
        gamma,
        omega: *omega,
        frames,
        lookup,
        residuals,
        layer_mass,
        attempts: 0,
    }
}

/// Halves `delta` from `theta` until the residual sums and the
/// boundary-layer jump mass are small in units of `theta`.
pub fn analyze_scale<const M: usize, R: Rng + ?Sized>(
    f: &dyn SbvField<M>,
    omega: &Aabb<2>,
    theta: f64,
    cfg: &PipelineConfig,
    rng: &mut R,
) -> Result<ScaleAnalysis<M>> {
    if !(theta > 0.0 && theta <= 0.5) {
        return Err(Error::InvalidParameter(format!("theta {theta} outside (0, 1/2]")));
    }
    let diam = (omega.hi - omega.lo).norm();
    let mut delta = theta;
    let mut attempts = 0;
    let mut last = None;
    while delta >= 1e-4 * diam {
        attempts += 1;
        let gamma = sample_shift(rng, 0.25 * delta);
        let mut a = analyze_at(f, omega, theta, delta, gamma, cfg);
        a.attempts = attempts;
        let bound = cfg.residual_multiple * theta;
        if a.residuals.iter().all(|r| *r <= bound) && a.layer_mass <= cfg.layer_multiple * theta {
            return Ok(a);
        }
        last = Some((delta, a.residuals, a.layer_mass));
        delta *= 0.5;
    }
    let (d, r, l) = last.unwrap_or((delta, [f64::NAN; 4], f64::NAN));
    Err(Error::Budget(format!(
        "no scale accepted for theta {theta}: at delta {d:e} residuals {r:?}, layer mass {l:e}"
    )))
}

/// Piecewise-linear interpolant `psi` of a fitted graph on the nodes
/// `eps Z`, with the offset `beta` of the polyline `H = graph(psi + beta)`.
#[derive(Clone, Debug)]
pub struct InterfacePL {
    pub eps: f64,
    pub beta: f64,
    /// Node `i0 + k` sits at `s = (i0 + k) eps`.
    pub i0: i64,
    pub vals: Vec<f64>,
    /// Measured `sup |phi - psi|`.
    pub sup_err: f64,
    /// Measured `sup |phi' - psi'|`.
    pub deriv_err: f64,
    /// `max(sup_err / eps, deriv_err)`.
    pub omega: f64,
}

impl InterfacePL {
    fn strip(&self, s: f64) -> (usize, f64) {
        let x = s / self.eps;
        let n = self.vals.len() as i64;
        let k = (x.floor() as i64 - self.i0).clamp(0, n - 2);
        (k as usize, x - (self.i0 + k) as f64)
    }

    /// `psi(s)`.
    pub fn psi(&self, s: f64) -> f64 {
        let (k, t) = self.strip(s);
        self.vals[k] + t * (self.vals[k + 1] - self.vals[k])
    }

    pub fn slope(&self, s: f64) -> f64 {
        let (k, _) = self.strip(s);
        (self.vals[k + 1] - self.vals[k]) / self.eps
    }

    /// Height of `H` at `s`.
    pub fn height(&self, s: f64) -> f64 {
        self.psi(s) + self.beta
    }

    /// Node `i` of `H` in frame coordinates.
    pub fn node(&self, i: i64) -> P2 {
        let k = (i - self.i0).clamp(0, self.vals.len() as i64 - 1) as usize;
        p2(i as f64 * self.eps, self.vals[k] + self.beta)
    }

    pub fn node_range(&self) -> (i64, i64) {
        (self.i0, self.i0 + self.vals.len() as i64 - 1)
    }
}

/// Interpolates `phi` on the nodes covering `[s_lo, s_hi]`; errors are
/// measured on that range.
pub fn linearize_interface(phi: &HermiteTable, s_lo: f64, s_hi: f64, eps: f64, beta: f64) -> InterfacePL {
    let i0 = (s_lo / eps).floor() as i64 - 1;
    let i1 = (s_hi / eps).ceil() as i64 + 1;
    let vals: Vec<f64> = (i0..=i1).map(|i| phi.eval(i as f64 * eps)).collect();
    let mut pl = InterfacePL {
        eps,
        beta,
        i0,
        vals,
        sup_err: 0.0,
        deriv_err: 0.0,
        omega: 0.0,
    };
    let sub = 8;
    for i in (s_lo / eps).floor() as i64..(s_hi / eps).ceil() as i64 {
        for j in 0..=sub {
            let s = (i as f64 + j as f64 / sub as f64) * eps;
            if s < s_lo || s > s_hi {
                continue;
            }
            pl.sup_err = pl.sup_err.max((phi.eval(s) - pl.psi(s)).abs());
            if j > 0 && j < sub {
                pl.deriv_err = pl.deriv_err.max((phi.deriv(s) - pl.slope(s)).abs());
            }
        }
    }
    pl.omega = (pl.sup_err / eps).max(pl.deriv_err);
    pl
}

/// Linearizes every graph of a frame with one common `beta`, re-drawn
/// while a node of `H` comes within `1e-9` of the cube boundary.
pub fn linearize_frame<const M: usize, R: Rng + ?Sized>(
    frame: &CubeFrame<M>,
    delta: f64,
    eps: f64,
    rng: &mut R,
) -> Vec<InterfacePL> {
    let half = SQRT_2 * delta;
    let mut out = Vec::new();
    for _ in 0..MAX_JITTER {
        let beta = (2.0 * rng.random::<f64>() - 1.0) * BETA_SCALE * eps;
        out = frame
            .graphs
            .iter()
            .map(|g| linearize_interface(&g.phi, -half, half, eps, beta))
            .collect();
        let r = 0.5 * delta;
        let clear = out.iter().all(|pl| {
            let (a, b) = pl.node_range();
            (a..=b).all(|i| {
                let d = frame.to_local(&frame.center);
                let x = frame.to_global(&(pl.node(i) + d)) - frame.center;
                let gap = (x[0].abs() - r).abs().min((x[1].abs() - r).abs());
                gap > 1e-9 || x[0].abs() > r + 1e-9 || x[1].abs() > r + 1e-9
            })
        });
        if clear {
            break;
        }
    }
    out
}

/// Cube geometry at one scale together with the deformation `Phi`.
#[derive(Clone, Debug)]
pub struct LevelGeometry<const M: usize> {
    pub analysis: ScaleAnalysis<M>,
    pub delta_prime: f64,
    pub eps: f64,
    /// Per frame, one polyline per graph.
    pub pls: Vec<Vec<InterfacePL>>,
    /// Measured `sup |Phi - id|`.
    pub phi_sup: f64,
    /// Measured `sup |D Phi - Id|`.
    pub dphi_sup: f64,
}

fn smoothstep(t: f64) -> (f64, f64) {
    let t = t.clamp(0.0, 1.0);
    (t * t * (3.0 - 2.0 * t), 6.0 * t * (1.0 - t))
}

impl<const M: usize> LevelGeometry<M> {
    fn interface_frame(&self, x: &P2) -> Option<usize> {
        let fi = self.analysis.frame_index(x)?;
        (self.analysis.frames[fi].class == CubeClass::Interface).then_some(fi)
    }

    /// Half side of `Q''` and width of the cutoff transition.
    fn cutoff_geometry(&self) -> (f64, f64) {
        let d = self.analysis.delta;
        let a = 0.25 * (d + self.delta_prime);
        (a, 0.5 * d - a)
    }

    /// Cutoff `alpha_z(x)` and its gradient: one on `Q''`, zero on `dQ`.
    pub fn alpha(&self, fi: usize, x: &P2) -> (f64, P2) {
        let (a, w) = self.cutoff_geometry();
        let c = self.analysis.frames[fi].center;
        let one = |u: f64| -> (f64, f64) {
            let r = u.abs();
            if r <= a {
                (1.0, 0.0)
            } else if r >= a + w {
                (0.0, 0.0)
            } else {
                let (s, ds) = smoothstep((r - a) / w);
                (1.0 - s, -ds / w * u.signum())
            }
        };
        let (h0, d0) = one(x[0] - c[0]);
        let (h1, d1) = one(x[1] - c[1]);
        (h0 * h1, p2(d0 * h1, h0 * d1))
    }

    fn disp_k(&self, fi: usize, k: usize, s: f64) -> f64 {
        self.pls[fi][k].height(s) - self.analysis.frames[fi].graphs[k].phi.eval(s)
    }

    /// Displacement along `e_2` before the cutoff, at frame coordinates `q`:
    /// `psi_k + beta - phi_k` on graph `k`, linear in between, constant
    /// beyond the outer graphs.
    pub fn displacement(&self, fi: usize, q: &P2) -> f64 {
        let g = &self.analysis.frames[fi].graphs;
        let (s, h) = (q[0], q[1]);
        let idx = g.partition_point(|gk| gk.phi.eval(s) <= h);
        if idx == 0 {
            return self.disp_k(fi, 0, s);
        }
        if idx == g.len() {
            return self.disp_k(fi, g.len() - 1, s);
        }
        let (pl, ph) = (g[idx - 1].phi.eval(s), g[idx].phi.eval(s));
        let t = (h - pl) / (ph - pl);
        (1.0 - t) * self.disp_k(fi, idx - 1, s) + t * self.disp_k(fi, idx, s)
    }

    /// Layer of frame coordinates `q`: the number of polylines below it.
    pub fn region_of(&self, fi: usize, q: &P2) -> usize {
        self.pls[fi].partition_point(|pl| pl.height(q[0]) < q[1])
    }

    /// `|D(alpha d)|` at a point of graph `k`, both one-sided limits.
    fn dphi_on_graph(&self, fi: usize, k: usize, s: f64) -> f64 {
        let fr = &self.analysis.frames[fi];
        let g = &fr.graphs;
        let h = g[k].phi.eval(s);
        let x = fr.to_global(&p2(s, h));
        let (al, grad_al) = self.alpha(fi, &x);
        let ga = fr.rotation.transpose() * grad_al;
        let d = self.disp_k(fi, k, s);
        let dk = self.pls[fi][k].slope(s) - g[k].phi.deriv(s);
        let mut best = 0.0f64;
        for nb in [k.checked_sub(1), (k + 1 < g.len()).then_some(k + 1)] {
            let dh = match nb {
                Some(j) => (self.disp_k(fi, j, s) - d) / (g[j].phi.eval(s) - h),
                None => 0.0,
            };
            let ds = dk - g[k].phi.deriv(s) * dh;
            best = best.max((ga * d + p2(ds, dh) * al).norm());
        }
        best
    }

    /// Samples `sup |Phi - id|` and `sup |D Phi - Id|` along the fitted
    /// graphs, refining near the cutoff transition.
    fn measure(&mut self) {
        let (a, w) = self.cutoff_geometry();
        let half = 0.5 * self.analysis.delta;
        let (mut ps, mut dps) = (0.0f64, 0.0f64);
        for fi in 0..self.analysis.frames.len() {
            let fr = &self.analysis.frames[fi];
            if fr.class != CubeClass::Interface {
                continue;
            }
            let e1 = fr.tangent();
            let span = 0.5 * self.analysis.delta * (e1[0].abs() + e1[1].abs());
            let coarse = self.eps / 8.0;
            let fine = (w / 4.0).min(coarse);
            for k in 0..fr.graphs.len() {
                let cheb = |s: f64| {
                    let x = fr.to_global(&p2(s, fr.graphs[k].phi.eval(s))) - fr.center;
                    x[0].abs().max(x[1].abs())
                };
                let mut s = -span;
                while s < span {
                    let r = cheb(s);
                    let near = r >= a - 2.0 * coarse && r <= half + 2.0 * coarse;
                    let step = if near { fine } else { coarse };
                    // Offset keeps samples off the polyline nodes.
                    let sm = s + 0.37 * step;
                    if cheb(sm) < half {
                        let x = fr.to_global(&p2(sm, fr.graphs[k].phi.eval(sm)));
                        let (al, _) = self.alpha(fi, &x);
                        ps = ps.max((al * self.disp_k(fi, k, sm)).abs());
                        dps = dps.max(self.dphi_on_graph(fi, k, sm));
                    }
                    s += step;
                }
            }
        }
        self.phi_sup = ps;
        self.dphi_sup = dps;
    }
}

impl<const M: usize> Deformation for LevelGeometry<M> {
    fn apply(&self, x: &P2) -> P2 {
        let Some(fi) = self.interface_frame(x) else {
            return *x;
        };
        let (al, _) = self.alpha(fi, x);
        if al == 0.0 {
            return *x;
        }
        let fr = &self.analysis.frames[fi];
        x + fr.normal() * (al * self.displacement(fi, &fr.to_local(x)))
    }

    /// Fixed-point iteration `x = y - alpha(x) d(x) e_2`; `Phi(Q_z) = Q_z`,
    /// so the cube of `y` is the cube of `x`.
    fn inverse(&self, y: &P2) -> P2 {
        let Some(fi) = self.interface_frame(y) else {
            return *y;
        };
        let fr = &self.analysis.frames[fi];
        let e2 = fr.normal();
        let mut x = *y;
        for _ in 0..100 {
            let (al, _) = self.alpha(fi, &x);
            let xn = y - e2 * (al * self.displacement(fi, &fr.to_local(&x)));
            let done = (xn - x).norm() <= 1e-16 * (1.0 + y.norm());
            x = xn;
            if done {
                break;
            }
        }
        x
    }

    fn fd_step(&self) -> f64 {
        let (_, w) = self.cutoff_geometry();
        (1e-3 * w).max(1e-9)
    }
}

/// Picks `delta'` starting from `ratio * delta` and moving toward `delta`
/// until the interface length in the bands `Q \ Q'` fits its budget.
pub fn choose_delta_prime<const M: usize>(f: &dyn SbvField<M>, a: &ScaleAnalysis<M>, cfg: &PipelineConfig) -> f64 {
    let band = |dp: f64| -> f64 {
        let mut s = 0.0;
        for (fi, fr) in a.frames.iter().enumerate() {
            if fr.class != CubeClass::Interface {
                continue;
            }
            let q = box_poly(&a.cube_box(fi));
            let inner = box_poly(&Aabb::new(fr.center.add_scalar(-0.5 * dp), fr.center.add_scalar(0.5 * dp)));
            for g in &fr.graphs {
                s += jump_integral(f, g.iface, &q, &|_| 1.0) - jump_integral(f, g.iface, &inner, &|_| 1.0);
            }
        }
        s
    };
    let mut ratio = cfg.delta_prime_ratio.clamp(0.0, 0.999_999);
    for _ in 0..40 {
        if band(ratio * a.delta) <= cfg.band_multiple * a.theta {
            break;
        }
        ratio = 1.0 - 0.5 * (1.0 - ratio);
    }
    ratio * a.delta
}

/// Linearizes all frames at `eps` and measures `Phi`; a bound
/// `|D Phi - Id| > theta / 2` is reported as a budget error, the signal to
/// reduce `eps`.
pub fn build_deformation<const M: usize, R: Rng + ?Sized>(
    analysis: ScaleAnalysis<M>,
    delta_prime: f64,
    eps: f64,
    rng: &mut R,
) -> std::result::Result<LevelGeometry<M>, (Error, ScaleAnalysis<M>)> {
    let delta = analysis.delta;
    let pls = analysis
        .frames
        .iter()
        .map(|fr| {
            if fr.class == CubeClass::Interface {
                linearize_frame(fr, delta, eps, rng)
            } else {
                Vec::new()
            }
        })
        .collect();
    let mut g = LevelGeometry {
        analysis,
        delta_prime,
        eps,
        pls,
        phi_sup: 0.0,
        dphi_sup: 0.0,
    };
    g.measure();
    if g.dphi_sup > 0.5 * g.analysis.theta || !g.dphi_sup.is_finite() {
        let msg = format!("|D Phi - Id| = {:e} exceeds theta / 2 at eps {eps:e}", g.dphi_sup);
        return Err((Error::Budget(msg), g.analysis));
    }
    Ok(g)
}

/// Chooses the largest grid scale (at most `delta / 4`) whose deformation
/// meets the bound, or uses `fixed`.
pub fn prepare_level<const M: usize, R: Rng + ?Sized>(
    f: &dyn SbvField<M>,
    analysis: ScaleAnalysis<M>,
    cfg: &PipelineConfig,
    fixed: Option<f64>,
    rng: &mut R,
) -> Result<LevelGeometry<M>> {
    let dp = choose_delta_prime(f, &analysis, cfg);
    let mut eps = fixed.unwrap_or(0.25 * analysis.delta);
    let mut a = analysis;
    for _ in 0..60 {
        match build_deformation(a, dp, eps, rng) {
            Ok(g) => return Ok(g),
            Err((e, back)) => {
                if fixed.is_some() || eps < 1e-7 {
                    return Err(e);
                }
                // `D Phi - Id` scales like eps^2 for curved graphs.
                let trial = build_deformation_probe(&back, dp, eps);
                let factor = (0.95 * (0.5 * back.theta / trial).sqrt()).clamp(0.3, 0.9);
                eps *= factor;
                a = back;
            }
        }
    }
    Err(Error::Budget("grid scale search did not converge".into()))
}

fn build_deformation_probe<const M: usize>(a: &ScaleAnalysis<M>, dp: f64, eps: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = LevelGeometry {
        analysis: a.clone(),
        delta_prime: dp,
        eps,
        pls: a
            .frames
            .iter()
            .map(|fr| {
                if fr.class == CubeClass::Interface {
                    linearize_frame(fr, a.delta, eps, &mut rng)
                } else {
                    Vec::new()
                }
            })
            .collect(),
        phi_sup: 0.0,
        dphi_sup: 0.0,
    };
    let mut g = g;
    g.measure();
    g.dphi_sup.max(1e-300)
}

/// Lattice vertices of a planar reference cell, sorted.
fn cell_vertices(id: &CellId<2>) -> [[i64; 2]; 3] {
    let map = |loc: [i64; 2]| -> [i64; 2] {
        let mut g = [0i64; 2];
        for i in 0..2 {
            g[i] = id.cube[i] + if id.cube[i].rem_euclid(2) == 0 { loc[i] } else { 1 - loc[i] };
        }
        g
    };
    let second = if id.perm == 0 { [1, 0] } else { [0, 1] };
    let mut v = [map([0, 0]), map(second), map([1, 1])];
    v.sort();
    v
}

fn affine_from<const M: usize>(v: &[P2; 3], u: &[Value<M>; 3]) -> AffinePiece<2, M> {
    let e = Matrix2::from_columns(&[v[1] - v[0], v[2] - v[0]]);
    let inv = e.try_inverse().unwrap_or_else(Matrix2::zeros);
    let mut du = Grad::<M, 2>::zeros();
    du.set_column(0, &(u[1] - u[0]));
    du.set_column(1, &(u[2] - u[0]));
    AffinePiece {
        anchor: v[0],
        base: u[0],
        grad: du * inv,
    }
}

/// Parameter `t` on `p + t (q - p)` where it crosses segment `[a, b]`.
fn segment_cross(p: &P2, q: &P2, a: &P2, b: &P2) -> Option<f64> {
    let d = q - p;
    let e = b - a;
    let den = cross(&d, &e);
    if den.abs() < 1e-300 {
        return None;
    }
    let w = a - p;
    let t = cross(&w, &e) / den;
    let u = cross(&w, &d) / den;
    (t > 0.0 && t < 1.0 && (-1e-12..=1.0 + 1e-12).contains(&u)).then_some(t)
}

type PieceKey = (CellId<2>, usize);

/// The assembled approximant `u_j` for one shift `zeta`: on interface cubes
/// the projections of the one-sided layer extensions glued along the
/// polylines `H`, elsewhere the plain projection.
pub struct Approximant<'a, const M: usize> {
    f: &'a dyn SbvField<M>,
    level: Arc<LevelGeometry<M>>,
    grid: GridPlacement<2>,
    /// Whether an interface passes within reach of the cube's cells.
    touched: Vec<bool>,
    /// Per frame and layer, the interface sides imposed on the layer.
    forced: Vec<Vec<Vec<(usize, Side)>>>,
    error: Mutex<Option<Error>>,
}

/// Builds the approximant for the shift `zeta` on the level's cubes.
pub fn assemble_approximant<'a, const M: usize>(
    f: &'a dyn SbvField<M>,
    level: Arc<LevelGeometry<M>>,
    zeta: P2,
) -> Result<Approximant<'a, M>> {
    let grid = GridPlacement::new(level.eps, zeta)?;
    let a = &level.analysis;
    let mut touched = Vec::with_capacity(a.frames.len());
    let mut forced = Vec::with_capacity(a.frames.len());
    for (fi, fr) in a.frames.iter().enumerate() {
        let t = match fr.class {
            CubeClass::NoInterface => false,
            _ => {
                let b = a.cube_box(fi).inflate(1.5 * level.eps);
                let poly = box_poly(&b);
                f.interfaces().iter().any(|iface| {
                    crate::geom::boxes_overlap(iface.curve().bbox(), &b) && !iface.curve().intervals_in(&poly).is_empty()
                })
            }
        };
        touched.push(t);
        let k = fr.graphs.len();
        let layers = if fr.class == CubeClass::Interface {
            (0..=k)
                .map(|r| {
                    fr.graphs
                        .iter()
                        .enumerate()
                        .map(|(j, g)| (g.iface, if j < r { g.above } else { other(g.above) }))
                        .collect()
                })
                .collect()
        } else {
            Vec::new()
        };
        forced.push(layers);
    }
    Ok(Approximant {
        f,
        level,
        grid,
        touched,
        forced,
        error: Mutex::new(None),
    })
}

impl<'a, const M: usize> Approximant<'a, M> {
    pub fn grid(&self) -> &GridPlacement<2> {
        &self.grid
    }

    pub fn level(&self) -> &LevelGeometry<M> {
        &self.level
    }

    /// First error met while streaming, if any; clears it.
    pub fn take_error(&self) -> Result<()> {
        match self.error.lock().expect("error slot").take() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    fn record(&self, r: Result<()>) {
        if let Err(e) = r {
            let mut slot = self.error.lock().expect("error slot");
            if slot.is_none() {
                *slot = Some(e);
            }
        }
    }

    /// Lattice squares `[ilo, ihi] x [jlo, jhi]` meeting a box.
    fn square_range(&self, b: &Aabb<2>) -> (i64, i64, i64, i64) {
        let g = &self.grid;
        let lo = (b.lo - g.zeta) / g.eps;
        let hi = (b.hi - g.zeta) / g.eps;
        (
            lo[0].floor() as i64,
            hi[0].ceil() as i64 - 1,
            lo[1].floor() as i64,
            hi[1].ceil() as i64 - 1,
        )
    }

    fn cube_region(&self, fi: usize, region: &ConvexPolygon) -> Option<ConvexPolygon> {
        let b = self.level.analysis.cube_box(fi);
        if !crate::geom::boxes_overlap(&b, &region.bbox()) {
            return None;
        }
        let bp = box_poly(&b);
        let poly = region.clip(bp.vertices());
        ConvexPolygon::new(poly.to_vec())
    }

    fn plain_interpolant(&self, fi: usize, id: &CellId<2>) -> Result<CellInterpolant<2, M>> {
        let lat = cell_vertices(id);
        let pts = lat.map(|l| self.grid.vertex_point(&l));
        let u = pts.map(|x| self.f.eval(&x));
        let mut s = [[Value::<M>::zeros(); 3]; 3];
        if self.touched[fi] {
            for a in 0..3 {
                for b in a + 1..3 {
                    s[a][b] = projector::slice_edge(self.f, &pts[a], &pts[b])?;
                }
            }
        }
        let d = CellData::new(self.grid.cell_simplex(id), &u, |a, b| s[a][b])?;
        build_interpolant(&d)
    }

    fn layer_affine(
        &self,
        fi: usize,
        r: usize,
        lat: &[[i64; 2]; 3],
        pts: &[P2; 3],
        cache: &mut HashMap<([i64; 2], usize), Value<M>>,
    ) -> AffinePiece<2, M> {
        let mut u = [Value::<M>::zeros(); 3];
        for k in 0..3 {
            u[k] = *cache
                .entry((lat[k], r))
                .or_insert_with(|| self.f.eval_layer(&pts[k], &self.forced[fi][r]));
        }
        affine_from(pts, &u)
    }

    fn plain_pieces(&self, fi: usize, cpoly: &ConvexPolygon, cb: &mut dyn FnMut(&Piece<M>)) -> Result<()> {
        let bx = self.level.analysis.cube_box(fi);
        let (ilo, ihi, jlo, jhi) = self.square_range(&bx);
        let nx = (ihi - ilo + 2) as usize;
        let mut vals = Vec::with_capacity(nx * (jhi - jlo + 2) as usize);
        for j in jlo..=jhi + 1 {
            for i in ilo..=ihi + 1 {
                vals.push(self.f.eval(&self.grid.vertex_point(&[i, j])));
            }
        }
        let at = |l: &[i64; 2]| vals[(l[1] - jlo) as usize * nx + (l[0] - ilo) as usize];
        let touched = self.touched[fi];
        let mut edges: HashMap<([i64; 2], [i64; 2]), Value<M>> = HashMap::new();
        for j in jlo..=jhi {
            for i in ilo..=ihi {
                for perm in 0..2u8 {
                    let id = CellId { cube: [i, j], perm };
                    let lat = cell_vertices(&id);
                    let pts = lat.map(|l| self.grid.vertex_point(&l));
                    let u = [at(&lat[0]), at(&lat[1]), at(&lat[2])];
                    if touched {
                        let mut s = [[Value::<M>::zeros(); 3]; 3];
                        let mut any = false;
                        for a in 0..3 {
                            for b in a + 1..3 {
                                let key = (lat[a], lat[b]);
                                let v = match edges.get(&key) {
                                    Some(v) => *v,
                                    None => {
                                        let v = projector::slice_edge(self.f, &pts[a], &pts[b])?;
                                        edges.insert(key, v);
                                        v
                                    }
                                };
                                any |= v.norm() > 0.0;
                                s[a][b] = v;
                            }
                        }
                        if any {
                            let d = CellData::new(self.grid.cell_simplex(&id), &u, |a, b| s[a][b])?;
                            let ci = build_interpolant(&d)?;
                            let g = subcell_geometry(ci.simplex());
                            for (jj, q) in g.quads.iter().enumerate() {
                                let poly = cpoly.clip(q);
                                if !poly.is_empty() {
                                    cb(&Piece {
                                        poly,
                                        affine: ci.piece(jj),
                                        smooth_hint: false,
                                    });
                                }
                            }
                            continue;
                        }
                    }
                    let affine = affine_from(&pts, &u);
                    let poly: Poly = if pts.iter().all(|p| cpoly.contains(p)) {
                        pts.iter().copied().collect()
                    } else {
                        cpoly.clip(&pts)
                    };
                    if !poly.is_empty() {
                        cb(&Piece {
                            poly,
                            affine,
                            smooth_hint: !touched,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    fn frame_pieces(&self, fi: usize, cpoly: &ConvexPolygon, cb: &mut dyn FnMut(&Piece<M>)) {
        let level = &self.level;
        let fr = &level.analysis.frames[fi];
        let pls = &level.pls[fi];
        let kk = pls.len();
        let eps = self.grid.eps;
        let e1 = fr.tangent();
        let c1 = e1.dot(&fr.center);
        let bx = level.analysis.cube_box(fi);
        let (ilo, ihi, jlo, jhi) = self.square_range(&bx);
        let mut cache = HashMap::new();
        for j in jlo..=jhi {
            for i in ilo..=ihi {
                for perm in 0..2u8 {
                    let id = CellId { cube: [i, j], perm };
                    let lat = cell_vertices(&id);
                    let pts = lat.map(|l| self.grid.vertex_point(&l));
                    let q = pts.map(|x| fr.to_local(&x));
                    let regs = q.map(|qq| level.region_of(fi, &qq));
                    let (mut rlo, mut rhi) = (regs.iter().min().copied().unwrap_or(0), regs.iter().max().copied().unwrap_or(0));
                    let smin = q.iter().map(|v| v[0]).fold(f64::INFINITY, f64::min);
                    let smax = q.iter().map(|v| v[0]).fold(f64::NEG_INFINITY, f64::max);
                    let hmin = q.iter().map(|v| v[1]).fold(f64::INFINITY, f64::min);
                    let hmax = q.iter().map(|v| v[1]).fold(f64::NEG_INFINITY, f64::max);
                    let nlo = (smin / eps).ceil() as i64;
                    let nhi = (smax / eps).floor() as i64;
                    if nlo <= nhi && kk > 0 {
                        let smid = 0.5 * (smin + smax);
                        let reach = (smax - smin) + eps;
                        let klo = pls.partition_point(|pl| pl.height(smid) < hmin - reach);
                        let khi = pls.partition_point(|pl| pl.height(smid) <= hmax + reach);
                        for k in klo..khi {
                            for n in nlo..=nhi {
                                let v = pls[k].node(n);
                                let inside = (0..3).all(|e| cross(&(q[(e + 1) % 3] - q[e]), &(v - q[e])) * cross(&(q[(e + 1) % 3] - q[e]), &(q[(e + 2) % 3] - q[e])) >= 0.0);
                                if inside {
                                    rlo = rlo.min(k);
                                    rhi = rhi.max(k + 1);
                                }
                            }
                        }
                    }
                    if rlo == rhi {
                        let affine = self.layer_affine(fi, rlo, &lat, &pts, &mut cache);
                        let poly: Poly = if pts.iter().all(|p| cpoly.contains(p)) {
                            pts.iter().copied().collect()
                        } else {
                            cpoly.clip(&pts)
                        };
                        if !poly.is_empty() {
                            cb(&Piece {
                                poly,
                                affine,
                                smooth_hint: false,
                            });
                        }
                        continue;
                    }
                    let slo = (smin / eps).floor() as i64;
                    let shi = (smax / eps).ceil() as i64;
                    for r in rlo..=rhi {
                        let affine = self.layer_affine(fi, r, &lat, &pts, &mut cache);
                        for n in slo..shi {
                            let (sa, sb) = (n as f64 * eps, (n + 1) as f64 * eps);
                            let mut poly: Poly = pts.iter().copied().collect();
                            poly = clip_halfplane(&poly, &e1, sa + c1);
                            poly = clip_halfplane(&poly, &(-e1), -(sb + c1));
                            if r > 0 && !poly.is_empty() {
                                let a = fr.to_global(&pls[r - 1].node(n));
                                let b = fr.to_global(&pls[r - 1].node(n + 1));
                                let nrm = perp(&(b - a));
                                poly = clip_halfplane(&poly, &nrm, nrm.dot(&a));
                            }
                            if r < kk && !poly.is_empty() {
                                let a = fr.to_global(&pls[r].node(n));
                                let b = fr.to_global(&pls[r].node(n + 1));
                                let nrm = -perp(&(b - a));
                                poly = clip_halfplane(&poly, &nrm, nrm.dot(&a));
                            }
                            if poly.is_empty() {
                                continue;
                            }
                            let poly = cpoly.clip(&poly);
                            if !poly.is_empty() {
                                cb(&Piece {
                                    poly,
                                    affine,
                                    smooth_hint: false,
                                });
                            }
                        }
                    }
                }
            }
        }
    }

    fn grid_crossings(&self, a: &P2, b: &P2, t0: f64, t1: f64, out: &mut Vec<f64>) {
        let z = self.grid.zeta;
        let eps = self.grid.eps;
        for n in [p2(1.0, 0.0), p2(0.0, 1.0), p2(1.0, -1.0), p2(1.0, 1.0)] {
            let ga = n.dot(&(a - z)) / eps;
            let gb = n.dot(&(b - z)) / eps;
            if (gb - ga).abs() < 1e-300 {
                continue;
            }
            let (lo, hi) = (ga.min(gb), ga.max(gb));
            for m in lo.ceil() as i64..=hi.floor() as i64 {
                let t = (m as f64 - ga) / (gb - ga);
                if t > t0 && t < t1 {
                    out.push(t);
                }
            }
        }
    }

    /// Crossings of `[a, b]` with the polylines of frame `fi`.
    fn polyline_crossings(&self, fi: usize, a: &P2, b: &P2, out: &mut Vec<f64>) {
        let fr = &self.level.analysis.frames[fi];
        let (qa, qb) = (fr.to_local(a), fr.to_local(b));
        let eps = self.grid.eps;
        let lo = (qa[0].min(qb[0]) / eps).floor() as i64 - 1;
        let hi = (qa[0].max(qb[0]) / eps).ceil() as i64 + 1;
        for pl in &self.level.pls[fi] {
            for n in lo..hi {
                if let Some(t) = segment_cross(&qa, &qb, &pl.node(n), &pl.node(n + 1)) {
                    out.push(t);
                }
            }
        }
    }

    fn frame_faces(&self, fi: usize, cpoly: &ConvexPolygon, cb: &mut dyn FnMut(&JumpFace<M>)) {
        let level = &self.level;
        let fr = &level.analysis.frames[fi];
        let e1 = fr.tangent();
        let eps = self.grid.eps;
        let span = 0.5 * level.analysis.delta * (e1[0].abs() + e1[1].abs());
        let mut cache = HashMap::new();
        let mut ts = Vec::new();
        for (k, pl) in level.pls[fi].iter().enumerate() {
            for n in (-span / eps).floor() as i64..(span / eps).ceil() as i64 {
                let a = fr.to_global(&pl.node(n));
                let b = fr.to_global(&pl.node(n + 1));
                let Some((t0, t1)) = cpoly.clip_segment(&a, &b) else {
                    continue;
                };
                if t1 <= t0 {
                    continue;
                }
                ts.clear();
                ts.push(t0);
                self.grid_crossings(&a, &b, t0, t1, &mut ts);
                ts.push(t1);
                ts.sort_by(f64::total_cmp);
                let normal = perp(&(b - a)).normalize();
                for w in ts.windows(2) {
                    if w[1] - w[0] <= 1e-14 {
                        continue;
                    }
                    let pa = a + (b - a) * w[0];
                    let pb = a + (b - a) * w[1];
                    let id = self.grid.locate(&((pa + pb) * 0.5));
                    let lat = cell_vertices(&id);
                    let pts = lat.map(|l| self.grid.vertex_point(&l));
                    let up = self.layer_affine(fi, k + 1, &lat, &pts, &mut cache);
                    let dn = self.layer_affine(fi, k, &lat, &pts, &mut cache);
                    let face = JumpFace {
                        a: pa,
                        b: pb,
                        jump_a: up.eval(&pa) - dn.eval(&pa),
                        jump_b: up.eval(&pb) - dn.eval(&pb),
                        normal,
                    };
                    if !face.is_zero() {
                        cb(&face);
                    }
                }
            }
        }
    }

    fn piece_at(
        &self,
        fi: usize,
        x: &P2,
        plain: &mut HashMap<CellId<2>, CellInterpolant<2, M>>,
        layer: &mut HashMap<([i64; 2], usize), Value<M>>,
    ) -> Result<(PieceKey, AffinePiece<2, M>)> {
        let id = self.grid.locate(x);
        let fr = &self.level.analysis.frames[fi];
        if fr.class == CubeClass::Interface {
            let r = self.level.region_of(fi, &fr.to_local(x));
            let lat = cell_vertices(&id);
            let pts = lat.map(|l| self.grid.vertex_point(&l));
            return Ok(((id, r), self.layer_affine(fi, r, &lat, &pts, layer)));
        }
        if let std::collections::hash_map::Entry::Vacant(e) = plain.entry(id) {
            e.insert(self.plain_interpolant(fi, &id)?);
        }
        let ci = &plain[&id];
        let b = ci.simplex().barycentric(x)?;
        let j = subcell_index(&b);
        Ok(((id, j), ci.piece(j)))
    }

    /// Faces on the sides of interface cube `fi` where the neighbour's
    /// function differs.
    fn mismatch_faces(&self, fi: usize, region: &ConvexPolygon, cb: &mut dyn FnMut(&JumpFace<M>)) -> Result<()> {
        let a = &self.level.analysis;
        let fr = &a.frames[fi];
        let b = a.cube_box(fi);
        let [i, j] = fr.index;
        let (lo, hi) = (b.lo, b.hi);
        let sides = [
            ([i, j - 1], lo, p2(hi[0], lo[1]), p2(0.0, 1.0)),
            ([i + 1, j], p2(hi[0], lo[1]), hi, p2(-1.0, 0.0)),
            ([i, j + 1], hi, p2(lo[0], hi[1]), p2(0.0, -1.0)),
            ([i - 1, j], p2(lo[0], hi[1]), lo, p2(1.0, 0.0)),
        ];
        let mut plain = HashMap::new();
        let mut layer_a = HashMap::new();
        let mut layer_b = HashMap::new();
        for (nb, p, q, into_a) in sides {
            let Some(fj) = a.frame_by_index(&nb) else {
                continue;
            };
            let other_is_frame = a.frames[fj].class == CubeClass::Interface;
            if other_is_frame && nb < fr.index {
                continue;
            }
            let Some((t0, t1)) = region.clip_segment(&p, &q) else {
                continue;
            };
            if t1 <= t0 {
                continue;
            }
            let mut ts = vec![t0, t1];
            self.grid_crossings(&p, &q, t0, t1, &mut ts);
            self.polyline_crossings(fi, &p, &q, &mut ts);
            if other_is_frame {
                self.polyline_crossings(fj, &p, &q, &mut ts);
            }
            ts.retain(|t| *t >= t0 && *t <= t1);
            ts.sort_by(f64::total_cmp);
            ts.dedup_by(|x, y| (*x - *y).abs() < 1e-15);
            // Subcell faces of plain cells crossing the side.
            let mut extra = Vec::new();
            if !other_is_frame {
                for w in ts.windows(2) {
                    let m = p + (q - p) * (0.5 * (w[0] + w[1]));
                    let id = self.grid.locate(&m);
                    if let std::collections::hash_map::Entry::Vacant(e) = plain.entry(id) {
                        e.insert(self.plain_interpolant(fj, &id)?);
                    }
                    let ci = &plain[&id];
                    if ci.is_single_affine() {
                        continue;
                    }
                    for fj_ in ci.internal_faces() {
                        if let Some(t) = segment_cross(&p, &q, &fj_.a, &fj_.b) {
                            if t > w[0] && t < w[1] {
                                extra.push(t);
                            }
                        }
                    }
                }
            }
            ts.extend(extra);
            ts.sort_by(f64::total_cmp);
            for w in ts.windows(2) {
                if w[1] - w[0] <= 1e-14 {
                    continue;
                }
                let m = p + (q - p) * (0.5 * (w[0] + w[1]));
                let (_, va) = self.piece_at(fi, &m, &mut plain, &mut layer_a)?;
                let (_, vb) = self.piece_at(fj, &m, &mut plain, &mut layer_b)?;
                let pa = p + (q - p) * w[0];
                let pb = p + (q - p) * w[1];
                let face = JumpFace {
                    a: pa,
                    b: pb,
                    jump_a: va.eval(&pa) - vb.eval(&pa),
                    jump_b: va.eval(&pb) - vb.eval(&pb),
                    normal: into_a,
                };
                if face.jump_a.norm() > 1e-10 || face.jump_b.norm() > 1e-10 {
                    cb(&face);
                }
            }
        }
        Ok(())
    }

    fn plain_faces(&self, fi: usize, cpoly: &ConvexPolygon, cb: &mut dyn FnMut(&JumpFace<M>)) -> Result<()> {
        if !self.touched[fi] {
            return Ok(());
        }
        let bx = self.level.analysis.cube_box(fi);
        let (ilo, ihi, jlo, jhi) = self.square_range(&bx);
        for j in jlo..=jhi {
            for i in ilo..=ihi {
                for perm in 0..2u8 {
                    let id = CellId { cube: [i, j], perm };
                    let ci = self.plain_interpolant(fi, &id)?;
                    if ci.is_single_affine() {
                        continue;
                    }
                    for fj in ci.internal_faces() {
                        let face = JumpFace {
                            a: fj.a,
                            b: fj.b,
                            jump_a: fj.jump_a,
                            jump_b: fj.jump_b,
                            normal: fj.normal,
                        };
                        if face.is_zero() {
                            continue;
                        }
                        if let Some(cf) = face.clip(cpoly) {
                            cb(&cf);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl<const M: usize> PiecewiseAffine<M> for Approximant<'_, M> {
    fn for_each_piece(&self, region: &ConvexPolygon, f: &mut dyn FnMut(&Piece<M>)) {
        for fi in 0..self.level.analysis.frames.len() {
            let Some(cpoly) = self.cube_region(fi, region) else {
                continue;
            };
            if self.level.analysis.frames[fi].class == CubeClass::Interface {
                self.frame_pieces(fi, &cpoly, f);
            } else {
                let r = self.plain_pieces(fi, &cpoly, f);
                self.record(r);
            }
        }
    }

    fn for_each_jump_face(&self, region: &ConvexPolygon, f: &mut dyn FnMut(&JumpFace<M>)) {
        for fi in 0..self.level.analysis.frames.len() {
            let Some(cpoly) = self.cube_region(fi, region) else {
                continue;
            };
            if self.level.analysis.frames[fi].class == CubeClass::Interface {
                self.frame_faces(fi, &cpoly, f);
                let r = self.mismatch_faces(fi, region, f);
                self.record(r);
            } else {
                let r = self.plain_faces(fi, &cpoly, f);
                self.record(r);
            }
        }
    }

    fn eval(&self, x: &P2) -> Result<Value<M>> {
        let fi = self
            .level
            .analysis
            .frame_index(x)
            .ok_or(Error::OutsideRegion([x[0], x[1]]))?;
        let (_, piece) = self.piece_at(fi, x, &mut HashMap::new(), &mut HashMap::new())?;
        Ok(piece.eval(x))
    }
}

fn tri_pair<const M: usize>(f: &dyn SbvField<M>, t: [P2; 3], depth: usize, g: &mut dyn FnMut(&P2) -> [f64; 2]) -> [f64; 2] {
    let meets = depth > 0
        && ConvexPolygon::new(t.to_vec())
            .map(|p| meets_interface(f, &p))
            .unwrap_or(false);
    if !meets {
        let mut out = [0.0; 2];
        let area = 0.5 * cross(&(t[1] - t[0]), &(t[2] - t[0])).abs();
        for (l, w) in TRI_RULE_3 {
            let x = t[0] * l[0] + t[1] * l[1] + t[2] * l[2];
            let v = g(&x);
            out[0] += w * v[0] * area;
            out[1] += w * v[1] * area;
        }
        return out;
    }
    let m01 = (t[0] + t[1]) * 0.5;
    let m12 = (t[1] + t[2]) * 0.5;
    let m02 = (t[0] + t[2]) * 0.5;
    let mut out = [0.0; 2];
    for c in [[t[0], m01, m02], [m01, t[1], m12], [m02, m12, t[2]], [m01, m12, m02]] {
        let v = tri_pair(f, c, depth - 1, g);
        out[0] += v[0];
        out[1] += v[1];
    }
    out
}

/// `int_piece (|v - u|, |grad v - grad u|^p)`.
fn piece_distances<const M: usize>(f: &dyn SbvField<M>, pc: &Piece<M>, p: f64) -> [f64; 2] {
    let mut g = |x: &P2| {
        [
            (pc.affine.eval(x) - f.eval(x)).norm(),
            (pc.affine.grad - f.grad(x)).norm().powf(p),
        ]
    };
    let poly = &pc.poly;
    let mut out = [0.0; 2];
    for k in 1..poly.len().saturating_sub(1) {
        let t = [poly[0], poly[k], poly[k + 1]];
        let v = if pc.smooth_hint {
            let a = integrate_triangle(&t[0], &t[1], &t[2], &TRI_RULE_3, &mut |x| g(x)[0]);
            let b = integrate_triangle(&t[0], &t[1], &t[2], &TRI_RULE_3, &mut |x| g(x)[1]);
            [a, b]
        } else {
            tri_pair(f, t, PIECE_DEPTH, &mut g)
        };
        out[0] += v[0];
        out[1] += v[1];
    }
    out
}

/// All metrics of one approximant against the field on `omega`.
pub fn approximant_metrics<const M: usize>(
    f: &dyn SbvField<M>,
    approx: &Approximant<'_, M>,
    omega: &ConvexPolygon,
    cfg: &PipelineConfig,
    field: &FieldMetrics,
) -> Result<MetricsRecord> {
    let mut m = MetricsRecord::default();
    let mut strict = StrictMetrics::default();
    approx.for_each_piece(omega, &mut |pc| {
        let a = polygon_area(&pc.poly).abs();
        let r = pc.affine.grad.norm();
        m.bulk_approx += cfg.psi.eval(&pc.affine.grad) * a;
        strict.grad_l1 += r * a;
        strict.area += (1.0 + r * r).sqrt() * a;
        let d = piece_distances(f, pc, cfg.p);
        m.l1 += d[0];
        m.lp_grad += d[1];
    });
    approx.take_error()?;
    let faces = projector::jump_faces(approx, omega);
    approx.take_error()?;
    m.surface_approx = energy::surface_energy_faces(&faces, &cfg.g);
    m.g0_approx = energy::surface_energy_faces(&faces, &SurfaceDensity::Cohesive(cfg.g0.clone()));
    m.jump_length_approx = faces.iter().map(|fc| fc.length()).sum();
    strict.jump_l1 = energy::surface_energy_faces(&faces, &SurfaceDensity::Cohesive(Modulus::Power { q: 1.0 }));
    let level = approx.level();
    let disc = energy::jump_discrepancy(f, &faces, level, &cfg.g0, omega)?;
    m.d1 = disc.d1;
    m.d2 = disc.d2;
    m.hn1_sym_diff = disc.hn1;
    m.phi_sup = level.phi_sup;
    m.dphi_sup = level.dphi_sup;
    m.bulk_field = field.bulk;
    m.surface_field = field.surface;
    m.g0_field = field.g0;
    m.jump_length_field = field.jump_length;
    m.strict_approx = strict;
    m.strict_field = field.strict;
    Ok(m)
}

/// Index of the candidate with the least score; NaN scores are skipped,
/// ties go to the first.
pub fn select_shift(candidates: &[(P2, MetricsRecord)], with_hn1: bool) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (_, m)) in candidates.iter().enumerate() {
        let s = m.score(with_hn1);
        if s.is_nan() {
            continue;
        }
        match best {
            Some((_, b)) if s >= b => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|b| b.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelParams {
    pub theta: f64,
    pub delta: f64,
    pub delta_prime: f64,
    pub eps: f64,
    pub zeta: P2,
    pub gamma: P2,
    /// Largest `|beta|` over the frames.
    pub beta: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Candidate {
    pub zeta: P2,
    pub metrics: Option<MetricsRecord>,
    pub error: Option<String>,
    /// Shifts re-drawn because of degenerate slices.
    pub redraws: usize,
}

/// One ladder level: the selected approximant with its deformation.
#[derive(Clone, Debug)]
pub struct ApproximationResult<const M: usize> {
    pub params: LevelParams,
    pub metrics: MetricsRecord,
    pub candidates: Vec<Candidate>,
    pub selected: usize,
    pub level: Arc<LevelGeometry<M>>,
}

impl<const M: usize> ApproximationResult<M> {
    /// The selected approximant `u_j`.
    pub fn approximant<'a>(&self, f: &'a dyn SbvField<M>) -> Result<Approximant<'a, M>> {
        assemble_approximant(f, self.level.clone(), self.params.zeta)
    }

    /// The deformation `Phi_j`.
    pub fn deformation(&self) -> &LevelGeometry<M> {
        &self.level
    }
}

/// Level schedule: decreasing `theta`, or grid scales with
/// `theta = min(1/2, 32 eps)`.
#[derive(Clone, Debug, PartialEq)]
pub enum Ladder {
    Theta(Vec<f64>),
    Eps(Vec<f64>),
}

impl Ladder {
    fn levels(&self) -> Vec<(f64, Option<f64>)> {
        match self {
            Ladder::Theta(v) => v.iter().map(|t| (*t, None)).collect(),
            Ladder::Eps(v) => v.iter().map(|e| ((32.0 * e).min(0.5), Some(*e))).collect(),
        }
    }
}

fn level_seed(seed: u64, level: usize) -> u64 {
    seed ^ (level as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs one level: scale analysis, deformation, `n_zeta` candidate shifts
/// and selection.
pub fn run_level<const M: usize>(
    f: &dyn SbvField<M>,
    omega: &Aabb<2>,
    theta: f64,
    fixed_eps: Option<f64>,
    cfg: &PipelineConfig,
    field: &FieldMetrics,
    seed: u64,
) -> Result<ApproximationResult<M>> {
    if cfg.n_zeta == 0 {
        return Err(Error::InvalidParameter("need at least one shift".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let analysis = analyze_scale(f, omega, theta, cfg, &mut rng)?;
    let level = Arc::new(prepare_level(f, analysis, cfg, fixed_eps, &mut rng)?);
    let opoly = box_poly(omega);
    let mut candidates = Vec::with_capacity(cfg.n_zeta);
    for _ in 0..cfg.n_zeta {
        let mut cand = Candidate {
            zeta: p2(0.0, 0.0),
            metrics: None,
            error: None,
            redraws: 0,
        };
        for attempt in 0..MAX_JITTER {
            cand.zeta = sample_shift(&mut rng, level.eps);
            cand.redraws = attempt;
            let r = assemble_approximant(f, level.clone(), cand.zeta)
                .and_then(|a| approximant_metrics(f, &a, &opoly, cfg, field));
            match r {
                Ok(m) => {
                    cand.metrics = Some(m);
                    cand.error = None;
                    break;
                }
                Err(e) => {
                    let retry = e.is_degenerate();
                    cand.error = Some(e.to_string());
                    if !retry {
                        break;
                    }
                }
            }
        }
        candidates.push(cand);
    }
    let table: Vec<(P2, MetricsRecord)> = candidates
        .iter()
        .map(|c| {
            let m = c.metrics.clone().unwrap_or(MetricsRecord {
                l1: f64::NAN,
                ..Default::default()
            });
            (c.zeta, m)
        })
        .collect();
    let selected = select_shift(&table, cfg.finite_jump).ok_or_else(|| {
        Error::Numeric(
            candidates
                .iter()
                .find_map(|c| c.error.clone())
                .unwrap_or_else(|| "all candidates failed".into()),
        )
    })?;
    let beta = level
        .pls
        .iter()
        .flatten()
        .fold(0.0f64, |a, pl| a.max(pl.beta.abs()));
    Ok(ApproximationResult {
        params: LevelParams {
            theta,
            delta: level.analysis.delta,
            delta_prime: level.delta_prime,
            eps: level.eps,
            zeta: table[selected].0,
            gamma: level.analysis.gamma,
            beta,
            seed,
        },
        metrics: table[selected].1.clone(),
        candidates,
        selected,
        level,
    })
}

/// Runs every level of the ladder; a failing level does not stop later
/// ones.
pub fn run_convergence<const M: usize>(
    f: &dyn SbvField<M>,
    omega: &Aabb<2>,
    ladder: &Ladder,
    cfg: &PipelineConfig,
) -> Vec<Result<ApproximationResult<M>>> {
    let field = energy::field_metrics(f, &cfg.psi, &cfg.g, &cfg.g0, &box_poly(omega));
    ladder
        .levels()
        .into_iter()
        .enumerate()
        .map(|(i, (theta, eps))| run_level(f, omega, theta, eps, cfg, &field, level_seed(cfg.seed, i)))
        .collect()
}
