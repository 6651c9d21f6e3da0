//! The projection onto discontinuous piecewise-affine functions on a
//! shifted Freudenthal grid: vertex values are sampled, edge jumps are
//! sliced, and each simplex gets its subcell interpolant.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::Rng;

use crate::energy::{self, BulkDensity};
use crate::field::{self, Curve, Interface, InterfaceRef, Modulus, SbvField, Side};
use crate::geom::{boxes_overlap, perp, ConvexPolygon, Poly, P2};
use crate::interp::{build_interpolant, AffinePiece, CellData, CellInterpolant, Grad, Value};
use crate::mesh::{p2, subcell_geometry, Aabb, CellId, GridPlacement};
use crate::{Error, Result};

/// Re-draws of the shift before a degenerate slice is reported.
pub const MAX_JITTER: usize = 8;

/// A polygon on which an approximant is affine.
#[derive(Clone, Debug)]
pub struct Piece<const M: usize> {
    pub poly: Poly,
    pub affine: AffinePiece<2, M>,
    /// Set when the approximated field is known to be smooth on the piece.
    pub smooth_hint: bool,
}

/// A straight jump face. The jump is the value on the side `normal` points
/// to minus the value on the other side, affine along the face.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JumpFace<const M: usize> {
    pub a: P2,
    pub b: P2,
    pub jump_a: Value<M>,
    pub jump_b: Value<M>,
    pub normal: P2,
}

impl<const M: usize> JumpFace<M> {
    pub fn point(&self, t: f64) -> P2 {
        self.a + (self.b - self.a) * t
    }

    pub fn jump_at(&self, t: f64) -> Value<M> {
        self.jump_a * (1.0 - t) + self.jump_b * t
    }

    pub fn length(&self) -> f64 {
        (self.b - self.a).norm()
    }

    pub fn sub(&self, t0: f64, t1: f64) -> Self {
        JumpFace {
            a: self.point(t0),
            b: self.point(t1),
            jump_a: self.jump_at(t0),
            jump_b: self.jump_at(t1),
            normal: self.normal,
        }
    }

    pub fn clip(&self, region: &ConvexPolygon) -> Option<Self> {
        let (t0, t1) = region.clip_segment(&self.a, &self.b)?;
        (t1 > t0).then(|| self.sub(t0, t1))
    }

    pub fn is_zero(&self) -> bool {
        self.jump_a.norm() <= 1e-12 && self.jump_b.norm() <= 1e-12
    }
}

/// Piecewise-affine functions exposed as streams of pieces and jump faces.
pub trait PiecewiseAffine<const M: usize>: Sync {
    /// Pieces clipped to `region`.
    fn for_each_piece(&self, region: &ConvexPolygon, f: &mut dyn FnMut(&Piece<M>));
    /// Faces with nonzero jump, clipped to `region`.
    fn for_each_jump_face(&self, region: &ConvexPolygon, f: &mut dyn FnMut(&JumpFace<M>));
    fn eval(&self, x: &P2) -> Result<Value<M>>;
}

/// Collects the jump faces inside `region`.
pub fn jump_faces<const M: usize>(p: &dyn PiecewiseAffine<M>, region: &ConvexPolygon) -> Vec<JumpFace<M>> {
    let mut out = Vec::new();
    p.for_each_jump_face(region, &mut |f| out.push(*f));
    out
}

/// Discontinuous piecewise-affine function on the cells of a grid that
/// meet a box.
#[derive(Clone, Debug)]
pub struct PwAffineFunction<const M: usize> {
    grid: GridPlacement<2>,
    region: Aabb<2>,
    cells: BTreeMap<CellId<2>, CellInterpolant<2, M>>,
}

impl<const M: usize> PwAffineFunction<M> {
    /// Wraps explicit cell data (the ids must belong to `grid`).
    pub fn from_cells(grid: GridPlacement<2>, region: Aabb<2>, cells: Vec<(CellId<2>, CellData<2, M>)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (id, d) in cells {
            map.insert(id, build_interpolant(&d)?);
        }
        Ok(PwAffineFunction { grid, region, cells: map })
    }

    pub fn grid(&self) -> &GridPlacement<2> {
        &self.grid
    }

    pub fn region(&self) -> &Aabb<2> {
        &self.region
    }

    pub fn cells(&self) -> impl Iterator<Item = (&CellId<2>, &CellInterpolant<2, M>)> {
        self.cells.iter()
    }

    pub fn cell(&self, id: &CellId<2>) -> Option<&CellInterpolant<2, M>> {
        self.cells.get(id)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    fn located(&self, x: &P2) -> Result<&CellInterpolant<2, M>> {
        self.cells
            .get(&self.grid.locate(x))
            .ok_or(Error::OutsideRegion([x[0], x[1]]))
    }

    pub fn eval(&self, x: &P2) -> Result<Value<M>> {
        self.located(x)?.eval(x)
    }

    pub fn grad(&self, x: &P2) -> Result<Grad<M, 2>> {
        let c = self.located(x)?;
        let b = c.simplex().barycentric(x)?;
        Ok(*c.grad(crate::mesh::subcell_index(&b)))
    }

    /// `alpha * self + other` on a common cell set.
    pub fn combine(&self, alpha: f64, other: &Self) -> Result<Self> {
        let mut cells = Vec::with_capacity(self.cells.len());
        for (id, c) in &self.cells {
            let o = other
                .cells
                .get(id)
                .ok_or_else(|| Error::InvalidParameter("cell sets differ".into()))?;
            cells.push((*id, c.data().combine(alpha, o.data())));
        }
        Self::from_cells(self.grid, self.region, cells)
    }
}

impl<const M: usize> PiecewiseAffine<M> for PwAffineFunction<M> {
    fn for_each_piece(&self, region: &ConvexPolygon, f: &mut dyn FnMut(&Piece<M>)) {
        let rb = region.bbox();
        for c in self.cells.values() {
            let v = c.simplex().vertices();
            if !boxes_overlap(&crate::geom::bbox_of(v), &rb) {
                continue;
            }
            let g = subcell_geometry(c.simplex());
            for (j, q) in g.quads.iter().enumerate() {
                let poly = region.clip(q);
                if !poly.is_empty() {
                    f(&Piece {
                        poly,
                        affine: c.piece(j),
                        smooth_hint: false,
                    });
                }
            }
        }
    }

    fn for_each_jump_face(&self, region: &ConvexPolygon, f: &mut dyn FnMut(&JumpFace<M>)) {
        let rb = region.bbox();
        for c in self.cells.values() {
            if !c.data().has_jumps() || !boxes_overlap(&crate::geom::bbox_of(c.simplex().vertices()), &rb) {
                continue;
            }
            for fj in c.internal_faces() {
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
                if let Some(cf) = face.clip(region) {
                    f(&cf);
                }
            }
        }
    }

    fn eval(&self, x: &P2) -> Result<Value<M>> {
        PwAffineFunction::eval(self, x)
    }
}

struct SliceCache<const M: usize> {
    verts: HashMap<[i64; 2], Value<M>>,
    edges: HashMap<([i64; 2], [i64; 2]), Value<M>>,
}

/// Vertex values and edge jumps of `f` on one cell. Edges are sliced from
/// the lexicographically lower vertex, so neighbours agree exactly.
fn cell_data<const M: usize, F: SbvField<M> + ?Sized>(
    f: &F,
    grid: &GridPlacement<2>,
    id: &CellId<2>,
    cache: &mut SliceCache<M>,
) -> Result<CellData<2, M>> {
    let lat = grid.cell_lattice(id);
    let pts: Vec<P2> = lat.iter().map(|l| grid.vertex_point(l)).collect();
    let mut u = Vec::with_capacity(3);
    for (l, x) in lat.iter().zip(&pts) {
        let v = match cache.verts.get(l) {
            Some(v) => *v,
            None => {
                let v = f.eval(x);
                cache.verts.insert(*l, v);
                v
            }
        };
        u.push(v);
    }
    let mut s = [[Value::<M>::zeros(); 3]; 3];
    for i in 0..3 {
        for j in i + 1..3 {
            let key = (lat[i], lat[j]);
            s[i][j] = match cache.edges.get(&key) {
                Some(v) => *v,
                None => {
                    let v = slice_edge(f, &pts[i], &pts[j])?;
                    cache.edges.insert(key, v);
                    v
                }
            };
        }
    }
    CellData::new(grid.cell_simplex(id), &u, |i, j| s[i][j])
}

/// Edge jump; a vertex lying on an interface counts as degenerate.
pub fn slice_edge<const M: usize, F: SbvField<M> + ?Sized>(f: &F, a: &P2, b: &P2) -> Result<Value<M>> {
    let s = field::slice_jump(f, a, b)?;
    // slice_grad rejects endpoints on interfaces.
    field::slice_grad(f, a, b)?;
    Ok(s)
}

/// `Pi_{eps, zeta} f` on the cells meeting `region`.
pub fn project<const M: usize, F: SbvField<M> + ?Sized>(f: &F, eps: f64, zeta: P2, region: &Aabb<2>) -> Result<PwAffineFunction<M>> {
    let grid = GridPlacement::new(eps, zeta)?;
    let ids = grid.enumerate(region);
    let mut cache = SliceCache {
        verts: HashMap::new(),
        edges: HashMap::new(),
    };
    let mut cells = BTreeMap::new();
    for id in ids {
        let d = cell_data(f, &grid, &id, &mut cache)?;
        cells.insert(id, build_interpolant(&d)?);
    }
    Ok(PwAffineFunction {
        grid,
        region: *region,
        cells,
    })
}

/// Uniform sample of the open disc `B_eps`.
pub fn sample_shift<R: Rng + ?Sized>(rng: &mut R, eps: f64) -> P2 {
    loop {
        let x = p2(rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0);
        if x.norm_squared() < 1.0 {
            return x * eps;
        }
    }
}

/// Projects with a random shift, re-drawing it on degenerate slices.
pub fn project_jittered<const M: usize, F: SbvField<M> + ?Sized, R: Rng + ?Sized>(
    f: &F,
    eps: f64,
    region: &Aabb<2>,
    rng: &mut R,
) -> Result<(PwAffineFunction<M>, P2)> {
    let mut last = None;
    for _ in 0..MAX_JITTER {
        let zeta = sample_shift(rng, eps);
        match project(f, eps, zeta, region) {
            Ok(p) => return Ok((p, zeta)),
            Err(e) if e.is_degenerate() => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// One jump face of a piecewise-affine function seen as an interface.
struct FaceInterface<const M: usize> {
    curve: Curve,
    a: P2,
    normal: P2,
    plus: AffinePiece<2, M>,
    minus: AffinePiece<2, M>,
}

impl<const M: usize> Interface<M> for FaceInterface<M> {
    fn curve(&self) -> &Curve {
        &self.curve
    }
    fn eval_plus(&self, x: &P2) -> Value<M> {
        self.plus.eval(x)
    }
    fn eval_minus(&self, x: &P2) -> Value<M> {
        self.minus.eval(x)
    }
    fn grad_plus(&self, _x: &P2) -> Grad<M, 2> {
        self.plus.grad
    }
    fn grad_minus(&self, _x: &P2) -> Grad<M, 2> {
        self.minus.grad
    }
    fn side(&self, x: &P2) -> Side {
        if (x - self.a).dot(&self.normal) > 0.0 {
            Side::Plus
        } else {
            Side::Minus
        }
    }
    fn normal(&self, _tau: f64) -> P2 {
        self.normal
    }
}

/// A piecewise-affine function viewed as a field whose interfaces are its
/// jump faces.
pub struct PwAsField<'a, const M: usize> {
    p: &'a PwAffineFunction<M>,
    ifs: Vec<InterfaceRef<M>>,
}

impl<'a, const M: usize> PwAsField<'a, M> {
    pub fn new(p: &'a PwAffineFunction<M>) -> Self {
        let mut ifs: Vec<InterfaceRef<M>> = Vec::new();
        for c in p.cells.values() {
            if !c.data().has_jumps() {
                continue;
            }
            for fj in c.internal_faces() {
                if fj.jump_a == Value::<M>::zeros() && fj.jump_b == Value::<M>::zeros() {
                    continue;
                }
                // Orient the segment so its left normal is the face normal.
                let (a, b) = if perp(&(fj.b - fj.a)).dot(&fj.normal) > 0.0 {
                    (fj.a, fj.b)
                } else {
                    (fj.b, fj.a)
                };
                ifs.push(Arc::new(FaceInterface {
                    curve: Curve::segment(a, b),
                    a,
                    normal: fj.normal,
                    plus: c.piece(fj.i),
                    minus: c.piece(fj.j),
                }));
            }
        }
        PwAsField { p, ifs }
    }
}

impl<const M: usize> SbvField<M> for PwAsField<'_, M> {
    fn eval(&self, x: &P2) -> Value<M> {
        self.p.eval(x).unwrap_or_else(|_| Value::<M>::repeat(f64::NAN))
    }
    fn grad(&self, x: &P2) -> Grad<M, 2> {
        self.p.grad(x).unwrap_or_else(|_| Grad::<M, 2>::repeat(f64::NAN))
    }
    fn interfaces(&self) -> &[InterfaceRef<M>] {
        &self.ifs
    }
    fn domain(&self) -> Option<Aabb<2>> {
        Some(self.p.region)
    }
}

/// Projects `p` again on its own grid; a projection returns `p` unchanged.
pub fn idempotence_check<const M: usize>(p: &PwAffineFunction<M>) -> Result<PwAffineFunction<M>> {
    let f = PwAsField::new(p);
    project(&f, p.grid.eps, p.grid.zeta, &p.region)
}

/// Largest difference of vertex values and edge jumps over common cells;
/// infinite when the cell sets differ.
pub fn cell_data_distance<const M: usize>(p: &PwAffineFunction<M>, q: &PwAffineFunction<M>) -> f64 {
    if p.cells.len() != q.cells.len() {
        return f64::INFINITY;
    }
    let mut d: f64 = 0.0;
    for (id, c) in &p.cells {
        let Some(o) = q.cells.get(id) else {
            return f64::INFINITY;
        };
        for i in 0..3 {
            d = d.max((c.data().u(i) - o.data().u(i)).amax());
            for j in 0..3 {
                d = d.max((c.data().s(i, j) - o.data().s(i, j)).amax());
            }
        }
    }
    d
}

/// Empirical shift averages of the projector against the right-hand
/// sides on the inflated region.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundsReport {
    pub eps: f64,
    pub samples: usize,
    /// `int |grad Pi u - eta|^p` and `int_{(omega)_{c eps}} |grad u - eta|^p`.
    pub bulk: (f64, f64),
    /// `int g0(|[Pi u]|)` and `int_{J_u} g0(|[u]|)` on the inflated region.
    pub surface: (f64, f64),
    /// `H^1(J_{Pi u})` and `H^1(J_u)` on the inflated region.
    pub length: (f64, f64),
    /// `||Pi u - u||_{L^1} / eps` and `|Du|` on the inflated region.
    pub l1: (f64, f64),
}

fn ratio(x: (f64, f64)) -> f64 {
    if x.0 <= 1e-14 {
        0.0
    } else if x.1 <= 0.0 {
        f64::INFINITY
    } else {
        x.0 / x.1
    }
}

impl BoundsReport {
    pub fn bulk_ratio(&self) -> f64 {
        ratio(self.bulk)
    }
    pub fn surface_ratio(&self) -> f64 {
        ratio(self.surface)
    }
    pub fn length_ratio(&self) -> f64 {
        ratio(self.length)
    }
    pub fn l1_ratio(&self) -> f64 {
        ratio(self.l1)
    }
}

/// Parameters of [`averaged_bounds_report`].
#[derive(Clone, Debug)]
pub struct BoundsConfig {
    pub eps: f64,
    pub samples: usize,
    pub p: f64,
    pub eta: Grad<1, 2>,
    pub g0: Modulus,
    /// Inflation factor; at least `1 + sqrt(2)`.
    pub c_star: f64,
}

impl BoundsConfig {
    pub fn new(eps: f64, samples: usize, p: f64, g0: Modulus) -> Self {
        BoundsConfig {
            eps,
            samples,
            p,
            eta: Grad::<1, 2>::zeros(),
            g0,
            c_star: 1.0 + 2f64.sqrt(),
        }
    }
}

/// Averages the projector's energies over `samples` random shifts on
/// `omega`, next to the field's values on `omega` inflated by `c* eps`.
pub fn averaged_bounds_report<F: SbvField<1> + ?Sized, R: Rng + ?Sized>(
    f: &F,
    omega: &ConvexPolygon,
    cfg: &BoundsConfig,
    rng: &mut R,
) -> Result<BoundsReport> {
    if cfg.samples < 16 {
        return Err(Error::InvalidParameter("need at least 16 shift samples".into()));
    }
    if cfg.c_star < 1.0 + 2f64.sqrt() - 1e-12 {
        return Err(Error::InvalidParameter("inflation factor below 1 + sqrt 2".into()));
    }
    let psi = BulkDensity::Power { p: cfg.p };
    let big = omega.offset(cfg.c_star * cfg.eps, 8);
    let bx = omega.bbox();
    let mut acc = [0.0f64; 4];
    for _ in 0..cfg.samples {
        let (pi, _) = project_jittered(f, cfg.eps, &bx, rng)?;
        acc[0] += energy::bulk_energy_pw(&pi, &psi, &cfg.eta, omega);
        acc[1] += energy::surface_energy_pw(&pi, &energy::SurfaceDensity::Cohesive(cfg.g0.clone()), omega);
        acc[2] += energy::jump_length_pw(&pi, omega);
        acc[3] += energy::l1_distance(f, &pi, omega) / cfg.eps;
    }
    let n = cfg.samples as f64;
    let tv = energy::strict_metrics_field(f, &big);
    Ok(BoundsReport {
        eps: cfg.eps,
        samples: cfg.samples,
        bulk: (acc[0] / n, energy::bulk_energy_field(f, &psi, &cfg.eta, &big)),
        surface: (acc[1] / n, field::g0_jump_energy(f, &cfg.g0, &big)),
        length: (acc[2] / n, energy::jump_length_field(f, &big)),
        l1: (acc[3] / n, tv.grad_l1 + tv.jump_l1),
    })
}
