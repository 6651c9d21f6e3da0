//! Reflected Freudenthal triangulation of R^n, its placements, barycentric
//! coordinates and the barycentric subcells of a simplex.
//!
//! Dimensions up to 3 are supported; the subcell polytopes are explicit in
//! n = 2 and handled through membership predicates otherwise.

use arrayvec::ArrayVec;
use nalgebra::{SMatrix, SVector, Vector2, Vector3};
use rand::Rng;

use crate::error::{Error, Result};

pub type Point<const N: usize> = SVector<f64, N>;

/// Residual allowed after a barycentric solve.
pub const BARY_RESIDUAL: f64 = 1e-12;
/// Slack on barycentric coordinates for containment and tie detection.
pub const BARY_TOL: f64 = 1e-12;

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Simplex with `N + 1` ordered vertices.
#[derive(Clone, Debug, PartialEq)]
pub struct Simplex<const N: usize> {
    verts: ArrayVec<Point<N>, 4>,
}

impl<const N: usize> Simplex<N> {
    pub fn new<I: IntoIterator<Item = Point<N>>>(verts: I) -> Result<Self> {
        assert!((1..=3).contains(&N), "dimension {N} not supported");
        let verts: ArrayVec<Point<N>, 4> = verts.into_iter().collect();
        if verts.len() != N + 1 {
            return Err(Error::InvalidParameter(format!(
                "expected {} vertices, got {}",
                N + 1,
                verts.len()
            )));
        }
        let s = Simplex { verts };
        let vol = s.volume();
        let diam = s.diam();
        if !(vol > 1e-14 * diam.powi(N as i32)) {
            return Err(Error::DegenerateSimplex(vol));
        }
        Ok(s)
    }

    pub fn vertices(&self) -> &[Point<N>] {
        &self.verts
    }

    pub fn vertex(&self, i: usize) -> &Point<N> {
        &self.verts[i]
    }

    /// Matrix whose columns are `A_i - A_j` for `i != j`, in increasing `i`.
    pub fn edge_matrix(&self, j: usize) -> SMatrix<f64, N, N> {
        let mut m = SMatrix::<f64, N, N>::zeros();
        let mut c = 0;
        for (i, a) in self.verts.iter().enumerate() {
            if i != j {
                m.set_column(c, &(a - self.verts[j]));
                c += 1;
            }
        }
        m
    }

    pub fn volume(&self) -> f64 {
        det(&self.edge_matrix(0)).abs() / factorial(N)
    }

    pub fn diam(&self) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..self.verts.len() {
            for j in i + 1..self.verts.len() {
                d = d.max((self.verts[i] - self.verts[j]).norm());
            }
        }
        d
    }

    pub fn centroid(&self) -> Point<N> {
        self.verts.iter().sum::<Point<N>>() / (N + 1) as f64
    }

    pub fn point_at(&self, lambda: &BaryCoords) -> Point<N> {
        self.verts
            .iter()
            .zip(lambda.0.iter())
            .map(|(a, l)| a * *l)
            .sum()
    }

    /// Gradients of the barycentric coordinates (constant on the simplex).
    pub fn bary_gradients(&self) -> Result<ArrayVec<Point<N>, 4>> {
        let inv = self
            .edge_matrix(0)
            .try_inverse()
            .ok_or(Error::DegenerateSimplex(self.volume()))?;
        let mut g = ArrayVec::new();
        let mut g0 = Point::<N>::zeros();
        for r in 0..N {
            g0 -= inv.row(r).transpose();
        }
        g.push(g0);
        for r in 0..N {
            g.push(inv.row(r).transpose());
        }
        Ok(g)
    }

    /// Total (n-1)-measure of the boundary.
    pub fn boundary_measure(&self) -> f64 {
        (0..=N)
            .map(|k| {
                let face: ArrayVec<Point<N>, 4> = self
                    .verts
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != k)
                    .map(|(_, v)| *v)
                    .collect();
                facet_measure::<N>(&face)
            })
            .sum()
    }

    pub fn barycentric(&self, x: &Point<N>) -> Result<BaryCoords> {
        let m = self.edge_matrix(0);
        let rhs = x - self.verts[0];
        let mu = solve(&m, &rhs).ok_or(Error::DegenerateSimplex(self.volume()))?;
        let mut lam = ArrayVec::<f64, 4>::new();
        lam.push(1.0 - mu.sum());
        lam.extend(mu.iter().copied());
        let b = BaryCoords(lam);
        let scale = self.diam().max(x.norm()).max(1.0);
        let resid = (self.point_at(&b) - x).norm();
        if resid > BARY_RESIDUAL * scale * 1e3 {
            return Err(Error::Numeric(format!("barycentric residual {resid:e}")));
        }
        Ok(b)
    }

    pub fn contains(&self, x: &Point<N>) -> bool {
        match self.barycentric(x) {
            Ok(b) => b.0.iter().all(|l| *l >= -BARY_TOL),
            Err(_) => false,
        }
    }
}

/// Determinant by partial-pivot elimination (small N).
pub fn det<const N: usize>(m: &SMatrix<f64, N, N>) -> f64 {
    let mut a = *m;
    let mut d = 1.0;
    for c in 0..N {
        let p = (c..N)
            .max_by(|&i, &j| a[(i, c)].abs().total_cmp(&a[(j, c)].abs()))
            .unwrap();
        if a[(p, c)] == 0.0 {
            return 0.0;
        }
        if p != c {
            a.swap_rows(p, c);
            d = -d;
        }
        d *= a[(c, c)];
        for r in c + 1..N {
            let f = a[(r, c)] / a[(c, c)];
            for k in c..N {
                a[(r, k)] -= f * a[(c, k)];
            }
        }
    }
    d
}

/// Solves `m x = b` by partial-pivot elimination; `None` if singular.
pub fn solve<const N: usize>(m: &SMatrix<f64, N, N>, b: &Point<N>) -> Option<Point<N>> {
    let mut a = *m;
    let mut y = *b;
    for c in 0..N {
        let p = (c..N)
            .max_by(|&i, &j| a[(i, c)].abs().total_cmp(&a[(j, c)].abs()))
            .unwrap();
        if a[(p, c)] == 0.0 {
            return None;
        }
        a.swap_rows(p, c);
        y.swap_rows(p, c);
        for r in c + 1..N {
            let f = a[(r, c)] / a[(c, c)];
            for k in c..N {
                a[(r, k)] -= f * a[(c, k)];
            }
            y[r] -= f * y[c];
        }
    }
    let mut x = Point::<N>::zeros();
    for r in (0..N).rev() {
        let mut s = y[r];
        for k in r + 1..N {
            s -= a[(r, k)] * x[k];
        }
        x[r] = s / a[(r, r)];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// (k)-measure of the simplex spanned by `k + 1` points in R^N.
pub fn facet_measure<const N: usize>(pts: &[Point<N>]) -> f64 {
    let k = pts.len() - 1;
    if k == 0 {
        return 1.0;
    }
    let mut gram = nalgebra::DMatrix::<f64>::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            gram[(a, b)] = (pts[a + 1] - pts[0]).dot(&(pts[b + 1] - pts[0]));
        }
    }
    gram.determinant().max(0.0).sqrt() / factorial(k)
}

/// Barycentric coordinates, `N + 1` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct BaryCoords(pub ArrayVec<f64, 4>);

impl BaryCoords {
    pub fn new(lambda: &[f64]) -> Self {
        BaryCoords(lambda.iter().copied().collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Index of the subcell containing `lambda`: the largest coordinate, ties to
/// the lowest index. Indices are 0-based.
pub fn subcell_index(lambda: &BaryCoords) -> usize {
    let m = lambda.max();
    lambda.0.iter().position(|l| *l >= m - BARY_TOL).unwrap_or(0)
}

/// Coordinate-sorting permutations of `0..n` in lexicographic order; index 0
/// is the identity.
pub fn permutations(n: usize) -> Vec<ArrayVec<usize, 3>> {
    fn rec(cur: &mut ArrayVec<usize, 3>, n: usize, out: &mut Vec<ArrayVec<usize, 3>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        for k in 0..n {
            if !cur.contains(&k) {
                cur.push(k);
                rec(cur, n, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut ArrayVec::new(), n, &mut out);
    out
}

/// Cell of the reference partition: unit cube `cube + [0,1]^N` and the
/// permutation tag of the Freudenthal simplex inside it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellId<const N: usize> {
    pub cube: [i64; N],
    pub perm: u8,
}

/// Lattice vertices of a reference cell, sorted lexicographically so that
/// shared faces see the same vertex order from both sides.
pub fn reference_vertices<const N: usize>(id: &CellId<N>) -> ArrayVec<[i64; N], 4> {
    let perm = &permutations(N)[id.perm as usize];
    let mut local = [0i64; N];
    let mut out = ArrayVec::<[i64; N], 4>::new();
    let map = |loc: &[i64; N]| -> [i64; N] {
        let mut g = [0i64; N];
        for i in 0..N {
            g[i] = id.cube[i] + if id.cube[i].rem_euclid(2) == 0 { loc[i] } else { 1 - loc[i] };
        }
        g
    };
    out.push(map(&local));
    for &axis in perm.iter() {
        local[axis] = 1;
        out.push(map(&local));
    }
    out.sort();
    out
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb<const N: usize> {
    pub lo: Point<N>,
    pub hi: Point<N>,
}

impl<const N: usize> Aabb<N> {
    pub fn new(lo: Point<N>, hi: Point<N>) -> Self {
        Aabb { lo, hi }
    }

    pub fn point(x: Point<N>) -> Self {
        Aabb { lo: x, hi: x }
    }

    pub fn inflate(&self, r: f64) -> Self {
        Aabb {
            lo: self.lo.add_scalar(-r),
            hi: self.hi.add_scalar(r),
        }
    }

    pub fn contains(&self, x: &Point<N>) -> bool {
        (0..N).all(|i| x[i] >= self.lo[i] && x[i] <= self.hi[i])
    }

    pub fn is_full_dimensional(&self) -> bool {
        (0..N).all(|i| self.hi[i] > self.lo[i])
    }

    pub fn volume(&self) -> f64 {
        (0..N).map(|i| (self.hi[i] - self.lo[i]).max(0.0)).product()
    }
}

/// Shifted and scaled copy `zeta + eps * T_0` of the reference partition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridPlacement<const N: usize> {
    pub eps: f64,
    pub zeta: Point<N>,
}

impl<const N: usize> GridPlacement<N> {
    pub fn new(eps: f64, zeta: Point<N>) -> Result<Self> {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::InvalidParameter(format!("grid scale {eps}")));
        }
        Ok(GridPlacement { eps, zeta })
    }

    pub fn vertex_point(&self, lattice: &[i64; N]) -> Point<N> {
        let mut p = self.zeta;
        for i in 0..N {
            p[i] += self.eps * lattice[i] as f64;
        }
        p
    }

    pub fn cell_lattice(&self, id: &CellId<N>) -> ArrayVec<[i64; N], 4> {
        reference_vertices(id)
    }

    pub fn cell_simplex(&self, id: &CellId<N>) -> Simplex<N> {
        let verts = reference_vertices(id);
        Simplex {
            verts: verts.iter().map(|v| self.vertex_point(v)).collect(),
        }
    }

    fn to_grid(&self, x: &Point<N>) -> Point<N> {
        (x - self.zeta) / self.eps
    }

    /// Cell containing `x`; boundary points go to the lowest cell id.
    pub fn locate(&self, x: &Point<N>) -> CellId<N> {
        let xi = self.to_grid(x);
        let tol = 1e-12 * (N as f64).sqrt() * xi.norm().max(1.0);
        let mut choices: Vec<ArrayVec<i64, 2>> = Vec::with_capacity(N);
        for i in 0..N {
            let z = xi[i].floor();
            let mut c = ArrayVec::new();
            if xi[i] - z <= tol {
                c.push(z as i64 - 1);
            }
            c.push(z as i64);
            if z + 1.0 - xi[i] <= tol {
                c.push(z as i64 + 1);
            }
            choices.push(c);
        }
        let mut cubes: Vec<[i64; N]> = vec![[0; N]];
        for (i, c) in choices.iter().enumerate() {
            let mut next = Vec::new();
            for cube in &cubes {
                for &v in c {
                    let mut cc = *cube;
                    cc[i] = v;
                    next.push(cc);
                }
            }
            cubes = next;
        }
        cubes.sort();
        let perms = permutations(N);
        for cube in &cubes {
            let mut y = [0.0; N];
            for i in 0..N {
                let loc = xi[i] - cube[i] as f64;
                y[i] = if cube[i].rem_euclid(2) == 0 { loc } else { 1.0 - loc };
            }
            if y.iter().any(|v| *v < -tol || *v > 1.0 + tol) {
                continue;
            }
            for (pi, p) in perms.iter().enumerate() {
                if p.windows(2).all(|w| y[w[0]] >= y[w[1]] - tol) {
                    return CellId {
                        cube: *cube,
                        perm: pi as u8,
                    };
                }
            }
        }
        // Unreachable for finite input; fall back to the floor cube.
        let mut cube = [0i64; N];
        for i in 0..N {
            cube[i] = xi[i].floor() as i64;
        }
        CellId { cube, perm: 0 }
    }

    /// Cells meeting `region`, sorted by id. For a full-dimensional box a
    /// cell is reported when it overlaps the box in positive measure; for a
    /// degenerate box (a point or a lower-dimensional slab) when its closure
    /// meets the box.
    pub fn enumerate(&self, region: &Aabb<N>) -> Vec<CellId<N>> {
        let lo = self.to_grid(&region.lo);
        let hi = self.to_grid(&region.hi);
        let open = region.is_full_dimensional();
        let perms = permutations(N);
        let mut ranges = Vec::with_capacity(N);
        for i in 0..N {
            ranges.push((lo[i].floor() as i64 - 1, hi[i].ceil() as i64));
        }
        let mut out = Vec::new();
        let mut cube = [0i64; N];
        fn walk<const N: usize>(
            axis: usize,
            ranges: &[(i64, i64)],
            cube: &mut [i64; N],
            f: &mut dyn FnMut(&[i64; N]),
        ) {
            if axis == N {
                f(cube);
                return;
            }
            for v in ranges[axis].0..=ranges[axis].1 {
                cube[axis] = v;
                walk(axis + 1, ranges, cube, f);
            }
        }
        walk::<N>(0, &ranges, &mut cube, &mut |c| {
            for pi in 0..perms.len() {
                let id = CellId {
                    cube: *c,
                    perm: pi as u8,
                };
                let lat = reference_vertices(&id);
                let pts: ArrayVec<Point<N>, 4> = lat
                    .iter()
                    .map(|v| Point::<N>::from_fn(|i, _| v[i] as f64))
                    .collect();
                if simplex_meets_box(&pts, &lo, &hi, open) {
                    out.push(id);
                }
            }
        });
        out.sort();
        out
    }
}

/// Separating-axis test between a simplex and a box (same coordinates).
fn simplex_meets_box<const N: usize>(
    pts: &[Point<N>],
    lo: &Point<N>,
    hi: &Point<N>,
    open: bool,
) -> bool {
    let scale = pts
        .iter()
        .map(|p| p.norm())
        .fold(lo.norm().max(hi.norm()), f64::max)
        .max(1.0);
    let tol = 1e-12 * scale;
    let separated = |axis: &Point<N>| -> bool {
        let n = axis.norm();
        if n < 1e-300 {
            return false;
        }
        let (mut smin, mut smax) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in pts {
            let v = p.dot(axis);
            smin = smin.min(v);
            smax = smax.max(v);
        }
        let (mut bmin, mut bmax) = (0.0, 0.0);
        for i in 0..N {
            let a = axis[i];
            if a >= 0.0 {
                bmin += a * lo[i];
                bmax += a * hi[i];
            } else {
                bmin += a * hi[i];
                bmax += a * lo[i];
            }
        }
        let t = tol * n;
        if open {
            smax <= bmin + t || bmax <= smin + t
        } else {
            smax < bmin - t || bmax < smin - t
        }
    };
    for i in 0..N {
        let mut e = Point::<N>::zeros();
        e[i] = 1.0;
        if separated(&e) {
            return false;
        }
    }
    let s = Simplex::<N> {
        verts: pts.iter().copied().collect(),
    };
    if let Ok(grads) = s.bary_gradients() {
        for g in &grads {
            if separated(g) {
                return false;
            }
        }
    }
    if N == 3 {
        for a in 0..pts.len() {
            for b in a + 1..pts.len() {
                let e = pts[b] - pts[a];
                let e3 = Vector3::new(e[0], e[1], e[2]);
                for i in 0..3 {
                    let mut u = Vector3::zeros();
                    u[i] = 1.0;
                    let c = u.cross(&e3);
                    let axis = Point::<N>::from_fn(|k, _| c[k]);
                    if separated(&axis) {
                        return false;
                    }
                }
            }
        }
    }
    true
}

/// Explicit barycentric subcells of a triangle.
#[derive(Clone, Debug)]
pub struct SubcellGeometry {
    pub simplex: Simplex<2>,
    /// `quads[j] = [A_j, mid(A_j, A_i), centroid, mid(A_j, A_k)]` with
    /// `i < k` the other two indices.
    pub quads: [[Point<2>; 4]; 3],
    /// Internal faces `(i, j, start, end)` with `i < j`, from the edge
    /// midpoint to the centroid.
    pub faces: Vec<(usize, usize, Point<2>, Point<2>)>,
}

impl SubcellGeometry {
    pub fn areas(&self) -> [f64; 3] {
        let mut a = [0.0; 3];
        for (j, q) in self.quads.iter().enumerate() {
            a[j] = polygon_area(q).abs();
        }
        a
    }

    /// Sum over ordered pairs `i != j` of the length of the common face.
    pub fn internal_face_measure(&self) -> f64 {
        2.0 * self.faces.iter().map(|f| (f.3 - f.2).norm()).sum::<f64>()
    }
}

pub fn subcell_geometry(s: &Simplex<2>) -> SubcellGeometry {
    let v = s.vertices();
    let c = s.centroid();
    let mid = |i: usize, j: usize| (v[i] + v[j]) * 0.5;
    let others = |j: usize| -> (usize, usize) {
        match j {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        }
    };
    let mut quads = [[Point::<2>::zeros(); 4]; 3];
    for (j, q) in quads.iter_mut().enumerate() {
        let (i, k) = others(j);
        *q = [v[j], mid(j, i), c, mid(j, k)];
    }
    let mut faces = Vec::with_capacity(3);
    for i in 0..3 {
        for j in i + 1..3 {
            faces.push((i, j, mid(i, j), c));
        }
    }
    SubcellGeometry {
        simplex: s.clone(),
        quads,
        faces,
    }
}

/// Signed shoelace area.
pub fn polygon_area(p: &[Point<2>]) -> f64 {
    let n = p.len();
    let mut a = 0.0;
    for i in 0..n {
        let q = p[i];
        let r = p[(i + 1) % n];
        a += q[0] * r[1] - q[1] * r[0];
    }
    0.5 * a
}

/// Exact sum over ordered pairs of the (n-1)-measure of the internal faces
/// `{lambda_i = lambda_j = max}`; n = 2 or 3.
pub fn internal_face_measure_exact<const N: usize>(s: &Simplex<N>) -> f64 {
    let v = s.vertices();
    let c = s.centroid();
    let mut total = 0.0;
    match N {
        2 => {
            for i in 0..3 {
                for j in i + 1..3 {
                    total += 2.0 * ((v[i] + v[j]) * 0.5 - c).norm();
                }
            }
        }
        3 => {
            for i in 0..4 {
                for j in i + 1..4 {
                    let others: ArrayVec<usize, 2> = (0..4).filter(|k| *k != i && *k != j).collect();
                    let m = (v[i] + v[j]) * 0.5;
                    let f1 = (v[i] + v[j] + v[others[0]]) / 3.0;
                    let f2 = (v[i] + v[j] + v[others[1]]) / 3.0;
                    let d1 = c - m;
                    let d2 = f2 - f1;
                    let d1 = Vector3::new(d1[0], d1[1], d1[2]);
                    let d2 = Vector3::new(d2[0], d2[1], d2[2]);
                    // each quad face (area |d1 x d2| / 2) is counted from both sides
                    total += d1.cross(&d2).norm();
                }
            }
        }
        _ => panic!("exact face measure only for n = 2, 3"),
    }
    total
}

/// Uniform sample of barycentric coordinates on the simplex.
pub fn sample_bary<R: Rng + ?Sized>(rng: &mut R, n_vertices: usize) -> BaryCoords {
    let mut lam = ArrayVec::<f64, 4>::new();
    for _ in 0..n_vertices {
        let u: f64 = rng.random::<f64>();
        lam.push(-(1.0 - u).ln());
    }
    let s: f64 = lam.iter().sum();
    for l in lam.iter_mut() {
        *l /= s;
    }
    BaryCoords(lam)
}

/// Monte Carlo estimate (mean, standard error) of `|T_j| / |T|`.
pub fn subcell_fraction_mc<R: Rng + ?Sized>(
    n_vertices: usize,
    j: usize,
    samples: usize,
    rng: &mut R,
) -> (f64, f64) {
    let mut hits = 0usize;
    for _ in 0..samples {
        if subcell_index(&sample_bary(rng, n_vertices)) == j {
            hits += 1;
        }
    }
    let p = hits as f64 / samples as f64;
    (p, (p * (1.0 - p) / samples as f64).sqrt())
}

/// Monte Carlo estimate (mean, standard error) of the ordered-pair internal
/// face measure, from the volume of the slab where the two largest
/// barycentric coordinates differ by less than `h`.
pub fn internal_face_measure_mc<const N: usize, R: Rng + ?Sized>(
    s: &Simplex<N>,
    samples: usize,
    h: f64,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let grads = s.bary_gradients()?;
    let vol = s.volume();
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for _ in 0..samples {
        let b = sample_bary(rng, N + 1);
        let l = b.as_slice();
        let (mut i1, mut i2) = (0usize, 1usize);
        if l[i2] > l[i1] {
            std::mem::swap(&mut i1, &mut i2);
        }
        for k in 2..=N {
            if l[k] > l[i1] {
                i2 = i1;
                i1 = k;
            } else if l[k] > l[i2] {
                i2 = k;
            }
        }
        let v = if l[i1] - l[i2] < h {
            // The set {0 <= lambda_a - lambda_b < h} with a, b the two largest
            // coordinates is a slab of width h / |grad| on each side of a face,
            // which matches the two-sided count of the total.
            vol * (grads[i1] - grads[i2]).norm() / h
        } else {
            0.0
        };
        sum += v;
        sum2 += v * v;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum2 / n - mean * mean).max(0.0);
    Ok((mean, (var / n).sqrt()))
}

/// Convenience constructor for 2D points.
pub fn p2(x: f64, y: f64) -> Point<2> {
    Vector2::new(x, y)
}
