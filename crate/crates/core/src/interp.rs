//! Discontinuous piecewise-affine interpolant on one simplex.
//!
//! Given vertex values `u_i` and antisymmetric edge jumps `s_ij`, the
//! interpolant is affine on each barycentric subcell `T_j`, where it equals
//! `v_j = u_j + sum_{i != j} lambda_i xi_ji` with `xi_ij = u_j - u_i - s_ij`.

use arrayvec::ArrayVec;
use nalgebra::{SMatrix, SVector};

use crate::error::{Error, Result};
use crate::mesh::{subcell_index, BaryCoords, Point, Simplex, BARY_TOL};

pub type Value<const M: usize> = SVector<f64, M>;
pub type Grad<const M: usize, const N: usize> = SMatrix<f64, M, N>;

/// Vertex values and edge jumps on one simplex.
#[derive(Clone, Debug)]
pub struct CellData<const N: usize, const M: usize> {
    pub simplex: Simplex<N>,
    u: ArrayVec<Value<M>, 4>,
    s: [[Value<M>; 4]; 4],
}

impl<const N: usize, const M: usize> CellData<N, M> {
    /// `upper(i, j)` gives `s_ij` for `i < j`; the rest follows by antisymmetry.
    pub fn new(
        simplex: Simplex<N>,
        u: &[Value<M>],
        mut upper: impl FnMut(usize, usize) -> Value<M>,
    ) -> Result<Self> {
        if u.len() != N + 1 {
            return Err(Error::InvalidParameter(format!(
                "expected {} vertex values, got {}",
                N + 1,
                u.len()
            )));
        }
        let mut s = [[Value::<M>::zeros(); 4]; 4];
        for i in 0..=N {
            for j in i + 1..=N {
                let v = upper(i, j);
                s[i][j] = v;
                s[j][i] = -v;
            }
        }
        Ok(CellData {
            simplex,
            u: u.iter().copied().collect(),
            s,
        })
    }

    /// Data without jumps.
    pub fn continuous(simplex: Simplex<N>, u: &[Value<M>]) -> Result<Self> {
        Self::new(simplex, u, |_, _| Value::<M>::zeros())
    }

    pub fn u(&self, i: usize) -> &Value<M> {
        &self.u[i]
    }

    pub fn values(&self) -> &[Value<M>] {
        &self.u
    }

    pub fn s(&self, i: usize, j: usize) -> Value<M> {
        self.s[i][j]
    }

    pub fn xi(&self, i: usize, j: usize) -> Value<M> {
        self.u[j] - self.u[i] - self.s[i][j]
    }

    /// `(sum_{i<j} |s_ij|^2)^(1/2)`.
    pub fn jump_norm(&self) -> f64 {
        let mut t = 0.0;
        for i in 0..=N {
            for j in i + 1..=N {
                t += self.s[i][j].norm_squared();
            }
        }
        t.sqrt()
    }

    pub fn has_jumps(&self) -> bool {
        (0..=N).any(|i| (i + 1..=N).any(|j| self.s[i][j] != Value::<M>::zeros()))
    }

    /// `alpha * self + other` on the same simplex.
    pub fn combine(&self, alpha: f64, other: &Self) -> Self {
        let mut out = self.clone();
        for i in 0..=N {
            out.u[i] = self.u[i] * alpha + other.u[i];
            for j in 0..=N {
                out.s[i][j] = self.s[i][j] * alpha + other.s[i][j];
            }
        }
        out
    }
}

/// Affine function on one subcell: `value(x) = base + grad (x - anchor)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffinePiece<const N: usize, const M: usize> {
    pub anchor: Point<N>,
    pub base: Value<M>,
    pub grad: Grad<M, N>,
}

impl<const N: usize, const M: usize> AffinePiece<N, M> {
    pub fn eval(&self, x: &Point<N>) -> Value<M> {
        self.base + self.grad * (x - self.anchor)
    }
}

/// The interpolant built from a [`CellData`].
#[derive(Clone, Debug)]
pub struct CellInterpolant<const N: usize, const M: usize> {
    data: CellData<N, M>,
    grads: ArrayVec<Grad<M, N>, 4>,
    bary_grads: ArrayVec<Point<N>, 4>,
}

pub fn build_interpolant<const N: usize, const M: usize>(
    d: &CellData<N, M>,
) -> Result<CellInterpolant<N, M>> {
    let mut grads = ArrayVec::new();
    for j in 0..=N {
        let a = d.simplex.edge_matrix(j);
        let ainv = a
            .try_inverse()
            .ok_or(Error::DegenerateSimplex(d.simplex.volume()))?;
        let mut xi = Grad::<M, N>::zeros();
        let mut c = 0;
        for i in 0..=N {
            if i != j {
                xi.set_column(c, &d.xi(j, i));
                c += 1;
            }
        }
        grads.push(xi * ainv);
    }
    Ok(CellInterpolant {
        data: d.clone(),
        grads,
        bary_grads: d.simplex.bary_gradients()?,
    })
}

impl<const N: usize, const M: usize> CellInterpolant<N, M> {
    pub fn data(&self) -> &CellData<N, M> {
        &self.data
    }

    pub fn simplex(&self) -> &Simplex<N> {
        &self.data.simplex
    }

    pub fn grad(&self, j: usize) -> &Grad<M, N> {
        &self.grads[j]
    }

    pub fn piece(&self, j: usize) -> AffinePiece<N, M> {
        AffinePiece {
            anchor: *self.data.simplex.vertex(j),
            base: self.data.u[j],
            grad: self.grads[j],
        }
    }

    /// True when all subcells carry the same affine function.
    pub fn is_single_affine(&self) -> bool {
        !self.data.has_jumps()
    }

    pub fn eval_subcell(&self, j: usize, x: &Point<N>) -> Value<M> {
        self.piece(j).eval(x)
    }

    fn checked_bary(&self, x: &Point<N>) -> Result<BaryCoords> {
        let b = self.data.simplex.barycentric(x)?;
        if b.0.iter().any(|l| *l < -1e-9) {
            return Err(Error::OutsideSimplex);
        }
        Ok(b)
    }

    pub fn eval(&self, x: &Point<N>) -> Result<Value<M>> {
        let b = self.checked_bary(x)?;
        Ok(self.eval_subcell(subcell_index(&b), x))
    }

    /// Subcell seen from `x + 0^+ dir`: largest coordinate, then largest
    /// derivative along `dir`, then lowest index.
    pub fn subcell_from(&self, x: &Point<N>, dir: &Point<N>) -> Result<usize> {
        let b = self.checked_bary(x)?;
        let m = b.max();
        let mut best: Option<(usize, f64)> = None;
        for (i, l) in b.0.iter().enumerate() {
            if *l < m - BARY_TOL {
                continue;
            }
            let d = self.bary_grads[i].dot(dir);
            match best {
                Some((_, bd)) if d <= bd + BARY_TOL => {}
                _ => best = Some((i, d)),
            }
        }
        Ok(best.map(|b| b.0).unwrap_or(0))
    }

    pub fn eval_from(&self, x: &Point<N>, dir: &Point<N>) -> Result<Value<M>> {
        Ok(self.eval_subcell(self.subcell_from(x, dir)?, x))
    }

    /// `u_i + t xi_ij + s_ij [t > 1/2]`.
    pub fn edge_trace(&self, i: usize, j: usize, t: f64) -> Value<M> {
        let d = &self.data;
        let mut v = d.u[i] + d.xi(i, j) * t;
        if t > 0.5 {
            v += d.s(i, j);
        }
        v
    }

    /// Jump across the face between `T_i` and `T_j` at `lambda`: value on
    /// the `T_i` side minus value on the `T_j` side.
    pub fn face_jump(&self, i: usize, j: usize, lambda: &BaryCoords) -> Result<Value<M>> {
        let l = lambda.as_slice();
        let m = lambda.max();
        if i == j || (l[i] - l[j]).abs() > 1e-9 || l[i] < m - 1e-9 {
            return Err(Error::NotOnFace(i, j));
        }
        let d = &self.data;
        let mut v = d.s(j, i) * (l[i] + l[j]);
        for (k, lk) in l.iter().enumerate() {
            if k != i && k != j {
                v -= (d.s(i, k) + d.s(k, j)) * *lk;
            }
        }
        Ok(v)
    }

    /// Unit normal of the face between `T_i` and `T_j`, pointing into `T_i`.
    pub fn face_normal(&self, i: usize, j: usize) -> Point<N> {
        (self.bary_grads[i] - self.bary_grads[j]).normalize()
    }
}

/// Internal face of a triangle with its affine jump.
#[derive(Clone, Copy, Debug)]
pub struct FaceJump<const M: usize> {
    pub i: usize,
    pub j: usize,
    /// Edge midpoint.
    pub a: Point<2>,
    /// Centroid.
    pub b: Point<2>,
    pub jump_a: Value<M>,
    pub jump_b: Value<M>,
    /// Points into `T_i`, so the jump is (side of the normal) minus (other side).
    pub normal: Point<2>,
}

impl<const M: usize> FaceJump<M> {
    pub fn jump_at(&self, t: f64) -> Value<M> {
        self.jump_a * (1.0 - t) + self.jump_b * t
    }

    pub fn length(&self) -> f64 {
        (self.b - self.a).norm()
    }
}

impl<const M: usize> CellInterpolant<2, M> {
    /// All three internal faces, including those with zero jump.
    pub fn internal_faces(&self) -> ArrayVec<FaceJump<M>, 3> {
        let v = self.data.simplex.vertices();
        let c = self.data.simplex.centroid();
        let third = 1.0 / 3.0;
        let mut out = ArrayVec::new();
        for i in 0..3 {
            for j in i + 1..3 {
                let mut mid = [0.0; 3];
                mid[i] = 0.5;
                mid[j] = 0.5;
                let ja = self
                    .face_jump(i, j, &BaryCoords::new(&mid))
                    .expect("midpoint lies on the face");
                let jb = self
                    .face_jump(i, j, &BaryCoords::new(&[third, third, third]))
                    .expect("centroid lies on the face");
                out.push(FaceJump {
                    i,
                    j,
                    a: (v[i] + v[j]) * 0.5,
                    b: c,
                    jump_a: ja,
                    jump_b: jb,
                    normal: self.face_normal(i, j),
                });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::p2;
    use nalgebra::Vector1;

    fn example() -> CellInterpolant<2, 1> {
        let s = Simplex::new([p2(0.0, 0.0), p2(1.0, 0.0), p2(0.0, 1.0)]).unwrap();
        let u = [Vector1::new(0.0), Vector1::new(1.0), Vector1::new(0.0)];
        let d = CellData::new(s, &u, |i, j| {
            if (i, j) == (0, 1) {
                Vector1::new(0.5)
            } else {
                Vector1::new(0.0)
            }
        })
        .unwrap();
        build_interpolant(&d).unwrap()
    }

    #[test]
    fn gradients_of_example() {
        let c = example();
        assert!((c.grad(0) - SMatrix::<f64, 1, 2>::new(0.5, 0.0)).norm() < 1e-15);
        assert!((c.grad(1) - SMatrix::<f64, 1, 2>::new(0.5, -0.5)).norm() < 1e-15);
        // finite differences inside T_2 (index 1)
        let x = p2(0.7, 0.1);
        let h = 1e-6;
        let fx = (c.eval(&(x + p2(h, 0.0))).unwrap() - c.eval(&(x - p2(h, 0.0))).unwrap())[0] / (2.0 * h);
        let fy = (c.eval(&(x + p2(0.0, h))).unwrap() - c.eval(&(x - p2(0.0, h))).unwrap())[0] / (2.0 * h);
        assert!((fx - 0.5).abs() < 1e-8 && (fy + 0.5).abs() < 1e-8);
    }

    #[test]
    fn eval_examples() {
        let c = example();
        assert_eq!(c.eval(&p2(1.0, 0.0)).unwrap()[0], 1.0);
        assert!((c.eval(&p2(1.0 / 3.0, 1.0 / 3.0)).unwrap()[0] - 1.0 / 6.0).abs() < 1e-15);
        let m = p2(0.5, 0.0);
        let left = c.eval_from(&m, &p2(-1.0, 0.0)).unwrap()[0];
        let right = c.eval_from(&m, &p2(1.0, 0.0)).unwrap()[0];
        assert!((right - left - 0.5).abs() < 1e-15);
        assert!(c.eval(&p2(1.0, 1.0)).is_err());
    }

    #[test]
    fn edge_trace_examples() {
        let c = example();
        assert_eq!(c.edge_trace(0, 1, 0.0)[0], 0.0);
        assert!((c.edge_trace(0, 1, 1.0)[0] - 1.0).abs() < 1e-15);
        assert!((c.edge_trace(0, 1, 0.25)[0] - 0.125).abs() < 1e-15);
    }

    #[test]
    fn face_jump_examples() {
        let c = example();
        let j = c.face_jump(0, 1, &BaryCoords::new(&[0.5, 0.5, 0.0])).unwrap();
        assert!((j[0].abs() - 0.5).abs() < 1e-15);
        let t = 1.0 / 3.0;
        let j = c.face_jump(0, 1, &BaryCoords::new(&[t, t, t])).unwrap();
        assert!((j[0] + 1.0 / 3.0).abs() < 1e-15);
        // two-sided evaluation at the centroid
        let x = p2(t, t);
        let two_sided = c.eval_subcell(0, &x) - c.eval_subcell(1, &x);
        assert!((two_sided[0] - j[0]).abs() < 1e-15);
        assert!(c.face_jump(0, 1, &BaryCoords::new(&[0.6, 0.3, 0.1])).is_err());
    }

    #[test]
    fn no_jump_gives_single_affine() {
        let s = Simplex::new([p2(0.1, 0.0), p2(1.0, 0.2), p2(0.3, 0.9)]).unwrap();
        let f = |p: &Point<2>| Vector1::new(2.0 * p[0] - 3.0 * p[1] + 0.5);
        let u: Vec<_> = s.vertices().iter().map(f).collect();
        let c = build_interpolant(&CellData::continuous(s, &u).unwrap()).unwrap();
        for j in 0..3 {
            assert!((c.grad(j) - SMatrix::<f64, 1, 2>::new(2.0, -3.0)).norm() < 1e-13);
        }
        for f in c.internal_faces() {
            assert_eq!(f.jump_a[0], 0.0);
            assert_eq!(f.jump_b[0], 0.0);
        }
    }
}
