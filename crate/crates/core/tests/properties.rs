use proptest::prelude::*;
use sbv_core::field::FieldPreset;
use sbv_core::geom::ConvexPolygon;
use sbv_core::interp::{build_interpolant, CellData, Value};
use sbv_core::mesh::{p2, polygon_area, Aabb, GridPlacement, Simplex};
use sbv_core::projector::project;

fn v1(x: f64) -> Value<1> {
    Value::<1>::new(x)
}

fn triangle() -> impl Strategy<Value = Simplex<2>> {
    prop::array::uniform6(-2.0..2.0f64)
        .prop_filter_map("degenerate", |c| Simplex::new([p2(c[0], c[1]), p2(c[2], c[3]), p2(c[4], c[5])]).ok())
        .prop_filter("thin", |s| s.volume() > 0.05 * s.diam() * s.diam())
}

fn bary() -> impl Strategy<Value = [f64; 3]> {
    (0.01..1.0f64, 0.01..1.0f64, 0.01..1.0f64).prop_map(|(a, b, c)| {
        let t = a + b + c;
        [a / t, b / t, c / t]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn located_cell_contains_point(eps in 0.05..1.0f64, zx in -0.5..0.5f64, zy in -0.5..0.5f64,
                                   x in -3.0..3.0f64, y in -3.0..3.0f64) {
        let g = GridPlacement::new(eps, p2(zx * eps, zy * eps)).unwrap();
        let q = p2(x, y);
        let s = g.cell_simplex(&g.locate(&q));
        prop_assert!(s.contains(&q));
        prop_assert!((s.volume() - eps * eps / 2.0).abs() < 1e-12);
    }

    #[test]
    fn enumerated_cells_tile_the_box(eps in 0.1..0.5f64, zx in -0.4..0.4f64, zy in -0.4..0.4f64,
                                     lx in -1.0..1.0f64, ly in -1.0..1.0f64, w in 0.2..1.5f64, h in 0.2..1.5f64) {
        let g = GridPlacement::new(eps, p2(zx * eps, zy * eps)).unwrap();
        let b = Aabb::new(p2(lx, ly), p2(lx + w, ly + h));
        let clip = ConvexPolygon::from_box(&b);
        let ids = g.enumerate(&b);
        let mut total = 0.0;
        for id in &ids {
            let piece = clip.clip(g.cell_simplex(id).vertices());
            let a = polygon_area(&piece).abs();
            prop_assert!(a > 0.0, "{id:?} does not overlap the box");
            total += a;
        }
        prop_assert!((total - w * h).abs() < 1e-9 * w * h);
        let mut sorted = ids.clone();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(sorted, ids);
    }

    #[test]
    fn barycentric_coordinates_round_trip(s in triangle(), l in bary()) {
        let x = s.point_at(&sbv_core::mesh::BaryCoords::new(&l));
        let back = s.barycentric(&x).unwrap();
        let sum: f64 = back.as_slice().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-10);
        for (a, b) in back.as_slice().iter().zip(l) {
            prop_assert!((a - b).abs() < 1e-8);
        }
        prop_assert!(s.contains(&x));
    }

    #[test]
    fn interpolant_is_linear_in_cell_data(s in triangle(), l in bary(), alpha in -3.0..3.0f64,
                                          u in prop::array::uniform3(-2.0..2.0f64),
                                          w in prop::array::uniform3(-2.0..2.0f64),
                                          j1 in prop::array::uniform3(-1.0..1.0f64),
                                          j2 in prop::array::uniform3(-1.0..1.0f64)) {
        let idx = |i: usize, j: usize| if i == 0 { j - 1 } else { 2 };
        let a = CellData::new(s.clone(), &u.map(v1), |i, j| v1(j1[idx(i, j)])).unwrap();
        let b = CellData::new(s.clone(), &w.map(v1), |i, j| v1(j2[idx(i, j)])).unwrap();
        let c = a.combine(alpha, &b);
        let (ia, ib, ic) = (build_interpolant(&a).unwrap(), build_interpolant(&b).unwrap(), build_interpolant(&c).unwrap());
        let x = s.point_at(&sbv_core::mesh::BaryCoords::new(&l));
        let lhs = ic.eval(&x).unwrap()[0];
        let rhs = alpha * ia.eval(&x).unwrap()[0] + ib.eval(&x).unwrap()[0];
        prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + rhs.abs()));
        for k in 0..3 {
            prop_assert!((ic.grad(k) - (ia.grad(k) * alpha + ib.grad(k))).norm() < 1e-8);
        }
    }

    #[test]
    fn continuous_data_gives_the_linear_interpolant(s in triangle(), u in prop::array::uniform3(-2.0..2.0f64), l in bary()) {
        let d = CellData::continuous(s.clone(), &u.map(v1)).unwrap();
        let ci = build_interpolant(&d).unwrap();
        prop_assert!(ci.is_single_affine());
        let x = s.point_at(&sbv_core::mesh::BaryCoords::new(&l));
        let expect: f64 = (0..3).map(|i| l[i] * u[i]).sum();
        prop_assert!((ci.eval(&x).unwrap()[0] - expect).abs() < 1e-9);
    }

    #[test]
    fn projection_reproduces_affine_fields(ax in -2.0..2.0f64, ay in -2.0..2.0f64, b in -1.0..1.0f64,
                                           eps in 0.1..0.4f64, zx in -0.7..0.7f64, zy in -0.7..0.7f64,
                                           x in 0.0..1.0f64, y in 0.0..1.0f64) {
        let f = FieldPreset::Affine { a: [ax, ay], b }.build().unwrap();
        let zeta = p2(zx, zy) * (eps / 1.5);
        let pi = project(&*f, eps, zeta, &Aabb::new(p2(0.0, 0.0), p2(1.0, 1.0))).unwrap();
        let q = p2(x, y);
        prop_assert!((pi.eval(&q).unwrap()[0] - (ax * x + ay * y + b)).abs() < 1e-9);
        let g = pi.grad(&q).unwrap();
        prop_assert!((g[(0, 0)] - ax).abs() < 1e-9 && (g[(0, 1)] - ay).abs() < 1e-9);
    }

    #[test]
    fn projection_commutes_with_affine_combinations(amp in -2.0..2.0f64, sx in -1.0..1.0f64, sy in -1.0..1.0f64,
                                                    nx in -1.0..1.0f64, eps in 0.1..0.4f64,
                                                    zx in -0.7..0.7f64, zy in -0.7..0.7f64,
                                                    x in 0.0..1.0f64, y in 0.0..1.0f64) {
        let step = |amplitude: f64, slope: [f64; 2]| FieldPreset::LineStep {
            point: [0.45, 0.55], normal: [nx, 1.0], amplitude, slope,
        }.build().unwrap();
        let zeta = p2(zx, zy) * (eps / 1.5);
        let omega = Aabb::new(p2(0.0, 0.0), p2(1.0, 1.0));
        let full = project(&*step(amp, [sx, sy]), eps, zeta, &omega).unwrap();
        let unit = project(&*step(1.0, [0.0, 0.0]), eps, zeta, &omega).unwrap();
        let lin = project(&*FieldPreset::Affine { a: [sx, sy], b: 0.0 }.build().unwrap(), eps, zeta, &omega).unwrap();
        let combo = unit.combine(amp, &lin).unwrap();
        let q = p2(x, y);
        prop_assert!((full.eval(&q).unwrap()[0] - combo.eval(&q).unwrap()[0]).abs() < 1e-9);
        prop_assert!((full.grad(&q).unwrap() - combo.grad(&q).unwrap()).norm() < 1e-8);
    }
}
