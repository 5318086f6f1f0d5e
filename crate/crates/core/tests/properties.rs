//! Property tests of structural invariants.

use proptest::prelude::*;
use sdhdg::fem::projection::{eval_field, l2_project_element};
use sdhdg::fem::quadrature::{edge_quadrature, triangle_quadrature};
use sdhdg::fem::TriBasis;
use sdhdg::mesh::{FacetKind, Mesh, Region};
use sdhdg::problem::{dispersion_tensor, DispersionModel};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Mesh invariants for arbitrary even subdivision counts: areas sum to
    /// one, facet kinds partition the edges, interface facets sit on the
    /// midline with the Stokes element first.
    #[test]
    fn mesh_invariants(half in 1usize..9) {
        let n = 2 * half;
        let mesh = Mesh::structured(n).unwrap();
        let total: f64 = (0..mesh.n_elements())
            .map(|e| mesh.element_geometry(e).unwrap().area)
            .sum();
        prop_assert!((total - 1.0).abs() < 1e-13);
        prop_assert_eq!(mesh.n_elements(), 2 * n * n);
        prop_assert_eq!(mesh.n_facets(), (n + 1) * (n + 1) + 2 * n * n - 1);
        let mut interior = 0;
        let mut boundary = 0;
        let mut interface = 0;
        for f in &mesh.facets {
            match f.kind {
                FacetKind::Interface => {
                    interface += 1;
                    prop_assert_eq!(mesh.tris[f.elems[0]].region, Region::Stokes);
                }
                k if k.is_boundary() => boundary += 1,
                _ => interior += 1,
            }
        }
        prop_assert_eq!(interface, n);
        prop_assert_eq!(boundary, 4 * n);
        prop_assert_eq!(interior + boundary + interface, mesh.n_facets());
    }

    /// Quadrature integrates arbitrary in-range monomials exactly.
    #[test]
    fn quadrature_exactness(d in 0usize..16, split in 0.0f64..1.0) {
        let a = (split * d as f64) as usize;
        let b = d - a.min(d);
        let a = a.min(d);
        let q = triangle_quadrature(d).unwrap();
        let fact = |m: usize| (1..=m).map(|v| v as f64).product::<f64>().max(1.0);
        let exact = fact(a) * fact(b) / fact(a + b + 2);
        let got: f64 = q.points.iter().zip(&q.weights)
            .map(|(p, w)| w * p[0].powi(a as i32) * p[1].powi(b as i32))
            .sum();
        prop_assert!((got - exact).abs() <= 1e-13 * exact.max(1.0));
        let e = edge_quadrature(d).unwrap();
        let got: f64 = e.points.iter().zip(&e.weights).map(|(t, w)| w * t.powi(d as i32)).sum();
        prop_assert!((got - 1.0 / (d as f64 + 1.0)).abs() <= 1e-13);
    }

    /// Element L2 projection reproduces arbitrary quadratics.
    #[test]
    fn projection_reproduces_polynomials(
        c in prop::array::uniform6(-3.0f64..3.0),
        px in 0.05f64..0.9,
        py in 0.05f64..0.9,
    ) {
        let f = move |x: [f64; 2]| {
            c[0] + c[1] * x[0] + c[2] * x[1] + c[3] * x[0] * x[0] + c[4] * x[0] * x[1]
                + c[5] * x[1] * x[1]
        };
        let mesh = Mesh::structured(2).unwrap();
        let basis = TriBasis::new(2);
        let quad = triangle_quadrature(8).unwrap();
        let geom = mesh.element_geometry(3).unwrap();
        let coefs = l2_project_element(&f, &geom, &basis, &quad);
        let xi = [px * (1.0 - py) * 0.9, py * 0.9];
        let mut vals = vec![0.0; basis.dim];
        basis.eval(xi, &mut vals);
        let x = geom.to_physical(xi);
        prop_assert!((eval_field(&coefs, &vals) - f(x)).abs() < 1e-10);
    }

    /// The Bear dispersion tensor is symmetric positive definite with
    /// spectrum bounded below by phi d_m and above linearly in |u|.
    #[test]
    fn bear_tensor_spd(ux in -50.0f64..50.0, uy in -50.0f64..50.0, phi in 0.1f64..1.0) {
        let model = DispersionModel::Bear { delta: 1e-6, d_m: 1e-5, d_l: 4e-5, d_t: 1e-5 };
        let d = dispersion_tensor(&model, Region::Darcy, [ux, uy], phi);
        prop_assert!((d[0][1] - d[1][0]).abs() < 1e-16);
        let tr = d[0][0] + d[1][1];
        let det = d[0][0] * d[1][1] - d[0][1] * d[1][0];
        let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
        let lmin = tr / 2.0 - disc;
        let lmax = tr / 2.0 + disc;
        let speed = ux.hypot(uy);
        prop_assert!(lmin >= phi * 1e-5 - 1e-16);
        prop_assert!(lmax <= 1e-4 * (1.0 + speed));
    }
}
