use proptest::prelude::*;

use quasilod::analysis::relative_errors;
use quasilod::corrector::SparseVec;
use quasilod::fem::{assemble_stiffness, NodalVector, Scale};
use quasilod::harness::PStarSpec;
use quasilod::interpolation::TransferOperators;
use quasilod::mesh::{build_patch, patch_count_bound, MeshPair, StructuredMesh};
use quasilod::solver::{solution_from_bytes, solution_to_bytes};

fn coarse_and_ratio() -> impl Strategy<Value = (usize, usize)> {
    (prop::sample::select(vec![1usize, 2, 4, 8]), prop::sample::select(vec![1usize, 2, 4]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn patches_are_nested_and_bounded((n, _) in coarse_and_ratio(), k in 0usize..5, seed in 0usize..64) {
        let pair = MeshPair::new(n, n).unwrap();
        let t = seed % pair.coarse.element_count();
        let p = build_patch(&pair, t, k).unwrap();
        let q = build_patch(&pair, t, k + 1).unwrap();
        prop_assert!(p.elements.contains(&t));
        prop_assert!(p.elements.len() <= (2 * k + 1).pow(2));
        prop_assert!(p.elements.len() <= patch_count_bound(&pair.coarse, k));
        prop_assert!(p.elements.iter().all(|e| q.elements.contains(e)));
        prop_assert!(p.fine_interior_nodes.iter().all(|v| q.fine_interior_nodes.contains(v)));
    }

    #[test]
    fn projectivity_on_random_pairs((n, r) in coarse_and_ratio(), values in prop::collection::vec(-1.0f64..1.0, 49)) {
        let tr = TransferOperators::new(MeshPair::new(n, n * r).unwrap()).unwrap();
        let coarse = tr.pair().coarse;
        let free: Vec<f64> = values.iter().copied().cycle().take(coarse.free_count()).collect();
        let w = NodalVector::from_free(coarse, Scale::Coarse, &free).unwrap();
        let back = tr.interpolate(&tr.prolong(&w).unwrap()).unwrap();
        prop_assert!(back.axpy(-1.0, &w).unwrap().max_abs() <= 1e-10);
    }

    #[test]
    fn stiffness_is_linear_in_the_coefficient(a in prop::collection::vec(0.01f64..10.0, 16), b in prop::collection::vec(0.01f64..10.0, 16), s in -3.0f64..3.0) {
        let mesh = StructuredMesh::new(4).unwrap();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + s * y).collect();
        let lhs = assemble_stiffness(&mesh, &sum).unwrap().to_dense();
        let ka = assemble_stiffness(&mesh, &a).unwrap().to_dense();
        let kb = assemble_stiffness(&mesh, &b).unwrap().to_dense();
        for i in 0..lhs.nrows() {
            for j in 0..lhs.ncols() {
                prop_assert!((lhs[(i, j)] - ka[(i, j)] - s * kb[(i, j)]).abs() <= 1e-12 * (1.0 + lhs[(i, j)].abs()));
            }
        }
    }

    #[test]
    fn relative_errors_are_homogeneous(scale in prop::sample::select(vec![-3.0f64, -0.5, 1e-3, 2.0, 1e4]), shift in 0.0f64..1.0) {
        let tr = TransferOperators::new(MeshPair::new(2, 8).unwrap()).unwrap();
        let fine = tr.pair().fine;
        let u = NodalVector::interpolate_fn(fine, Scale::Fine, |x, y| x * (1.0 - x) * y * (1.0 - y));
        let v = NodalVector::interpolate_fn(fine, Scale::Fine, |x, y| (x + shift) * x * (1.0 - x) * y * (1.0 - y));
        let base = relative_errors(&u, &v, &tr).unwrap();
        let scaled = relative_errors(&u.scaled(scale), &v.scaled(scale), &tr).unwrap();
        prop_assert!((base.e_lod - scaled.e_lod).abs() <= 1e-12 * (1.0 + base.e_lod));
        prop_assert!((base.e_h - scaled.e_h).abs() <= 1e-12 * (1.0 + base.e_h));
    }

    #[test]
    fn sparse_vectors_roundtrip(values in prop::collection::vec(prop_oneof![Just(0.0f64), -5.0f64..5.0], 0..40)) {
        let s = SparseVec::from_dense(&values);
        prop_assert!(s.values.iter().all(|v| *v != 0.0));
        prop_assert_eq!(s.to_dense(values.len()), values);
    }

    #[test]
    fn solution_bytes_roundtrip(n in 1usize..6, values in prop::collection::vec(-1e3f64..1e3, 49)) {
        let mesh = StructuredMesh::new(n).unwrap();
        let v: Vec<f64> = values.into_iter().take(mesh.node_count()).collect();
        let u = NodalVector::from_values(mesh, Scale::Fine, v).unwrap();
        prop_assert_eq!(solution_from_bytes(&solution_to_bytes(&u).unwrap()).unwrap(), u);
    }

    #[test]
    fn p_star_text_roundtrip(n in 1usize..128, k in 0usize..6, depth in 0usize..3) {
        let mut spec = PStarSpec::G1;
        for _ in 0..depth {
            spec = PStarSpec::Ulod { coarse_n: n, k, inner: Box::new(spec) };
        }
        for s in [spec, PStarSpec::CoarseFem(n), PStarSpec::Zero, PStarSpec::Reference] {
            prop_assert_eq!(s.to_string().parse::<PStarSpec>().unwrap(), s);
        }
    }
}
