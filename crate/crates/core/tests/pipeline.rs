//! End-to-end behaviour of the multiscale pipeline on small meshes.

use quasilod::analysis::{corrected_interpolant, relative_errors};
use quasilod::corrector::{build_linearization, frechet_coercivity_precheck, Linearization};
use quasilod::fem::{h1_seminorm, NodalVector, Scale};
use quasilod::harness::table::Status;
use quasilod::harness::{ExperimentConfig, ModelId, PStarSpec, Workbench};
use quasilod::interpolation::TransferOperators;
use quasilod::mesh::MeshPair;
use quasilod::solver::{
    assemble_source, iterate_lod, solve_lod, solve_reference, LodProblem, MultiscaleBasis, TestSpace,
};

fn small(model: ModelId) -> ExperimentConfig {
    ExperimentConfig { model, fine_n: 64, coarse_n: vec![4, 8], k: vec![1, 2], ..ExperimentConfig::default() }
}

/// For a linear symmetric problem with full-domain correctors the Galerkin
/// solution is the corrected interpolant of the fine solution.
#[test]
fn ideal_linear_lod_is_corrected_interpolant() {
    let cfg = ExperimentConfig { model: ModelId::Linear, fine_n: 64, ..ExperimentConfig::default() };
    let bench = Workbench::new(cfg.clone()).unwrap();
    let zero = NodalVector::zeros(bench.fine, Scale::Fine);
    let (u_h, trace) = solve_reference(&bench.coeff, &bench.load, cfg.options(), &zero).unwrap();
    assert_eq!(trace.iterations, 1);

    let tr = TransferOperators::new(MeshPair::new(4, 64).unwrap()).unwrap();
    let lin = build_linearization(&bench.coeff, Linearization::Kacanov, &zero).unwrap();
    let set = assemble_source(&tr, &lin, 3).unwrap();
    let basis = MultiscaleBasis::new(&tr, &set).unwrap();
    let (u, trace) =
        solve_lod(&basis, &tr, &bench.coeff, &bench.load, cfg.options(), &zero, TestSpace::Galerkin, None).unwrap();
    assert_eq!(trace.iterations, 1);
    let oracle = corrected_interpolant(&basis, &tr, &u_h).unwrap();
    let diff = u.axpy(-1.0, &oracle).unwrap();
    assert!(diff.max_abs() <= 1e-10 * oracle.max_abs(), "{}", diff.max_abs());
}

#[test]
fn petrov_galerkin_tracks_galerkin() {
    let mut bench = Workbench::new(ExperimentConfig { max_iter: 50, ..small(ModelId::Exp2) }).unwrap();
    let reference = bench.reference().unwrap().0.clone();
    let zero = NodalVector::zeros(bench.fine, Scale::Fine);
    let g = bench.run_lod(8, 2, Linearization::Kacanov, TestSpace::Galerkin, &zero, false).unwrap();
    let pg = bench.run_lod(8, 2, Linearization::Kacanov, TestSpace::PetrovGalerkin, &zero, false).unwrap();
    let tr = bench.transfer(8).unwrap();
    let eg = relative_errors(&reference, &g.solution, tr).unwrap().e_lod;
    let epg = relative_errors(&reference, &pg.solution, tr).unwrap().e_lod;
    assert!(g.trace.converged && pg.trace.converged);
    assert!(epg < 2.0 * eg && eg < 2.0 * epg, "galerkin {eg}, petrov-galerkin {epg}");
}

#[test]
fn single_stage_cascade_equals_single_solve() {
    let bench = Workbench::new(small(ModelId::Exp2)).unwrap();
    let tr = TransferOperators::new(MeshPair::new(4, 64).unwrap()).unwrap();
    let problem = LodProblem {
        transfer: &tr,
        coeff: &bench.coeff,
        load: &bench.load,
        k: 1,
        kind: Linearization::Frechet,
        mode: TestSpace::Galerkin,
        options: bench.config.options(),
        reference: None,
    };
    let p = NodalVector::interpolate_fn(bench.fine, Scale::Fine, PStarSpec::g);
    let stages = iterate_lod(&problem, 1, &p, &mut assemble_source).unwrap();
    let single = problem.run(&p, &mut assemble_source).unwrap();
    assert_eq!(stages.len(), 1);
    assert_eq!(stages[0].solution, single.solution);
    assert!(iterate_lod(&problem, 0, &p, &mut assemble_source).is_err());

    let two = iterate_lod(&problem, 2, &p, &mut assemble_source).unwrap();
    assert_eq!(two[1].p_star, two[0].solution);
}

#[test]
fn coarse_equal_to_fine_reproduces_reference() {
    let cfg = ExperimentConfig { coarse_n: vec![64], ..small(ModelId::Exp2) };
    let out = Workbench::new(cfg).unwrap().run_study().unwrap();
    assert_eq!(out.rows.len(), 2);
    for row in &out.rows {
        assert_eq!(row.status, Status::Ok);
        assert!(row.e_lod < 1e-9, "{}", row.e_lod);
    }
}

#[test]
fn frechet_precheck_flags_steep_linearization_point() {
    let bench = Workbench::new(small(ModelId::Exp2)).unwrap();
    let g1 = NodalVector::interpolate_fn(bench.fine, Scale::Fine, PStarSpec::g1);
    let lin = build_linearization(&bench.coeff, Linearization::Frechet, &g1).unwrap();
    assert!(frechet_coercivity_precheck(&lin, 1.0 / 8.0) > 10.0);
    let zero = NodalVector::zeros(bench.fine, Scale::Fine);
    let lin = build_linearization(&bench.coeff, Linearization::Frechet, &zero).unwrap();
    assert_eq!(frechet_coercivity_precheck(&lin, 1.0 / 8.0), 0.0);
}

#[test]
fn every_model_runs_a_small_study() {
    for model in [ModelId::Exp4, ModelId::Vg, ModelId::CombinedVg, ModelId::CombinedExpVg] {
        let cfg = ExperimentConfig { coarse_n: vec![4], k: vec![1], ..small(model) };
        let out = Workbench::new(cfg).unwrap().run_study().unwrap();
        assert!(out.all_ok(), "{model:?}");
        assert!(out.rows[0].e_lod > 0.0 && out.rows[0].e_lod < 1.0, "{model:?}: {}", out.rows[0].e_lod);
    }
}

#[test]
fn cached_runs_match_fresh_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { cache_dir: Some(dir.path().to_path_buf()), ..small(ModelId::Exp2) };
    let fresh = Workbench::new(small(ModelId::Exp2)).unwrap().run_study().unwrap();
    let first = Workbench::new(cfg.clone()).unwrap().run_study().unwrap();
    let bench = Workbench::new(cfg.clone()).unwrap();
    let stored = bench.cache().unwrap().entries().unwrap();
    // Four corrector sets plus the reference solution.
    assert_eq!(stored.len(), 5);
    let second = Workbench::new(cfg).unwrap().run_study().unwrap();
    assert_eq!(fresh.rows, first.rows);
    assert_eq!(first.rows, second.rows);
}

#[test]
fn iteration_study_starts_at_the_initial_guess() {
    let cfg = ExperimentConfig { fine_n: 64, coarse_n: vec![8], ..ExperimentConfig::iteration_default() };
    let mut bench = Workbench::new(cfg).unwrap();
    let rows = bench.run_iteration_study().unwrap();
    assert_eq!(rows[0].iteration, 0);
    // u0 = p* = 0 has relative error one.
    assert!((rows[0].e_lod - 1.0).abs() < 1e-12);
    assert!(rows.windows(2).all(|w| w[1].iteration == w[0].iteration + 1));
    assert_eq!(rows.len(), bench.config.max_iter + 1);

    // The last row is the error of the study's solution at the same point.
    let zero = NodalVector::zeros(bench.fine, Scale::Fine);
    let stage = bench.run_lod(8, 4, Linearization::Kacanov, TestSpace::Galerkin, &zero, false).unwrap();
    let reference = bench.reference().unwrap().0.clone();
    let e = relative_errors(&reference, &stage.solution, bench.transfer(8).unwrap()).unwrap().e_lod;
    assert_eq!(rows.last().unwrap().e_lod, e);
}

#[test]
fn ulod_point_is_a_lod_solution() {
    let cfg = small(ModelId::Exp2);
    let mut bench = Workbench::new(cfg).unwrap();
    let p = bench.p_star(&"ulod(8;1;zero)".parse().unwrap()).unwrap();
    let zero = NodalVector::zeros(bench.fine, Scale::Fine);
    let direct = bench.run_lod(8, 1, Linearization::Kacanov, TestSpace::Galerkin, &zero, false).unwrap();
    assert_eq!(p, direct.solution);
    assert!(h1_seminorm(&p) > 0.0);
}
