use std::collections::HashMap;
use std::time::Instant;

use crate::analysis::relative_errors;
use crate::coefficient::CombinedCoefficient;
use crate::corrector::{
    build_linearization, frechet_coercivity_precheck, CorrectorSet, Linearization, LinearizationData,
};
use crate::error::{LodError, Result};
use crate::fem::{assemble_load, NodalVector, Scale};
use crate::harness::cache::Cache;
use crate::harness::config::{ExperimentConfig, PStarSpec};
use crate::harness::table::{IterationRow, Status, StudyRow};
use crate::interpolation::TransferOperators;
use crate::mesh::{MeshPair, StructuredMesh};
use crate::solver::{
    assemble_source, solve_lod, solve_reference, LodProblem, MultiscaleBasis, SolveTrace, Stage, TestSpace,
};

/// Shared state of one experiment: coefficient, load, reference solution and
/// cached transfer operators.
pub struct Workbench {
    pub config: ExperimentConfig,
    pub fine: StructuredMesh,
    pub coeff: CombinedCoefficient,
    pub load: NodalVector,
    cache: Option<Cache>,
    reference: Option<(NodalVector, SolveTrace)>,
    transfers: HashMap<usize, TransferOperators>,
}

/// Timing of one study row, kept apart from the reproducible table.
#[derive(Debug, Clone, PartialEq)]
pub struct RowTiming {
    pub h: f64,
    pub k: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct StudyOutput {
    pub rows: Vec<StudyRow>,
    pub timings: Vec<RowTiming>,
    /// Solve traces in row order; `None` for failed rows.
    pub traces: Vec<Option<SolveTrace>>,
}

impl StudyOutput {
    pub fn all_ok(&self) -> bool {
        self.rows.iter().all(|r| r.status == Status::Ok)
    }
}

impl Workbench {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let fine = config.fine_mesh()?;
        let coeff = config.model.coefficient(fine, config.seed)?;
        let load = assemble_load(&fine, &config.rhs.source(), Scale::Fine);
        let cache = config.cache_dir.clone().map(Cache::new);
        Ok(Self { config, fine, coeff, load, cache, reference: None, transfers: HashMap::new() })
    }

    pub fn cache(&self) -> Option<&Cache> {
        self.cache.as_ref()
    }

    pub fn transfer(&mut self, coarse_n: usize) -> Result<&TransferOperators> {
        if !self.transfers.contains_key(&coarse_n) {
            let t = TransferOperators::new(MeshPair::new(coarse_n, self.fine.n())?)?;
            self.transfers.insert(coarse_n, t);
        }
        Ok(&self.transfers[&coarse_n])
    }

    /// Fine Kačanov solution from `u0 = 0`, cached on disk when a cache is set.
    pub fn reference(&mut self) -> Result<&(NodalVector, SolveTrace)> {
        if self.reference.is_none() {
            let options = self.config.reference_options();
            let key = Cache::reference_key(&self.coeff, &self.load, options);
            let cached = self.cache.as_ref().and_then(|c| match c.load_reference(&key) {
                crate::harness::cache::Lookup::Hit(u) => Some(u),
                crate::harness::cache::Lookup::Miss => None,
            });
            let entry = match cached {
                Some(u) => (u, SolveTrace { converged: true, ..SolveTrace::default() }),
                None => {
                    let zero = NodalVector::zeros(self.fine, Scale::Fine);
                    let (u, trace) = solve_reference(&self.coeff, &self.load, options, &zero)?;
                    // Only converged solutions are worth reusing as the truth.
                    if let Some(c) = self.cache.as_ref().filter(|_| trace.converged) {
                        c.store_reference(&key, &u)?;
                    }
                    log::info!(
                        "reference: {} iterations, last increment {:.3e}",
                        trace.iterations,
                        trace.last_increment().unwrap_or(0.0)
                    );
                    (u, trace)
                }
            };
            self.reference = Some(entry);
        }
        Ok(self.reference.as_ref().unwrap())
    }

    fn correctors(&self, transfer: &TransferOperators, lin: &LinearizationData, k: usize) -> Result<CorrectorSet> {
        match &self.cache {
            Some(c) => c.correctors(transfer, lin, k),
            None => assemble_source(transfer, lin, k),
        }
    }

    /// Builds the corrector set for `(coarse_n, k)` linearized at `p_star`.
    pub fn corrector_set(&mut self, coarse_n: usize, k: usize, kind: Linearization, p_star: &NodalVector) -> Result<CorrectorSet> {
        self.transfer(coarse_n)?;
        let lin = build_linearization(&self.coeff, kind, p_star)?;
        if kind == Linearization::Frechet {
            let v = frechet_coercivity_precheck(&lin, 1.0 / coarse_n as f64);
            if v >= 1.0 {
                log::warn!("H·sup|β| = {v:.3e} ≥ 1 at H=1/{coarse_n}; Fréchet corrector problems may be ill-posed");
            }
        }
        self.correctors(&self.transfers[&coarse_n], &lin, k)
    }

    /// One LOD pipeline run: correctors at `p_star`, then Kačanov from `u0 = p*`.
    pub fn run_lod(
        &mut self,
        coarse_n: usize,
        k: usize,
        kind: Linearization,
        mode: TestSpace,
        p_star: &NodalVector,
        track_errors: bool,
    ) -> Result<Stage> {
        if track_errors {
            self.reference()?;
        }
        self.transfer(coarse_n)?;
        let problem = LodProblem {
            transfer: &self.transfers[&coarse_n],
            coeff: &self.coeff,
            load: &self.load,
            k,
            kind,
            mode,
            options: self.config.options(),
            reference: if track_errors { self.reference.as_ref().map(|r| &r.0) } else { None },
        };
        let cache = self.cache.clone();
        let mut source = |t: &TransferOperators, lin: &LinearizationData, k: usize| match &cache {
            Some(c) => c.correctors(t, lin, k),
            None => assemble_source(t, lin, k),
        };
        problem.run(p_star, &mut source)
    }

    /// Coarse finite element solution, prolonged to the fine mesh.
    pub fn coarse_fem(&mut self, coarse_n: usize) -> Result<NodalVector> {
        self.transfer(coarse_n)?;
        let transfer = &self.transfers[&coarse_n];
        let pair = *transfer.pair();
        let empty = CorrectorSet {
            pair,
            k: 0,
            kind: Linearization::Kacanov,
            fingerprint: [0; 32],
            correctors: vec![Default::default(); pair.coarse.free_count()],
        };
        let basis = MultiscaleBasis::new(transfer, &empty)?;
        let zero = NodalVector::zeros(self.fine, Scale::Fine);
        let (u, trace) = solve_lod(&basis, transfer, &self.coeff, &self.load, self.config.options(), &zero, TestSpace::Galerkin, None)?;
        if !trace.converged {
            log::warn!("coarse FEM solve on H=1/{coarse_n} stopped after {} iterations", trace.iterations);
        }
        Ok(u)
    }

    /// Evaluates a linearization point on the fine mesh.
    pub fn p_star(&mut self, spec: &PStarSpec) -> Result<NodalVector> {
        Ok(match spec {
            PStarSpec::Zero => NodalVector::zeros(self.fine, Scale::Fine),
            PStarSpec::G => NodalVector::interpolate_fn(self.fine, Scale::Fine, PStarSpec::g),
            PStarSpec::G1 => NodalVector::interpolate_fn(self.fine, Scale::Fine, PStarSpec::g1),
            PStarSpec::CoarseFem(n) => self.coarse_fem(*n)?,
            PStarSpec::Reference => self.reference()?.0.clone(),
            PStarSpec::Ulod { coarse_n, k, inner } => {
                let p = self.p_star(inner)?;
                self.run_lod(*coarse_n, *k, Linearization::Kacanov, TestSpace::Galerkin, &p, false)?.solution
            }
        })
    }

    fn row(&self, h: f64, k: usize, iterations: usize, e_lod: f64, e_h: f64, wall_ms: f64, status: Status) -> StudyRow {
        StudyRow {
            model: self.config.model.name().into(),
            linearization: self.config.linearization.name().into(),
            p_star: self.config.p_star.to_string(),
            h,
            k,
            iterations,
            e_lod,
            e_h,
            wall_ms: if self.config.record_wall_time { wall_ms } else { 0.0 },
            status,
        }
    }

    /// Coarse sizes in order of increasing `H`.
    fn coarse_order(&self) -> Vec<usize> {
        let mut ns = self.config.coarse_n.clone();
        ns.sort_unstable_by(|a, b| b.cmp(a));
        ns.dedup();
        ns
    }

    fn sorted_k(&self) -> Vec<usize> {
        let mut ks = self.config.k.clone();
        ks.sort_unstable();
        ks.dedup();
        ks
    }

    /// One row per `(H, k)`, `H` ascending then `k` ascending. Failures are
    /// recorded in the row status; the study continues.
    pub fn run_study(&mut self) -> Result<StudyOutput> {
        let reference = self.reference()?.0.clone();
        let p_star = self.p_star(&self.config.p_star.clone())?;
        let (kind, mode) = (self.config.linearization, self.config.test_space);
        let mut out = StudyOutput { rows: Vec::new(), timings: Vec::new(), traces: Vec::new() };
        for n in self.coarse_order() {
            let h = 1.0 / n as f64;
            for k in self.sorted_k() {
                let start = Instant::now();
                let result = self.run_lod(n, k, kind, mode, &p_star, false).and_then(|stage| {
                    let report = relative_errors(&reference, &stage.solution, &self.transfers[&n])?;
                    Ok((stage.trace, report))
                });
                let wall_ms = start.elapsed().as_secs_f64() * 1e3;
                let (row, trace) = match result {
                    Ok((trace, rep)) => {
                        let finite = rep.e_lod.is_finite() && rep.e_h.is_finite();
                        let status = if finite { Status::Ok } else { Status::Failed };
                        if !trace.converged {
                            log::warn!("H=1/{n}, k={k}: no convergence in {} iterations", trace.iterations);
                        }
                        (self.row(h, k, trace.iterations, rep.e_lod, rep.e_h, wall_ms, status), Some(trace))
                    }
                    Err(e) => {
                        log::warn!("H=1/{n}, k={k} failed: {e}");
                        (self.row(h, k, 0, f64::NAN, f64::NAN, wall_ms, Status::Failed), None)
                    }
                };
                log::info!("H=1/{n} k={k}: e_lod={:.4e} e_h={:.4e} [{:?}]", row.e_lod, row.e_h, row.status);
                out.rows.push(row);
                out.timings.push(RowTiming { h, k, wall_ms });
                out.traces.push(trace);
            }
        }
        Ok(out)
    }

    /// Relative H¹ error after every iteration, starting with `u0 = p*`.
    pub fn run_iteration_study(&mut self) -> Result<Vec<IterationRow>> {
        self.reference()?;
        let p_star = self.p_star(&self.config.p_star.clone())?;
        let (kind, mode) = (self.config.linearization, self.config.test_space);
        let mut rows = Vec::new();
        for n in self.coarse_order() {
            for k in self.sorted_k() {
                let (model, p_name) = (self.config.model.name(), self.config.p_star.to_string());
                let base = |iteration, e_lod, status| IterationRow {
                    model: model.into(),
                    linearization: kind.name().into(),
                    p_star: p_name.clone(),
                    h: 1.0 / n as f64,
                    k,
                    iteration,
                    e_lod,
                    status,
                };
                match self.run_lod(n, k, kind, mode, &p_star, true) {
                    Ok(stage) => {
                        rows.extend(stage.trace.errors.iter().enumerate().map(|(i, &e)| {
                            base(i, e, if e.is_finite() { Status::Ok } else { Status::Failed })
                        }));
                    }
                    Err(e) => {
                        log::warn!("H=1/{n}, k={k} failed: {e}");
                        rows.push(base(0, f64::NAN, Status::Failed));
                    }
                }
            }
        }
        Ok(rows)
    }

    /// Stages of the iterated method at one `(H, k)`, with relative errors.
    pub fn run_cascade(&mut self, coarse_n: usize, k: usize, stages: usize) -> Result<Vec<(Stage, f64)>> {
        if stages == 0 {
            return Err(LodError::InvalidArgument("at least one stage is required".into()));
        }
        let reference = self.reference()?.0.clone();
        let mut p = self.p_star(&self.config.p_star.clone())?;
        let mut out = Vec::with_capacity(stages);
        for _ in 0..stages {
            let stage = self.run_lod(coarse_n, k, self.config.linearization, self.config.test_space, &p, false)?;
            let e = relative_errors(&reference, &stage.solution, &self.transfers[&coarse_n])?.e_lod;
            p = stage.solution.clone();
            out.push((stage, e));
        }
        Ok(out)
    }
}
