use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use quasilod::corrector::Linearization;
use quasilod::harness::cache::{hex, Cache};
use quasilod::harness::plot::{render_svg, Axes, GroupBy, Metric};
use quasilod::harness::table::{read_study, write_table, ITERATION_HEADER, STUDY_HEADER};
use quasilod::harness::{ExperimentConfig, ModelId, PStarSpec, RhsId, Workbench};
use quasilod::solver::{write_solution, TestSpace};

#[derive(Parser)]
#[command(name = "quasilod", version, about = "LOD experiments for nonmonotone quasilinear elliptic problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the spatial coefficient field and write it as LODF.
    GenCoefficient {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the fine reference problem and write it as LODU.
    SolveReference {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute a corrector set at one (H, k) and write it as LODC.
    Correctors {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        at: Point,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the multiscale problem at one (H, k) and write it as LODU.
    SolveLod {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        at: Point,
        #[arg(long)]
        out: PathBuf,
        /// Also compute the errors against the reference solution.
        #[arg(long)]
        errors: bool,
    },
    /// Run the (H, k) convergence sweep and write study.csv.
    Study {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Record the error after every nonlinear iteration and write iterations.csv.
    IterationStudy {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Render a study table as a log-log SVG.
    Plot {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "e-lod")]
        metric: MetricArg,
        #[arg(long, value_enum, default_value = "k")]
        group_by: GroupArg,
    },
    /// Inspect or clear a cache directory.
    Cache {
        #[arg(value_enum)]
        action: CacheAction,
        #[arg(long)]
        cache_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    ELod,
    EH,
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupArg {
    K,
    PStar,
    Linearization,
}

#[derive(Clone, Copy, ValueEnum)]
enum CacheAction {
    Inspect,
    Clear,
}

#[derive(Args)]
struct Point {
    /// Coarse elements per side.
    #[arg(long)]
    coarse: usize,
    /// Oversampling layers.
    #[arg(long)]
    k: usize,
}

/// Experiment settings; each flag overrides the config file.
#[derive(Args, Default)]
struct ConfigArgs {
    /// TOML file with any subset of the experiment settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    rhs: Option<String>,
    #[arg(long)]
    fine_n: Option<usize>,
    /// Comma-separated coarse element counts, e.g. 4,8,16.
    #[arg(long, value_delimiter = ',')]
    coarse_n: Option<Vec<usize>>,
    /// Comma-separated oversampling layers.
    #[arg(long = "k-list", value_delimiter = ',')]
    k_list: Option<Vec<usize>>,
    #[arg(long)]
    linearization: Option<String>,
    #[arg(long)]
    test_space: Option<String>,
    /// zero, g, g1, coarse_fem(32), reference, ulod or ulod(n;k;inner).
    #[arg(long)]
    p_star: Option<String>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    reference_max_iter: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    record_wall_time: bool,
}

impl ConfigArgs {
    fn resolve(&self, base: ExperimentConfig) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => base,
        };
        if let Some(v) = &self.model {
            c.model = v.parse::<ModelId>()?;
        }
        if let Some(v) = &self.rhs {
            c.rhs = v.parse::<RhsId>()?;
        }
        if let Some(v) = self.fine_n {
            c.fine_n = v;
        }
        if let Some(v) = &self.coarse_n {
            c.coarse_n = v.clone();
        }
        if let Some(v) = &self.k_list {
            c.k = v.clone();
        }
        if let Some(v) = &self.linearization {
            c.linearization = v.parse::<Linearization>()?;
        }
        if let Some(v) = &self.test_space {
            c.test_space = v.parse::<TestSpace>()?;
        }
        if let Some(v) = &self.p_star {
            c.p_star = v.parse::<PStarSpec>()?;
        }
        if let Some(v) = self.tol {
            c.tol = v;
        }
        if let Some(v) = self.max_iter {
            c.max_iter = v;
        }
        if let Some(v) = self.reference_max_iter {
            c.reference_max_iter = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.cache_dir {
            c.cache_dir = Some(v.clone());
        }
        if let Some(v) = &self.output_dir {
            c.output_dir = v.clone();
        }
        c.record_wall_time |= self.record_wall_time;
        c.validate()?;
        Ok(c)
    }
}

fn write_timings(dir: &Path, timings: &[quasilod::harness::study::RowTiming]) -> Result<()> {
    let mut text = String::from("H,k,wall_ms\n");
    for t in timings {
        text.push_str(&format!("{},{},{:.3}\n", t.h, t.k, t.wall_ms));
    }
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("timings.csv"), text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenCoefficient { cfg, out } => {
            let c = cfg.resolve(ExperimentConfig::default())?;
            let bench = Workbench::new(c)?;
            let field = &bench.coeff.terms().last().expect("at least one term").0;
            field.write(&out)?;
            println!("wrote {} (min {:.4e}, max {:.4e}, contrast {:.1})", out.display(), field.min(), field.max(), field.contrast());
        }
        Command::SolveReference { cfg, out } => {
            let mut bench = Workbench::new(cfg.resolve(ExperimentConfig::default())?)?;
            let (u, trace) = bench.reference()?.clone();
            write_solution(&out, &u)?;
            println!("wrote {} after {} iterations (converged: {})", out.display(), trace.iterations, trace.converged);
            return Ok(trace.converged);
        }
        Command::Correctors { cfg, at, out } => {
            let c = cfg.resolve(ExperimentConfig::default())?;
            let (kind, spec) = (c.linearization, c.p_star.clone());
            let mut bench = Workbench::new(c)?;
            let p = bench.p_star(&spec)?;
            let set = bench.corrector_set(at.coarse, at.k, kind, &p)?;
            set.write(&out)?;
            println!("wrote {} ({} correctors, fingerprint {})", out.display(), set.correctors.len(), hex(&set.fingerprint));
        }
        Command::SolveLod { cfg, at, out, errors } => {
            let c = cfg.resolve(ExperimentConfig::default())?;
            let (kind, mode, spec) = (c.linearization, c.test_space, c.p_star.clone());
            let mut bench = Workbench::new(c)?;
            let p = bench.p_star(&spec)?;
            let stage = bench.run_lod(at.coarse, at.k, kind, mode, &p, errors)?;
            write_solution(&out, &stage.solution)?;
            println!("wrote {} after {} iterations (converged: {})", out.display(), stage.trace.iterations, stage.trace.converged);
            if errors {
                let reference = bench.reference()?.0.clone();
                let tr = bench.transfer(at.coarse)?;
                let rep = quasilod::analysis::relative_errors(&reference, &stage.solution, tr)?;
                println!("e_lod = {:e}\ne_h = {:e}", rep.e_lod, rep.e_h);
            }
            return Ok(stage.trace.converged);
        }
        Command::Study { cfg } => {
            let c = cfg.resolve(ExperimentConfig::default())?;
            let dir = c.output_dir.clone();
            let mut bench = Workbench::new(c)?;
            let out = bench.run_study()?;
            let path = dir.join("study.csv");
            write_table(&path, &out.rows, STUDY_HEADER)?;
            write_timings(&dir, &out.timings)?;
            println!("wrote {} ({} rows)", path.display(), out.rows.len());
            return Ok(out.all_ok());
        }
        Command::IterationStudy { cfg } => {
            let c = cfg.resolve(ExperimentConfig::iteration_default())?;
            let dir = c.output_dir.clone();
            let mut bench = Workbench::new(c)?;
            let rows = bench.run_iteration_study()?;
            let path = dir.join("iterations.csv");
            write_table(&path, &rows, ITERATION_HEADER)?;
            println!("wrote {} ({} rows)", path.display(), rows.len());
            return Ok(rows.iter().all(|r| r.status == quasilod::harness::table::Status::Ok));
        }
        Command::Plot { table, out, metric, group_by } => {
            let rows = read_study(&table)?;
            let axes = Axes {
                metric: match metric {
                    MetricArg::ELod => Metric::ELod,
                    MetricArg::EH => Metric::EH,
                },
                group_by: match group_by {
                    GroupArg::K => GroupBy::K,
                    GroupArg::PStar => GroupBy::PStar,
                    GroupArg::Linearization => GroupBy::Linearization,
                },
            };
            let svg = render_svg(&rows, axes)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&out, svg)?;
            println!("wrote {}", out.display());
        }
        Command::Cache { action, cache_dir } => {
            let cache = Cache::new(cache_dir);
            match action {
                CacheAction::Inspect => {
                    for e in cache.entries()? {
                        match e.header {
                            Some(h) => println!(
                                "{}\t{} bytes\tH=1/{} h=1/{} k={} {} {}",
                                e.path.display(),
                                e.bytes,
                                h.coarse_n,
                                h.fine_n,
                                h.k,
                                h.kind.name(),
                                &hex(&h.fingerprint)[..16]
                            ),
                            None => println!("{}\t{} bytes", e.path.display(), e.bytes),
                        }
                    }
                }
                CacheAction::Clear => println!("removed {} files", cache.clear()?),
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
