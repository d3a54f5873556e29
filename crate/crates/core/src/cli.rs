//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{custom_defaults, ConfigFile};
use crate::error::{invalid, Result};
use crate::experiments::{identify_from_samples, make_example, run_example, ExampleOutcome, ExampleSpec, OutputPlan};
use crate::fem::{assemble_mass, assemble_stiffness};
use crate::forward::{eval_constraint, solve_state, ConstraintModel, Problem};
use crate::kl::{matrix_to_csv, KlModel, SampleData};
use crate::linalg::to_dense;
use crate::mesh::{build_interval_mesh, build_unit_square_mesh, refine_uniform, FeSpace};
use crate::optimizer::{auglag_value, grad_q, grad_u, run, AugLagState, RunConfig};
use crate::sparse_grid::build_sparse_grid;
use crate::stochastic::DensityModel;

#[derive(Debug, Parser)]
#[command(
    name = "stochident",
    version,
    about = "Identify uncertain diffusion coefficients from stochastic data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one of the three reference examples.
    RunExample(CommonArgs),
    /// Identify a coefficient from a sample matrix (vertices × samples, headerless CSV).
    RunCustom {
        data: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Fit and report the Karhunen-Loève model of a sample matrix.
    KlAnalyze {
        data: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run a quick self-check of the numerical building blocks.
    Check,
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Reference example id.
    #[arg(long)]
    pub id: Option<u8>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; all cores by default.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Regularization weight; replaces the example's weight list.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Sparse-grid level.
    #[arg(long)]
    pub level: Option<u32>,
    /// Outer stopping tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
}

const DEFAULT_SEED: u64 = 7;

impl CommonArgs {
    /// Configuration file merged with command-line overrides.
    fn config(&self) -> Result<ConfigFile> {
        let mut cfg = match &self.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        if self.id.is_some() {
            cfg.example = self.id;
        }
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        if let Some(b) = self.beta {
            cfg.beta = Some(b);
            cfg.beta_variants = None;
        }
        if self.level.is_some() {
            cfg.level = self.level;
        }
        if self.tol.is_some() {
            cfg.outer_tol = self.tol;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn setup_threads(&self) -> Result<()> {
        if let Some(n) = self.threads {
            if n == 0 {
                return Err(invalid("--threads must be positive"));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| invalid(format!("thread pool: {e}")))?;
        }
        Ok(())
    }
}

fn provenance(spec: &ExampleSpec, seed: u64) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(ConfigFile::from_spec(spec, seed))?)
}

fn report(outcome: &ExampleOutcome) -> ExitCode {
    for (s, _) in &outcome.variants {
        let err = s.final_l2_error.map_or("n/a".to_string(), |e| format!("{e:.4e}"));
        println!(
            "beta={:e} converged={} iterations={} l2_error={} constraint={:.3e} time={:.1}s",
            s.beta, s.converged, s.iterations, err, s.final_constraint_norm, s.seconds
        );
    }
    if outcome.converged() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

fn read_samples(path: &Path) -> Result<SampleData> {
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
    SampleData::from_csv(&text)
}

fn run_command(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::RunExample(args) => {
            args.setup_threads()?;
            let cfg = args.config()?;
            let id = cfg
                .example
                .ok_or_else(|| invalid("run-example needs --id or an \"example\" key"))?;
            let spec = cfg.apply(make_example(id)?)?;
            let seed = cfg.seed.unwrap_or(DEFAULT_SEED);
            let plan = OutputPlan {
                dir: args.out.as_deref(),
                provenance: provenance(&spec, seed)?,
            };
            let outcome = run_example(&spec, seed, &plan)?;
            Ok(report(&outcome))
        }
        Command::RunCustom { data, common } => {
            common.setup_threads()?;
            let cfg = common.config()?;
            let samples = read_samples(&data)?;
            let spec = cfg.resolve(custom_defaults())?;
            let seed = cfg.seed.unwrap_or(DEFAULT_SEED);
            let plan = OutputPlan {
                dir: common.out.as_deref(),
                provenance: provenance(&spec, seed)?,
            };
            let outcome = identify_from_samples(&spec, &samples, None, seed, &plan)?;
            Ok(report(&outcome))
        }
        Command::KlAnalyze { data, common } => {
            common.setup_threads()?;
            let cfg = common.config()?;
            let samples = read_samples(&data)?;
            let spec = cfg.resolve(custom_defaults())?;
            let (_, fine) = spec.meshes()?;
            if samples.n_dofs() != fine.n_vertices() {
                return Err(invalid(format!(
                    "sample matrix has {} rows, the state mesh has {} vertices",
                    samples.n_dofs(),
                    fine.n_vertices()
                )));
            }
            let gram = to_dense(&assemble_stiffness(&FeSpace::new(fine, true), true));
            let kl = KlModel::fit(&samples, &gram, spec.kl_tol, spec.kl_max_rank)?;
            let total: f64 = kl.eigenvalues.iter().sum();
            println!("rank {} of {} samples", kl.rank, samples.n_samples());
            for (k, v) in kl.eigenvalues.iter().take(10).enumerate() {
                println!(
                    "  eigenvalue {:>2}: {v:.6e}  ({:.3e} of total)",
                    k + 1,
                    v / total.max(f64::MIN_POSITIVE)
                );
            }
            if let Some(dir) = &common.out {
                fs::create_dir_all(dir)?;
                fs::write(dir.join("kl_model.json"), serde_json::to_string_pretty(&kl)?)?;
                let ns = kl.y_samples.first().map_or(0, Vec::len);
                let y = DMatrix::from_fn(kl.rank, ns, |k, s| kl.y_samples[k][s]);
                fs::write(dir.join("y_samples.csv"), matrix_to_csv(&y))?;
                let eig = DMatrix::from_column_slice(kl.eigenvalues.len(), 1, &kl.eigenvalues);
                fs::write(dir.join("eigenvalues.csv"), matrix_to_csv(&eig))?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Check => {
            let results = self_check();
            let mut ok = true;
            for (name, outcome) in &results {
                match outcome {
                    Ok(()) => println!("PASS {name}"),
                    Err(msg) => {
                        ok = false;
                        println!("FAIL {name}: {msg}");
                    }
                }
            }
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
    }
}

/// Parses the process arguments and runs the selected command.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run_command(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

type CheckResult = std::result::Result<(), String>;

fn expect(cond: bool, msg: impl FnOnce() -> String) -> CheckResult {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn small_problem(model: ConstraintModel) -> Result<Problem> {
    let coarse = build_interval_mesh(3)?;
    let fine = refine_uniform(&coarse);
    let grid = build_sparse_grid(1, 3)?;
    let density = DensityModel::uniform_box(vec![-1.0], vec![1.0])?;
    Problem::new(
        FeSpace::new(coarse, false),
        FeSpace::new(fine, true),
        grid,
        density,
        |x| 1.0 + x[0],
        model,
    )
}

/// Invariant smoke suite behind the `check` subcommand.
pub fn self_check() -> Vec<(&'static str, CheckResult)> {
    let wrap = |r: Result<CheckResult>| r.unwrap_or_else(|e| Err(e.to_string()));
    let mut out = Vec::new();

    out.push((
        "sparse grid round trip",
        wrap((|| {
            let grid = build_sparse_grid(3, 4)?;
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let v = DMatrix::from_fn(2, grid.num_nodes(), |_, _| rng.random::<f64>());
            let back = grid.dehierarchize(&grid.hierarchize(&v)?)?;
            let err = (back - &v).amax();
            Ok(expect(err <= 1e-12, || format!("round-trip error {err:e}")))
        })()),
    ));

    out.push((
        "mass matrix integrates constants",
        wrap((|| {
            let mesh = build_unit_square_mesh(4)?;
            let m = assemble_mass(&FeSpace::new(mesh, false));
            let total: f64 = m.values().iter().sum();
            Ok(expect((total - 1.0).abs() <= 1e-12, || format!("total mass {total}")))
        })()),
    ));

    out.push((
        "state solve satisfies the constraint",
        wrap((|| {
            let p = small_problem(ConstraintModel::Collocation)?;
            let mut q = DMatrix::zeros(p.n_q(), p.n_nodes());
            q.column_mut(0).fill(2.0);
            q.column_mut(1).fill(0.5);
            let u = solve_state(&p, &q)?;
            let e = eval_constraint(&p, &q, &u)?.residual.amax();
            Ok(expect(e <= 1e-12, || format!("constraint {e:e}")))
        })()),
    ));

    out.push((
        "gradients match finite differences",
        wrap((|| {
            let p = small_problem(ConstraintModel::Collocation)?;
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut rand = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
            let mut q = rand(p.n_q(), p.n_nodes());
            q.column_mut(0).add_scalar_mut(3.0);
            let mut u = rand(p.n_u(), p.n_nodes());
            let mut lambda = rand(p.n_u(), p.n_nodes());
            let mut u_hat = rand(p.n_u(), p.n_nodes());
            let dq = rand(p.n_q(), p.n_nodes());
            let mut du = rand(p.n_u(), p.n_nodes());
            for m in [&mut u, &mut lambda, &mut u_hat, &mut du] {
                p.mask_state(m);
            }
            let state = AugLagState {
                q,
                u,
                lambda,
                penalty: 2.0,
                beta: 0.1,
                iteration: 0,
                history: Vec::new(),
            };
            let h = 1e-3;
            let fd = |dq: &DMatrix<f64>, du: &DMatrix<f64>| -> Result<f64> {
                let mut a = state.clone();
                a.q += dq * h;
                a.u += du * h;
                let mut b = state.clone();
                b.q -= dq * h;
                b.u -= du * h;
                Ok((auglag_value(&a, &u_hat, &p)? - auglag_value(&b, &u_hat, &p)?) / (2.0 * h))
            };
            let zq = DMatrix::zeros(dq.nrows(), dq.ncols());
            let zu = DMatrix::zeros(du.nrows(), du.ncols());
            let (fq, aq) = (fd(&dq, &zu)?, grad_q(&state, &p)?.dot(&dq));
            let (fu, au) = (fd(&zq, &du)?, grad_u(&state, &u_hat, &p)?.dot(&du));
            let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-300);
            Ok(expect(rel(fq, aq) <= 1e-6 && rel(fu, au) <= 1e-6, || {
                format!("q: {fq} vs {aq}, u: {fu} vs {au}")
            }))
        })()),
    ));

    out.push((
        "multiplier update identity",
        wrap((|| {
            let p = small_problem(ConstraintModel::Collocation)?;
            let mut q = DMatrix::zeros(p.n_q(), p.n_nodes());
            q.column_mut(0).fill(2.0);
            q.column_mut(2).fill(0.3);
            let mut u_hat = solve_state(&p, &q)?;
            u_hat *= 1.01;
            let cfg = RunConfig {
                max_outer: 3,
                ..RunConfig::default()
            };
            let mut worst = 0.0f64;
            run(&cfg, &u_hat, &p, None, |view| {
                let step = &view.state.lambda - view.lambda_prev - view.constraint * view.penalty_used;
                worst = worst.max(step.amax() / view.state.lambda.amax().max(1.0));
                Ok(())
            })?;
            Ok(expect(worst <= 1e-12, || format!("identity defect {worst:e}")))
        })()),
    ));

    out.push((
        "KL recovers a planted rank",
        wrap((|| {
            let coarse = build_interval_mesh(8)?;
            let fine = refine_uniform(&coarse);
            let xs: Vec<f64> = fine.vertices().iter().map(|v| v[0]).collect();
            let gram = to_dense(&assemble_stiffness(&FeSpace::new(fine, true), true));
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let data = DMatrix::from_fn(xs.len(), 200, |_, _| 0.0);
            let mut data = data;
            for s in 0..200 {
                let (a, b) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                for (i, x) in xs.iter().enumerate() {
                    let pi = std::f64::consts::PI;
                    data[(i, s)] = a * (pi * x).sin() + 0.3 * b * (2.0 * pi * x).sin();
                }
            }
            let kl = KlModel::fit(&SampleData::new(data), &gram, 1e-7, None)?;
            Ok(expect(kl.rank == 2, || format!("rank {}", kl.rank)))
        })()),
    ));
    out
}
