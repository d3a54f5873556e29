//! The three reference problems: data synthesis, identification runs,
//! moment fields and error metrics.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::fem::zero_masked;
use crate::forward::{solve_state, ConstraintModel, Problem};
use crate::kl::{matrix_to_csv, KlModel, SampleData};
use crate::linalg::{to_dense, SparseCholesky};
use crate::mesh::{build_interval_mesh, build_unit_square_mesh, refine_uniform, FeSpace, Mesh};
use crate::optimizer::{run, IterationRecord, RunConfig, RunReport};
use crate::sparse_grid::{build_sparse_grid, SparseGrid};
use crate::stochastic::DensityModel;

/// Stochastic density used for the identification grid of sampled data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityChoice {
    #[default]
    ProductUniform,
    Empirical,
}

/// Right-hand side of the state equation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Forcing {
    /// Closed-form forcing of a reference example.
    Example(u8),
    Constant(f64),
    /// Values at the state mesh vertices.
    Nodal(Vec<f64>),
}

/// Complete description of an identification experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleSpec {
    /// Reference example id, or 0 for user data.
    pub id: u8,
    pub spatial_dim: usize,
    /// Parameter mesh size: elements in 1D, cells per side in 2D.
    pub q_cells: usize,
    pub stochastic_dim: usize,
    pub y_lower: f64,
    pub y_upper: f64,
    pub level: u32,
    /// Relative size of the multiplicative data noise.
    pub noise: f64,
    /// Regularization weights to run; the first is the default.
    pub beta_variants: Vec<f64>,
    pub run: RunConfig,
    pub constraint_model: ConstraintModel,
    pub forcing: Forcing,
    pub n_sample: usize,
    pub kl_tol: f64,
    pub kl_max_rank: Option<usize>,
    pub density: DensityChoice,
    pub n_mc: usize,
}

/// The reference examples.
pub fn make_example(id: u8) -> Result<ExampleSpec> {
    let base = ExampleSpec {
        id,
        spatial_dim: 1,
        q_cells: 30,
        stochastic_dim: 4,
        y_lower: 0.0,
        y_upper: 1.0,
        level: 3,
        noise: 1e-3,
        beta_variants: vec![5e-5],
        run: RunConfig {
            beta: 5e-5,
            outer_tol: 1e-5,
            pcg_tol: 1e-5,
            q_init: 1.0,
            ..RunConfig::default()
        },
        constraint_model: ConstraintModel::Collocation,
        forcing: Forcing::Example(id),
        n_sample: 0,
        kl_tol: 1e-7,
        kl_max_rank: None,
        density: DensityChoice::ProductUniform,
        n_mc: 100_000,
    };
    match id {
        1 => Ok(base),
        2 => Ok(ExampleSpec {
            spatial_dim: 2,
            q_cells: 14,
            stochastic_dim: 3,
            y_lower: -1.0,
            y_upper: 1.0,
            level: 4,
            beta_variants: vec![1e-5, 1e-3],
            run: RunConfig {
                beta: 1e-5,
                outer_tol: 1e-4,
                pcg_tol: 1e-5,
                q_init: 2.0,
                ..RunConfig::default()
            },
            ..base
        }),
        3 => Ok(ExampleSpec {
            spatial_dim: 2,
            q_cells: 14,
            stochastic_dim: 3,
            y_lower: -1.0,
            y_upper: 1.0,
            level: 4,
            noise: 0.0,
            beta_variants: vec![1e-5],
            run: RunConfig {
                beta: 1e-5,
                outer_tol: 1e-5,
                pcg_tol: 1e-6,
                q_init: 4.0,
                ..RunConfig::default()
            },
            n_sample: 1000,
            kl_max_rank: Some(2),
            ..base
        }),
        _ => Err(invalid(format!("unknown example id {id}; expected 1, 2 or 3"))),
    }
}

/// Exact coefficient of a reference example at `x` for physical `y`.
pub fn exact_parameter(id: u8, x: &[f64], y: &[f64]) -> f64 {
    match id {
        1 => {
            let x = x[0];
            2.0 + x * x
                + 0.5
                    * y.iter()
                        .enumerate()
                        .map(|(i, yi)| ((i + 1) as f64 * PI * x).cos() * yi)
                        .sum::<f64>()
        }
        2 => {
            let (a, b) = (x[0], x[1]);
            2.0 + (a * a * b).sin()
                + 0.125
                    * y.iter()
                        .enumerate()
                        .map(|(i, yi)| {
                            let k = (i + 1) as f64 * PI;
                            (k * a).sin() * (k * b).sin() * yi
                        })
                        .sum::<f64>()
        }
        3 => {
            let (a, b) = (x[0], x[1]);
            4.0 + a * b
                + 0.5 * (PI * a).sin() * (PI * b).sin() * y[0]
                + 0.25 * (0.5 * PI * a).cos() * (0.5 * PI * b).sin() * y[1]
                + 0.25 * (PI * a).cos() * (PI * b).cos() * y[2]
        }
        _ => f64::NAN,
    }
}

/// Piecewise quadratic profile used by the second example.
fn profile(x: f64) -> (f64, f64, f64) {
    if x <= 1.0 / 3.0 {
        (9.0 * x * x + 6.0 * x, 18.0 * x + 6.0, 18.0)
    } else if x < 2.0 / 3.0 {
        (1.0, 0.0, 0.0)
    } else {
        (-9.0 * x * x + 12.0 * x - 3.0, -18.0 * x + 12.0, -18.0)
    }
}

/// Closed-form forcing of a reference example.
pub fn example_forcing(id: u8, x: &[f64]) -> f64 {
    match id {
        1 => {
            let x = x[0];
            6.0 * x * x - 2.0 * x + 4.0
        }
        2 => {
            let (a, b) = (x[0], x[1]);
            let (wa, dwa, ddwa) = profile(a);
            let (wb, dwb, ddwb) = profile(b);
            let s = a * a * b;
            let k = 2.0 + s.sin();
            let (ka, kb) = (2.0 * a * b * s.cos(), a * a * s.cos());
            -(ka * dwa * wb + kb * wa * dwb + k * (ddwa * wb + wa * ddwb))
        }
        3 => {
            let (a, b) = (x[0], x[1]);
            -(b * PI * (PI * a).cos() * (PI * b).sin() + a * PI * (PI * a).sin() * (PI * b).cos())
                + 2.0 * PI * PI * (4.0 + a * b) * (PI * a).sin() * (PI * b).sin()
        }
        _ => f64::NAN,
    }
}

impl ExampleSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.spatial_dim) {
            return Err(invalid("spatial_dim must be 1 or 2"));
        }
        if self.q_cells == 0 || self.stochastic_dim == 0 || self.level == 0 {
            return Err(invalid("mesh size, stochastic dimension and level must be positive"));
        }
        if !(self.y_lower < self.y_upper) {
            return Err(invalid("y_lower must be below y_upper"));
        }
        if !(self.noise >= 0.0) {
            return Err(invalid("noise must be non-negative"));
        }
        if self.beta_variants.is_empty() {
            return Err(invalid("at least one regularization weight is required"));
        }
        self.run.validate()
    }

    /// Parameter and state meshes.
    pub fn meshes(&self) -> Result<(Mesh, Mesh)> {
        let coarse = match self.spatial_dim {
            1 => build_interval_mesh(self.q_cells)?,
            _ => build_unit_square_mesh(self.q_cells)?,
        };
        let fine = refine_uniform(&coarse);
        Ok((coarse, fine))
    }

    /// Forcing values at the state mesh vertices.
    pub fn nodal_forcing(&self, fine: &Mesh) -> Result<Vec<f64>> {
        match &self.forcing {
            Forcing::Example(id) => {
                if !(1..=3).contains(id) {
                    return Err(invalid(format!("unknown forcing example {id}")));
                }
                Ok(fine.vertices().iter().map(|x| example_forcing(*id, x)).collect())
            }
            Forcing::Constant(c) => Ok(vec![*c; fine.n_vertices()]),
            Forcing::Nodal(v) => {
                if v.len() != fine.n_vertices() {
                    return Err(invalid(format!(
                        "nodal forcing has {} values, state mesh has {} vertices",
                        v.len(),
                        fine.n_vertices()
                    )));
                }
                Ok(v.clone())
            }
        }
    }

    /// Problem on the given grid and density.
    pub fn problem(&self, grid: SparseGrid, density: DensityModel) -> Result<Problem> {
        let (coarse, fine) = self.meshes()?;
        let forcing = self.nodal_forcing(&fine)?;
        Problem::with_nodal_forcing(
            FeSpace::new(coarse, false),
            FeSpace::new(fine, true),
            grid,
            density,
            &forcing,
            self.constraint_model,
        )
    }

    /// Problem over the box of the reference random variables.
    pub fn box_problem(&self) -> Result<Problem> {
        let n = self.stochastic_dim;
        let grid = build_sparse_grid(n, self.level)?;
        let density = DensityModel::uniform_box(vec![self.y_lower; n], vec![self.y_upper; n])?;
        self.problem(grid, density)
    }
}

/// Surpluses of a closed-form coefficient sampled at parameter vertices and
/// grid nodes.
pub fn parameter_surpluses(problem: &Problem, field: impl Fn(&[f64], &[f64]) -> f64) -> Result<DMatrix<f64>> {
    let verts = problem.space_q.mesh().vertices();
    let nodes = problem.grid.nodes();
    let nodal = DMatrix::from_fn(problem.n_q(), problem.n_nodes(), |i, j| {
        field(&verts[i], &problem.density.from_unit(&nodes[j].coords))
    });
    problem.grid.hierarchize(&nodal)
}

/// Forward data for the examples with a known coefficient: nodal state
/// solutions perturbed by `(1 + δU)`, `U ~ Uniform(−1, 1)`, then hierarchized.
pub fn synthesize_field_data(problem: &Problem, q_exact: &DMatrix<f64>, noise: f64, seed: u64) -> Result<DMatrix<f64>> {
    let u = solve_state(problem, q_exact)?;
    let mut nodal = problem.grid.dehierarchize(&u)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in nodal.iter_mut() {
        let factor = 1.0 + noise * rng.random_range(-1.0..=1.0);
        *v *= factor;
    }
    problem.grid.hierarchize(&nodal)
}

/// Monte Carlo sample paths of the state for a coefficient depending on
/// `dim` independent uniform variables on `[lower, upper]`.
pub fn synthesize_sample_paths(
    problem: &Problem,
    coefficient: impl Fn(&[f64], &[f64]) -> f64 + Sync,
    dim: usize,
    bounds: (f64, f64),
    n_sample: usize,
    seed: u64,
) -> Result<SampleData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<Vec<f64>> = (0..n_sample)
        .map(|_| (0..dim).map(|_| rng.random_range(bounds.0..=bounds.1)).collect())
        .collect();
    let verts = problem.space_q.mesh().vertices();
    let mask = problem.dirichlet_mask();
    let columns: Vec<DVector<f64>> = draws
        .par_iter()
        .map(|y| {
            let q: Vec<f64> = verts.iter().map(|x| coefficient(x, y)).collect();
            let mut k = problem.spatial.trilinear.contract(&q);
            crate::fem::apply_dirichlet_identity(&mut k, mask);
            let mut u = SparseCholesky::new(&k)?.solve(&problem.load);
            zero_masked(u.as_mut_slice(), mask);
            Ok(u)
        })
        .collect::<Result<_>>()?;
    Ok(SampleData::new(DMatrix::from_columns(&columns)))
}

/// Monte Carlo estimate of a central moment field with its standard errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentField {
    pub order: usize,
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
}

const MC_CHUNK: usize = 4096;

/// Central moments of orders `1..=max_order` of a random vector whose
/// draws are produced by `sample`. Draws are split into fixed chunks with
/// independent generator streams, so results do not depend on threading.
pub fn monte_carlo_moments<F>(
    len: usize,
    max_order: usize,
    n_mc: usize,
    seed: u64,
    sample: F,
) -> Result<Vec<MomentField>>
where
    F: Fn(&mut ChaCha8Rng, &mut [f64]) + Sync,
{
    if !(1..=4).contains(&max_order) {
        return Err(invalid(format!("moment order {max_order} outside 1..=4")));
    }
    if n_mc < 2 {
        return Err(invalid("need at least two Monte Carlo samples"));
    }
    let chunks: Vec<(u64, usize)> = (0..n_mc.div_ceil(MC_CHUNK))
        .map(|c| (c as u64, MC_CHUNK.min(n_mc - c * MC_CHUNK)))
        .collect();
    let pass = |center: Option<&[f64]>, powers: usize| -> Vec<Vec<f64>> {
        let partial: Vec<Vec<Vec<f64>>> = chunks
            .par_iter()
            .map(|&(c, count)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(c);
                let mut acc = vec![vec![0.0; len]; powers];
                let mut buf = vec![0.0; len];
                for _ in 0..count {
                    sample(&mut rng, &mut buf);
                    for i in 0..len {
                        let d = buf[i] - center.map_or(0.0, |m| m[i]);
                        let mut p = 1.0;
                        for slot in acc.iter_mut() {
                            p *= d;
                            slot[i] += p;
                        }
                    }
                }
                acc
            })
            .collect();
        let mut total = vec![vec![0.0; len]; powers];
        for acc in partial {
            for (t, a) in total.iter_mut().zip(acc) {
                for (x, y) in t.iter_mut().zip(a) {
                    *x += y;
                }
            }
        }
        total
    };
    let n = n_mc as f64;
    let mean: Vec<f64> = pass(None, 1)[0].iter().map(|s| s / n).collect();
    let central: Vec<Vec<f64>> = pass(Some(&mean), 2 * max_order)
        .into_iter()
        .map(|v| v.into_iter().map(|s| s / n).collect())
        .collect();
    let m = |p: usize, i: usize| central[p - 1][i];
    Ok((1..=max_order)
        .map(|k| {
            let values = if k == 1 {
                mean.clone()
            } else {
                (0..len).map(|i| m(k, i)).collect()
            };
            let std_errors = (0..len)
                .map(|i| {
                    let var = if k == 1 {
                        m(2, i)
                    } else {
                        m(2 * k, i) - m(k, i) * m(k, i)
                    };
                    (var.max(0.0) / n).sqrt()
                })
                .collect();
            MomentField {
                order: k,
                values,
                std_errors,
            }
        })
        .collect())
}

/// Central moments of a surplus field at its spatial vertices for
/// `y ~ ρ`.
pub fn central_moments(
    field: &DMatrix<f64>,
    grid: &SparseGrid,
    density: &DensityModel,
    max_order: usize,
    n_mc: usize,
    seed: u64,
) -> Result<Vec<MomentField>> {
    if field.ncols() != grid.num_nodes() {
        return Err(invalid("field does not match the grid"));
    }
    if density.dim() != grid.dim() {
        return Err(invalid("density does not match the grid"));
    }
    let dim = grid.dim();
    monte_carlo_moments(field.nrows(), max_order, n_mc, seed, |rng, out| {
        let y: Vec<f64> = match density {
            DensityModel::ProductUniform { .. } => (0..dim).map(|_| rng.random::<f64>()).collect(),
            DensityModel::Empirical { samples } => {
                let s = rng.random_range(0..samples.ncols());
                samples.column(s).iter().copied().collect()
            }
        };
        out.fill(0.0);
        for (j, psi) in grid.eval_basis(&y).expect("point in the unit cube") {
            for (o, c) in out.iter_mut().zip(field.column(j).iter()) {
                *o += psi * c;
            }
        }
    })
}

/// Central moments of a closed-form coefficient at the given vertices for
/// independent uniform variables on `[lower, upper]`.
pub fn exact_moments(
    vertices: &[Vec<f64>],
    field: impl Fn(&[f64], &[f64]) -> f64 + Sync,
    dim: usize,
    bounds: (f64, f64),
    max_order: usize,
    n_mc: usize,
    seed: u64,
) -> Result<Vec<MomentField>> {
    monte_carlo_moments(vertices.len(), max_order, n_mc, seed, |rng, out| {
        let y: Vec<f64> = (0..dim).map(|_| rng.random_range(bounds.0..=bounds.1)).collect();
        for (o, x) in out.iter_mut().zip(vertices) {
            *o = field(x, &y);
        }
    })
}

/// `‖q − q̂‖_{L²(D×Γ)}` for a closed-form exact coefficient.
pub fn error_metric(q_hat: &DMatrix<f64>, exact: impl Fn(&[f64], &[f64]) -> f64, problem: &Problem) -> Result<f64> {
    let q = parameter_surpluses(problem, exact)?;
    problem.check_q(q_hat)?;
    Ok(problem.l2_norm_q(&(q - q_hat)))
}

/// Nodal values of the expectation of a parameter field.
pub fn mean_field(problem: &Problem, q: &DMatrix<f64>) -> DVector<f64> {
    q * problem.stochastic.basis_means()
}

/// `L²(D)` norm of a nodal parameter vector.
pub fn l2_norm_spatial(problem: &Problem, v: &DVector<f64>) -> f64 {
    let a = to_dense(&problem.spatial.mass_q);
    (v.transpose() * a * v)[(0, 0)].max(0.0).sqrt()
}

/// `H¹(D)` seminorm of a nodal parameter vector.
pub fn h1_seminorm_spatial(problem: &Problem, v: &DVector<f64>) -> f64 {
    let a = to_dense(&problem.spatial.stiffness_q);
    (v.transpose() * a * v)[(0, 0)].max(0.0).sqrt()
}

/// Summary of one identification run.
#[derive(Clone, Debug, Serialize)]
pub struct VariantSummary {
    pub beta: f64,
    pub converged: bool,
    pub iterations: usize,
    pub final_l2_error: Option<f64>,
    pub mean_field_error: Option<f64>,
    pub mean_h1_seminorm: f64,
    pub final_constraint_norm: f64,
    /// Largest `|λ_k − λ_{k−1} − c e|` over the run, relative to `|c e|`.
    pub multiplier_update_defect: f64,
    pub seconds: f64,
    pub output_dir: Option<PathBuf>,
}

/// Everything produced by an example run.
pub struct ExampleOutcome {
    pub variants: Vec<(VariantSummary, RunReport)>,
    pub kl: Option<KlModel>,
}

impl ExampleOutcome {
    pub fn converged(&self) -> bool {
        self.variants.iter().all(|(s, _)| s.converged)
    }
}

/// Streams convergence rows to disk as they arrive.
struct ConvergenceWriter {
    out: BufWriter<File>,
}

impl ConvergenceWriter {
    fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(
            out,
            "step,pcg_iters_q,pcg_iters_u,l2_error,increment,cost_functional,auglag_functional"
        )?;
        out.flush()?;
        Ok(Self { out })
    }

    fn push(&mut self, r: &IterationRecord) -> Result<()> {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:e}"));
        writeln!(
            self.out,
            "{},{},{},{},{},{:e},{:e}",
            r.step,
            r.pcg_iters_q,
            r.pcg_iters_u,
            opt(r.l2_error),
            opt(r.increment),
            r.cost_functional,
            r.auglag_functional
        )?;
        self.out.flush()?;
        Ok(())
    }
}

fn write_moments(dir: &Path, prefix: &str, moments: &[MomentField], vertices: &[Vec<f64>]) -> Result<()> {
    for m in moments {
        let mut out = BufWriter::new(File::create(dir.join(format!("{prefix}_k{}.csv", m.order)))?);
        let coords = ["x", "y"];
        let header: Vec<&str> = coords[..vertices[0].len()].to_vec();
        writeln!(out, "{},value,std_error", header.join(","))?;
        for ((x, v), s) in vertices.iter().zip(&m.values).zip(&m.std_errors) {
            let xs: Vec<String> = x.iter().map(|c| format!("{c}")).collect();
            writeln!(out, "{},{v:e},{s:e}", xs.join(","))?;
        }
        out.flush()?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Where a run writes its outputs.
pub struct OutputPlan<'a> {
    pub dir: Option<&'a Path>,
    /// Resolved configuration recorded in `run.json`.
    pub provenance: serde_json::Value,
}

/// Runs one identification with outputs, given the data surpluses.
#[allow(clippy::too_many_arguments)]
fn identify(
    spec: &ExampleSpec,
    beta: f64,
    problem: &Problem,
    u_hat: &DMatrix<f64>,
    exact_q: Option<&DMatrix<f64>>,
    exact_moments: Option<&[MomentField]>,
    seed: u64,
    dir: Option<&Path>,
    provenance: &serde_json::Value,
) -> Result<(VariantSummary, RunReport)> {
    let start = Instant::now();
    let cfg = RunConfig {
        beta,
        ..spec.run.clone()
    };
    let mut run_json = serde_json::json!({
        "status": "running",
        "seed": seed,
        "beta": beta,
        "config": provenance,
        "columns": {
            "step": "outer iteration, 0 is the initial state",
            "pcg_iters_q": "conjugate gradient iterations of the parameter subproblem",
            "pcg_iters_u": "conjugate gradient iterations of the state subproblem",
            "l2_error": "L2(D x Gamma) distance to the exact coefficient",
            "increment": "L2(D x Gamma) norm of q_k - q_{k-1}",
            "cost_functional": "misfit plus regularization at (q_k, u_k)",
            "auglag_functional": "augmented Lagrangian at (q_k, u_k, lambda_k) with penalty c_k",
        },
    });
    let mut writer = match dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            write_json(&d.join("run.json"), &run_json)?;
            Some(ConvergenceWriter::create(&d.join("convergence.csv"))?)
        }
        None => None,
    };
    let mut defect: f64 = 0.0;
    let report = run(&cfg, u_hat, problem, exact_q, |view| {
        if view.record.step > 0 {
            let step = view.constraint * view.penalty_used;
            let gap = (&view.state.lambda - view.lambda_prev - &step).amax();
            defect = defect.max(gap / step.amax().max(f64::MIN_POSITIVE));
        }
        if let Some(w) = writer.as_mut() {
            w.push(view.record)?;
        }
        Ok(())
    })?;
    let q = &report.state.q;
    let mean = mean_field(problem, q);
    let mean_field_error = exact_q.map(|ex| l2_norm_spatial(problem, &(mean_field(problem, ex) - &mean)));
    let last = report.state.history.last().expect("history has the initial row");
    let seconds = start.elapsed().as_secs_f64();
    let summary = VariantSummary {
        beta,
        converged: report.converged,
        iterations: report.state.iteration,
        final_l2_error: last.l2_error,
        mean_field_error,
        mean_h1_seminorm: h1_seminorm_spatial(problem, &mean),
        final_constraint_norm: last.constraint_norm,
        multiplier_update_defect: defect,
        seconds,
        output_dir: dir.map(Path::to_path_buf),
    };
    if let Some(d) = dir {
        let verts = problem.space_q.mesh().vertices();
        let identified = central_moments(q, &problem.grid, &problem.density, 4, spec.n_mc, seed ^ 0x5eed)?;
        write_moments(d, "moments_identified", &identified, verts)?;
        if let Some(ex) = exact_moments {
            write_moments(d, "moments_exact", ex, verts)?;
        }
        run_json["status"] = serde_json::json!(if report.converged { "converged" } else { "not_converged" });
        run_json["summary"] = serde_json::to_value(&summary)?;
        run_json["timings"] = serde_json::json!({ "total_seconds": start.elapsed().as_secs_f64() });
        write_json(&d.join("run.json"), &run_json)?;
    }
    Ok((summary, report))
}

fn variant_dir(base: Option<&Path>, beta: f64, many: bool) -> Option<PathBuf> {
    base.map(|b| {
        if many {
            b.join(format!("beta_{beta:e}"))
        } else {
            b.to_path_buf()
        }
    })
}

/// Runs a reference example end to end.
pub fn run_example(spec: &ExampleSpec, seed: u64, plan: &OutputPlan) -> Result<ExampleOutcome> {
    spec.validate()?;
    match spec.id {
        1 | 2 => run_field_example(spec, seed, plan),
        3 => {
            let problem = spec.box_problem()?;
            let id = spec.id;
            let data = synthesize_sample_paths(
                &problem,
                |x, y| exact_parameter(id, x, y),
                spec.stochastic_dim,
                (spec.y_lower, spec.y_upper),
                spec.n_sample,
                seed,
            )?;
            let exact = exact_moments(
                problem.space_q.mesh().vertices(),
                |x, y| exact_parameter(id, x, y),
                spec.stochastic_dim,
                (spec.y_lower, spec.y_upper),
                4,
                spec.n_mc,
                seed ^ 0xe8ac7,
            )?;
            identify_from_samples(spec, &data, Some(&exact), seed, plan)
        }
        other => Err(invalid(format!("unknown example id {other}"))),
    }
}

fn run_field_example(spec: &ExampleSpec, seed: u64, plan: &OutputPlan) -> Result<ExampleOutcome> {
    let problem = spec.box_problem()?;
    let id = spec.id;
    let q_exact = parameter_surpluses(&problem, |x, y| exact_parameter(id, x, y))?;
    let u_hat = synthesize_field_data(&problem, &q_exact, spec.noise, seed)?;
    let exact = exact_moments(
        problem.space_q.mesh().vertices(),
        |x, y| exact_parameter(id, x, y),
        spec.stochastic_dim,
        (spec.y_lower, spec.y_upper),
        4,
        spec.n_mc,
        seed ^ 0xe8ac7,
    )?;
    let many = spec.beta_variants.len() > 1;
    let mut variants = Vec::new();
    for &beta in &spec.beta_variants {
        let dir = variant_dir(plan.dir, beta, many);
        variants.push(identify(
            spec,
            beta,
            &problem,
            &u_hat,
            Some(&q_exact),
            Some(&exact),
            seed,
            dir.as_deref(),
            &plan.provenance,
        )?);
    }
    Ok(ExampleOutcome { variants, kl: None })
}

/// Fits the reduced model to sampled data and identifies the coefficient
/// on the resulting stochastic coordinates.
pub fn identify_from_samples(
    spec: &ExampleSpec,
    data: &SampleData,
    exact: Option<&[MomentField]>,
    seed: u64,
    plan: &OutputPlan,
) -> Result<ExampleOutcome> {
    spec.validate()?;
    let (coarse, fine) = spec.meshes()?;
    if data.n_dofs() != fine.n_vertices() {
        return Err(invalid(format!(
            "sample matrix has {} rows, the state mesh has {} vertices",
            data.n_dofs(),
            fine.n_vertices()
        )));
    }
    let gram = to_dense(&crate::fem::assemble_stiffness(&FeSpace::new(fine, true), true));
    let kl = KlModel::fit(data, &gram, spec.kl_tol, spec.kl_max_rank)?;
    let rank = kl.rank;
    let grid = build_sparse_grid(rank, spec.level)?;
    let density = match spec.density {
        DensityChoice::ProductUniform => DensityModel::uniform_box(vec![0.0; rank], vec![1.0; rank])?,
        DensityChoice::Empirical => DensityModel::empirical(kl.uniformized_samples())?,
    };
    drop(coarse);
    let problem = spec.problem(grid, density)?;
    let nodal_columns: Vec<DVector<f64>> = problem
        .grid
        .nodes()
        .iter()
        .map(|n| DVector::from_vec(kl.reconstruct(&n.coords)))
        .collect();
    let mut nodal = DMatrix::from_columns(&nodal_columns);
    problem.mask_state(&mut nodal);
    let u_hat = problem.grid.hierarchize(&nodal)?;
    if let Some(d) = plan.dir {
        fs::create_dir_all(d)?;
        write_json(&d.join("kl_model.json"), &serde_json::to_value(&kl)?)?;
    }
    let many = spec.beta_variants.len() > 1;
    let mut variants = Vec::new();
    for &beta in &spec.beta_variants {
        let dir = variant_dir(plan.dir, beta, many);
        variants.push(identify(
            spec,
            beta,
            &problem,
            &u_hat,
            None,
            exact,
            seed,
            dir.as_deref(),
            &plan.provenance,
        )?);
    }
    Ok(ExampleOutcome { variants, kl: Some(kl) })
}

/// Writes a sample matrix as headerless CSV.
pub fn write_samples(path: &Path, data: &SampleData) -> Result<()> {
    fs::write(path, matrix_to_csv(&data.values))?;
    Ok(())
}
