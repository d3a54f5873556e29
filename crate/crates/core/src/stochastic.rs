//! Stochastic Gram matrices, the triple-product tensor and the coupled
//! space-time forms built from them.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::CsrMatrix;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::fem::Trilinear;
use crate::sparse_grid::{basis_1d, basis_1d_derivative, indices_1d, support_1d, SparseGrid};

/// Probability density on the stochastic domain.
#[derive(Clone, Debug, PartialEq)]
pub enum DensityModel {
    /// Independent uniform variables on the box `[lower, upper]`, mapped
    /// affinely onto the unit cube.
    ProductUniform { lower: Vec<f64>, upper: Vec<f64> },
    /// Sample average over points of the unit cube (one column per sample).
    Empirical { samples: DMatrix<f64> },
}

impl DensityModel {
    pub fn uniform_box(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let model = Self::ProductUniform { lower, upper };
        model.validate()?;
        Ok(model)
    }

    pub fn empirical(samples: DMatrix<f64>) -> Result<Self> {
        let model = Self::Empirical { samples };
        model.validate()?;
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::ProductUniform { lower, .. } => lower.len(),
            Self::Empirical { samples } => samples.nrows(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::ProductUniform { lower, upper } => {
                if lower.is_empty() || lower.len() != upper.len() {
                    return Err(invalid("uniform box bounds must be non-empty and equally long"));
                }
                if lower.iter().zip(upper).any(|(a, b)| !(a < b)) {
                    return Err(invalid("uniform box needs lower < upper in every dimension"));
                }
            }
            Self::Empirical { samples } => {
                if samples.nrows() == 0 || samples.ncols() == 0 {
                    return Err(Error::InsufficientData("empirical density has no samples".into()));
                }
                if samples.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(invalid("empirical samples must lie in the unit cube"));
                }
            }
        }
        Ok(())
    }

    /// Maps physical coordinates to the unit cube (identity for empirical).
    pub fn to_unit(&self, y: &[f64]) -> Vec<f64> {
        match self {
            Self::ProductUniform { lower, upper } => y
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(v, (a, b))| (v - a) / (b - a))
                .collect(),
            Self::Empirical { .. } => y.to_vec(),
        }
    }

    /// Maps unit-cube coordinates to physical coordinates.
    pub fn from_unit(&self, y: &[f64]) -> Vec<f64> {
        match self {
            Self::ProductUniform { lower, upper } => y
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(v, (a, b))| a + (b - a) * v)
                .collect(),
            Self::Empirical { .. } => y.to_vec(),
        }
    }

    /// Derivative scale `d y / d Y` per dimension.
    fn derivative_scale(&self) -> Vec<f64> {
        match self {
            Self::ProductUniform { lower, upper } => lower.iter().zip(upper).map(|(a, b)| 1.0 / (b - a)).collect(),
            Self::Empirical { samples } => vec![1.0; samples.nrows()],
        }
    }
}

/// Ordered triples `(j, j1, j2, ∫ ψ_j ψ_j1 ψ_j2 ρ)` with overlapping
/// supports.
#[derive(Clone, Debug, Default)]
pub struct TripleTensor {
    entries: Vec<(usize, usize, usize, f64)>,
}

impl TripleTensor {
    pub fn entries(&self) -> &[(usize, usize, usize, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries grouped by the pair of positions `(first, third)`, listing
    /// the middle index and value. Grouping keys are sorted.
    fn grouped(
        &self,
        by: impl Fn(&(usize, usize, usize, f64)) -> ((usize, usize), usize),
    ) -> Vec<((usize, usize), Vec<(usize, f64)>)> {
        let mut map: BTreeMap<(usize, usize), Vec<(usize, f64)>> = BTreeMap::new();
        for e in &self.entries {
            let (key, other) = by(e);
            map.entry(key).or_default().push((other, e.3));
        }
        map.into_iter().collect()
    }
}

/// Stochastic Gram matrices of a sparse grid under a density.
#[derive(Clone, Debug)]
pub struct StochasticOperators {
    /// `S_ρ[j1, j2] = ∫ ψ_j1 ψ_j2 ρ`.
    pub s_rho: DMatrix<f64>,
    /// `Σ_γ ∫ D^γ ψ_j1 D^γ ψ_j2 ρ` over first-order mixed derivatives.
    pub s_mix: DMatrix<f64>,
    pub triple: TripleTensor,
}

impl StochasticOperators {
    /// Expectations `∫ ψ_j ρ` of the basis functions.
    pub fn basis_means(&self) -> DVector<f64> {
        // the constant function is node 0
        self.s_rho.column(0).into_owned()
    }

    pub fn num_nodes(&self) -> usize {
        self.s_rho.nrows()
    }
}

const GAUSS3: [(f64, f64); 3] = [
    (-0.774_596_669_241_483_4, 5.0 / 9.0),
    (0.0, 8.0 / 9.0),
    (0.774_596_669_241_483_4, 5.0 / 9.0),
];

/// Exact 1D integrals of products of hierarchical basis functions up to a
/// given level, under the uniform density on `[0, 1]`.
struct Tables1d {
    ids: HashMap<(u32, u32), usize>,
    mass: DMatrix<f64>,
    stiff: DMatrix<f64>,
    triple: Vec<f64>,
    count: usize,
}

impl Tables1d {
    fn new(level: u32) -> Self {
        let mut nodes = Vec::new();
        for l in 1..=level {
            for i in indices_1d(l) {
                nodes.push((l, i));
            }
        }
        let count = nodes.len();
        let ids = nodes.iter().enumerate().map(|(k, &n)| (n, k)).collect();
        let cells = if level <= 1 { 1 } else { 1usize << (level - 1) };
        let width = 1.0 / cells as f64;
        let mut points = Vec::with_capacity(3 * cells);
        for c in 0..cells {
            let mid = (c as f64 + 0.5) * width;
            for &(x, w) in &GAUSS3 {
                points.push((mid + 0.5 * width * x, 0.5 * width * w));
            }
        }
        let values: Vec<Vec<f64>> = nodes
            .iter()
            .map(|&(l, i)| points.iter().map(|&(y, _)| basis_1d(l, i, y)).collect())
            .collect();
        let derivs: Vec<Vec<f64>> = nodes
            .iter()
            .map(|&(l, i)| points.iter().map(|&(y, _)| basis_1d_derivative(l, i, y)).collect())
            .collect();
        let mut mass = DMatrix::zeros(count, count);
        let mut stiff = DMatrix::zeros(count, count);
        let mut triple = vec![0.0; count * count * count];
        for a in 0..count {
            for b in 0..count {
                let mut m = 0.0;
                let mut s = 0.0;
                for (p, &(_, w)) in points.iter().enumerate() {
                    m += w * values[a][p] * values[b][p];
                    s += w * derivs[a][p] * derivs[b][p];
                }
                mass[(a, b)] = m;
                stiff[(a, b)] = s;
                for c in 0..count {
                    let mut t = 0.0;
                    for (p, &(_, w)) in points.iter().enumerate() {
                        t += w * values[a][p] * values[b][p] * values[c][p];
                    }
                    triple[(a * count + b) * count + c] = t;
                }
            }
        }
        Self {
            ids,
            mass,
            stiff,
            triple,
            count,
        }
    }

    fn triple(&self, a: usize, b: usize, c: usize) -> f64 {
        self.triple[(a * self.count + b) * self.count + c]
    }
}

fn overlap(supports: &[(f64, f64)]) -> bool {
    let lo = supports.iter().map(|s| s.0).fold(f64::MIN, f64::max);
    let hi = supports.iter().map(|s| s.1).fold(f64::MAX, f64::min);
    hi > lo
}

/// Assembles `S_ρ`, the mixed-derivative Gram matrix and the triple tensor.
pub fn assemble_stochastic(grid: &SparseGrid, density: &DensityModel) -> Result<StochasticOperators> {
    density.validate()?;
    if density.dim() != grid.dim() {
        return Err(invalid(format!(
            "density dimension {} differs from grid dimension {}",
            density.dim(),
            grid.dim()
        )));
    }
    let n = grid.num_nodes();
    let dim = grid.dim();
    let nodes = grid.nodes();
    let supports: Vec<Vec<(f64, f64)>> = nodes
        .iter()
        .map(|nd| (0..dim).map(|t| support_1d(nd.levels[t], nd.indices[t])).collect())
        .collect();
    let triples_overlap =
        |a: usize, b: usize, c: usize| (0..dim).all(|t| overlap(&[supports[a][t], supports[b][t], supports[c][t]]));
    let scale = density.derivative_scale();

    match density {
        DensityModel::ProductUniform { .. } => {
            let tables = Tables1d::new(grid.max_level_1d());
            let ids: Vec<Vec<usize>> = nodes
                .iter()
                .map(|nd| (0..dim).map(|t| tables.ids[&(nd.levels[t], nd.indices[t])]).collect())
                .collect();
            let mut s_rho = DMatrix::zeros(n, n);
            let mut s_mix = DMatrix::zeros(n, n);
            for a in 0..n {
                for b in 0..n {
                    let mut m = 1.0;
                    let mut x = 1.0;
                    for t in 0..dim {
                        let (ia, ib) = (ids[a][t], ids[b][t]);
                        m *= tables.mass[(ia, ib)];
                        x *= tables.mass[(ia, ib)] + scale[t] * scale[t] * tables.stiff[(ia, ib)];
                    }
                    s_rho[(a, b)] = m;
                    s_mix[(a, b)] = x;
                }
            }
            let entries: Vec<Vec<(usize, usize, usize, f64)>> = (0..n)
                .into_par_iter()
                .map(|a| {
                    let mut out = Vec::new();
                    for b in 0..n {
                        for c in 0..n {
                            if triples_overlap(a, b, c) {
                                let v = (0..dim)
                                    .map(|t| tables.triple(ids[a][t], ids[b][t], ids[c][t]))
                                    .product();
                                out.push((a, b, c, v));
                            }
                        }
                    }
                    out
                })
                .collect();
            Ok(StochasticOperators {
                s_rho,
                s_mix,
                triple: TripleTensor {
                    entries: entries.into_iter().flatten().collect(),
                },
            })
        }
        DensityModel::Empirical { samples } => {
            let ns = samples.ncols();
            let weight = 1.0 / ns as f64;
            let mut s_rho = DMatrix::zeros(n, n);
            let mut s_mix = DMatrix::zeros(n, n);
            let mut triple_sums: HashMap<(usize, usize, usize), f64> = HashMap::new();
            for s in 0..ns {
                let y: Vec<f64> = samples.column(s).iter().copied().collect();
                let active: Vec<(usize, f64, Vec<(f64, f64)>)> = nodes
                    .iter()
                    .enumerate()
                    .filter_map(|(j, nd)| {
                        let v = nd.basis(&y);
                        if v == 0.0 {
                            return None;
                        }
                        let per_dim = (0..dim)
                            .map(|t| {
                                (
                                    basis_1d(nd.levels[t], nd.indices[t], y[t]),
                                    basis_1d_derivative(nd.levels[t], nd.indices[t], y[t]),
                                )
                            })
                            .collect();
                        Some((j, v, per_dim))
                    })
                    .collect();
                for (a, va, da) in &active {
                    for (b, vb, db) in &active {
                        s_rho[(*a, *b)] += weight * va * vb;
                        let mixed: f64 = (0..dim).map(|t| da[t].0 * db[t].0 + da[t].1 * db[t].1).product();
                        s_mix[(*a, *b)] += weight * mixed;
                        for (c, vc, _) in &active {
                            *triple_sums.entry((*a, *b, *c)).or_default() += weight * va * vb * vc;
                        }
                    }
                }
            }
            let mut entries = Vec::new();
            for a in 0..n {
                for b in 0..n {
                    for c in 0..n {
                        if triples_overlap(a, b, c) {
                            let v = triple_sums.get(&(a, b, c)).copied().unwrap_or(0.0);
                            entries.push((a, b, c, v));
                        }
                    }
                }
            }
            Ok(StochasticOperators {
                s_rho,
                s_mix,
                triple: TripleTensor { entries },
            })
        }
    }
}

/// Which slot of the coupled form carries the weight field.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightSlot {
    /// Weight is a parameter field on the coarse space.
    Parameter,
    /// Weight is a state field on the fine space.
    State,
}

/// Coupled space-time operator obtained by fixing one argument of
/// `(q, u, v) ↦ E[∫ q ∇u · ∇v]`.
///
/// With a parameter weight `q` it maps state fields to state covectors
/// (`S_{ρ,q}`); with a state weight `u` it maps state fields to parameter
/// covectors (`S_{ρ,u}`), and [`CoupledForm::apply_transpose`] maps back.
pub struct CoupledForm<'a> {
    trilinear: &'a Trilinear,
    weight: DMatrix<f64>,
    slot: WeightSlot,
    stiffness: Vec<Option<CsrMatrix<f64>>>,
    by_first_third: Vec<((usize, usize), Vec<(usize, f64)>)>,
    by_first_second: Vec<((usize, usize), Vec<(usize, f64)>)>,
}

/// Builds the coupled form for a weight field in the given slot.
pub fn assemble_coupled_form<'a>(
    ops: &StochasticOperators,
    trilinear: &'a Trilinear,
    weight: &DMatrix<f64>,
    slot: WeightSlot,
) -> Result<CoupledForm<'a>> {
    let rows = match slot {
        WeightSlot::Parameter => trilinear.n_q(),
        WeightSlot::State => trilinear.n_u(),
    };
    if weight.nrows() != rows || weight.ncols() != ops.num_nodes() {
        return Err(invalid(format!(
            "weight of shape {}x{} does not fit slot {:?} ({}x{})",
            weight.nrows(),
            weight.ncols(),
            slot,
            rows,
            ops.num_nodes()
        )));
    }
    let stiffness = match slot {
        WeightSlot::Parameter => (0..weight.ncols())
            .into_par_iter()
            .map(|j| {
                let col = weight.column(j);
                if col.iter().all(|v| *v == 0.0) {
                    None
                } else {
                    Some(trilinear.contract(col.as_slice()))
                }
            })
            .collect(),
        WeightSlot::State => Vec::new(),
    };
    Ok(CoupledForm {
        trilinear,
        weight: weight.clone(),
        slot,
        stiffness,
        by_first_third: ops.triple.grouped(|e| ((e.0, e.2), e.1)),
        by_first_second: ops.triple.grouped(|e| ((e.0, e.1), e.2)),
    })
}

impl CoupledForm<'_> {
    pub fn slot(&self) -> WeightSlot {
        self.slot
    }

    fn active(&self, j: usize) -> bool {
        self.weight.column(j).iter().any(|v| *v != 0.0)
    }

    /// Applies the form to a state field (`M_u × N`).
    pub fn apply(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n_nodes = self.weight.ncols();
        if v.nrows() != self.trilinear.n_u() || v.ncols() != n_nodes {
            return Err(invalid("argument does not match the state space shape"));
        }
        let out_rows = match self.slot {
            WeightSlot::Parameter => self.trilinear.n_u(),
            WeightSlot::State => self.trilinear.n_q(),
        };
        let pieces: Vec<(DVector<f64>, &Vec<(usize, f64)>)> = self
            .by_first_third
            .par_iter()
            .filter(|((j, j2), _)| self.active(*j) && v.column(*j2).iter().any(|x| *x != 0.0))
            .map(|((j, j2), list)| {
                let w = match self.slot {
                    WeightSlot::Parameter => {
                        let k = self.stiffness[*j].as_ref().expect("active column has a matrix");
                        let x: DVector<f64> = k * &v.column(*j2);
                        x
                    }
                    WeightSlot::State => self
                        .trilinear
                        .bilinear(self.weight.column(*j).as_slice(), v.column(*j2).as_slice()),
                };
                (w, list)
            })
            .collect();
        let mut out = DMatrix::zeros(out_rows, n_nodes);
        for (w, list) in pieces {
            for &(j1, t) in list {
                out.column_mut(j1).axpy(t, &w, 1.0);
            }
        }
        Ok(out)
    }

    /// Applies the adjoint of a state-weighted form to a parameter field
    /// (`M_q × N`), returning a state covector.
    pub fn apply_transpose(&self, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self.slot {
            WeightSlot::Parameter => self.apply(h),
            WeightSlot::State => {
                let n_nodes = self.weight.ncols();
                if h.nrows() != self.trilinear.n_q() || h.ncols() != n_nodes {
                    return Err(invalid("argument does not match the parameter space shape"));
                }
                let mats: Vec<Option<CsrMatrix<f64>>> = (0..n_nodes)
                    .into_par_iter()
                    .map(|j1| {
                        let col = h.column(j1);
                        (col.iter().any(|v| *v != 0.0)).then(|| self.trilinear.contract(col.as_slice()))
                    })
                    .collect();
                let pieces: Vec<(DVector<f64>, &Vec<(usize, f64)>)> = self
                    .by_first_second
                    .par_iter()
                    .filter(|((j, j1), _)| self.active(*j) && mats[*j1].is_some())
                    .map(|((j, j1), list)| {
                        let k = mats[*j1].as_ref().expect("filtered");
                        let x: DVector<f64> = k * &self.weight.column(*j);
                        (x, list)
                    })
                    .collect();
                let mut out = DMatrix::zeros(self.trilinear.n_u(), n_nodes);
                for (w, list) in pieces {
                    for &(j2, t) in list {
                        out.column_mut(j2).axpy(t, &w, 1.0);
                    }
                }
                Ok(out)
            }
        }
    }
}
