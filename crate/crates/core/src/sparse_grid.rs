//! Nested sparse grids on `[0, 1]^n` with a piecewise linear hierarchical
//! basis and the surplus transforms between nodal and hierarchical values.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{invalid, Result};

/// Largest supported one-dimensional level.
pub const MAX_LEVEL: u32 = 30;

/// Coordinate of the 1D node `(level, index)`.
///
/// Level 1 is the midpoint, level 2 adds both endpoints, level `l ≥ 3`
/// adds the odd multiples of `2^{1-l}`.
pub fn node_coordinate(level: u32, index: u32) -> f64 {
    match level {
        1 => 0.5,
        2 => index as f64,
        _ => index as f64 / (1u64 << (level - 1)) as f64,
    }
}

/// Half-width of the 1D hat at `level`; level 1 is the constant function.
pub fn half_width(level: u32) -> Option<f64> {
    (level > 1).then(|| hat_width(level))
}

fn hat_width(level: u32) -> f64 {
    2.0_f64.powi(1 - level as i32)
}

/// Value of the 1D hierarchical basis function at `y`.
pub fn basis_1d(level: u32, index: u32, y: f64) -> f64 {
    if level == 1 {
        return 1.0;
    }
    let h = hat_width(level);
    (1.0 - (y - node_coordinate(level, index)).abs() / h).max(0.0)
}

/// Derivative of the 1D basis function at `y` (right derivative at kinks).
pub fn basis_1d_derivative(level: u32, index: u32, y: f64) -> f64 {
    if level == 1 {
        return 0.0;
    }
    let h = hat_width(level);
    let c = node_coordinate(level, index);
    let d = y - c;
    if d.abs() >= h {
        0.0
    } else if d >= 0.0 {
        -1.0 / h
    } else {
        1.0 / h
    }
}

/// Support interval of the 1D basis function, clipped to `[0, 1]`.
pub fn support_1d(level: u32, index: u32) -> (f64, f64) {
    if level == 1 {
        return (0.0, 1.0);
    }
    let h = hat_width(level);
    let c = node_coordinate(level, index);
    ((c - h).max(0.0), (c + h).min(1.0))
}

/// `(level, index)` of a dyadic coordinate in `[0, 1]`.
pub fn node_from_coordinate(y: f64) -> Option<(u32, u32)> {
    let scale = (1u64 << MAX_LEVEL) as f64;
    let k = (y * scale).round();
    if (k / scale - y).abs() > 0.0 || !(0.0..=scale).contains(&k) {
        return None;
    }
    let k = k as u64;
    if k == 0 {
        return Some((2, 0));
    }
    if k == 1u64 << MAX_LEVEL {
        return Some((2, 1));
    }
    let tz = k.trailing_zeros();
    let denominator_exp = MAX_LEVEL - tz;
    if denominator_exp == 1 {
        return Some((1, 1));
    }
    Some((denominator_exp + 1, (k >> tz) as u32))
}

/// Hierarchical parents of a 1D node with their interpolation weights.
pub fn parents_1d(level: u32, index: u32) -> Vec<((u32, u32), f64)> {
    match level {
        1 => vec![],
        2 => vec![((1, 1), 1.0)],
        _ => {
            let c = node_coordinate(level, index);
            let h = hat_width(level);
            [c - h, c + h]
                .into_iter()
                .map(|y| (node_from_coordinate(y).expect("dyadic parent"), 0.5))
                .collect()
        }
    }
}

/// 1D indices present at `level`.
pub fn indices_1d(level: u32) -> Vec<u32> {
    match level {
        1 => vec![1],
        2 => vec![0, 1],
        _ => (1..(1u32 << (level - 1))).step_by(2).collect(),
    }
}

/// A sparse-grid node.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridNode {
    pub levels: Vec<u32>,
    pub indices: Vec<u32>,
    pub coords: Vec<f64>,
}

impl GridNode {
    /// Value of the tensor-product basis function at `y`.
    pub fn basis(&self, y: &[f64]) -> f64 {
        let mut v = 1.0;
        for t in 0..self.levels.len() {
            v *= basis_1d(self.levels[t], self.indices[t], y[t]);
            if v == 0.0 {
                break;
            }
        }
        v
    }
}

/// One step of the surplus transform: `v[target] -= weight · v[source]`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Stencil {
    target: usize,
    source: usize,
    weight: f64,
}

/// Sparse grid of level `L` in `n` dimensions: all nodes with multilevel
/// `|l|_1 ≤ L + n − 1`, ordered by `|l|_1`, then `l`, then index.
#[derive(Clone, Debug)]
pub struct SparseGrid {
    dim: usize,
    level: u32,
    nodes: Vec<GridNode>,
    ancestry: Vec<Vec<Vec<(usize, f64)>>>,
    stencils: Vec<Stencil>,
}

#[derive(Serialize)]
struct GridDump<'a> {
    dim: usize,
    level: u32,
    nodes: &'a [GridNode],
}

/// Builds the level-`level` sparse grid on `[0, 1]^dim`.
pub fn build_sparse_grid(dim: usize, level: u32) -> Result<SparseGrid> {
    if dim == 0 {
        return Err(invalid("stochastic dimension must be positive"));
    }
    if level == 0 || level > MAX_LEVEL {
        return Err(invalid(format!("grid level must lie in 1..={MAX_LEVEL}")));
    }
    let budget = level as usize + dim - 1;
    let mut multilevels = Vec::new();
    let mut current = vec![1u32; dim];
    collect_multilevels(0, budget, &mut current, &mut multilevels);
    multilevels.sort_by(|a, b| {
        let sa: u32 = a.iter().sum();
        let sb: u32 = b.iter().sum();
        sa.cmp(&sb).then_with(|| a.cmp(b))
    });

    let mut nodes = Vec::new();
    for levels in multilevels {
        let mut combos: Vec<Vec<u32>> = vec![Vec::new()];
        for &l in &levels {
            combos = combos
                .into_iter()
                .flat_map(|prefix| {
                    indices_1d(l).into_iter().map(move |i| {
                        let mut c = prefix.clone();
                        c.push(i);
                        c
                    })
                })
                .collect();
        }
        for indices in combos {
            let coords = (0..dim).map(|t| node_coordinate(levels[t], indices[t])).collect();
            nodes.push(GridNode {
                levels: levels.clone(),
                indices,
                coords,
            });
        }
    }

    let lookup: HashMap<(Vec<u32>, Vec<u32>), usize> = nodes
        .iter()
        .enumerate()
        .map(|(j, n)| ((n.levels.clone(), n.indices.clone()), j))
        .collect();
    let ancestry: Vec<Vec<Vec<(usize, f64)>>> = nodes
        .iter()
        .map(|node| {
            (0..dim)
                .map(|t| {
                    parents_1d(node.levels[t], node.indices[t])
                        .into_iter()
                        .map(|((pl, pi), w)| {
                            let mut levels = node.levels.clone();
                            let mut indices = node.indices.clone();
                            levels[t] = pl;
                            indices[t] = pi;
                            (lookup[&(levels, indices)], w)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut stencils = Vec::new();
    for t in 0..dim {
        let mut order: Vec<usize> = (0..nodes.len()).collect();
        order.sort_by(|&a, &b| nodes[b].levels[t].cmp(&nodes[a].levels[t]));
        for j in order {
            for &(p, w) in &ancestry[j][t] {
                stencils.push(Stencil {
                    target: j,
                    source: p,
                    weight: w,
                });
            }
        }
    }

    Ok(SparseGrid {
        dim,
        level,
        nodes,
        ancestry,
        stencils,
    })
}

fn collect_multilevels(t: usize, budget: usize, current: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    let dim = current.len();
    if t == dim {
        out.push(current.clone());
        return;
    }
    let used: usize = current[..t].iter().map(|&l| l as usize).sum();
    let remaining_min = dim - t - 1;
    let max_here = budget - used - remaining_min;
    for l in 1..=max_here as u32 {
        current[t] = l;
        collect_multilevels(t + 1, budget, current, out);
    }
    current[t] = 1;
}

impl SparseGrid {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[GridNode] {
        &self.nodes
    }

    /// Parents of node `j` along dimension `t`, with weights.
    pub fn parents(&self, j: usize, t: usize) -> &[(usize, f64)] {
        &self.ancestry[j][t]
    }

    /// Index of the constant basis function (all levels equal to one).
    pub fn root(&self) -> usize {
        0
    }

    /// Largest 1D level appearing in any dimension.
    pub fn max_level_1d(&self) -> u32 {
        self.level
    }

    /// Nonzero basis values `(j, ψ_j(y))` at a point of `[0, 1]^n`.
    pub fn eval_basis(&self, y: &[f64]) -> Result<Vec<(usize, f64)>> {
        if y.len() != self.dim {
            return Err(invalid(format!(
                "point has {} coordinates, grid dimension is {}",
                y.len(),
                self.dim
            )));
        }
        if y.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("point lies outside the unit cube"));
        }
        Ok(self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(j, n)| {
                let v = n.basis(y);
                (v != 0.0).then_some((j, v))
            })
            .collect())
    }

    /// Interpolant `Σ_j c_j ψ_j(y)` of hierarchical coefficients.
    pub fn interpolate(&self, surpluses: &[f64], y: &[f64]) -> Result<f64> {
        if surpluses.len() != self.nodes.len() {
            return Err(invalid("surplus vector does not match grid size"));
        }
        Ok(self.eval_basis(y)?.into_iter().map(|(j, v)| surpluses[j] * v).sum())
    }

    fn check_columns(&self, values: &DMatrix<f64>) -> Result<()> {
        if values.ncols() != self.nodes.len() {
            return Err(invalid(format!(
                "field has {} node columns, grid has {} nodes",
                values.ncols(),
                self.nodes.len()
            )));
        }
        Ok(())
    }

    /// Nodal values to hierarchical surpluses, column `j` being node `j`.
    pub fn hierarchize(&self, nodal: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_columns(nodal)?;
        let mut v = nodal.clone();
        self.hierarchize_in_place(&mut v);
        Ok(v)
    }

    /// Hierarchical surpluses to nodal values.
    pub fn dehierarchize(&self, surpluses: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_columns(surpluses)?;
        let mut v = surpluses.clone();
        self.dehierarchize_in_place(&mut v);
        Ok(v)
    }

    pub(crate) fn hierarchize_in_place(&self, v: &mut DMatrix<f64>) {
        for s in &self.stencils {
            column_axpy(v, s.target, s.source, -s.weight);
        }
    }

    pub(crate) fn dehierarchize_in_place(&self, v: &mut DMatrix<f64>) {
        for s in self.stencils.iter().rev() {
            column_axpy(v, s.target, s.source, s.weight);
        }
    }

    /// Applies the transpose of [`Self::hierarchize`].
    pub(crate) fn hierarchize_transpose_in_place(&self, v: &mut DMatrix<f64>) {
        for s in self.stencils.iter().rev() {
            column_axpy(v, s.source, s.target, -s.weight);
        }
    }

    /// Applies the transpose of [`Self::dehierarchize`].
    pub(crate) fn dehierarchize_transpose_in_place(&self, v: &mut DMatrix<f64>) {
        for s in &self.stencils {
            column_axpy(v, s.source, s.target, s.weight);
        }
    }

    /// Dense `N × N` matrix of the dehierarchization map.
    pub fn dehierarchization_matrix(&self) -> DMatrix<f64> {
        let n = self.nodes.len();
        // rows are nodes, so transform the identity stored as a row vector field
        let mut rows = DMatrix::<f64>::identity(n, n);
        self.dehierarchize_in_place(&mut rows);
        rows.transpose()
    }

    /// JSON description of the nodes (levels, indices, coordinates).
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(GridDump {
            dim: self.dim,
            level: self.level,
            nodes: &self.nodes,
        })
        .expect("grid nodes serialize")
    }
}

fn column_axpy(v: &mut DMatrix<f64>, target: usize, source: usize, weight: f64) {
    let m = v.nrows();
    let data = v.as_mut_slice();
    let (t0, s0) = (target * m, source * m);
    for r in 0..m {
        data[t0 + r] += weight * data[s0 + r];
    }
}
