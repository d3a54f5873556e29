//! Exact P1 assembly of mass, stiffness and the coefficient-weighted
//! trilinear form that couples a coarse parameter space to its refinement.

use std::collections::BTreeMap;

use nalgebra::DVector;
use nalgebra_sparse::{CooMatrix, CsrMatrix};

use crate::error::{invalid, Result};
use crate::mesh::FeSpace;

/// Mass matrix `A[i1, i2] = ∫ φ_i1 φ_i2`.
pub fn assemble_mass(space: &FeSpace) -> CsrMatrix<f64> {
    let mesh = space.mesh();
    let m = space.n_dofs();
    let d = mesh.dim() as f64;
    let mut coo = CooMatrix::new(m, m);
    for (e, el) in mesh.elements().iter().enumerate() {
        let (meas, _) = mesh.element_geometry(e);
        let scale = meas / ((d + 1.0) * (d + 2.0));
        for (a, &ia) in el.iter().enumerate() {
            for (b, &ib) in el.iter().enumerate() {
                let w = if a == b { 2.0 } else { 1.0 };
                coo.push(ia, ib, scale * w);
            }
        }
    }
    CsrMatrix::from(&coo)
}

/// Stiffness matrix `A_x[i1, i2] = ∫ ∇φ_i1 · ∇φ_i2`, optionally with the
/// Dirichlet rows and columns of `space` replaced by identity.
pub fn assemble_stiffness(space: &FeSpace, apply_dirichlet: bool) -> CsrMatrix<f64> {
    let mesh = space.mesh();
    let m = space.n_dofs();
    let mut coo = CooMatrix::new(m, m);
    for (e, el) in mesh.elements().iter().enumerate() {
        let (meas, grads) = mesh.element_geometry(e);
        for (a, &ia) in el.iter().enumerate() {
            for (b, &ib) in el.iter().enumerate() {
                coo.push(ia, ib, meas * dot(&grads[a], &grads[b]));
            }
        }
    }
    let mut mat = CsrMatrix::from(&coo);
    if apply_dirichlet {
        apply_dirichlet_identity(&mut mat, space.dirichlet_mask());
    }
    mat
}

/// Replaces masked rows and columns by identity rows and columns.
pub fn apply_dirichlet_identity(mat: &mut CsrMatrix<f64>, mask: &[bool]) {
    for r in 0..mat.nrows() {
        let mut row = mat.row_mut(r);
        let (cols, vals) = row.cols_and_values_mut();
        for (c, v) in cols.iter().zip(vals.iter_mut()) {
            if mask[r] || mask[*c] {
                *v = if r == *c { 1.0 } else { 0.0 };
            }
        }
    }
}

/// Zeroes the masked entries of a vector.
pub fn zero_masked(v: &mut [f64], mask: &[bool]) {
    for (x, &m) in v.iter_mut().zip(mask) {
        if m {
            *x = 0.0;
        }
    }
}

fn dot(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Sparse tensor `G[i, i1, i2] = ∫ φ_i^q ∇φ_i1^u · ∇φ_i2^u`.
///
/// Entries are grouped by the `(i1, i2)` pattern of the fine stiffness
/// matrix, with a transposed view grouped by the coarse index `i`.
#[derive(Clone, Debug)]
pub struct Trilinear {
    n_q: usize,
    n_u: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    term_offsets: Vec<usize>,
    terms: Vec<(usize, f64)>,
    by_q: Vec<Vec<(usize, usize, f64)>>,
}

/// Assembles the trilinear form; `space_u` must be the uniform refinement of
/// the mesh underlying `space_q`.
pub fn assemble_trilinear(space_q: &FeSpace, space_u: &FeSpace) -> Result<Trilinear> {
    let coarse = space_q.mesh();
    let fine = space_u.mesh();
    let refinement = fine
        .refinement()
        .ok_or_else(|| invalid("parameter mesh is not the parent of the state mesh"))?;
    if coarse.dim() != fine.dim()
        || refinement.coarse_element_count != coarse.n_elements()
        || refinement.coarse_vertex.len() != coarse.n_vertices()
        || refinement
            .coarse_vertex
            .iter()
            .enumerate()
            .any(|(v, &f)| fine.vertices()[f] != coarse.vertices()[v])
    {
        return Err(invalid("parameter mesh is not the parent of the state mesh"));
    }

    let mut entries: BTreeMap<(usize, usize), BTreeMap<usize, f64>> = BTreeMap::new();
    let dim = fine.dim() as f64;
    for (e, el) in fine.elements().iter().enumerate() {
        let (meas, grads) = fine.element_geometry(e);
        let mut centroid = vec![0.0; fine.dim()];
        for &v in el {
            for (c, x) in centroid.iter_mut().zip(&fine.vertices()[v]) {
                *c += x / (dim + 1.0);
            }
        }
        let parent = refinement.parent_element[e];
        let bary = coarse.barycentric(parent, &centroid);
        for (a, &ia) in el.iter().enumerate() {
            for (b, &ib) in el.iter().enumerate() {
                let base = meas * dot(&grads[a], &grads[b]);
                let slot = entries.entry((ia, ib)).or_default();
                for (&iq, &l) in coarse.elements()[parent].iter().zip(&bary) {
                    *slot.entry(iq).or_default() += base * l;
                }
            }
        }
    }

    let n_q = space_q.n_dofs();
    let n_u = space_u.n_dofs();
    let mut row_offsets = vec![0; n_u + 1];
    let mut col_indices = Vec::with_capacity(entries.len());
    let mut term_offsets = vec![0];
    let mut terms = Vec::new();
    let mut by_q = vec![Vec::new(); n_q];
    for ((i1, i2), contrib) in entries {
        row_offsets[i1 + 1] += 1;
        col_indices.push(i2);
        for (i, val) in contrib {
            terms.push((i, val));
            by_q[i].push((i1, i2, val));
        }
        term_offsets.push(terms.len());
    }
    for r in 0..n_u {
        row_offsets[r + 1] += row_offsets[r];
    }
    Ok(Trilinear {
        n_q,
        n_u,
        row_offsets,
        col_indices,
        term_offsets,
        terms,
        by_q,
    })
}

impl Trilinear {
    pub fn n_q(&self) -> usize {
        self.n_q
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    /// Single entry `G[i, i1, i2]` (zero outside the pattern).
    pub fn get(&self, i: usize, i1: usize, i2: usize) -> f64 {
        let row = &self.col_indices[self.row_offsets[i1]..self.row_offsets[i1 + 1]];
        match row.binary_search(&i2) {
            Ok(k) => {
                let k = self.row_offsets[i1] + k;
                self.terms[self.term_offsets[k]..self.term_offsets[k + 1]]
                    .iter()
                    .find(|t| t.0 == i)
                    .map_or(0.0, |t| t.1)
            }
            Err(_) => 0.0,
        }
    }

    /// Entries `(i1, i2, value)` with coarse index `i`.
    pub fn slice(&self, i: usize) -> &[(usize, usize, f64)] {
        &self.by_q[i]
    }

    /// Weighted stiffness matrix `Σ_i q[i] G[i, ·, ·]` on the state space.
    pub fn contract(&self, q: &[f64]) -> CsrMatrix<f64> {
        let values: Vec<f64> = (0..self.col_indices.len())
            .map(|k| {
                self.terms[self.term_offsets[k]..self.term_offsets[k + 1]]
                    .iter()
                    .map(|&(i, v)| q[i] * v)
                    .sum()
            })
            .collect();
        CsrMatrix::try_from_csr_data(
            self.n_u,
            self.n_u,
            self.row_offsets.clone(),
            self.col_indices.clone(),
            values,
        )
        .expect("pattern built from sorted entries")
    }

    /// `g[i] = Σ G[i, i1, i2] a[i1] b[i2]`.
    pub fn bilinear(&self, a: &[f64], b: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(self.n_q);
        for i1 in 0..self.n_u {
            if a[i1] == 0.0 {
                continue;
            }
            for k in self.row_offsets[i1]..self.row_offsets[i1 + 1] {
                let w = a[i1] * b[self.col_indices[k]];
                if w == 0.0 {
                    continue;
                }
                for &(i, v) in &self.terms[self.term_offsets[k]..self.term_offsets[k + 1]] {
                    g[i] += v * w;
                }
            }
        }
        g
    }

    /// `Σ_i2 G[i, ·, i2] u[i2]` as a dense vector on the state space.
    pub fn apply_slice(&self, i: usize, u: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_u);
        for &(i1, i2, v) in &self.by_q[i] {
            out[i1] += v * u[i2];
        }
        out
    }
}
