//! Uniform simplicial meshes of the unit interval and unit square.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Link between a uniformly refined mesh and the mesh it was refined from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    /// Parent element of every fine element.
    pub parent_element: Vec<usize>,
    /// Fine index of every coarse vertex.
    pub coarse_vertex: Vec<usize>,
    pub coarse_element_count: usize,
}

/// A conforming mesh of intervals (dim 1) or triangles (dim 2).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    dim: usize,
    vertices: Vec<Vec<f64>>,
    elements: Vec<Vec<usize>>,
    boundary_vertices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    refinement: Option<Refinement>,
}

/// Uniform partition of [0, 1].
pub fn build_interval_mesh(n_elems: usize) -> Result<Mesh> {
    if n_elems == 0 {
        return Err(invalid("interval mesh needs at least one element"));
    }
    let vertices = (0..=n_elems).map(|k| vec![k as f64 / n_elems as f64]).collect();
    let elements = (0..n_elems).map(|k| vec![k, k + 1]).collect();
    Ok(Mesh {
        dim: 1,
        vertices,
        elements,
        boundary_vertices: vec![0, n_elems],
        refinement: None,
    })
}

/// Unit square split into `n_per_side`² squares, each cut along the
/// bottom-left to top-right diagonal. Vertices are numbered row by row.
pub fn build_unit_square_mesh(n_per_side: usize) -> Result<Mesh> {
    let n = n_per_side;
    if n == 0 {
        return Err(invalid("square mesh needs at least one cell per side"));
    }
    let idx = |i: usize, j: usize| j * (n + 1) + i;
    let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
    let mut boundary = Vec::new();
    for j in 0..=n {
        for i in 0..=n {
            vertices.push(vec![i as f64 / n as f64, j as f64 / n as f64]);
            if i == 0 || j == 0 || i == n || j == n {
                boundary.push(idx(i, j));
            }
        }
    }
    let mut elements = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let (v00, v10, v11, v01) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            elements.push(vec![v00, v10, v11]);
            elements.push(vec![v00, v11, v01]);
        }
    }
    Ok(Mesh {
        dim: 2,
        vertices,
        elements,
        boundary_vertices: boundary,
        refinement: None,
    })
}

/// Bisects every interval or splits every triangle into four congruent
/// children. Fine vertices are renumbered lexicographically by (y, x).
pub fn refine_uniform(mesh: &Mesh) -> Mesh {
    let mut coords: Vec<Vec<f64>> = mesh.vertices.clone();
    let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut mid = |a: usize, b: usize, coords: &mut Vec<Vec<f64>>| -> usize {
        let key = (a.min(b), a.max(b));
        *midpoint.entry(key).or_insert_with(|| {
            let p = coords[a].iter().zip(&coords[b]).map(|(x, y)| 0.5 * (x + y)).collect();
            coords.push(p);
            coords.len() - 1
        })
    };
    let mut children = Vec::with_capacity(mesh.elements.len() * (1 << mesh.dim));
    let mut parent = Vec::with_capacity(children.capacity());
    for (e, el) in mesh.elements.iter().enumerate() {
        if mesh.dim == 1 {
            let m = mid(el[0], el[1], &mut coords);
            children.push(vec![el[0], m]);
            children.push(vec![m, el[1]]);
            parent.extend([e, e]);
        } else {
            let (a, b, c) = (el[0], el[1], el[2]);
            let ab = mid(a, b, &mut coords);
            let bc = mid(b, c, &mut coords);
            let ca = mid(c, a, &mut coords);
            children.push(vec![a, ab, ca]);
            children.push(vec![ab, b, bc]);
            children.push(vec![ca, bc, c]);
            children.push(vec![ab, bc, ca]);
            parent.extend([e, e, e, e]);
        }
    }

    let mut order: Vec<usize> = (0..coords.len()).collect();
    order.sort_by(|&u, &v| {
        let ku = coords[u].iter().rev();
        let kv = coords[v].iter().rev();
        ku.partial_cmp(kv).expect("finite coordinates")
    });
    let mut new_index = vec![0; coords.len()];
    for (new, &old) in order.iter().enumerate() {
        new_index[old] = new;
    }
    let vertices = order.iter().map(|&old| coords[old].clone()).collect();
    let elements: Vec<Vec<usize>> = children
        .into_iter()
        .map(|el| el.into_iter().map(|v| new_index[v]).collect())
        .collect();
    let coarse_vertex = (0..mesh.vertices.len()).map(|v| new_index[v]).collect();
    let boundary_vertices = topological_boundary(mesh.dim, &elements);
    Mesh {
        dim: mesh.dim,
        vertices,
        elements,
        boundary_vertices,
        refinement: Some(Refinement {
            parent_element: parent,
            coarse_vertex,
            coarse_element_count: mesh.elements.len(),
        }),
    }
}

/// Vertices on facets that belong to exactly one element.
fn topological_boundary(dim: usize, elements: &[Vec<usize>]) -> Vec<usize> {
    let mut count: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for el in elements {
        for skip in 0..el.len() {
            let mut facet: Vec<usize> = el
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != skip)
                .map(|(_, &v)| v)
                .collect();
            facet.sort_unstable();
            *count.entry(facet).or_default() += 1;
        }
    }
    debug_assert!(dim == 1 || dim == 2);
    let set: BTreeSet<usize> = count
        .into_iter()
        .filter(|&(_, c)| c == 1)
        .flat_map(|(f, _)| f)
        .collect();
    set.into_iter().collect()
}

impl Mesh {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vertices(&self) -> &[Vec<f64>] {
        &self.vertices
    }

    pub fn elements(&self) -> &[Vec<usize>] {
        &self.elements
    }

    pub fn boundary_vertices(&self) -> &[usize] {
        &self.boundary_vertices
    }

    pub fn refinement(&self) -> Option<&Refinement> {
        self.refinement.as_ref()
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    /// Signed measure of an element (length or oriented area).
    pub fn signed_measure(&self, e: usize) -> f64 {
        let el = &self.elements[e];
        let p = |k: usize| &self.vertices[el[k]];
        if self.dim == 1 {
            p(1)[0] - p(0)[0]
        } else {
            let (a, b, c) = (p(0), p(1), p(2));
            0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
        }
    }

    /// Measure of an element and the constant gradients of its local
    /// barycentric basis functions.
    pub fn element_geometry(&self, e: usize) -> (f64, Vec<[f64; 2]>) {
        let el = &self.elements[e];
        let p = |k: usize| &self.vertices[el[k]];
        if self.dim == 1 {
            let h = p(1)[0] - p(0)[0];
            (h.abs(), vec![[-1.0 / h, 0.0], [1.0 / h, 0.0]])
        } else {
            let (a, b, c) = (p(0), p(1), p(2));
            let twice = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
            let grads = vec![
                [(b[1] - c[1]) / twice, (c[0] - b[0]) / twice],
                [(c[1] - a[1]) / twice, (a[0] - c[0]) / twice],
                [(a[1] - b[1]) / twice, (b[0] - a[0]) / twice],
            ];
            (0.5 * twice.abs(), grads)
        }
    }

    /// Barycentric coordinates of `x` with respect to element `e`.
    pub fn barycentric(&self, e: usize, x: &[f64]) -> Vec<f64> {
        let el = &self.elements[e];
        let p = |k: usize| &self.vertices[el[k]];
        if self.dim == 1 {
            let t = (x[0] - p(0)[0]) / (p(1)[0] - p(0)[0]);
            vec![1.0 - t, t]
        } else {
            let (a, b, c) = (p(0), p(1), p(2));
            let twice = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
            let l1 = ((x[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (x[1] - a[1])) / twice;
            let l2 = ((b[0] - a[0]) * (x[1] - a[1]) - (x[0] - a[0]) * (b[1] - a[1])) / twice;
            vec![1.0 - l1 - l2, l1, l2]
        }
    }

    /// Element containing `x` together with its barycentric coordinates.
    pub fn locate(&self, x: &[f64]) -> Option<(usize, Vec<f64>)> {
        if x.len() != self.dim {
            return None;
        }
        (0..self.elements.len()).find_map(|e| {
            let bary = self.barycentric(e, x);
            bary.iter().all(|&l| l >= -1e-12).then_some((e, bary))
        })
    }

    /// Checks the structural invariants of the mesh.
    pub fn validate(&self) -> Result<()> {
        if self.dim != 1 && self.dim != 2 {
            return Err(invalid(format!("unsupported mesh dimension {}", self.dim)));
        }
        if self.vertices.iter().any(|v| v.len() != self.dim) {
            return Err(invalid("vertex with wrong number of coordinates"));
        }
        for (e, el) in self.elements.iter().enumerate() {
            if el.len() != self.dim + 1 {
                return Err(invalid(format!("element {e} has {} vertices", el.len())));
            }
            if el.iter().any(|&v| v >= self.vertices.len()) {
                return Err(invalid(format!("element {e} references a missing vertex")));
            }
            let distinct: BTreeSet<_> = el.iter().collect();
            if distinct.len() != el.len() {
                return Err(invalid(format!("element {e} repeats a vertex")));
            }
            if self.signed_measure(e) <= 0.0 {
                return Err(invalid(format!("element {e} has non-positive orientation")));
            }
        }
        if topological_boundary(self.dim, &self.elements) != self.boundary_vertices {
            return Err(invalid("boundary vertex set does not match mesh topology"));
        }
        Ok(())
    }
}

/// A P1 finite element space on a mesh.
#[derive(Clone, Debug)]
pub struct FeSpace {
    mesh: Mesh,
    dirichlet_mask: Vec<bool>,
}

impl FeSpace {
    pub fn new(mesh: Mesh, dirichlet: bool) -> Self {
        let mut dirichlet_mask = vec![false; mesh.n_vertices()];
        if dirichlet {
            for &v in mesh.boundary_vertices() {
                dirichlet_mask[v] = true;
            }
        }
        Self { mesh, dirichlet_mask }
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn n_dofs(&self) -> usize {
        self.mesh.n_vertices()
    }

    pub fn dirichlet_mask(&self) -> &[bool] {
        &self.dirichlet_mask
    }

    /// Value at `x` of the P1 function with nodal values `values`.
    pub fn evaluate(&self, values: &[f64], x: &[f64]) -> Option<f64> {
        let (e, bary) = self.mesh.locate(x)?;
        Some(
            self.mesh.elements()[e]
                .iter()
                .zip(&bary)
                .map(|(&v, l)| values[v] * l)
                .sum(),
        )
    }
}
