//! Simplicial meshes (triangles in 2D, tetrahedra in 3D) with P1 nodal and
//! P0 cell fields, the geometric queries used by the eikonal and geodesic
//! machinery, scenario generators and VTK I/O.

pub mod search;
pub mod setup;
pub mod vtk;

use crate::error::{GeasiError, Result};
use crate::linalg::{dist, solve_sym2, sub, Point, SymTensor};
use crate::sparse::{solve_cg, CooBuilder, CsrMatrix};
use std::collections::BTreeMap;
use std::sync::OnceLock;

/// Per-cell symmetric positive definite conduction tensors (mm^2/ms^2).
pub type ConductionTensorField = Vec<SymTensor>;

/// Measurement nodes and observed activation times (ms).
#[derive(Debug, Clone)]
pub struct MeasurementSet {
    pub nodes: Vec<usize>,
    pub times: Vec<f64>,
}

impl MeasurementSet {
    pub fn validate(&self, node_count: usize) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(GeasiError::Mesh("measurement set is empty".into()));
        }
        if self.nodes.len() != self.times.len() {
            return Err(GeasiError::Mesh(
                "measurement node/time length mismatch".into(),
            ));
        }
        let mut seen = vec![false; node_count];
        for &n in &self.nodes {
            if n >= node_count {
                return Err(GeasiError::Mesh(format!("measurement node {n} out of range")));
            }
            if seen[n] {
                return Err(GeasiError::Mesh(format!("duplicate measurement node {n}")));
            }
            seen[n] = true;
        }
        Ok(())
    }
}

/// Simplicial mesh; immutable after construction.
#[derive(Debug)]
pub struct SimplicialMesh {
    pub dim: usize,
    pub nodes: Vec<Point>,
    /// Flattened cell connectivity, `dim + 1` node indices per cell.
    cells: Vec<usize>,
    /// Flattened boundary faces, `dim` node indices per face.
    boundary_faces: Vec<usize>,
    /// Mean edge length (mm).
    pub h: f64,
    node_cells: Vec<Vec<usize>>,
    node_neighbors: Vec<Vec<usize>>,
    mass: OnceLock<CsrMatrix>,
}

impl SimplicialMesh {
    pub fn new(dim: usize, nodes: Vec<Point>, cells_flat: Vec<usize>) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(GeasiError::Mesh(format!("unsupported dimension {dim}")));
        }
        let nv = dim + 1;
        if cells_flat.len() % nv != 0 {
            return Err(GeasiError::Mesh("cell array length not a multiple of dim+1".into()));
        }
        let ncells = cells_flat.len() / nv;
        for &i in &cells_flat {
            if i >= nodes.len() {
                return Err(GeasiError::Mesh(format!("cell node index {i} out of range")));
            }
        }

        let mut mesh = SimplicialMesh {
            dim,
            nodes,
            cells: cells_flat,
            boundary_faces: Vec::new(),
            h: 0.0,
            node_cells: Vec::new(),
            node_neighbors: Vec::new(),
            mass: OnceLock::new(),
        };

        for c in 0..ncells {
            let vol = mesh.cell_volume(c);
            if vol < 1e-12 {
                return Err(GeasiError::Mesh(format!(
                    "degenerate cell {c} with volume {vol}"
                )));
            }
        }

        // face -> incidence count; boundary faces occur exactly once
        let mut face_count: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        for c in 0..ncells {
            let cell = mesh.cell(c).to_vec();
            for skip in 0..nv {
                let mut face: Vec<usize> = cell
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| k != skip)
                    .map(|(_, &n)| n)
                    .collect();
                face.sort_unstable();
                *face_count.entry(face).or_insert(0) += 1;
            }
        }
        for (face, count) in &face_count {
            if *count == 1 {
                mesh.boundary_faces.extend_from_slice(face);
            }
        }

        // mean edge length over unique edges
        let mut edges: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for c in 0..ncells {
            let cell = mesh.cell(c).to_vec();
            for i in 0..nv {
                for j in i + 1..nv {
                    let (a, b) = (cell[i].min(cell[j]), cell[i].max(cell[j]));
                    edges
                        .entry((a, b))
                        .or_insert_with(|| dist(mesh.nodes[a], mesh.nodes[b]));
                }
            }
        }
        if edges.is_empty() {
            return Err(GeasiError::Mesh("mesh has no cells".into()));
        }
        mesh.h = edges.values().sum::<f64>() / edges.len() as f64;

        let mut node_cells = vec![Vec::new(); mesh.nodes.len()];
        let mut node_neighbors: Vec<Vec<usize>> = vec![Vec::new(); mesh.nodes.len()];
        for c in 0..ncells {
            for &n in mesh.cell(c) {
                node_cells[n].push(c);
            }
        }
        for ((a, b), _) in edges {
            node_neighbors[a].push(b);
            node_neighbors[b].push(a);
        }
        mesh.node_cells = node_cells;
        mesh.node_neighbors = node_neighbors;
        Ok(mesh)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len() / (self.dim + 1)
    }

    pub fn cell(&self, c: usize) -> &[usize] {
        let nv = self.dim + 1;
        &self.cells[c * nv..(c + 1) * nv]
    }

    pub fn boundary_face_count(&self) -> usize {
        self.boundary_faces.len() / self.dim
    }

    pub fn boundary_face(&self, f: usize) -> &[usize] {
        &self.boundary_faces[f * self.dim..(f + 1) * self.dim]
    }

    /// All node indices that appear on the boundary, sorted and unique.
    pub fn boundary_nodes(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.boundary_faces.clone();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn cells_of_node(&self, n: usize) -> &[usize] {
        &self.node_cells[n]
    }

    pub fn neighbors_of_node(&self, n: usize) -> &[usize] {
        &self.node_neighbors[n]
    }

    pub fn cell_volume(&self, c: usize) -> f64 {
        let cell = self.cell(c);
        let p0 = self.nodes[cell[0]];
        if self.dim == 2 {
            let e1 = sub(self.nodes[cell[1]], p0);
            let e2 = sub(self.nodes[cell[2]], p0);
            0.5 * (e1[0] * e2[1] - e1[1] * e2[0]).abs()
        } else {
            let e1 = sub(self.nodes[cell[1]], p0);
            let e2 = sub(self.nodes[cell[2]], p0);
            let e3 = sub(self.nodes[cell[3]], p0);
            let det = e1[0] * (e2[1] * e3[2] - e2[2] * e3[1])
                - e1[1] * (e2[0] * e3[2] - e2[2] * e3[0])
                + e1[2] * (e2[0] * e3[1] - e2[1] * e3[0]);
            det.abs() / 6.0
        }
    }

    pub fn cell_centroid(&self, c: usize) -> Point {
        let cell = self.cell(c);
        let mut p = [0.0; 3];
        for &n in cell {
            for k in 0..3 {
                p[k] += self.nodes[n][k];
            }
        }
        let inv = 1.0 / cell.len() as f64;
        [p[0] * inv, p[1] * inv, p[2] * inv]
    }

    /// Barycentric coordinates of `x` with respect to cell `c` (d+1 entries,
    /// trailing entry unused in 2D slot 3).
    pub fn barycentric(&self, c: usize, x: Point) -> [f64; 4] {
        let cell = self.cell(c);
        let p0 = self.nodes[cell[0]];
        let r = sub(x, p0);
        if self.dim == 2 {
            let e1 = sub(self.nodes[cell[1]], p0);
            let e2 = sub(self.nodes[cell[2]], p0);
            let det = e1[0] * e2[1] - e1[1] * e2[0];
            let l1 = (r[0] * e2[1] - r[1] * e2[0]) / det;
            let l2 = (e1[0] * r[1] - e1[1] * r[0]) / det;
            [1.0 - l1 - l2, l1, l2, 0.0]
        } else {
            let e1 = sub(self.nodes[cell[1]], p0);
            let e2 = sub(self.nodes[cell[2]], p0);
            let e3 = sub(self.nodes[cell[3]], p0);
            let sol = crate::linalg::solve_dense(
                vec![
                    vec![e1[0], e2[0], e3[0]],
                    vec![e1[1], e2[1], e3[1]],
                    vec![e1[2], e2[2], e3[2]],
                ],
                vec![r[0], r[1], r[2]],
            )
            .unwrap_or([0.0, 0.0, 0.0].to_vec());
            [1.0 - sol[0] - sol[1] - sol[2], sol[0], sol[1], sol[2]]
        }
    }

    /// P1 interpolation of a nodal scalar field at barycentric coordinates.
    pub fn interpolate_scalar(&self, c: usize, bary: &[f64; 4], u: &[f64]) -> f64 {
        self.cell(c)
            .iter()
            .enumerate()
            .map(|(k, &n)| bary[k] * u[n])
            .sum()
    }

    pub fn interpolate_vector(&self, c: usize, bary: &[f64; 4], u: &[Point]) -> Point {
        let mut v = [0.0; 3];
        for (k, &n) in self.cell(c).iter().enumerate() {
            for d in 0..3 {
                v[d] += bary[k] * u[n][d];
            }
        }
        v
    }

    /// Constant gradient of the P1 interpolant on each cell.
    pub fn p0_gradient(&self, u: &[f64]) -> Vec<Point> {
        assert_eq!(u.len(), self.node_count());
        (0..self.cell_count()).map(|c| self.cell_gradient(c, u)).collect()
    }

    pub fn cell_gradient(&self, c: usize, u: &[f64]) -> Point {
        let cell = self.cell(c);
        let p0 = self.nodes[cell[0]];
        if self.dim == 2 {
            let e1 = sub(self.nodes[cell[1]], p0);
            let e2 = sub(self.nodes[cell[2]], p0);
            let d1 = u[cell[1]] - u[cell[0]];
            let d2 = u[cell[2]] - u[cell[0]];
            // solve [e1; e2]^T g = [d1; d2] for in-plane g
            let det = e1[0] * e2[1] - e1[1] * e2[0];
            [
                (d1 * e2[1] - d2 * e1[1]) / det,
                (d2 * e1[0] - d1 * e2[0]) / det,
                0.0,
            ]
        } else {
            let e1 = sub(self.nodes[cell[1]], p0);
            let e2 = sub(self.nodes[cell[2]], p0);
            let e3 = sub(self.nodes[cell[3]], p0);
            let sol = crate::linalg::solve_dense(
                vec![
                    vec![e1[0], e1[1], e1[2]],
                    vec![e2[0], e2[1], e2[2]],
                    vec![e3[0], e3[1], e3[2]],
                ],
                vec![
                    u[cell[1]] - u[cell[0]],
                    u[cell[2]] - u[cell[0]],
                    u[cell[3]] - u[cell[0]],
                ],
            )
            .expect("non-degenerate cell");
            [sol[0], sol[1], sol[2]]
        }
    }

    /// Consistent P1 mass matrix, assembled once and cached.
    pub fn mass_matrix(&self) -> &CsrMatrix {
        self.mass.get_or_init(|| {
            let nv = self.dim + 1;
            let mut coo = CooBuilder::new(self.node_count());
            for c in 0..self.cell_count() {
                let vol = self.cell_volume(c);
                let f = vol / ((nv * (nv + 1)) as f64);
                let cell = self.cell(c);
                for i in 0..nv {
                    for j in 0..nv {
                        let v = if i == j { 2.0 * f } else { f };
                        coo.add(cell[i], cell[j], v);
                    }
                }
            }
            coo.build()
        })
    }

    /// L2 projection of a P0 vector field onto P1, componentwise through the
    /// mass-matrix system.
    pub fn l2_project_to_p1(&self, g: &[Point]) -> Result<Vec<Point>> {
        assert_eq!(g.len(), self.cell_count());
        let nv = self.dim + 1;
        let m = self.mass_matrix();
        let mut out = vec![[0.0; 3]; self.node_count()];
        for comp in 0..self.dim {
            let mut b = vec![0.0; self.node_count()];
            for c in 0..self.cell_count() {
                let w = self.cell_volume(c) / nv as f64;
                for &n in self.cell(c) {
                    b[n] += w * g[c][comp];
                }
            }
            let q = solve_cg(m, &b, 1e-12, 20 * self.node_count().max(100), false)?;
            for (n, v) in q.into_iter().enumerate() {
                out[n][comp] = v;
            }
        }
        Ok(out)
    }

    pub fn bounding_box(&self) -> (Point, Point) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.nodes {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }

    pub fn diameter(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        dist(lo, hi)
    }
}

/// Returns the barycentric coordinates of the orthogonal projection of a
/// point onto the plane/line spanned by a face, clamped to the simplex.
pub(crate) fn project_point_to_face(face: &[Point], x: Point) -> Point {
    match face.len() {
        1 => face[0],
        2 => {
            let d = sub(face[1], face[0]);
            let t = crate::linalg::dot(sub(x, face[0]), d) / crate::linalg::dot(d, d);
            let t = t.clamp(0.0, 1.0);
            crate::linalg::add(face[0], crate::linalg::scale(d, t))
        }
        3 => {
            let e1 = sub(face[1], face[0]);
            let e2 = sub(face[2], face[0]);
            let r = sub(x, face[0]);
            let g11 = crate::linalg::dot(e1, e1);
            let g12 = crate::linalg::dot(e1, e2);
            let g22 = crate::linalg::dot(e2, e2);
            let b = [crate::linalg::dot(r, e1), crate::linalg::dot(r, e2)];
            if let Some([l1, l2]) = solve_sym2(g11, g12, g22, b) {
                if l1 >= 0.0 && l2 >= 0.0 && l1 + l2 <= 1.0 {
                    return crate::linalg::add(
                        face[0],
                        crate::linalg::add(
                            crate::linalg::scale(e1, l1),
                            crate::linalg::scale(e2, l2),
                        ),
                    );
                }
            }
            // closest point is on one of the edges
            let mut best = project_point_to_face(&[face[0], face[1]], x);
            let mut best_d = dist(best, x);
            for edge in [[face[1], face[2]], [face[0], face[2]]] {
                let p = project_point_to_face(&edge, x);
                let d = dist(p, x);
                if d < best_d {
                    best_d = d;
                    best = p;
                }
            }
            best
        }
        _ => unreachable!("faces have 1..=3 vertices"),
    }
}
