//! Synthetic scenario generators: the heterogeneous square, the annular
//! left-ventricle slice with transmural fiber rotation, and a small
//! structured 3D box.

use super::{ConductionTensorField, MeasurementSet, SimplicialMesh};
use crate::error::{GeasiError, Result};
use crate::linalg::{Point, SymTensor};
use serde::{Deserialize, Serialize};

/// Smooth periodic velocity field c(x) = c0 + a sin(kx) sin(ky) on the square,
/// with k chosen so the field repeats `periods` times per side.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SquareVelocity {
    pub c0: f64,
    pub amplitude: f64,
    pub periods: f64,
}

impl Default for SquareVelocity {
    fn default() -> Self {
        Self {
            c0: 0.7,
            amplitude: 0.3,
            periods: 2.0,
        }
    }
}

impl SquareVelocity {
    pub fn speed(&self, side: f64, p: Point) -> f64 {
        let k = 2.0 * std::f64::consts::PI * self.periods / side;
        self.c0 + self.amplitude * (k * p[0]).sin() * (k * p[1]).sin()
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.c0 - self.amplitude.abs(), self.c0 + self.amplitude.abs())
    }
}

/// Structured triangulation of `[0, side]^2` with `n` nodes per side.
pub fn structured_square(side: f64, n: usize) -> SimplicialMesh {
    assert!(n >= 2);
    let d = side / (n - 1) as f64;
    let mut nodes = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            nodes.push([i as f64 * d, j as f64 * d, 0.0]);
        }
    }
    let idx = |i: usize, j: usize| j * n + i;
    let mut cells = Vec::with_capacity(6 * (n - 1) * (n - 1));
    for j in 0..n - 1 {
        for i in 0..n - 1 {
            let (a, b, c, e) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            // alternate the diagonal for a more isotropic stencil
            if (i + j) % 2 == 0 {
                cells.extend_from_slice(&[a, b, c]);
                cells.extend_from_slice(&[a, c, e]);
            } else {
                cells.extend_from_slice(&[a, b, e]);
                cells.extend_from_slice(&[b, c, e]);
            }
        }
    }
    SimplicialMesh::new(2, nodes, cells).expect("structured square is valid")
}

/// Square setup: 2 cm side, periodic isotropic velocity, measurements on
/// the full boundary (times are filled by forward simulation or from file).
pub fn generate_square_setup(
    n_per_side: usize,
    velocity: &SquareVelocity,
) -> Result<(SimplicialMesh, ConductionTensorField, MeasurementSet)> {
    if n_per_side < 8 {
        return Err(GeasiError::Config(
            "square setup needs at least 8 nodes per side".into(),
        ));
    }
    let side = 20.0; // mm
    let mesh = structured_square(side, n_per_side);
    let tensors: ConductionTensorField = (0..mesh.cell_count())
        .map(|c| {
            let speed = velocity.speed(side, mesh.cell_centroid(c));
            SymTensor::isotropic(2, speed * speed)
        })
        .collect();
    let nodes = mesh.boundary_nodes();
    let times = vec![0.0; nodes.len()];
    Ok((mesh, tensors, MeasurementSet { nodes, times }))
}

/// Parameters of the annular LV-slice scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LvSliceParams {
    pub inner_radius: f64,
    pub outer_radius: f64,
    pub cv_fiber: f64,
    pub cv_transverse: f64,
    /// Fiber angle relative to the circumferential direction at the inner
    /// wall (degrees); rotates linearly to `fiber_angle_epi` at the outer wall.
    pub fiber_angle_endo: f64,
    pub fiber_angle_epi: f64,
}

impl Default for LvSliceParams {
    fn default() -> Self {
        Self {
            inner_radius: 5.0,
            outer_radius: 10.0,
            cv_fiber: 0.6,
            cv_transverse: 0.4,
            fiber_angle_endo: -60.0,
            fiber_angle_epi: 60.0,
        }
    }
}

impl LvSliceParams {
    /// Fiber angle (radians) at radius r, linear in the transmural coordinate.
    pub fn fiber_angle(&self, r: f64) -> f64 {
        let s = ((r - self.inner_radius) / (self.outer_radius - self.inner_radius))
            .clamp(0.0, 1.0);
        let deg = self.fiber_angle_endo + s * (self.fiber_angle_epi - self.fiber_angle_endo);
        deg.to_radians()
    }
}

/// Annulus mesh with transmurally rotating fibers; measurements on the
/// outer ring (epicardial slice).
pub fn generate_lv_slice_setup(
    n_radial: usize,
    n_angular: usize,
    params: &LvSliceParams,
) -> Result<(SimplicialMesh, ConductionTensorField, MeasurementSet)> {
    if n_radial < 3 || n_angular < 16 {
        return Err(GeasiError::Config(
            "LV slice needs n_radial >= 3 and n_angular >= 16".into(),
        ));
    }
    if params.inner_radius >= params.outer_radius {
        return Err(GeasiError::Config(
            "degenerate annulus: inner radius >= outer radius".into(),
        ));
    }
    let mut nodes = Vec::with_capacity(n_radial * n_angular);
    for i in 0..n_radial {
        let r = params.inner_radius
            + (params.outer_radius - params.inner_radius) * i as f64 / (n_radial - 1) as f64;
        for j in 0..n_angular {
            let th = 2.0 * std::f64::consts::PI * j as f64 / n_angular as f64;
            nodes.push([r * th.cos(), r * th.sin(), 0.0]);
        }
    }
    let idx = |i: usize, j: usize| i * n_angular + (j % n_angular);
    let mut cells = Vec::new();
    for i in 0..n_radial - 1 {
        for j in 0..n_angular {
            let (a, b, c, e) = (idx(i, j), idx(i, j + 1), idx(i + 1, j + 1), idx(i + 1, j));
            cells.extend_from_slice(&[a, b, c]);
            cells.extend_from_slice(&[a, c, e]);
        }
    }
    let mesh = SimplicialMesh::new(2, nodes, cells)?;

    let tensors: ConductionTensorField = (0..mesh.cell_count())
        .map(|c| {
            let ctr = mesh.cell_centroid(c);
            let r = (ctr[0] * ctr[0] + ctr[1] * ctr[1]).sqrt();
            let th = ctr[1].atan2(ctr[0]);
            let circ = [-th.sin(), th.cos(), 0.0];
            let rad = [th.cos(), th.sin(), 0.0];
            let alpha = params.fiber_angle(r);
            let fiber = [
                alpha.cos() * circ[0] + alpha.sin() * rad[0],
                alpha.cos() * circ[1] + alpha.sin() * rad[1],
                0.0,
            ];
            let trans = [-fiber[1], fiber[0], 0.0];
            let mut d = SymTensor::zero_2d();
            d.add_outer(fiber, params.cv_fiber * params.cv_fiber);
            d.add_outer(trans, params.cv_transverse * params.cv_transverse);
            d
        })
        .collect();

    let outer: Vec<usize> = (0..n_angular).map(|j| idx(n_radial - 1, j)).collect();
    let times = vec![0.0; outer.len()];
    Ok((mesh, tensors, MeasurementSet { nodes: outer, times }))
}

/// Structured tetrahedral box (Kuhn subdivision), isotropic speed; the small
/// 3D analog scenario. Measurements on the boundary nodes.
pub fn generate_box3d_setup(
    side: f64,
    n_per_side: usize,
    speed: f64,
) -> Result<(SimplicialMesh, ConductionTensorField, MeasurementSet)> {
    if n_per_side < 3 {
        return Err(GeasiError::Config("box3d needs at least 3 nodes per side".into()));
    }
    let n = n_per_side;
    let d = side / (n - 1) as f64;
    let mut nodes = Vec::with_capacity(n * n * n);
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                nodes.push([i as f64 * d, j as f64 * d, k as f64 * d]);
            }
        }
    }
    let idx = |i: usize, j: usize, k: usize| (k * n + j) * n + i;
    // six tetrahedra per cube along the main diagonal
    const TETS: [[usize; 4]; 6] = [
        [0, 1, 3, 7],
        [0, 1, 5, 7],
        [0, 2, 3, 7],
        [0, 2, 6, 7],
        [0, 4, 5, 7],
        [0, 4, 6, 7],
    ];
    let mut cells = Vec::new();
    for k in 0..n - 1 {
        for j in 0..n - 1 {
            for i in 0..n - 1 {
                let corners = [
                    idx(i, j, k),
                    idx(i + 1, j, k),
                    idx(i, j + 1, k),
                    idx(i + 1, j + 1, k),
                    idx(i, j, k + 1),
                    idx(i + 1, j, k + 1),
                    idx(i, j + 1, k + 1),
                    idx(i + 1, j + 1, k + 1),
                ];
                for tet in TETS {
                    cells.extend(tet.iter().map(|&t| corners[t]));
                }
            }
        }
    }
    let mesh = SimplicialMesh::new(3, nodes, cells)?;
    let tensors = vec![SymTensor::isotropic(3, speed * speed); mesh.cell_count()];
    let nodes = mesh.boundary_nodes();
    let times = vec![0.0; nodes.len()];
    Ok((mesh, tensors, MeasurementSet { nodes, times }))
}
