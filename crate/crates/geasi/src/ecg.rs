//! Lead-field ECG forward model and ECG-driven site identification: torso
//! embedding on a regular grid, finite-difference lead-field solves, the
//! action-potential template waveform, trace evaluation as a volume integral,
//! analytic trace sensitivities, and a Gauss–Newton fit against target traces.

use crate::eikonal::{solve_eikonal, ActivationMap, EasSet, EasSite, FimOptions, NO_OWNER};
use crate::error::{GeasiError, Result};
use crate::geodesic::{distance_gradient, trace_batch, TraceContext, TraceOptions};
use crate::linalg::{dist, dot, Point, SymTensor};
use crate::mesh::search::MeshSearch;
use crate::mesh::{ConductionTensorField, SimplicialMesh};
use crate::sparse::{solve_cg, CooBuilder, CsrMatrix};
use rayon::prelude::*;

/// Action-potential template and bidomain scaling constants.
#[derive(Debug, Clone, Copy)]
pub struct WaveformParams {
    /// Resting potential (mV).
    pub k0: f64,
    /// Plateau potential (mV).
    pub k1: f64,
    /// Upstroke time constant (ms).
    pub tau1: f64,
    /// Repolarization time constant (ms).
    pub tau2: f64,
    /// Action potential duration (ms).
    pub apd: f64,
    /// Velocity-to-conductivity scaling (mm²/(mS·ms²)).
    pub alpha_sq: f64,
    /// Surface-to-volume ratio (1/mm).
    pub beta: f64,
    /// Intra- to extracellular anisotropy ratio.
    pub lambda: f64,
}

impl Default for WaveformParams {
    fn default() -> Self {
        Self {
            k0: -85.0,
            k1: 30.0,
            tau1: 1.0,
            tau2: 50.0,
            apd: 200.0,
            alpha_sq: 400.0,
            beta: 100.0,
            lambda: 3.0,
        }
    }
}

fn sech2(x: f64) -> f64 {
    if x.abs() > 300.0 {
        0.0
    } else {
        let c = x.cosh();
        1.0 / (c * c)
    }
}

/// Template transmembrane potential and its first two derivatives at local
/// time `xi` (ms since activation).
pub fn waveform(xi: f64, p: &WaveformParams) -> (f64, f64, f64) {
    let a = (p.k1 - p.k0) / 2.0;
    let u1 = 2.0 * xi / p.tau1;
    let u2 = 2.0 * (xi - p.apd) / p.tau2;
    let u = p.k0 + a * (u1.tanh() - u2.tanh());
    let du = a * (2.0 / p.tau1 * sech2(u1) - 2.0 / p.tau2 * sech2(u2));
    let d2u = a
        * (-8.0 / (p.tau1 * p.tau1) * sech2(u1) * u1.tanh()
            + 8.0 / (p.tau2 * p.tau2) * sech2(u2) * u2.tanh());
    (u, du, d2u)
}

/// Splits each conduction tensor into intracellular, extracellular, and bulk
/// conductivities under the equal-anisotropy-ratio assumption.
pub fn conductivities_from_d(
    d: &ConductionTensorField,
    p: &WaveformParams,
) -> (
    ConductionTensorField,
    ConductionTensorField,
    ConductionTensorField,
) {
    let factor = p.beta / p.alpha_sq * (1.0 + p.lambda) / p.lambda;
    let gi: ConductionTensorField = d.iter().map(|t| t.scaled(factor)).collect();
    let ge: ConductionTensorField = gi.iter().map(|t| t.scaled(1.0 / p.lambda)).collect();
    let g: ConductionTensorField = gi
        .iter()
        .zip(&ge)
        .map(|(a, b)| {
            let mut c = *a;
            for k in 0..6 {
                c.c[k] += b.c[k];
            }
            c
        })
        .collect();
    (gi, ge, g)
}

/// Regular node-centered grid covering the heart with a conductive padding
/// box standing in for the torso.
#[derive(Debug, Clone)]
pub struct TorsoGrid {
    pub dim: usize,
    pub origin: Point,
    pub spacing: [f64; 3],
    /// Node counts per axis; the third entry is 1 in 2D.
    pub shape: [usize; 3],
    /// Per-grid-cell bulk conductivity (mS/mm).
    pub sigma: Vec<SymTensor>,
    /// Grid cells whose centroid lies inside the heart mesh.
    pub heart_cell: Vec<bool>,
}

#[derive(Debug, Clone, Copy)]
pub struct TorsoOptions {
    /// Box side per axis as a multiple of the heart bounding box.
    pub padding: f64,
    /// Grid nodes per axis.
    pub resolution: usize,
    /// Isotropic torso conductivity (mS/mm).
    pub torso_sigma: f64,
}

impl Default for TorsoOptions {
    fn default() -> Self {
        Self {
            padding: 1.5,
            resolution: 100,
            torso_sigma: 0.2,
        }
    }
}

impl TorsoGrid {
    /// Builds the torso box around the heart and rasterizes the bulk heart
    /// conductivity onto grid cells by centroid containment.
    pub fn new(
        mesh: &SimplicialMesh,
        search: &MeshSearch,
        g_bulk: &ConductionTensorField,
        opts: &TorsoOptions,
    ) -> Result<Self> {
        if opts.padding < 1.0 || opts.resolution < 3 {
            return Err(GeasiError::Config(
                "torso padding must be >= 1 and resolution >= 3".into(),
            ));
        }
        let (lo, hi) = mesh.bounding_box();
        let mut origin = [0.0; 3];
        let mut spacing = [1.0; 3];
        let mut shape = [1usize; 3];
        for ax in 0..mesh.dim {
            let mid = 0.5 * (lo[ax] + hi[ax]);
            let side = (hi[ax] - lo[ax]) * opts.padding;
            origin[ax] = mid - side / 2.0;
            shape[ax] = opts.resolution;
            spacing[ax] = side / (opts.resolution - 1) as f64;
        }
        let mut grid = Self {
            dim: mesh.dim,
            origin,
            spacing,
            shape,
            sigma: Vec::new(),
            heart_cell: Vec::new(),
        };
        let nc = grid.cell_count();
        grid.sigma = vec![SymTensor::isotropic(mesh.dim, opts.torso_sigma); nc];
        grid.heart_cell = vec![false; nc];
        for c in 0..nc {
            let center = grid.cell_center(c);
            if let Some((heart_cell, _)) = search.locate(center) {
                grid.sigma[c] = g_bulk[heart_cell];
                grid.heart_cell[c] = true;
            }
        }
        Ok(grid)
    }

    pub fn node_count(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    fn cells_per_axis(&self) -> [usize; 3] {
        [
            self.shape[0] - 1,
            self.shape[1] - 1,
            (self.shape[2] - 1).max(1),
        ]
    }

    pub fn cell_count(&self) -> usize {
        let c = self.cells_per_axis();
        c[0] * c[1] * c[2]
    }

    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.shape[0] * (j + self.shape[1] * k)
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Point {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        ]
    }

    fn cell_index(&self, i: usize, j: usize, k: usize) -> usize {
        let c = self.cells_per_axis();
        i + c[0] * (j + c[1] * k)
    }

    pub fn cell_center(&self, c: usize) -> Point {
        let ca = self.cells_per_axis();
        let i = c % ca[0];
        let j = (c / ca[0]) % ca[1];
        let k = c / (ca[0] * ca[1]);
        let half = |ax: usize| {
            if self.shape[ax] > 1 {
                0.5 * self.spacing[ax]
            } else {
                0.0
            }
        };
        [
            self.origin[0] + i as f64 * self.spacing[0] + half(0),
            self.origin[1] + j as f64 * self.spacing[1] + half(1),
            self.origin[2] + k as f64 * self.spacing[2] + half(2),
        ]
    }

    /// Grid cell containing `x` along with local coordinates in [0, 1]³.
    fn locate_cell(&self, x: Point) -> Option<([usize; 3], [f64; 3])> {
        let ca = self.cells_per_axis();
        let mut idx = [0usize; 3];
        let mut loc = [0.0f64; 3];
        for ax in 0..3 {
            if self.shape[ax] == 1 {
                continue;
            }
            let u = (x[ax] - self.origin[ax]) / self.spacing[ax];
            if u < -1e-9 || u > (self.shape[ax] - 1) as f64 + 1e-9 {
                return None;
            }
            let i = (u.floor().max(0.0) as usize).min(ca[ax] - 1);
            idx[ax] = i;
            loc[ax] = (u - i as f64).clamp(0.0, 1.0);
        }
        Some((idx, loc))
    }

    /// Gradient of a node field at `x` via multilinear interpolation.
    pub fn grad_at(&self, field: &[f64], x: Point) -> Option<Point> {
        let ([i, j, k], [u, v, w]) = self.locate_cell(x)?;
        let f = |di: usize, dj: usize, dk: usize| {
            field[self.node_index(i + di, j + dj, k + dk.min(self.shape[2] - 1 - k))]
        };
        if self.dim == 2 {
            let (z00, z10, z01, z11) = (f(0, 0, 0), f(1, 0, 0), f(0, 1, 0), f(1, 1, 0));
            Some([
                ((1.0 - v) * (z10 - z00) + v * (z11 - z01)) / self.spacing[0],
                ((1.0 - u) * (z01 - z00) + u * (z11 - z10)) / self.spacing[1],
                0.0,
            ])
        } else {
            let c000 = f(0, 0, 0);
            let c100 = f(1, 0, 0);
            let c010 = f(0, 1, 0);
            let c110 = f(1, 1, 0);
            let c001 = f(0, 0, 1);
            let c101 = f(1, 0, 1);
            let c011 = f(0, 1, 1);
            let c111 = f(1, 1, 1);
            let gx = (1.0 - v) * ((1.0 - w) * (c100 - c000) + w * (c101 - c001))
                + v * ((1.0 - w) * (c110 - c010) + w * (c111 - c011));
            let gy = (1.0 - u) * ((1.0 - w) * (c010 - c000) + w * (c011 - c001))
                + u * ((1.0 - w) * (c110 - c100) + w * (c111 - c101));
            let gz = (1.0 - u) * ((1.0 - v) * (c001 - c000) + v * (c011 - c010))
                + u * ((1.0 - v) * (c101 - c100) + v * (c111 - c110));
            Some([
                gx / self.spacing[0],
                gy / self.spacing[1],
                gz / self.spacing[2],
            ])
        }
    }

    /// Conservative 5/7-point stiffness matrix of −∇·(σ∇Z) with natural
    /// boundary conditions. Each grid cell contributes its share of the dual
    /// face between two neighboring nodes.
    pub fn stiffness_matrix(&self) -> CsrMatrix {
        let n = self.node_count();
        let ca = self.cells_per_axis();
        let mut coo = CooBuilder::new(n);
        let axes: &[usize] = if self.dim == 2 { &[0, 1] } else { &[0, 1, 2] };
        for &ax in axes {
            // dual cross-section per adjacent cell: half the spacing in each
            // transverse axis (unit thickness for the absent axis in 2D)
            let mut area = 1.0;
            for &t in axes {
                if t != ax {
                    area *= 0.5 * self.spacing[t];
                }
            }
            let diag = match ax {
                0 => 0,
                1 => 1,
                _ => 2,
            };
            for k in 0..ca[2].max(1) {
                for j in 0..ca[1] {
                    for i in 0..ca[0] {
                        let s = self.sigma[self.cell_index(i, j, k)].c[diag];
                        let t = s * area / self.spacing[ax];
                        // the cell touches several parallel edges along `ax`
                        let others: Vec<[usize; 3]> = match (self.dim, ax) {
                            (2, 0) => vec![[i, j, 0], [i, j + 1, 0]],
                            (2, 1) => vec![[i, j, 0], [i + 1, j, 0]],
                            (3, 0) => vec![
                                [i, j, k],
                                [i, j + 1, k],
                                [i, j, k + 1],
                                [i, j + 1, k + 1],
                            ],
                            (3, 1) => vec![
                                [i, j, k],
                                [i + 1, j, k],
                                [i, j, k + 1],
                                [i + 1, j, k + 1],
                            ],
                            _ => vec![
                                [i, j, k],
                                [i + 1, j, k],
                                [i, j + 1, k],
                                [i + 1, j + 1, k],
                            ],
                        };
                        for o in others {
                            let mut b = o;
                            b[ax] += 1;
                            let na = self.node_index(o[0], o[1], o[2]);
                            let nb = self.node_index(b[0], b[1], b[2]);
                            coo.add(na, na, t);
                            coo.add(nb, nb, t);
                            coo.add(na, nb, -t);
                            coo.add(nb, na, -t);
                        }
                    }
                }
            }
        }
        coo.build()
    }
}

/// Electrode placement and the lead matrix mapping electrode potentials to
/// lead voltages. Every row sums to zero.
#[derive(Debug, Clone)]
pub struct LeadSystem {
    pub electrodes: Vec<Point>,
    pub electrode_nodes: Vec<usize>,
    /// L × N_E lead matrix.
    pub rows: Vec<Vec<f64>>,
}

impl LeadSystem {
    /// Face-center electrode pairs: one lead per axis measuring the
    /// potential difference across opposite torso faces.
    pub fn axis_aligned(grid: &TorsoGrid) -> Self {
        let mid = |ax: usize| (grid.shape[ax] - 1) / 2;
        let mut electrodes = Vec::new();
        let mut electrode_nodes = Vec::new();
        let mut push = |ijk: [usize; 3]| {
            electrode_nodes.push(grid.node_index(ijk[0], ijk[1], ijk[2]));
            electrodes.push(grid.node_position(ijk[0], ijk[1], ijk[2]));
        };
        let axes = grid.dim;
        for ax in 0..axes {
            let mut low = [mid(0), mid(1), if grid.dim == 3 { mid(2) } else { 0 }];
            let mut high = low;
            low[ax] = 0;
            high[ax] = grid.shape[ax] - 1;
            push(low);
            push(high);
        }
        let n_e = electrodes.len();
        let rows = (0..axes)
            .map(|ax| {
                let mut row = vec![0.0; n_e];
                row[2 * ax] = -1.0;
                row[2 * ax + 1] = 1.0;
                row
            })
            .collect();
        Self {
            electrodes,
            electrode_nodes,
            rows,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (l, row) in self.rows.iter().enumerate() {
            if row.len() != self.electrodes.len() {
                return Err(GeasiError::Config(format!("lead {l} has a short row")));
            }
            if row.iter().sum::<f64>().abs() > 1e-12 {
                return Err(GeasiError::Config(format!(
                    "lead {l} row does not sum to zero"
                )));
            }
        }
        Ok(())
    }
}

/// Zero-mean lead fields on the torso grid, one scalar node field per lead.
#[derive(Debug, Clone)]
pub struct LeadFieldSet {
    pub fields: Vec<Vec<f64>>,
}

/// Solves the pure-Neumann conduction problem for one lead row with point
/// current sources at the electrodes.
pub fn solve_lead_field(
    grid: &TorsoGrid,
    matrix: &CsrMatrix,
    electrode_nodes: &[usize],
    row: &[f64],
) -> Result<Vec<f64>> {
    if row.iter().sum::<f64>().abs() > 1e-12 {
        return Err(GeasiError::Config(
            "lead row must sum to zero for solvability".into(),
        ));
    }
    let mut b = vec![0.0; grid.node_count()];
    for (&node, &a) in electrode_nodes.iter().zip(row) {
        b[node] += a;
    }
    if b.iter().all(|&v| v == 0.0) {
        return Ok(b);
    }
    solve_cg(matrix, &b, 1e-10, 20 * grid.node_count(), true)
}

/// Solves every lead of the system. Leads are independent and run
/// concurrently.
pub fn compute_lead_fields(grid: &TorsoGrid, leads: &LeadSystem) -> Result<LeadFieldSet> {
    leads.validate()?;
    let matrix = grid.stiffness_matrix();
    let fields = leads
        .rows
        .par_iter()
        .map(|row| solve_lead_field(grid, &matrix, &leads.electrode_nodes, row))
        .collect::<Result<Vec<_>>>()?;
    Ok(LeadFieldSet { fields })
}

/// Uniform sampling of the observation window.
#[derive(Debug, Clone, Copy)]
pub struct TimeGrid {
    pub t0: f64,
    pub t1: f64,
    pub dt: f64,
}

impl Default for TimeGrid {
    fn default() -> Self {
        Self {
            t0: 0.0,
            t1: 400.0,
            dt: 1.0,
        }
    }
}

impl TimeGrid {
    pub fn samples(&self) -> Vec<f64> {
        let n = ((self.t1 - self.t0) / self.dt).round() as usize + 1;
        (0..n).map(|k| self.t0 + k as f64 * self.dt).collect()
    }

    /// Trapezoidal quadrature weights over the window.
    pub fn weights(&self) -> Vec<f64> {
        let n = self.samples().len();
        (0..n)
            .map(|k| {
                if k == 0 || k == n - 1 {
                    self.dt / 2.0
                } else {
                    self.dt
                }
            })
            .collect()
    }
}

/// Multi-lead voltage trace on a uniform time grid.
#[derive(Debug, Clone)]
pub struct EcgTrace {
    pub times: Vec<f64>,
    /// One voltage series per lead (mV·mS/mm scale, uncalibrated).
    pub leads: Vec<Vec<f64>>,
}

impl EcgTrace {
    /// Relative L2 mismatch against `target` after per-lead zero-mean
    /// alignment, normalized by the target energy.
    pub fn relative_mismatch(&self, target: &EcgTrace) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (a, b) in self.leads.iter().zip(&target.leads) {
            let ma = a.iter().sum::<f64>() / a.len() as f64;
            let mb = b.iter().sum::<f64>() / b.len() as f64;
            for (&x, &y) in a.iter().zip(b) {
                num += ((x - ma) - (y - mb)).powi(2);
                den += (y - mb).powi(2);
            }
        }
        (num / den.max(1e-300)).sqrt()
    }
}

/// Per-heart-cell quantities reused across time samples and leads.
struct CellPrecomp {
    /// Activation time at the centroid (nodal mean).
    phi: f64,
    /// P0 gradient of the activation map.
    grad_phi: Point,
    /// Cell volume.
    vol: f64,
    /// (G_i ∇Z_l)(centroid) per lead.
    gz: Vec<Point>,
    /// vol · (G_i ∇φ)·∇Z_l per lead.
    coupling: Vec<f64>,
}

fn precompute_cells(
    mesh: &SimplicialMesh,
    phi: &[f64],
    g_i: &ConductionTensorField,
    grid: &TorsoGrid,
    leads: &LeadFieldSet,
) -> Result<Vec<CellPrecomp>> {
    (0..mesh.cell_count())
        .map(|c| {
            let cell = mesh.cell(c);
            let nv = mesh.dim + 1;
            let mean_phi = cell[..nv].iter().map(|&n| phi[n]).sum::<f64>() / nv as f64;
            let grad_phi = mesh.cell_gradient(c, phi);
            let centroid = mesh.cell_centroid(c);
            let vol = mesh.cell_volume(c);
            let gz: Vec<Point> = leads
                .fields
                .iter()
                .map(|z| {
                    grid.grad_at(z, centroid)
                        .map(|g| g_i[c].matvec(g))
                        .ok_or_else(|| {
                            GeasiError::Config("heart cell outside the torso grid".into())
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            let coupling = gz.iter().map(|&y| vol * dot(grad_phi, y)).collect();
            Ok(CellPrecomp {
                phi: mean_phi,
                grad_phi,
                vol,
                gz,
                coupling,
            })
        })
        .collect()
}

fn mean_filter(series: &mut [f64], half: usize) {
    if half == 0 {
        return;
    }
    let src = series.to_vec();
    let n = src.len();
    for (k, out) in series.iter_mut().enumerate() {
        let lo = k.saturating_sub(half);
        let hi = (k + half).min(n - 1);
        *out = src[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
    }
}

/// Forward ECG trace: per time sample the volume integral of
/// −G_i ∇V_m · ∇Z_l with V_m(x, t) = U(t − φ(x)), which by reciprocity
/// equals the electrode potential difference of the lead. Traces on 3D
/// meshes are smoothed with a short centered mean filter.
pub fn simulate_ecg(
    mesh: &SimplicialMesh,
    phi: &[f64],
    g_i: &ConductionTensorField,
    grid: &TorsoGrid,
    leads: &LeadFieldSet,
    params: &WaveformParams,
    time: &TimeGrid,
) -> Result<EcgTrace> {
    let cells = precompute_cells(mesh, phi, g_i, grid, leads)?;
    let times = time.samples();
    let n_leads = leads.fields.len();
    let rows: Vec<Vec<f64>> = times
        .par_iter()
        .map(|&t| {
            let mut v = vec![0.0; n_leads];
            for cell in &cells {
                let (_, du, _) = waveform(t - cell.phi, params);
                for l in 0..n_leads {
                    v[l] += du * cell.coupling[l];
                }
            }
            v
        })
        .collect();
    let mut lead_series = vec![vec![0.0; times.len()]; n_leads];
    for (k, row) in rows.iter().enumerate() {
        for l in 0..n_leads {
            lead_series[l][k] = row[l];
        }
    }
    if mesh.dim == 3 {
        let half = (1.0 / time.dt).round().max(1.0) as usize;
        for series in &mut lead_series {
            mean_filter(series, half);
        }
    }
    Ok(EcgTrace {
        times,
        leads: lead_series,
    })
}

/// Nodal sensitivities of the activation map with respect to the site
/// parameters, assembled from geodesics traced at every mesh node.
#[derive(Debug, Clone)]
pub struct SensitivityField {
    /// Owning site per node (NO_OWNER where tracing failed).
    pub owner: Vec<usize>,
    /// dφ(node)/dx_i of the owning site.
    pub grad: Vec<Point>,
    pub n_sites: usize,
}

/// Traces geodesics from all nodes and converts tangents into per-node
/// position sensitivities. Aborts when more than 10% of the nodes lack a
/// converged geodesic.
pub fn activation_sensitivities(
    mesh: &SimplicialMesh,
    search: &MeshSearch,
    tensors: &ConductionTensorField,
    map: &ActivationMap,
    fim: &FimOptions,
    trace_opts: TraceOptions,
) -> Result<SensitivityField> {
    let ctx = TraceContext::new(mesh, search, tensors, map, fim, trace_opts)?;
    let starts: Vec<Point> = mesh.nodes.clone();
    let paths = trace_batch(&ctx, &starts, None::<fn(usize, usize, usize)>);
    let mut owner = vec![NO_OWNER; starts.len()];
    let mut grad = vec![[0.0; 3]; starts.len()];
    let mut missing = 0usize;
    for (n, path) in paths.iter().enumerate() {
        if !path.converged {
            missing += 1;
            continue;
        }
        owner[n] = path.site;
        if let Some(w) = path.tangent {
            grad[n] = distance_gradient(ctx.site_tensor(path.site), w)?;
        }
    }
    let limit = starts.len() / 10;
    if missing > limit {
        return Err(GeasiError::Solver(format!(
            "geodesic coverage too sparse: {missing} of {} nodes unconverged",
            starts.len()
        )));
    }
    Ok(SensitivityField {
        owner,
        grad,
        n_sites: map.eas.len(),
    })
}

/// Trace sensitivities per lead, time sample, and site parameter. Parameters
/// are packed as (x, y, z, t) per site.
pub struct EcgJacobian {
    /// columns[lead][time][4 * site + component]
    pub columns: Vec<Vec<Vec<f64>>>,
}

/// Differentiates the forward trace with respect to the site parameters by
/// pushing the nodal activation sensitivities through the volume integral.
#[allow(clippy::too_many_arguments)]
pub fn ecg_jacobian(
    mesh: &SimplicialMesh,
    phi: &[f64],
    sens: &SensitivityField,
    active: &[bool],
    g_i: &ConductionTensorField,
    grid: &TorsoGrid,
    leads: &LeadFieldSet,
    params: &WaveformParams,
    time: &TimeGrid,
) -> Result<EcgJacobian> {
    let cells = precompute_cells(mesh, phi, g_i, grid, leads)?;
    let n_params = 4 * sens.n_sites;
    // nodal fields psi_p(node) = dphi(node)/dp
    let n_nodes = mesh.node_count();
    let mut psi = vec![vec![0.0f64; n_nodes]; n_params];
    for n in 0..n_nodes {
        let site = sens.owner[n];
        if site == NO_OWNER || !active[site] {
            continue;
        }
        for m in 0..3 {
            psi[4 * site + m][n] = sens.grad[n][m];
        }
        psi[4 * site + 3][n] = 1.0;
    }
    // per cell and parameter: mean of psi and its P1 gradient
    let nv = mesh.dim + 1;
    let per_cell: Vec<(Vec<f64>, Vec<Point>)> = (0..mesh.cell_count())
        .map(|c| {
            let cell = mesh.cell(c);
            let mut means = Vec::with_capacity(n_params);
            let mut grads = Vec::with_capacity(n_params);
            for field in &psi {
                means.push(cell[..nv].iter().map(|&n| field[n]).sum::<f64>() / nv as f64);
                grads.push(mesh.cell_gradient(c, field));
            }
            (means, grads)
        })
        .collect();

    let times = time.samples();
    let n_leads = leads.fields.len();
    let columns: Vec<Vec<Vec<f64>>> = (0..n_leads)
        .map(|l| {
            times
                .par_iter()
                .map(|&t| {
                    let mut row = vec![0.0; n_params];
                    for (c, cell) in cells.iter().enumerate() {
                        let (_, du, d2u) = waveform(t - cell.phi, params);
                        let gp = dot(cell.grad_phi, cell.gz[l]);
                        let (means, grads) = &per_cell[c];
                        for p in 0..n_params {
                            row[p] += cell.vol
                                * (du * dot(grads[p], cell.gz[l]) - d2u * means[p] * gp);
                        }
                    }
                    row
                })
                .collect()
        })
        .collect();
    Ok(EcgJacobian { columns })
}

/// All fixed data of an ECG-driven identification problem.
pub struct EcgFitProblem<'a> {
    pub mesh: &'a SimplicialMesh,
    pub search: &'a MeshSearch<'a>,
    /// Conduction tensors driving the eikonal solve.
    pub tensors: &'a ConductionTensorField,
    /// Intracellular conductivities entering the trace integral.
    pub g_i: &'a ConductionTensorField,
    pub grid: &'a TorsoGrid,
    pub leads: &'a LeadFieldSet,
    pub params: WaveformParams,
    pub time: TimeGrid,
    pub t_min: f64,
    pub t_max: f64,
    pub opts: EcgFitOptions,
}

#[derive(Debug, Clone, Copy)]
pub struct EcgFitOptions {
    pub beta_a: f64,
    /// Damping of the Gauss–Newton candidate; smaller than in the
    /// activation-time fit because the trace residual is stiffer.
    pub beta_s: f64,
    pub max_iterations: usize,
    pub tol_move_factor: f64,
    pub tol_t: f64,
    pub inner_tol: f64,
    pub inner_max: usize,
    pub fim: FimOptions,
    pub trace: TraceOptions,
}

impl Default for EcgFitOptions {
    fn default() -> Self {
        Self {
            beta_a: 1.0 / std::f64::consts::SQRT_2,
            beta_s: 0.25,
            max_iterations: 100,
            tol_move_factor: 1e-3,
            tol_t: 1e-3,
            inner_tol: 1e-8,
            inner_max: 200,
            fim: FimOptions::default(),
            trace: TraceOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EcgFitHistoryEntry {
    pub iteration: usize,
    pub sites: Vec<EasSite>,
    pub active: Vec<bool>,
    /// Trapezoid-weighted half squared residual.
    pub objective: f64,
    /// Relative L2 mismatch against the target.
    pub mismatch: f64,
}

struct EcgEval {
    eas: EasSet,
    map: ActivationMap,
    trace: EcgTrace,
    objective: f64,
    mismatch: f64,
}

fn evaluate_ecg(problem: &EcgFitProblem, eas: &EasSet, target: &EcgTrace) -> Result<EcgEval> {
    let map = solve_eikonal(
        problem.mesh,
        problem.search,
        problem.tensors,
        eas,
        &problem.opts.fim,
    )?;
    let trace = simulate_ecg(
        problem.mesh,
        &map.phi,
        problem.g_i,
        problem.grid,
        problem.leads,
        &problem.params,
        &problem.time,
    )?;
    let weights = problem.time.weights();
    let mut objective = 0.0;
    for (sim, tgt) in trace.leads.iter().zip(&target.leads) {
        for ((&a, &b), &w) in sim.iter().zip(tgt).zip(&weights) {
            objective += 0.5 * w * (a - b) * (a - b);
        }
    }
    let mismatch = trace.relative_mismatch(target);
    Ok(EcgEval {
        eas: map.eas.clone(),
        map,
        trace,
        objective,
        mismatch,
    })
}

/// One projected proximal-gradient solve of the linearized trace subproblem
/// over all site parameters jointly.
fn ecg_gauss_newton_step(
    problem: &EcgFitProblem,
    eval: &EcgEval,
    jac: &EcgJacobian,
    target: &EcgTrace,
) -> EasSet {
    let n_sites = eval.eas.len();
    let n_params = 4 * n_sites;
    let weights = problem.time.weights();
    // normal matrix and gradient offset of the weighted linearized residual
    let mut h = vec![vec![0.0f64; n_params]; n_params];
    let mut g0 = vec![0.0f64; n_params];
    for (l, lead_cols) in jac.columns.iter().enumerate() {
        for (k, row) in lead_cols.iter().enumerate() {
            let w = weights[k];
            let r = eval.trace.leads[l][k] - target.leads[l][k];
            for i in 0..n_params {
                g0[i] += w * row[i] * r;
                for j in 0..n_params {
                    h[i][j] += w * row[i] * row[j];
                }
            }
        }
    }
    let mut v = vec![1.0f64; n_params];
    for (i, x) in v.iter_mut().enumerate() {
        *x = 1.0 + 0.1 * (i as f64 % 7.0) - 0.3 * (i as f64 % 3.0);
    }
    let mut sigma = 0.0;
    for _ in 0..80 {
        let mut w = vec![0.0; n_params];
        for i in 0..n_params {
            for j in 0..n_params {
                w[i] += h[i][j] * v[j];
            }
        }
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n <= 0.0 {
            break;
        }
        sigma = n;
        for i in 0..n_params {
            v[i] = w[i] / n;
        }
    }
    if sigma <= 0.0 {
        sigma = (0..n_params).map(|i| h[i][i]).sum();
    }
    if sigma <= 0.0 {
        return eval.eas.clone();
    }
    let tau = 0.9 / sigma;

    let mut z: Vec<f64> = eval
        .eas
        .sites
        .iter()
        .flat_map(|s| [s.position[0], s.position[1], s.position[2], s.time])
        .collect();
    let s0 = z.clone();
    for _ in 0..problem.opts.inner_max {
        let mut grad = g0.clone();
        for i in 0..n_params {
            for j in 0..n_params {
                grad[i] += h[i][j] * (z[j] - s0[j]);
            }
        }
        let mut next = vec![0.0; n_params];
        for site in 0..n_sites {
            let b = 4 * site;
            if !eval.eas.active[site] {
                next[b..b + 4].copy_from_slice(&z[b..b + 4]);
                continue;
            }
            let cand = [
                z[b] - tau * grad[b],
                z[b + 1] - tau * grad[b + 1],
                z[b + 2] - tau * grad[b + 2],
                z[b + 3] - tau * grad[b + 3],
            ];
            let p = problem
                .search
                .project_to_domain([cand[0], cand[1], cand[2]]);
            next[b] = p[0];
            next[b + 1] = p[1];
            next[b + 2] = p[2];
            next[b + 3] = cand[3].clamp(problem.t_min, problem.t_max);
        }
        let step: f64 = next
            .iter()
            .zip(&z)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        z = next;
        if step / tau < problem.opts.inner_tol {
            break;
        }
    }
    let mut out = eval.eas.clone();
    for site in 0..n_sites {
        let b = 4 * site;
        out.sites[site] = EasSite {
            position: [z[b], z[b + 1], z[b + 2]],
            time: z[b + 3],
        };
    }
    out
}

/// Gauss–Newton identification of the activation sites from target traces:
/// same over-relaxed outer loop as the activation-time fit, driven by the
/// trace residual with trapezoidal time quadrature.
pub fn fit_ecg(
    problem: &EcgFitProblem,
    initial: &EasSet,
    target: &EcgTrace,
) -> Result<(EasSet, Vec<EcgFitHistoryEntry>)> {
    let opts = &problem.opts;
    let project = |s: EasSite| EasSite {
        position: problem.search.project_to_domain(s.position),
        time: s.time.clamp(problem.t_min, problem.t_max),
    };
    let mut current = initial.clone();
    current.sites = current.sites.iter().map(|&s| project(s)).collect();
    let mut previous = current.clone();
    let mut history = Vec::new();
    let mut best: Option<(f64, EasSet)> = None;
    for iteration in 0..opts.max_iterations {
        // over-relax and project
        let mut relaxed = current.clone();
        for (i, s) in relaxed.sites.iter_mut().enumerate() {
            let prev = previous.sites[i];
            let cur = current.sites[i];
            *s = project(EasSite {
                position: [
                    cur.position[0] + opts.beta_a * (cur.position[0] - prev.position[0]),
                    cur.position[1] + opts.beta_a * (cur.position[1] - prev.position[1]),
                    cur.position[2] + opts.beta_a * (cur.position[2] - prev.position[2]),
                ],
                time: cur.time + opts.beta_a * (cur.time - prev.time),
            });
        }
        relaxed.active = vec![true; relaxed.len()];
        let eval = evaluate_ecg(problem, &relaxed, target)?;
        history.push(EcgFitHistoryEntry {
            iteration,
            sites: eval.eas.sites.clone(),
            active: eval.eas.active.clone(),
            objective: eval.objective,
            mismatch: eval.mismatch,
        });
        if best.as_ref().map_or(true, |(o, _)| eval.objective < *o) {
            best = Some((eval.objective, eval.eas.clone()));
        }

        let sens = activation_sensitivities(
            problem.mesh,
            problem.search,
            problem.tensors,
            &eval.map,
            &opts.fim,
            opts.trace,
        )?;
        let jac = ecg_jacobian(
            problem.mesh,
            &eval.map.phi,
            &sens,
            &eval.eas.active,
            problem.g_i,
            problem.grid,
            problem.leads,
            &problem.params,
            &problem.time,
        )?;
        let candidate = ecg_gauss_newton_step(problem, &eval, &jac, target);

        let mut next = eval.eas.clone();
        for (i, s) in next.sites.iter_mut().enumerate() {
            let rel = eval.eas.sites[i];
            let cand = candidate.sites[i];
            *s = project(EasSite {
                position: [
                    rel.position[0] + opts.beta_s * (cand.position[0] - rel.position[0]),
                    rel.position[1] + opts.beta_s * (cand.position[1] - rel.position[1]),
                    rel.position[2] + opts.beta_s * (cand.position[2] - rel.position[2]),
                ],
                time: rel.time + opts.beta_s * (cand.time - rel.time),
            });
        }
        next.active = vec![true; next.len()];

        let max_move = next
            .sites
            .iter()
            .zip(&current.sites)
            .map(|(a, b)| dist(a.position, b.position))
            .fold(0.0f64, f64::max);
        let max_dt = next
            .sites
            .iter()
            .zip(&current.sites)
            .map(|(a, b)| (a.time - b.time).abs())
            .fold(0.0f64, f64::max);
        previous = current;
        current = next;
        if max_move < opts.tol_move_factor * problem.mesh.h && max_dt < opts.tol_t {
            break;
        }
    }
    let (_, mut final_eas) =
        best.ok_or_else(|| GeasiError::Solver("no iterations ran".into()))?;
    final_eas.t_min = problem.t_min;
    final_eas.t_max = problem.t_max;
    Ok((final_eas, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eikonal::EasSet;
    use crate::linalg::solve_dense;
    use crate::mesh::setup::structured_square;
    use approx::assert_relative_eq;

    #[test]
    fn waveform_limits_and_plateau() {
        let p = WaveformParams::default();
        let (u, _, _) = waveform(-1000.0, &p);
        assert_relative_eq!(u, -85.0, epsilon = 1e-9);
        let (u, _, _) = waveform(100.0, &p);
        assert!((u - 29.96).abs() < 0.05, "plateau {u}");
        let (u, _, _) = waveform(0.0, &p);
        assert!((u + 27.5).abs() < 0.1, "upstroke midpoint {u}");
        // monotone upstroke
        let mut last = f64::NEG_INFINITY;
        let mut xi = -p.tau1;
        while xi <= p.tau1 {
            let (u, du, _) = waveform(xi, &p);
            assert!(u >= last);
            assert!(du > 0.0);
            last = u;
            xi += 0.05;
        }
    }

    #[test]
    fn waveform_derivatives_match_finite_differences() {
        let p = WaveformParams::default();
        let eps = 1e-5;
        for &xi in &[-0.5, 0.3, 1.7, 50.0, 195.0, 210.0] {
            let (_, du, d2u) = waveform(xi, &p);
            let (up, dup, _) = waveform(xi + eps, &p);
            let (um, dum, _) = waveform(xi - eps, &p);
            assert_relative_eq!(du, (up - um) / (2.0 * eps), max_relative = 1e-5, epsilon = 1e-8);
            assert_relative_eq!(d2u, (dup - dum) / (2.0 * eps), max_relative = 1e-4, epsilon = 1e-8);
        }
    }

    #[test]
    fn conductivity_split_and_recomposition() {
        let p = WaveformParams::default();
        let d = vec![SymTensor::isotropic(2, 0.9)];
        let (gi, ge, g) = conductivities_from_d(&d, &p);
        assert_relative_eq!(gi[0].c[0], 0.3, epsilon = 1e-12);
        assert_relative_eq!(ge[0].c[0], 0.1, epsilon = 1e-12);
        assert_relative_eq!(g[0].c[0], 0.4, epsilon = 1e-12);
        // anisotropic recomposition: under the equal-anisotropy-ratio
        // convention used here, (alpha^2/beta) G_e G^{-1} G_i = D / lambda
        let d = vec![SymTensor::from_2d(0.8, 0.3, 0.1)];
        let (gi, ge, g) = conductivities_from_d(&d, &p);
        let ginv = g[0].inverse().unwrap();
        for basis in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]] {
            let v = gi[0].matvec(basis);
            let v = ginv.matvec(v);
            let v = ge[0].matvec(v);
            let v = crate::linalg::scale(v, p.alpha_sq / p.beta);
            let want = crate::linalg::scale(d[0].matvec(basis), 1.0 / p.lambda);
            for k in 0..2 {
                assert_relative_eq!(v[k], want[k], epsilon = 1e-10);
            }
        }
    }

    fn unit_square_grid(n: usize) -> TorsoGrid {
        let mesh = structured_square(10.0, 5);
        let search = MeshSearch::new(&mesh);
        let g = vec![SymTensor::isotropic(2, 0.2); mesh.cell_count()];
        TorsoGrid::new(
            &mesh,
            &search,
            &g,
            &TorsoOptions {
                padding: 1.5,
                resolution: n,
                torso_sigma: 0.2,
            },
        )
        .unwrap()
    }

    #[test]
    fn lead_field_antisymmetric_for_opposite_electrodes() {
        let grid = unit_square_grid(21);
        let leads = LeadSystem::axis_aligned(&grid);
        let fields = compute_lead_fields(&grid, &leads).unwrap();
        // lead 0 drives the x faces: field is antisymmetric in x about the
        // mid-plane on this uniform-conductivity grid
        let z = &fields.fields[0];
        let (nx, ny) = (grid.shape[0], grid.shape[1]);
        for j in 0..ny {
            for i in 0..nx {
                let a = z[grid.node_index(i, j, 0)];
                let b = z[grid.node_index(nx - 1 - i, j, 0)];
                assert!((a + b).abs() < 1e-6, "({i},{j}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_row_gives_zero_field() {
        let grid = unit_square_grid(11);
        let matrix = grid.stiffness_matrix();
        let z = solve_lead_field(&grid, &matrix, &[0, 10], &[0.0, 0.0]).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lead_field_matches_dense_direct_solve() {
        let grid = unit_square_grid(10);
        let matrix = grid.stiffness_matrix();
        let n = grid.node_count();
        let electrodes = [grid.node_index(0, 4, 0), grid.node_index(9, 4, 0)];
        let row = [1.0, -1.0];
        let z = solve_lead_field(&grid, &matrix, &electrodes, &row).unwrap();
        // dense solve of the same singular system with the mean pinned
        let mut a = vec![vec![0.0f64; n]; n];
        for i in 0..n {
            let mut y = vec![0.0; n];
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            matrix.matvec(&e, &mut y);
            for j in 0..n {
                a[j][i] = y[j];
            }
        }
        let mut b = vec![0.0; n];
        b[electrodes[0]] += row[0];
        b[electrodes[1]] += row[1];
        // replace the last equation by the zero-mean constraint
        for j in 0..n {
            a[n - 1][j] = 1.0;
        }
        b[n - 1] = 0.0;
        let dense = solve_dense(a, b).unwrap();
        let mean = dense.iter().sum::<f64>() / n as f64;
        for i in 0..n {
            assert!((z[i] - (dense[i] - mean)).abs() < 1e-10, "node {i}");
        }
    }

    fn forward_setup() -> (
        SimplicialMesh,
        ConductionTensorField,
        ConductionTensorField,
        TorsoGrid,
        LeadFieldSet,
    ) {
        let mesh = structured_square(20.0, 21);
        let d = vec![SymTensor::isotropic(2, 0.49); mesh.cell_count()];
        let p = WaveformParams::default();
        let (gi, _, g) = conductivities_from_d(&d, &p);
        let search = MeshSearch::new(&mesh);
        let grid = TorsoGrid::new(
            &mesh,
            &search,
            &g,
            &TorsoOptions {
                resolution: 41,
                ..TorsoOptions::default()
            },
        )
        .unwrap();
        let leads = LeadSystem::axis_aligned(&grid);
        let fields = compute_lead_fields(&grid, &leads).unwrap();
        (mesh, d, gi, grid, fields)
    }

    fn solved_map(
        mesh: &SimplicialMesh,
        d: &ConductionTensorField,
        sites: Vec<EasSite>,
    ) -> ActivationMap {
        let search = MeshSearch::new(mesh);
        let eas = EasSet::new(sites, 0.0, 400.0).unwrap();
        solve_eikonal(mesh, &search, d, &eas, &FimOptions::default()).unwrap()
    }

    #[test]
    fn constant_activation_gives_zero_trace() {
        let (mesh, _, gi, grid, fields) = forward_setup();
        let phi = vec![25.0; mesh.node_count()];
        let p = WaveformParams::default();
        let trace =
            simulate_ecg(&mesh, &phi, &gi, &grid, &fields, &p, &TimeGrid::default()).unwrap();
        for lead in &trace.leads {
            assert!(lead.iter().all(|&v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn gauge_invariance_and_linearity() {
        let (mesh, d, gi, grid, fields) = forward_setup();
        let map = solved_map(
            &mesh,
            &d,
            vec![EasSite {
                position: [7.0, 12.0, 0.0],
                time: 5.0,
            }],
        );
        let p = WaveformParams::default();
        let time = TimeGrid {
            t1: 100.0,
            ..TimeGrid::default()
        };
        let base = simulate_ecg(&mesh, &map.phi, &gi, &grid, &fields, &p, &time).unwrap();
        // constant shift of a lead field changes nothing
        let mut shifted = fields.clone();
        for z in &mut shifted.fields[0] {
            *z += 12.5;
        }
        let t2 = simulate_ecg(&mesh, &map.phi, &gi, &grid, &shifted, &p, &time).unwrap();
        for (a, b) in base.leads.iter().zip(&t2.leads) {
            for (&x, &y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-10);
            }
        }
        // a summed lead row reproduces the summed traces
        let sum_field: Vec<f64> = fields.fields[0]
            .iter()
            .zip(&fields.fields[1])
            .map(|(a, b)| a + b)
            .collect();
        let combo = LeadFieldSet {
            fields: vec![sum_field],
        };
        let t3 = simulate_ecg(&mesh, &map.phi, &gi, &grid, &combo, &p, &time).unwrap();
        for k in 0..base.times.len() {
            let want = base.leads[0][k] + base.leads[1][k];
            assert!((t3.leads[0][k] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn time_shift_covariance() {
        let (mesh, d, gi, grid, fields) = forward_setup();
        let p = WaveformParams::default();
        let time = TimeGrid::default();
        let site = |t: f64| {
            vec![EasSite {
                position: [10.0, 10.0, 0.0],
                time: t,
            }]
        };
        let a = solved_map(&mesh, &d, site(20.0));
        let b = solved_map(&mesh, &d, site(25.0));
        let ta = simulate_ecg(&mesh, &a.phi, &gi, &grid, &fields, &p, &time).unwrap();
        let tb = simulate_ecg(&mesh, &b.phi, &gi, &grid, &fields, &p, &time).unwrap();
        // compare over a window where neither trace is clipped
        let shift = 5usize;
        for l in 0..ta.leads.len() {
            for k in 60..150 {
                let want = ta.leads[l][k - shift];
                let got = tb.leads[l][k];
                assert!(
                    (got - want).abs() < 1e-8,
                    "lead {l} sample {k}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn jacobian_t_column_matches_trace_derivative() {
        let (mesh, d, gi, grid, fields) = forward_setup();
        let search = MeshSearch::new(&mesh);
        let p = WaveformParams::default();
        // fine sampling so the reference central difference resolves the
        // millisecond-scale upstroke
        let time = TimeGrid {
            t1: 120.0,
            dt: 0.2,
            ..TimeGrid::default()
        };
        // off-center site so the leads carry signal
        let map = solved_map(
            &mesh,
            &d,
            vec![EasSite {
                position: [7.0, 12.5, 0.0],
                time: 30.0,
            }],
        );
        let sens = activation_sensitivities(
            &mesh,
            &search,
            &d,
            &map,
            &FimOptions::default(),
            TraceOptions::default(),
        )
        .unwrap();
        let jac = ecg_jacobian(
            &mesh,
            &map.phi,
            &sens,
            &map.eas.active,
            &gi,
            &grid,
            &fields,
            &p,
            &time,
        )
        .unwrap();
        // shifting the site time delays the trace; the central difference in
        // the timing parameter is the reference derivative
        let delta = 0.05;
        let shifted = |dt_i: f64| {
            let m = solved_map(
                &mesh,
                &d,
                vec![EasSite {
                    position: [7.0, 12.5, 0.0],
                    time: 30.0 + dt_i,
                }],
            );
            simulate_ecg(&mesh, &m.phi, &gi, &grid, &fields, &p, &time).unwrap()
        };
        let plus = shifted(delta);
        let minus = shifted(-delta);
        let peak = (0..plus.leads.len())
            .flat_map(|l| (0..plus.times.len()).map(move |k| (l, k)))
            .map(|(l, k)| ((plus.leads[l][k] - minus.leads[l][k]) / (2.0 * delta)).abs())
            .fold(0.0f64, f64::max);
        assert!(peak > 0.0);
        let mut checked = 0;
        for l in 0..plus.leads.len() {
            for k in 0..plus.times.len() {
                let fd = (plus.leads[l][k] - minus.leads[l][k]) / (2.0 * delta);
                let sens_t = jac.columns[l][k][3];
                if fd.abs() > 0.2 * peak {
                    assert!(
                        (sens_t - fd).abs() <= 0.05 * fd.abs(),
                        "lead {l} sample {k}: {sens_t} vs {fd}"
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 10, "only {checked} informative samples");
    }

    #[test]
    fn jacobian_x_column_matches_finite_differences() {
        let (mesh, d, gi, grid, fields) = forward_setup();
        let search = MeshSearch::new(&mesh);
        let p = WaveformParams::default();
        let time = TimeGrid {
            t1: 120.0,
            ..TimeGrid::default()
        };
        let base_pos = [8.0, 11.0, 0.0];
        let map = solved_map(
            &mesh,
            &d,
            vec![EasSite {
                position: base_pos,
                time: 10.0,
            }],
        );
        let sens = activation_sensitivities(
            &mesh,
            &search,
            &d,
            &map,
            &FimOptions::default(),
            TraceOptions::default(),
        )
        .unwrap();
        let jac = ecg_jacobian(
            &mesh,
            &map.phi,
            &sens,
            &map.eas.active,
            &gi,
            &grid,
            &fields,
            &p,
            &time,
        )
        .unwrap();
        let eps = 1e-3 * mesh.h;
        for axis in 0..2 {
            let perturbed = |sign: f64| {
                let mut pos = base_pos;
                pos[axis] += sign * eps;
                let m = solved_map(
                    &mesh,
                    &d,
                    vec![EasSite {
                        position: pos,
                        time: 10.0,
                    }],
                );
                simulate_ecg(&mesh, &m.phi, &gi, &grid, &fields, &p, &time).unwrap()
            };
            let plus = perturbed(1.0);
            let minus = perturbed(-1.0);
            let mut num = 0.0;
            let mut den = 0.0;
            for l in 0..plus.leads.len() {
                for k in 0..plus.times.len() {
                    let fd = (plus.leads[l][k] - minus.leads[l][k]) / (2.0 * eps);
                    let an = jac.columns[l][k][axis];
                    num += (fd - an) * (fd - an);
                    den += fd * fd;
                }
            }
            let rel = (num / den.max(1e-300)).sqrt();
            assert!(rel < 0.10, "axis {axis}: relative L2 error {rel}");
        }
    }

    #[test]
    fn inactive_site_has_zero_sensitivity() {
        let (mesh, d, gi, grid, fields) = forward_setup();
        let search = MeshSearch::new(&mesh);
        let p = WaveformParams::default();
        let time = TimeGrid {
            t1: 80.0,
            ..TimeGrid::default()
        };
        // second site activates far too late and is deactivated by the
        // compatibility check inside the solve
        let eas = EasSet::new(
            vec![
                EasSite {
                    position: [10.0, 10.0, 0.0],
                    time: 0.0,
                },
                EasSite {
                    position: [11.0, 10.0, 0.0],
                    time: 300.0,
                },
            ],
            0.0,
            400.0,
        )
        .unwrap();
        let map = solve_eikonal(&mesh, &search, &d, &eas, &FimOptions::default()).unwrap();
        assert!(!map.eas.active[1]);
        let sens = activation_sensitivities(
            &mesh,
            &search,
            &d,
            &map,
            &FimOptions::default(),
            TraceOptions::default(),
        )
        .unwrap();
        let jac = ecg_jacobian(
            &mesh,
            &map.phi,
            &sens,
            &map.eas.active,
            &gi,
            &grid,
            &fields,
            &p,
            &time,
        )
        .unwrap();
        for lead in &jac.columns {
            for row in lead {
                for p in 4..8 {
                    assert_eq!(row[p], 0.0);
                }
            }
        }
    }

    #[test]
    fn fit_ecg_identity_converges_immediately() {
        let (mesh, d, gi, grid, fields) = forward_setup();
        let search = MeshSearch::new(&mesh);
        let truth = EasSet::new(
            vec![EasSite {
                position: [10.0, 10.0, 0.0],
                time: 10.0,
            }],
            0.0,
            200.0,
        )
        .unwrap();
        let time = TimeGrid {
            t1: 150.0,
            ..TimeGrid::default()
        };
        let problem = EcgFitProblem {
            mesh: &mesh,
            search: &search,
            tensors: &d,
            g_i: &gi,
            grid: &grid,
            leads: &fields,
            params: WaveformParams::default(),
            time,
            t_min: 0.0,
            t_max: 200.0,
            opts: EcgFitOptions::default(),
        };
        let map = solve_eikonal(&mesh, &search, &d, &truth, &FimOptions::default()).unwrap();
        let target =
            simulate_ecg(&mesh, &map.phi, &gi, &grid, &fields, &problem.params, &time).unwrap();
        let (fit, history) = fit_ecg(&problem, &truth, &target).unwrap();
        assert!(history.len() <= 3, "iterations {}", history.len());
        assert!(history[0].objective < 1e-12);
        assert!(dist(fit.sites[0].position, truth.sites[0].position) < 1e-9);
    }
}
