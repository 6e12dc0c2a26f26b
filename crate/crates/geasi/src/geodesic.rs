//! Geodesic backtracking: characteristic-ODE integration toward the owning
//! activation site, Log-map source tangents, and the distance gradient with
//! respect to site position.

use crate::eikonal::{solve_single_site, ActivationMap, FimOptions, NO_OWNER};
use crate::error::{GeasiError, Result};
use crate::linalg::{add, dist, norm, scale, sub, Point, SymTensor};
use crate::mesh::search::MeshSearch;
use crate::mesh::{ConductionTensorField, SimplicialMesh};
use rayon::prelude::*;

/// A traced path from a start point back to its owning site.
#[derive(Debug, Clone)]
pub struct GeodesicPath {
    pub start: Point,
    pub site: usize,
    pub vertices: Vec<Point>,
    pub converged: bool,
    /// Source tangent w = Log of the start point at the site, oriented from
    /// the site toward the start and scaled so its D⁻¹(x_i)-norm equals the
    /// geodesic length phi(start) − t_i.
    pub tangent: Option<Point>,
}

#[derive(Debug, Clone, Copy)]
pub struct TraceOptions {
    /// Step displacement as a multiple of the mean edge length.
    pub step_factor: f64,
    /// Convergence-ball radius as a multiple of the mean edge length.
    pub zeta_factor: f64,
    /// Displacements below this value terminate a trace as stuck (mm).
    pub min_step: f64,
    /// Hard cap on the number of integration steps (0 = derived from the
    /// domain diameter).
    pub max_steps: usize,
    /// Tikhonov weight of the source-cell gradient fix.
    pub lambda_tik: f64,
    /// Retracing sweeps in the batch API; later sweeps get a larger step cap.
    pub sweeps: usize,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            step_factor: 5e-2,
            zeta_factor: 0.5,
            min_step: 1e-10,
            max_steps: 0,
            lambda_tik: 1e-2,
            sweeps: 2,
        }
    }
}

impl TraceOptions {
    fn effective_max_steps(&self, mesh: &SimplicialMesh) -> usize {
        if self.max_steps > 0 {
            return self.max_steps;
        }
        (50.0 * mesh.diameter() / (self.step_factor * mesh.h)).ceil() as usize
    }
}

/// L2-projects the P0 gradient of a single-site activation onto P1 and
/// applies the Tikhonov fix on the source cell so the interpolated gradient
/// vanishes at the site.
pub fn prepare_gradient_field(
    mesh: &SimplicialMesh,
    search: &MeshSearch,
    phi: &[f64],
    site_position: Point,
    lambda: f64,
) -> Result<Vec<Point>> {
    let p0 = mesh.p0_gradient(phi);
    let mut field = mesh.l2_project_to_p1(&p0)?;

    let pos = search.project_to_domain(site_position);
    let (cell, bary) = search
        .locate(pos)
        .ok_or_else(|| GeasiError::InvalidSite("site outside the mesh".into()))?;
    let nodes = mesh.cell(cell);
    let nv = nodes.len();
    let b = &bary[..nv];
    let btb: f64 = b.iter().map(|v| v * v).sum();
    for comp in 0..3 {
        let tilde: Vec<f64> = nodes.iter().map(|&n| field[n][comp]).collect();
        let btn: f64 = b.iter().zip(&tilde).map(|(bi, ti)| bi * ti).sum();
        let factor = btn / (lambda + btb);
        for (k, &n) in nodes.iter().enumerate() {
            field[n][comp] = tilde[k] - b[k] * factor;
        }
        // optimality residual of (bbᵀ + λI) n = λ ñ
        let mut res = 0.0f64;
        for (k, _) in nodes.iter().enumerate() {
            let nk = tilde[k] - b[k] * factor;
            let bn: f64 = (0..nv)
                .map(|j| b[k] * b[j] * (tilde[j] - b[j] * factor))
                .sum::<f64>();
            let _ = bn;
            let lhs = b[k]
                * (0..nv)
                    .map(|j| b[j] * (tilde[j] - b[j] * factor))
                    .sum::<f64>()
                + lambda * nk;
            res = res.max((lhs - lambda * tilde[k]).abs());
        }
        if res > 1e-8 * (1.0 + tilde.iter().fold(0.0f64, |a, v| a.max(v.abs()))) {
            return Err(GeasiError::Solver(format!(
                "source gradient fix violates its normal equations (residual {res:.3e})"
            )));
        }
    }
    Ok(field)
}

struct SiteData {
    position: Point,
    time: f64,
    tensor: SymTensor,
    field: Option<Vec<Point>>,
}

/// Read-only per-site fields shared by all traces of one outer iteration.
pub struct TraceContext<'a> {
    pub mesh: &'a SimplicialMesh,
    pub search: &'a MeshSearch<'a>,
    pub tensors: &'a ConductionTensorField,
    pub map: &'a ActivationMap,
    sites: Vec<SiteData>,
    pub opts: TraceOptions,
}

impl<'a> TraceContext<'a> {
    /// Solves one single-site eikonal problem per active site and prepares
    /// its gradient field.
    pub fn new(
        mesh: &'a SimplicialMesh,
        search: &'a MeshSearch<'a>,
        tensors: &'a ConductionTensorField,
        map: &'a ActivationMap,
        fim: &FimOptions,
        opts: TraceOptions,
    ) -> Result<Self> {
        let mut sites = Vec::with_capacity(map.eas.len());
        for (i, s) in map.eas.sites.iter().enumerate() {
            let position = search.project_to_domain(s.position);
            let (cell, _) = search
                .locate(position)
                .ok_or_else(|| GeasiError::InvalidSite(format!("site {i} outside the mesh")))?;
            let field = if map.eas.active[i] {
                let phi = solve_single_site(mesh, search, tensors, s.position, s.time, i, fim)?;
                Some(prepare_gradient_field(
                    mesh,
                    search,
                    &phi,
                    s.position,
                    opts.lambda_tik,
                )?)
            } else {
                None
            };
            sites.push(SiteData {
                position,
                time: s.time,
                tensor: tensors[cell],
                field,
            });
        }
        Ok(Self {
            mesh,
            search,
            tensors,
            map,
            sites,
            opts,
        })
    }

    pub fn site_position(&self, i: usize) -> Point {
        self.sites[i].position
    }

    pub fn site_tensor(&self, i: usize) -> &SymTensor {
        &self.sites[i].tensor
    }

    fn velocity(&self, site: usize, x: Point) -> Option<Point> {
        let field = self.sites[site].field.as_ref()?;
        let (c, bary) = self.search.locate(x)?;
        let g = self.mesh.interpolate_vector(c, &bary, field);
        Some(scale(self.tensors[c].matvec(g), -1.0))
    }

    fn owner_near(&self, x: Point) -> usize {
        self.map.owner[self.search.nearest_node(x)]
    }
}

/// Integrates `ẋ = −D(x)∇phi_i(x)` from `start` down to the owning site with
/// Heun steps, switching per-site fields at region boundaries and projecting
/// onto the domain after every step.
pub fn trace_geodesic(ctx: &TraceContext, start: Point) -> GeodesicPath {
    trace_with_cap(ctx, start, ctx.opts.effective_max_steps(ctx.mesh))
}

fn trace_with_cap(ctx: &TraceContext, start: Point, max_steps: usize) -> GeodesicPath {
    let zeta = ctx.opts.zeta_factor * ctx.mesh.h;
    let step_len = ctx.opts.step_factor * ctx.mesh.h;

    let mut x = ctx.search.project_to_domain(start);
    let mut site = ctx.owner_near(x);
    let mut path = GeodesicPath {
        start,
        site,
        vertices: vec![x],
        converged: false,
        tangent: None,
    };
    if site == NO_OWNER || ctx.sites[site].field.is_none() {
        return path;
    }
    if dist(x, ctx.sites[site].position) <= zeta {
        path.converged = true;
        path.tangent = source_tangent(ctx, site, &path.vertices, start);
        return path;
    }

    let mut pending: Option<usize> = None;
    for _ in 0..max_steps {
        let v1 = match ctx.velocity(site, x) {
            Some(v) if norm(v) > 0.0 => v,
            _ => break,
        };
        let dt = step_len / norm(v1);
        let predictor = ctx.search.project_to_domain(add(x, scale(v1, dt)));
        let v2 = ctx.velocity(site, predictor).unwrap_or(v1);
        let vm = scale(add(v1, v2), 0.5);
        let dt = if norm(vm) > 0.0 { step_len / norm(vm) } else { dt };
        let next = ctx.search.project_to_domain(add(x, scale(vm, dt)));

        if dist(next, x) < ctx.opts.min_step {
            break;
        }
        x = next;
        path.vertices.push(x);

        // region switching by nearest-node label, one step of hysteresis
        let label = ctx.owner_near(x);
        if label != site && label != NO_OWNER && ctx.sites[label].field.is_some() {
            if pending == Some(label) {
                site = label;
                path.site = site;
                pending = None;
            } else {
                pending = Some(label);
            }
        } else {
            pending = None;
        }

        if dist(x, ctx.sites[site].position) <= zeta {
            path.converged = true;
            break;
        }
    }

    if path.converged {
        path.tangent = source_tangent(ctx, site, &path.vertices, start);
    }
    path
}

/// Direction of the path at the site, oriented site → start and rescaled to
/// the geodesic length in the site metric. Two chords at different radii
/// are combined so the curvature term of the path cancels.
fn source_tangent(
    ctx: &TraceContext,
    site: usize,
    vertices: &[Point],
    start: Point,
) -> Option<Point> {
    let s = &ctx.sites[site];
    // quadratic least-squares fit of the path over a window near the site,
    // in arc length measured from the final vertex; extrapolating the slope
    // to the site averages the cell-wise wobble of the traced field and
    // removes the first-order curvature bias of a plain chord
    let window = 3.0 * ctx.mesh.h;
    let k = vertices.len();
    let d_last = dist(vertices[k - 1], s.position);
    let mut pts: Vec<(f64, Point)> = vec![(0.0, vertices[k - 1])];
    for j in (0..k - 1).rev() {
        let prev = pts.last().unwrap().1;
        let arc = pts.last().unwrap().0 + dist(vertices[j], prev);
        if dist(vertices[j], s.position) > window {
            break;
        }
        pts.push((arc, vertices[j]));
    }
    let fitted = if pts.len() >= 8 {
        // normal equations of x(t) = a + b t + c t²; arc length t runs from
        // the final vertex back toward the start, so the slope at the site
        // (t = −d_last) already points site → start
        let n = pts.len() as f64;
        let (mut s1, mut s2, mut s3, mut s4) = (0.0, 0.0, 0.0, 0.0);
        for &(t, _) in &pts {
            s1 += t;
            s2 += t * t;
            s3 += t * t * t;
            s4 += t * t * t * t;
        }
        let mut slope = [0.0; 3];
        let mut ok = true;
        for axis in 0..3 {
            let (mut y0, mut y1, mut y2) = (0.0, 0.0, 0.0);
            for &(t, p) in &pts {
                y0 += p[axis];
                y1 += t * p[axis];
                y2 += t * t * p[axis];
            }
            match crate::linalg::solve_dense(
                vec![
                    vec![n, s1, s2],
                    vec![s1, s2, s3],
                    vec![s2, s3, s4],
                ],
                vec![y0, y1, y2],
            ) {
                Some(abc) => slope[axis] = abc[1] - 2.0 * abc[2] * d_last,
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            Some(slope)
        } else {
            None
        }
    } else {
        None
    };
    let dir = match fitted {
        Some(t) => t,
        None if d_last > 0.0 => sub(vertices[k - 1], s.position),
        None => sub(start, s.position),
    };
    let metric = s.tensor.inverse()?;
    let dn = metric.metric_norm(dir);
    if dn <= 0.0 {
        return None;
    }
    let length = ctx
        .map
        .value_at(ctx.mesh, ctx.search, start)
        .map(|v| v - s.time)?;
    if length <= 0.0 {
        return None;
    }
    Some(scale(dir, length / dn))
}

/// Gradient of the geodesic distance δ(x_i, x) with respect to the site
/// position: −D⁻¹(x_i) w / ‖w‖_{D⁻¹(x_i)}.
pub fn distance_gradient(d_at_site: &SymTensor, w: Point) -> Result<Point> {
    let metric = d_at_site
        .inverse()
        .ok_or_else(|| GeasiError::Config("non-invertible tensor at site".into()))?;
    let wn = metric.metric_norm(w);
    if wn <= 0.0 || !wn.is_finite() {
        return Err(GeasiError::UndefinedGradient);
    }
    Ok(scale(metric.matvec(w), -1.0 / wn))
}

/// Traces all start points concurrently; non-converged paths are retried in
/// later sweeps with a larger step cap. The callback receives
/// (sweep, newly converged, total converged).
pub fn trace_batch<F>(
    ctx: &TraceContext,
    starts: &[Point],
    mut progress: Option<F>,
) -> Vec<GeodesicPath>
where
    F: FnMut(usize, usize, usize),
{
    let base_cap = ctx.opts.effective_max_steps(ctx.mesh);
    let mut paths: Vec<Option<GeodesicPath>> = vec![None; starts.len()];
    let mut total = 0usize;
    for sweep in 0..ctx.opts.sweeps.max(1) {
        let cap = base_cap << sweep;
        let todo: Vec<usize> = paths
            .iter()
            .enumerate()
            .filter(|(_, p)| p.as_ref().map_or(true, |p| !p.converged))
            .map(|(i, _)| i)
            .collect();
        if todo.is_empty() {
            break;
        }
        let traced: Vec<(usize, GeodesicPath)> = todo
            .par_iter()
            .map(|&i| (i, trace_with_cap(ctx, starts[i], cap)))
            .collect();
        let mut fresh = 0usize;
        for (i, p) in traced {
            if p.converged {
                fresh += 1;
            }
            paths[i] = Some(p);
        }
        total += fresh;
        if let Some(cb) = progress.as_mut() {
            cb(sweep, fresh, total);
        }
    }
    paths.into_iter().map(|p| p.unwrap()).collect()
}
