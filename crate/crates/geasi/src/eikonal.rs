//! Anisotropic eikonal solver: Fast Iterative Method with an active list and
//! per-simplex local updates in the cell metric D^{-1}, point-source Dirichlet
//! embedding, compatibility handling and regions of influence.

use crate::error::{GeasiError, Result};
use crate::linalg::{solve_sym2, sub, Point, SymTensor};
use crate::mesh::search::MeshSearch;
use crate::mesh::{ConductionTensorField, SimplicialMesh};

pub const NO_OWNER: usize = usize::MAX;

/// Earliest activation sites: positions (mm), timings (ms), active flags and
/// timing bounds.
#[derive(Debug, Clone)]
pub struct EasSet {
    pub sites: Vec<EasSite>,
    pub active: Vec<bool>,
    pub t_min: f64,
    pub t_max: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct EasSite {
    pub position: Point,
    pub time: f64,
}

impl EasSet {
    pub fn new(sites: Vec<EasSite>, t_min: f64, t_max: f64) -> Result<Self> {
        for (i, s) in sites.iter().enumerate() {
            if s.time < t_min - 1e-12 || s.time > t_max + 1e-12 {
                return Err(GeasiError::InvalidSite(format!(
                    "site {i} timing {} outside [{t_min}, {t_max}]",
                    s.time
                )));
            }
        }
        let active = vec![true; sites.len()];
        Ok(Self {
            sites,
            active,
            t_min,
            t_max,
        })
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.active[i]).collect()
    }
}

/// Nodes with fixed activation times seeded from the EASs, plus the source
/// points themselves for near-source factored updates.
#[derive(Debug, Clone, Default)]
pub struct DirichletSet {
    pub nodes: Vec<usize>,
    pub values: Vec<f64>,
    pub owners: Vec<usize>,
    pub sources: Vec<SourcePoint>,
}

/// A point source feeding analytic near-field arrival candidates.
#[derive(Debug, Clone, Copy)]
pub struct SourcePoint {
    pub position: Point,
    pub time: f64,
    pub owner: usize,
    pub cell: usize,
}

/// Nodal activation times with per-node region-of-influence labels.
#[derive(Debug, Clone)]
pub struct ActivationMap {
    pub phi: Vec<f64>,
    pub owner: Vec<usize>,
    pub eas: EasSet,
}

impl ActivationMap {
    /// P1 interpolation of the activation time at an arbitrary point.
    pub fn value_at(&self, mesh: &SimplicialMesh, search: &MeshSearch, x: Point) -> Option<f64> {
        let (c, bary) = search.locate(x)?;
        Some(mesh.interpolate_scalar(c, &bary, &self.phi))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FimOptions {
    /// Convergence tolerance of the fixed-point iteration (ms).
    pub tol: f64,
    /// Update budget as a multiple of the node count.
    pub max_update_factor: usize,
    /// Compatibility slack (ms) for deactivating dominated sites.
    pub tol_compat: f64,
    /// Radius (mm) of the ball around each source in which nodes also receive
    /// analytic straight-ray arrival candidates, using the slower of the
    /// source-cell and node-cell metrics so the candidate stays a safe
    /// overestimate. Counters the accuracy loss around the point-source
    /// singularity.
    pub source_ball_radius: f64,
}

impl Default for FimOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_update_factor: 10,
            tol_compat: 1e-6,
            source_ball_radius: 1.5,
        }
    }
}

/// Fixes the nodes of each active site's containing cell to
/// `t_i + ||x - x_i||_{D^{-1}}`; overlapping stencils take the nodal minimum.
pub fn apply_eas_boundary(
    mesh: &SimplicialMesh,
    search: &MeshSearch,
    tensors: &ConductionTensorField,
    eas: &EasSet,
) -> Result<DirichletSet> {
    let mut value: Vec<f64> = vec![f64::INFINITY; mesh.node_count()];
    let mut owner: Vec<usize> = vec![NO_OWNER; mesh.node_count()];
    let mut sources: Vec<SourcePoint> = Vec::new();
    for (i, site) in eas.sites.iter().enumerate() {
        if !eas.active[i] {
            continue;
        }
        let pos = search.project_to_domain(site.position);
        let (cell, _) = search.locate(pos).ok_or_else(|| {
            GeasiError::InvalidSite(format!(
                "site {i} at {:?} cannot be located in the mesh",
                site.position
            ))
        })?;
        let metric = tensors[cell]
            .inverse()
            .ok_or_else(|| GeasiError::Config(format!("non-invertible tensor on cell {cell}")))?;
        if !tensors[cell].is_spd() {
            return Err(GeasiError::Config(format!("tensor on cell {cell} is not SPD")));
        }
        for &n in mesh.cell(cell) {
            let v = site.time + metric.metric_norm(sub(mesh.nodes[n], pos));
            if v < value[n] {
                value[n] = v;
                owner[n] = i;
            }
        }
        sources.push(SourcePoint {
            position: pos,
            time: site.time,
            owner: i,
            cell,
        });
    }
    let mut out = DirichletSet::default();
    out.sources = sources;
    for n in 0..mesh.node_count() {
        if value[n].is_finite() {
            out.nodes.push(n);
            out.values.push(value[n]);
            out.owners.push(owner[n]);
        }
    }
    Ok(out)
}

#[derive(PartialEq)]
struct HeapItem {
    val: f64,
    node: usize,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // min-heap on the tentative value, ties broken by node index
        other
            .val
            .total_cmp(&self.val)
            .then(other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Fast Iterative Method on a prescribed Dirichlet set.
pub fn solve_with_dirichlet(
    mesh: &SimplicialMesh,
    tensors: &ConductionTensorField,
    dirichlet: &DirichletSet,
    opts: &FimOptions,
) -> Result<(Vec<f64>, Vec<usize>)> {
    if dirichlet.nodes.is_empty() {
        return Err(GeasiError::Solver("empty Dirichlet set".into()));
    }
    let n = mesh.node_count();
    let metrics: Vec<SymTensor> = tensors
        .iter()
        .enumerate()
        .map(|(c, t)| {
            t.inverse()
                .ok_or_else(|| GeasiError::Config(format!("non-invertible tensor on cell {c}")))
        })
        .collect::<Result<_>>()?;

    let mut phi = vec![f64::INFINITY; n];
    let mut owner = vec![NO_OWNER; n];
    let mut fixed = vec![false; n];
    for (k, &node) in dirichlet.nodes.iter().enumerate() {
        phi[node] = dirichlet.values[k];
        owner[node] = dirichlet.owners[k];
        fixed[node] = true;
    }

    // analytic straight-ray candidates in a small ball around each source,
    // biased to the slower endpoint metric so they never undercut the true
    // arrival in smoothly varying tensor fields
    let mut analytic = vec![f64::INFINITY; n];
    let mut analytic_owner = vec![NO_OWNER; n];
    if opts.source_ball_radius > 0.0 {
        let radius = opts.source_ball_radius.max(1.5 * mesh.h);
        // candidates extend half a cell past the nominal radius with a steep
        // extra cost, so that by the hard cutoff they are already dominated
        // by propagated arrivals; a plain cutoff at the rim would make phi
        // jump when a binding rim node enters or leaves the ball as the
        // source moves, which wrecks finite differences in the source
        let cutoff = radius + 0.5 * mesh.h;
        for src in &dirichlet.sources {
            for (v, &x) in mesh.nodes.iter().enumerate() {
                let d = sub(x, src.position);
                let r = crate::linalg::norm(d);
                if r > cutoff {
                    continue;
                }
                let at_src = metrics[src.cell].metric_norm(d);
                // quadratic hinge: zero value and zero slope at the nominal
                // radius, so binding hand-over to propagated arrivals does
                // not add spurious source sensitivity there, yet steep
                // enough to be dominated well before the hard cutoff
                let penalty = if r > radius {
                    8.0 * (at_src / r) * (r - radius) * (r - radius) / mesh.h
                } else {
                    0.0
                };
                for &c in mesh.cells_of_node(v) {
                    let cand = src.time + metrics[c].metric_norm(d).max(at_src) + penalty;
                    if cand < analytic[v] {
                        analytic[v] = cand;
                        analytic_owner[v] = src.owner;
                    }
                }
            }
        }
    }

    // label correction in ascending value order: pop the smallest tentative
    // arrival, relax its neighbors, re-push on improvement
    let mut heap: std::collections::BinaryHeap<HeapItem> = std::collections::BinaryHeap::new();
    for (k, &node) in dirichlet.nodes.iter().enumerate() {
        heap.push(HeapItem {
            val: dirichlet.values[k],
            node,
        });
    }

    let budget = opts.max_update_factor.saturating_mul(n).max(16 * n);
    let mut updates = 0usize;
    while let Some(HeapItem { val, node }) = heap.pop() {
        if val > phi[node] {
            continue; // stale entry
        }
        for &u in mesh.neighbors_of_node(node) {
            if fixed[u] {
                continue;
            }
            updates += 1;
            if updates > budget {
                return Err(GeasiError::NonConvergence(format!(
                    "eikonal solver exceeded {budget} local updates"
                )));
            }
            let (mut q, mut qo) = local_update(mesh, &metrics, &phi, &owner, u);
            if analytic[u] < q {
                q = analytic[u];
                qo = analytic_owner[u];
            }
            if phi[u] - q > opts.tol {
                phi[u] = q;
                owner[u] = qo;
                heap.push(HeapItem { val: q, node: u });
            }
        }
    }

    if phi.iter().any(|v| !v.is_finite()) {
        return Err(GeasiError::Solver(
            "eikonal solution left unreached nodes (disconnected mesh?)".into(),
        ));
    }
    Ok((phi, owner))
}

/// Minimal arrival at node `v` over all incident cells, through the face
/// opposite `v` in each cell.
fn local_update(
    mesh: &SimplicialMesh,
    metrics: &[SymTensor],
    phi: &[f64],
    owner: &[usize],
    v: usize,
) -> (f64, usize) {
    let x = mesh.nodes[v];
    let mut best = f64::INFINITY;
    let mut best_owner = NO_OWNER;
    let mut pts = [[0.0; 3]; 3];
    let mut vals = [0.0; 3];
    let mut owners = [NO_OWNER; 3];
    for &c in mesh.cells_of_node(v) {
        let mut k = 0;
        for &n in mesh.cell(c) {
            if n == v {
                continue;
            }
            pts[k] = mesh.nodes[n];
            vals[k] = phi[n];
            owners[k] = owner[n];
            k += 1;
        }
        if let Some((val, own)) =
            solve_face(x, &pts[..k], &vals[..k], &owners[..k], &metrics[c])
        {
            if val < best {
                best = val;
                best_owner = own;
            }
        }
    }
    (best, best_owner)
}

/// Minimizes `phi(y) + ||v - y||_M` over the face spanned by `pts`.
///
/// Uses the closed-form interior stationary point when it lies inside the
/// face; otherwise recurses on the sub-faces. Returns the value and the
/// owner label of the dominant face node.
fn solve_face(
    v: Point,
    pts: &[Point],
    vals: &[f64],
    owners: &[usize],
    m: &SymTensor,
) -> Option<(f64, usize)> {
    debug_assert!(!pts.is_empty());
    let vertex = |k: usize| -> Option<(f64, usize)> {
        if !vals[k].is_finite() {
            return None;
        }
        Some((vals[k] + m.metric_norm(sub(v, pts[k])), owners[k]))
    };
    let take_min = |best: Option<(f64, usize)>, cand: Option<(f64, usize)>| match (best, cand) {
        (Some((b, _)), Some((c, _))) if b <= c => best,
        (best, None) => best,
        (_, cand) => cand,
    };
    let edge = |a: usize, b: usize| -> Option<(f64, usize)> {
        if vals[a].is_finite() && vals[b].is_finite() {
            if let Some(res) = interior_candidate(
                v,
                &[pts[a], pts[b]],
                &[vals[a], vals[b]],
                &[owners[a], owners[b]],
                m,
            ) {
                return Some(res);
            }
        }
        take_min(vertex(a), vertex(b))
    };
    match pts.len() {
        1 => vertex(0),
        2 => edge(0, 1),
        3 => {
            if vals.iter().all(|t| t.is_finite()) {
                if let Some(res) = interior_candidate(v, pts, vals, owners, m) {
                    return Some(res);
                }
            }
            // minimizer on the triangle boundary
            let mut best = edge(0, 1);
            best = take_min(best, edge(0, 2));
            take_min(best, edge(1, 2))
        }
        _ => None,
    }
}

fn interior_candidate(
    v: Point,
    pts: &[Point],
    vals: &[f64],
    owners: &[usize],
    m: &SymTensor,
) -> Option<(f64, usize)> {
    let p = sub(v, pts[0]);
    match pts.len() {
        2 => {
            let q = sub(pts[1], pts[0]);
            let u = vals[1] - vals[0];
            let g = m.quad(q);
            if g <= 0.0 {
                return None;
            }
            let mv = crate::linalg::dot(m.matvec(q), p);
            let denom = 1.0 - u * u / g;
            if denom <= 1e-14 {
                return None;
            }
            let numer = (m.quad(p) - mv * mv / g).max(0.0);
            let s = (numer / denom).sqrt();
            let lam = (mv - u * s) / g;
            if !(0.0..=1.0).contains(&lam) {
                return None;
            }
            let val = vals[0] + lam * u + s;
            let own = if lam > 0.5 { owners[1] } else { owners[0] };
            Some((val, own))
        }
        3 => {
            let q1 = sub(pts[1], pts[0]);
            let q2 = sub(pts[2], pts[0]);
            let u = [vals[1] - vals[0], vals[2] - vals[0]];
            let g11 = m.quad(q1);
            let g22 = m.quad(q2);
            let g12 = crate::linalg::dot(m.matvec(q1), q2);
            let mv = [
                crate::linalg::dot(m.matvec(q1), p),
                crate::linalg::dot(m.matvec(q2), p),
            ];
            let ginv_u = solve_sym2(g11, g12, g22, u)?;
            let ginv_m = solve_sym2(g11, g12, g22, mv)?;
            let denom = 1.0 - (u[0] * ginv_u[0] + u[1] * ginv_u[1]);
            if denom <= 1e-14 {
                return None;
            }
            let numer = (m.quad(p) - (mv[0] * ginv_m[0] + mv[1] * ginv_m[1])).max(0.0);
            let s = (numer / denom).sqrt();
            let lam = [ginv_m[0] - s * ginv_u[0], ginv_m[1] - s * ginv_u[1]];
            if lam[0] < 0.0 || lam[1] < 0.0 || lam[0] + lam[1] > 1.0 {
                return None;
            }
            let val = vals[0] + lam[0] * u[0] + lam[1] * u[1] + s;
            let w = [1.0 - lam[0] - lam[1], lam[0], lam[1]];
            let arg = (0..3).max_by(|&a, &b| w[a].total_cmp(&w[b])).unwrap();
            Some((val, owners[arg]))
        }
        _ => None,
    }
}

/// Solves the eikonal equation with a single active site labeled `label`.
pub fn solve_single_site(
    mesh: &SimplicialMesh,
    search: &MeshSearch,
    tensors: &ConductionTensorField,
    position: Point,
    time: f64,
    label: usize,
    opts: &FimOptions,
) -> Result<Vec<f64>> {
    let mut eas = EasSet::new(
        vec![EasSite { position, time }],
        f64::NEG_INFINITY,
        f64::INFINITY,
    )?;
    eas.active[0] = true;
    let mut dirichlet = apply_eas_boundary(mesh, search, tensors, &eas)?;
    for o in &mut dirichlet.owners {
        *o = label;
    }
    for s in &mut dirichlet.sources {
        s.owner = label;
    }
    let (phi, _) = solve_with_dirichlet(mesh, tensors, &dirichlet, opts)?;
    Ok(phi)
}

/// Pairwise compatibility (dominated sites become inactive). All sites are
/// reconsidered, so previously deactivated sites may reactivate.
pub fn check_compatibility(
    mesh: &SimplicialMesh,
    search: &MeshSearch,
    tensors: &ConductionTensorField,
    eas: &EasSet,
    opts: &FimOptions,
) -> Result<Vec<bool>> {
    let n = eas.len();
    if n <= 1 {
        return Ok(vec![true; n]);
    }
    // phi_j interpolated at x_i equals t_j + delta(x_j, x_i)
    let mut fields = Vec::with_capacity(n);
    for (j, s) in eas.sites.iter().enumerate() {
        fields.push(solve_single_site(
            mesh, search, tensors, s.position, s.time, j, opts,
        )?);
    }
    let arrival = |j: usize, i: usize| -> Result<f64> {
        let pos = search.project_to_domain(eas.sites[i].position);
        let (c, bary) = search
            .locate(pos)
            .ok_or_else(|| GeasiError::InvalidSite(format!("site {i} outside the mesh")))?;
        Ok(mesh.interpolate_scalar(c, &bary, &fields[j]))
    };

    let mut active = vec![true; n];
    loop {
        // deactivate the single worst violator, then re-evaluate
        let mut worst: Option<(usize, f64)> = None;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            let mut earliest = f64::INFINITY;
            for j in 0..n {
                if j == i || !active[j] {
                    continue;
                }
                earliest = earliest.min(arrival(j, i)?);
            }
            let excess = eas.sites[i].time - earliest - opts.tol_compat;
            if excess > 0.0 && worst.map_or(true, |(_, e)| excess > e) {
                worst = Some((i, excess));
            }
        }
        match worst {
            Some((i, _)) => active[i] = false,
            None => break,
        }
    }
    Ok(active)
}

/// Solves the anisotropic eikonal equation for an EAS set. Dominated sites
/// are deactivated first so the Dirichlet data matches the reduced set
/// exactly.
pub fn solve_eikonal(
    mesh: &SimplicialMesh,
    search: &MeshSearch,
    tensors: &ConductionTensorField,
    eas: &EasSet,
    opts: &FimOptions,
) -> Result<ActivationMap> {
    let mut eas = eas.clone();
    let candidates: Vec<usize> = eas.active_indices();
    if candidates.is_empty() {
        return Err(GeasiError::Solver("all activation sites are inactive".into()));
    }
    if candidates.len() > 1 {
        // compatibility among the caller-enabled sites only
        let sub_sites: Vec<EasSite> = candidates.iter().map(|&i| eas.sites[i]).collect();
        let sub = EasSet {
            sites: sub_sites,
            active: vec![true; candidates.len()],
            t_min: eas.t_min,
            t_max: eas.t_max,
        };
        let mask = check_compatibility(mesh, search, tensors, &sub, opts)?;
        for (k, &i) in candidates.iter().enumerate() {
            eas.active[i] = mask[k];
        }
        if eas.active_indices().is_empty() {
            return Err(GeasiError::Solver(
                "compatibility check deactivated every site".into(),
            ));
        }
    }
    let dirichlet = apply_eas_boundary(mesh, search, tensors, &eas)?;
    let (phi, owner) = solve_with_dirichlet(mesh, tensors, &dirichlet, opts)?;
    Ok(ActivationMap { phi, owner, eas })
}

/// Geodesic distance between two points, evaluated by solving from a single
/// site at `x` and interpolating at `y`.
pub fn discrete_distance(
    mesh: &SimplicialMesh,
    search: &MeshSearch,
    tensors: &ConductionTensorField,
    x: Point,
    y: Point,
    opts: &FimOptions,
) -> Result<f64> {
    let phi = solve_single_site(mesh, search, tensors, x, 0.0, 0, opts)?;
    let yp = search.project_to_domain(y);
    let (c, bary) = search
        .locate(yp)
        .ok_or_else(|| GeasiError::InvalidSite("query point outside the mesh".into()))?;
    let mut d = mesh.interpolate_scalar(c, &bary, &phi);
    // near the source the straight ray beats the interpolated nodal field
    let xp = search.project_to_domain(x);
    if crate::linalg::dist(xp, yp) <= opts.source_ball_radius.max(1.5 * mesh.h) {
        let (cx, _) = search
            .locate(xp)
            .ok_or_else(|| GeasiError::InvalidSite("source point outside the mesh".into()))?;
        if let (Some(mx), Some(my)) = (tensors[cx].inverse(), tensors[c].inverse()) {
            let seg = sub(yp, xp);
            d = d.min(mx.metric_norm(seg).max(my.metric_norm(seg)));
        }
    }
    Ok(d)
}

/// Per-node labels and per-site node sets. Inactive sites get empty sets.
pub fn regions_of_influence(map: &ActivationMap) -> (Vec<usize>, Vec<Vec<usize>>) {
    let mut sets = vec![Vec::new(); map.eas.len()];
    for (n, &o) in map.owner.iter().enumerate() {
        if o != NO_OWNER {
            sets[o].push(n);
        }
    }
    (map.owner.clone(), sets)
}
