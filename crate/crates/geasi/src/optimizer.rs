//! Gauss–Newton identification of earliest activation sites from
//! activation-time measurements: over-relaxed outer loop, per-site Jacobians
//! from geodesic tangents, and a projected proximal-gradient subproblem
//! solver on the constraint set.

use crate::eikonal::{solve_eikonal, ActivationMap, EasSet, EasSite, FimOptions, NO_OWNER};
use crate::error::{GeasiError, Result};
use crate::geodesic::{distance_gradient, trace_batch, TraceContext, TraceOptions};
use crate::linalg::{dist, Point};
use crate::mesh::search::MeshSearch;
use crate::mesh::{ConductionTensorField, MeasurementSet, SimplicialMesh};
use rand::Rng;

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    /// Over-relaxation weight applied to the previous step.
    pub beta_a: f64,
    /// Damping of the Gauss–Newton candidate.
    pub beta_s: f64,
    /// Outer iteration cap.
    pub max_iterations: usize,
    /// Site displacement tolerance as a multiple of the mean edge length.
    pub tol_move_factor: f64,
    /// Timing tolerance (ms).
    pub tol_t: f64,
    /// Subproblem gradient-map tolerance.
    pub inner_tol: f64,
    /// Subproblem iteration cap.
    pub inner_max: usize,
    pub fim: FimOptions,
    pub trace: TraceOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            beta_a: 1.0 / std::f64::consts::SQRT_2,
            beta_s: 0.5,
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

/// An activation-time fitting problem over a fixed mesh and tensor field.
pub struct FitProblem<'a> {
    pub mesh: &'a SimplicialMesh,
    pub search: &'a MeshSearch<'a>,
    pub tensors: &'a ConductionTensorField,
    pub measurements: &'a MeasurementSet,
    pub t_min: f64,
    pub t_max: f64,
    pub opts: FitOptions,
}

impl<'a> FitProblem<'a> {
    pub fn new(
        mesh: &'a SimplicialMesh,
        search: &'a MeshSearch<'a>,
        tensors: &'a ConductionTensorField,
        measurements: &'a MeasurementSet,
        t_min: f64,
        t_max: f64,
        opts: FitOptions,
    ) -> Result<Self> {
        measurements.validate(mesh.node_count())?;
        if t_max <= t_min {
            return Err(GeasiError::Config("empty timing interval".into()));
        }
        if !(0.0..=1.0).contains(&opts.beta_a) || !(0.0..=1.0).contains(&opts.beta_s) {
            return Err(GeasiError::Config(
                "relaxation weights must lie in (0, 1]".into(),
            ));
        }
        if opts.max_iterations == 0 {
            return Err(GeasiError::Config("iteration cap must be positive".into()));
        }
        Ok(Self {
            mesh,
            search,
            tensors,
            measurements,
            t_min,
            t_max,
            opts,
        })
    }

    fn project_site(&self, s: EasSite) -> EasSite {
        EasSite {
            position: self.search.project_to_domain(s.position),
            time: s.time.clamp(self.t_min, self.t_max),
        }
    }
}

/// Residuals, measurement ownership and distance gradients at one iterate.
pub struct EvalState {
    pub eas: EasSet,
    pub map: ActivationMap,
    pub residuals: Vec<f64>,
    pub owners: Vec<usize>,
    /// Per-measurement gradient of δ with respect to the owning site position;
    /// `None` when the geodesic did not converge.
    pub gradients: Vec<Option<Point>>,
    pub objective: f64,
    pub rmse: f64,
}

/// Solves the eikonal problem at `eas`, traces geodesics to all measurement
/// nodes and collects residuals and distance gradients.
pub fn evaluate_state(problem: &FitProblem, eas: &EasSet) -> Result<EvalState> {
    let map = solve_eikonal(
        problem.mesh,
        problem.search,
        problem.tensors,
        eas,
        &problem.opts.fim,
    )?;
    let m = problem.measurements.nodes.len();
    let mut residuals = Vec::with_capacity(m);
    let mut owners = Vec::with_capacity(m);
    for (k, &node) in problem.measurements.nodes.iter().enumerate() {
        residuals.push(map.phi[node] - problem.measurements.times[k]);
        owners.push(map.owner[node]);
    }
    let objective = 0.5 * residuals.iter().map(|r| r * r).sum::<f64>();
    let rmse = (residuals.iter().map(|r| r * r).sum::<f64>() / m as f64).sqrt();

    let ctx = TraceContext::new(
        problem.mesh,
        problem.search,
        problem.tensors,
        &map,
        &problem.opts.fim,
        problem.opts.trace,
    )?;
    let starts: Vec<Point> = problem
        .measurements
        .nodes
        .iter()
        .map(|&n| problem.mesh.nodes[n])
        .collect();
    let paths = trace_batch(&ctx, &starts, None::<fn(usize, usize, usize)>);
    let gradients = paths
        .iter()
        .map(|p| {
            if !p.converged {
                return None;
            }
            let w = p.tangent?;
            distance_gradient(ctx.site_tensor(p.site), w).ok()
        })
        .collect();

    Ok(EvalState {
        eas: map.eas.clone(),
        map,
        residuals,
        owners,
        gradients,
        objective,
        rmse,
    })
}

/// One Jacobian block: rows over the measurements owned by a site, columns
/// (x, y, z, t).
pub struct SiteBlock {
    pub site: usize,
    pub rows: Vec<[f64; 4]>,
    pub residuals: Vec<f64>,
}

/// Per-site Jacobian blocks; rows of non-converged geodesics are omitted.
pub fn assemble_jacobian(state: &EvalState) -> Vec<SiteBlock> {
    let mut blocks: Vec<SiteBlock> = (0..state.eas.len())
        .map(|site| SiteBlock {
            site,
            rows: Vec::new(),
            residuals: Vec::new(),
        })
        .collect();
    for (k, &owner) in state.owners.iter().enumerate() {
        if owner == NO_OWNER || !state.eas.active[owner] {
            continue;
        }
        if let Some(g) = state.gradients[k] {
            blocks[owner].rows.push([g[0], g[1], g[2], 1.0]);
            blocks[owner].residuals.push(state.residuals[k]);
        }
    }
    blocks
}

fn spectral_bound(block: &SiteBlock) -> f64 {
    // power iteration on JᵀJ (4x4)
    let mut a = [[0.0f64; 4]; 4];
    for row in &block.rows {
        for i in 0..4 {
            for j in 0..4 {
                a[i][j] += row[i] * row[j];
            }
        }
    }
    let mut v = [1.0f64, 0.37, -0.61, 0.92];
    let mut lambda = 0.0;
    for _ in 0..60 {
        let mut w = [0.0f64; 4];
        for i in 0..4 {
            for j in 0..4 {
                w[i] += a[i][j] * v[j];
            }
        }
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n <= 0.0 {
            lambda = 0.0;
            break;
        }
        lambda = n;
        for i in 0..4 {
            v[i] = w[i] / n;
        }
    }
    if lambda > 0.0 {
        lambda
    } else {
        // safe upper bound when the start vector is orthogonal to the range
        (0..4).map(|i| a[i][i]).sum()
    }
}

/// Projected proximal-gradient solve of the linearized per-site subproblem
/// `min ½‖J(z − s) + r‖²` over Ω̄ × [T_min, T_max].
pub fn gauss_newton_step(problem: &FitProblem, state: &EvalState) -> EasSet {
    let blocks = assemble_jacobian(state);
    let mut out = state.eas.clone();
    for block in &blocks {
        if !state.eas.active[block.site] || block.rows.is_empty() {
            continue;
        }
        let sigma = spectral_bound(block);
        if sigma <= 0.0 {
            continue;
        }
        let tau = 0.9 / sigma;
        let s0 = state.eas.sites[block.site];
        let mut z = [s0.position[0], s0.position[1], s0.position[2], s0.time];
        let s = z;
        for _ in 0..problem.opts.inner_max {
            // gradient of the linearized least squares at z
            let mut grad = [0.0f64; 4];
            for (row, &r) in block.rows.iter().zip(&block.residuals) {
                let pred = r + (0..4).map(|j| row[j] * (z[j] - s[j])).sum::<f64>();
                for j in 0..4 {
                    grad[j] += row[j] * pred;
                }
            }
            let cand = [
                z[0] - tau * grad[0],
                z[1] - tau * grad[1],
                z[2] - tau * grad[2],
                z[3] - tau * grad[3],
            ];
            let p = problem
                .search
                .project_to_domain([cand[0], cand[1], cand[2]]);
            let next = [
                p[0],
                p[1],
                p[2],
                cand[3].clamp(problem.t_min, problem.t_max),
            ];
            let step: f64 = (0..4)
                .map(|j| (next[j] - z[j]).powi(2))
                .sum::<f64>()
                .sqrt();
            z = next;
            // gradient-map norm of the projected step
            if step / tau < problem.opts.inner_tol {
                break;
            }
        }
        out.sites[block.site] = EasSite {
            position: [z[0], z[1], z[2]],
            time: z[3],
        };
    }
    out
}

#[derive(Debug, Clone)]
pub struct FitHistoryEntry {
    pub iteration: usize,
    pub sites: Vec<EasSite>,
    pub active: Vec<bool>,
    pub objective: f64,
    pub rmse: f64,
    /// Sites with no usable Jacobian rows this iteration.
    pub skipped_sites: usize,
}

pub type FitHistory = Vec<FitHistoryEntry>;

/// The full fitting loop: over-relax, project, re-check compatibility, solve,
/// trace, step, damp. Returns the best evaluated iterate.
pub fn geasi_fit(problem: &FitProblem, initial: &EasSet) -> Result<(EasSet, FitHistory)> {
    let opts = &problem.opts;
    let tol_move = opts.tol_move_factor * problem.mesh.h;

    let mut current = initial.clone();
    for (s, a) in current
        .sites
        .iter_mut()
        .zip(vec![true; initial.len()].iter())
    {
        *s = problem.project_site(*s);
        let _ = a;
    }
    current.active = vec![true; current.len()];
    current.t_min = problem.t_min;
    current.t_max = problem.t_max;
    let mut previous = current.clone();

    let mut history = FitHistory::new();
    let mut best: Option<(f64, EasSet)> = None;

    for iteration in 0..opts.max_iterations {
        // over-relaxation with projection back into the feasible set
        let mut relaxed = current.clone();
        for i in 0..relaxed.len() {
            let cur = current.sites[i];
            let prev = previous.sites[i];
            let site = EasSite {
                position: [
                    cur.position[0] + opts.beta_a * (cur.position[0] - prev.position[0]),
                    cur.position[1] + opts.beta_a * (cur.position[1] - prev.position[1]),
                    cur.position[2] + opts.beta_a * (cur.position[2] - prev.position[2]),
                ],
                time: cur.time + opts.beta_a * (cur.time - prev.time),
            };
            relaxed.sites[i] = problem.project_site(site);
        }
        relaxed.active = vec![true; relaxed.len()];

        // compatibility is re-decided inside the solve
        let state = evaluate_state(problem, &relaxed)?;
        let blocks = assemble_jacobian(&state);
        let skipped = blocks
            .iter()
            .filter(|b| state.eas.active[b.site] && b.rows.is_empty())
            .count();
        history.push(FitHistoryEntry {
            iteration,
            sites: state.eas.sites.clone(),
            active: state.eas.active.clone(),
            objective: state.objective,
            rmse: state.rmse,
            skipped_sites: skipped,
        });
        if best.as_ref().map_or(true, |(b, _)| state.objective < *b) {
            best = Some((state.objective, state.eas.clone()));
        }

        let candidate = gauss_newton_step(problem, &state);
        let mut next = state.eas.clone();
        for i in 0..next.len() {
            if !next.active[i] {
                // frozen while deactivated; reconsidered next iteration
                next.sites[i] = relaxed.sites[i];
                continue;
            }
            let tilde = relaxed.sites[i];
            let bar = candidate.sites[i];
            let damped = EasSite {
                position: [
                    tilde.position[0] + opts.beta_s * (bar.position[0] - tilde.position[0]),
                    tilde.position[1] + opts.beta_s * (bar.position[1] - tilde.position[1]),
                    tilde.position[2] + opts.beta_s * (bar.position[2] - tilde.position[2]),
                ],
                time: tilde.time + opts.beta_s * (bar.time - tilde.time),
            };
            next.sites[i] = problem.project_site(damped);
        }
        next.active = vec![true; next.len()];

        let mut max_move = 0.0f64;
        let mut max_dt = 0.0f64;
        for (a, b) in next.sites.iter().zip(&current.sites) {
            max_move = max_move.max(dist(a.position, b.position));
            max_dt = max_dt.max((a.time - b.time).abs());
        }
        previous = current;
        current = next;
        if max_move < tol_move && max_dt < opts.tol_t {
            break;
        }
    }

    let (_, mut final_eas) = best.ok_or_else(|| GeasiError::Solver("no iterations ran".into()))?;
    final_eas.t_min = problem.t_min;
    final_eas.t_max = problem.t_max;
    Ok((final_eas, history))
}

/// Forward-simulates measurement times at the given nodes.
pub fn simulate_measurements(
    mesh: &SimplicialMesh,
    search: &MeshSearch,
    tensors: &ConductionTensorField,
    eas: &EasSet,
    fim: &FimOptions,
    nodes: &[usize],
) -> Result<MeasurementSet> {
    let map = solve_eikonal(mesh, search, tensors, eas, fim)?;
    Ok(MeasurementSet {
        nodes: nodes.to_vec(),
        times: nodes.iter().map(|&n| map.phi[n]).collect(),
    })
}

/// Random initial sites: positions uniform over mesh nodes, timings uniform
/// over the lower fifth of the admissible interval.
pub fn random_initial_sites<R: Rng>(
    mesh: &SimplicialMesh,
    t_min: f64,
    t_max: f64,
    n: usize,
    rng: &mut R,
) -> Result<EasSet> {
    let sites = (0..n)
        .map(|_| {
            let node = rng.gen_range(0..mesh.node_count());
            EasSite {
                position: mesh.nodes[node],
                time: t_min + rng.gen::<f64>() * 0.2 * (t_max - t_min),
            }
        })
        .collect();
    EasSet::new(sites, t_min, t_max)
}
