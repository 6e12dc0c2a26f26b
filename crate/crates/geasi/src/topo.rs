//! Topological-gradient site growth: score splitting versus moving each
//! activation site and grow the site count from a single seed until the
//! measurements are explained.

use crate::eikonal::{EasSet, EasSite};
use crate::error::Result;
use crate::linalg::{add, dot, scale, Point};
use crate::optimizer::{evaluate_state, geasi_fit, EvalState, FitHistory, FitProblem};

#[derive(Debug, Clone, Copy)]
pub struct TopoConfig {
    /// Probe length for scoring (mm); 0 uses the mean edge length.
    pub epsilon: f64,
    pub directions_2d: usize,
    pub directions_3d: usize,
    pub ratio_threshold_2d: f64,
    pub ratio_threshold_3d: f64,
    /// Splits are gated on the last fit step moving every site less than
    /// this multiple of the mean edge length.
    pub gate_factor: f64,
    /// Post-split child separation from the parent in mean edge lengths.
    pub separation_factor: f64,
    pub n_max: usize,
    /// Evaluate the split score as the worst direction (the literal
    /// min-over-n reading) instead of the best-direction decrease.
    pub worst_case_reading: bool,
}

impl Default for TopoConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.0,
            directions_2d: 360,
            directions_3d: 5625,
            ratio_threshold_2d: 1e-1,
            ratio_threshold_3d: 2.5e-1,
            gate_factor: 1e-2,
            separation_factor: 2.0,
            n_max: 10,
            worst_case_reading: false,
        }
    }
}

impl TopoConfig {
    pub fn ratio_threshold(&self, dim: usize) -> f64 {
        if dim == 2 {
            self.ratio_threshold_2d
        } else {
            self.ratio_threshold_3d
        }
    }
}

/// Split-versus-move score of one site.
#[derive(Debug, Clone, Copy)]
pub struct SplitScore {
    pub site: usize,
    /// Best-direction decrease of the objective for a symmetric split (ms²).
    pub nu_split: f64,
    /// Best-direction decrease for a plain move of the site (ms²).
    pub nu_move: f64,
    pub direction: Point,
    pub ratio: f64,
}

/// First-order sensitivity of the residual at one measurement to splitting
/// the site along `n`: −|g·n|.
pub fn topological_gradient(g: Point, n: Point) -> f64 {
    -dot(g, n).abs()
}

/// Evenly spread unit directions: uniform angles in 2D, a Fibonacci sphere
/// in 3D.
pub fn sample_directions(dim: usize, count: usize) -> Vec<Point> {
    if dim == 2 {
        (0..count)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
                [a.cos(), a.sin(), 0.0]
            })
            .collect()
    } else {
        let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
        (0..count)
            .map(|k| {
                let z = 1.0 - 2.0 * (k as f64 + 0.5) / count as f64;
                let r = (1.0 - z * z).sqrt();
                let a = golden * k as f64;
                [r * a.cos(), r * a.sin(), z]
            })
            .collect()
    }
}

/// Scores splitting site `site` over the sampled directions. Returns `None`
/// when the site owns no usable measurements.
pub fn split_scores(
    problem: &FitProblem,
    state: &EvalState,
    site: usize,
    cfg: &TopoConfig,
) -> Option<SplitScore> {
    let eps = if cfg.epsilon > 0.0 {
        cfg.epsilon
    } else {
        problem.mesh.h
    };
    let mut rows: Vec<(f64, Point)> = Vec::new();
    for (k, &owner) in state.owners.iter().enumerate() {
        if owner == site {
            if let Some(g) = state.gradients[k] {
                rows.push((state.residuals[k], g));
            }
        }
    }
    if rows.is_empty() {
        return None;
    }

    let count = if problem.mesh.dim == 2 {
        cfg.directions_2d
    } else {
        cfg.directions_3d
    };
    let x1 = state.eas.sites[site].position;
    let mut best_split: Option<(f64, Point)> = None;
    let mut worst_split: Option<(f64, Point)> = None;
    let mut best_move = f64::NEG_INFINITY;
    for n in sample_directions(problem.mesh.dim, count) {
        let plus = add(x1, scale(n, eps));
        let minus = add(x1, scale(n, -eps));
        if !problem.search.is_inside(plus) && !problem.search.is_inside(minus) {
            continue;
        }
        let mut dec_split = 0.0;
        let mut dec_move = 0.0;
        for &(r, g) in &rows {
            let j = topological_gradient(g, n);
            let split_res = r + eps * j;
            let move_res = r + eps * dot(g, n);
            dec_split += r * r - split_res * split_res;
            dec_move += r * r - move_res * move_res;
        }
        if best_split.map_or(true, |(b, _)| dec_split > b) {
            best_split = Some((dec_split, n));
        }
        if worst_split.map_or(true, |(b, _)| dec_split < b) {
            worst_split = Some((dec_split, n));
        }
        best_move = best_move.max(dec_move);
    }
    let (nu_split, direction) = if cfg.worst_case_reading {
        worst_split?
    } else {
        best_split?
    };
    let ratio = if nu_split > 0.0 {
        (best_move / nu_split).max(0.0)
    } else {
        f64::INFINITY
    };
    Some(SplitScore {
        site,
        nu_split,
        nu_move: best_move,
        direction,
        ratio,
    })
}

/// One epoch of the adaptive loop: the fit history plus an optional split.
#[derive(Debug, Clone)]
pub struct TopoEpoch {
    pub epoch: usize,
    pub n_sites: usize,
    pub objective: f64,
    pub rmse: f64,
    pub split: Option<SplitScore>,
    pub fit_history: FitHistory,
}

/// Alternates fitting epochs with split checks, growing the site count until
/// no site is eligible or the cap is reached.
pub fn adaptive_fit(
    problem: &FitProblem,
    cfg: &TopoConfig,
    initial: &EasSet,
) -> Result<(EasSet, Vec<TopoEpoch>)> {
    let threshold = cfg.ratio_threshold(problem.mesh.dim);
    let gate = cfg.gate_factor * problem.mesh.h;
    let separation = cfg.separation_factor * problem.mesh.h;

    let mut eas = initial.clone();
    let mut epochs = Vec::new();
    let mut freshly_split: Vec<usize> = Vec::new();
    let max_epochs = 2 * cfg.n_max;
    for epoch in 0..max_epochs {
        let (fit, fit_history) = geasi_fit(problem, &eas)?;
        eas = fit;
        let state = evaluate_state(problem, &eas)?;

        // splitting only once the fit has settled; a fit that exhausted its
        // iteration budget counts as settled because a single site caught
        // between two measurement clusters oscillates indefinitely
        let settled = match fit_history.len() {
            0 | 1 => true,
            l if l >= problem.opts.max_iterations => true,
            l => {
                let a = &fit_history[l - 1].sites;
                let b = &fit_history[l - 2].sites;
                a.iter()
                    .zip(b)
                    .map(|(p, q)| crate::linalg::dist(p.position, q.position))
                    .fold(0.0f64, f64::max)
                    < gate
            }
        };

        let mut chosen: Option<SplitScore> = None;
        if settled && eas.len() < cfg.n_max {
            for site in 0..eas.len() {
                if !eas.active[site] || freshly_split.contains(&site) {
                    continue;
                }
                if let Some(score) = split_scores(problem, &state, site, cfg) {
                    if score.nu_split > 0.0
                        && score.ratio < threshold
                        && chosen.map_or(true, |c| score.ratio < c.ratio)
                    {
                        chosen = Some(score);
                    }
                }
            }
        }

        epochs.push(TopoEpoch {
            epoch,
            n_sites: eas.len(),
            objective: state.objective,
            rmse: state.rmse,
            split: chosen,
            fit_history,
        });

        match chosen {
            Some(score) => {
                let parent = eas.sites[score.site];
                let child = |sign: f64| EasSite {
                    position: problem
                        .search
                        .project_to_domain(add(parent.position, scale(score.direction, sign * separation))),
                    time: parent.time,
                };
                eas.sites[score.site] = child(1.0);
                eas.sites.push(child(-1.0));
                eas.active = vec![true; eas.sites.len()];
                freshly_split = vec![score.site, eas.sites.len() - 1];
            }
            None => {
                // a settled fit with no candidate ends the growth, unless
                // fresh children were still excluded from scoring this epoch
                if settled && freshly_split.is_empty() {
                    break;
                }
                freshly_split.clear();
            }
        }
    }
    Ok((eas, epochs))
}
