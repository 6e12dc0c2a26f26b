//! Identifies activation sites directly from a target ECG: the forward
//! trace is differentiated through the activation map and the sites are
//! updated by a damped Gauss–Newton loop.

use geasi::ecg::{
    compute_lead_fields, conductivities_from_d, fit_ecg, simulate_ecg, EcgFitOptions,
    EcgFitProblem, LeadSystem, TimeGrid, TorsoGrid, TorsoOptions, WaveformParams,
};
use geasi::eikonal::{solve_eikonal, EasSet, EasSite, FimOptions};
use geasi::linalg::dist;
use geasi::mesh::search::MeshSearch;
use geasi::mesh::setup::{generate_square_setup, SquareVelocity};

fn main() -> geasi::Result<()> {
    let (mesh, tensors, _) = generate_square_setup(40, &SquareVelocity::default())?;
    let search = MeshSearch::new(&mesh);
    let params = WaveformParams::default();
    let (g_i, _, g_bulk) = conductivities_from_d(&tensors, &params);
    let grid = TorsoGrid::new(
        &mesh,
        &search,
        &g_bulk,
        &TorsoOptions {
            resolution: 50,
            ..TorsoOptions::default()
        },
    )?;
    let leads = LeadSystem::axis_aligned(&grid);
    let fields = compute_lead_fields(&grid, &leads)?;
    let time = TimeGrid {
        t1: 100.0,
        ..TimeGrid::default()
    };

    let truth = EasSet::new(
        vec![
            EasSite {
                position: [6.0, 10.0, 0.0],
                time: 5.0,
            },
            EasSite {
                position: [14.0, 10.0, 0.0],
                time: 0.0,
            },
        ],
        0.0,
        200.0,
    )?;
    let map = solve_eikonal(&mesh, &search, &tensors, &truth, &FimOptions::default())?;
    let target = simulate_ecg(&mesh, &map.phi, &g_i, &grid, &fields, &params, &time)?;

    // start from the truth shifted by five edge lengths
    let mut init = truth.clone();
    init.sites[0].position[0] += 3.0 * mesh.h;
    init.sites[0].position[1] += 4.0 * mesh.h;
    init.sites[1].position[0] -= 4.0 * mesh.h;
    init.sites[1].position[1] += 3.0 * mesh.h;

    let problem = EcgFitProblem {
        mesh: &mesh,
        search: &search,
        tensors: &tensors,
        g_i: &g_i,
        grid: &grid,
        leads: &fields,
        params,
        time,
        t_min: 0.0,
        t_max: 200.0,
        opts: EcgFitOptions::default(),
    };
    let (fit, history) = fit_ecg(&problem, &init, &target)?;
    println!("converged after {} iterations", history.len());
    for (i, s) in fit.sites.iter().enumerate() {
        println!(
            "site {i}: ({:.2}, {:.2}) at {:.2} ms, {:.2} mm from truth",
            s.position[0],
            s.position[1],
            s.time,
            dist(s.position, truth.sites[i].position)
        );
    }
    let final_map = solve_eikonal(&mesh, &search, &tensors, &fit, &FimOptions::default())?;
    let final_trace =
        simulate_ecg(&mesh, &final_map.phi, &g_i, &grid, &fields, &params, &time)?;
    println!(
        "relative trace mismatch: {:.2}%",
        100.0 * final_trace.relative_mismatch(&target)
    );
    Ok(())
}
