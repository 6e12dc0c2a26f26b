//! Grows the activation-site count from a single seed via split scoring
//! until the boundary measurements are explained.

use geasi::eikonal::{EasSet, EasSite, FimOptions};
use geasi::mesh::search::MeshSearch;
use geasi::mesh::setup::{generate_square_setup, SquareVelocity};
use geasi::optimizer::{simulate_measurements, FitOptions, FitProblem};
use geasi::topo::{adaptive_fit, TopoConfig};

fn main() -> geasi::Result<()> {
    let (mesh, tensors, meas) = generate_square_setup(31, &SquareVelocity::default())?;
    let search = MeshSearch::new(&mesh);
    let truth = EasSet::new(
        vec![
            EasSite {
                position: [6.0, 10.0, 0.0],
                time: 0.0,
            },
            EasSite {
                position: [14.0, 10.0, 0.0],
                time: 0.0,
            },
        ],
        0.0,
        200.0,
    )?;
    let fim = FimOptions::default();
    let measurements =
        simulate_measurements(&mesh, &search, &tensors, &truth, &fim, &meas.nodes)?;
    let problem = FitProblem::new(
        &mesh,
        &search,
        &tensors,
        &measurements,
        0.0,
        200.0,
        FitOptions::default(),
    )?;

    // one seed site; the split-versus-move score decides when to branch
    let initial = EasSet::new(
        vec![EasSite {
            position: [10.0, 12.0, 0.0],
            time: 10.0,
        }],
        0.0,
        200.0,
    )?;
    let (fit, epochs) = adaptive_fit(&problem, &TopoConfig::default(), &initial)?;
    for e in &epochs {
        match &e.split {
            Some(s) => println!(
                "epoch {}: {} sites, rmse {:.3} ms, split site {} (ratio {:.3})",
                e.epoch, e.n_sites, e.rmse, s.site, s.ratio
            ),
            None => println!(
                "epoch {}: {} sites, rmse {:.3} ms, no split",
                e.epoch, e.n_sites, e.rmse
            ),
        }
    }
    println!("final site count: {}", fit.active_indices().len());
    for s in &fit.sites {
        println!(
            "site at ({:.2}, {:.2}), timing {:.2} ms",
            s.position[0], s.position[1], s.time
        );
    }
    Ok(())
}
