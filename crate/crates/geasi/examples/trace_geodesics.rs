//! Traces geodesics from the boundary measurement nodes back to their
//! activation sites and exports the paths as VTK polylines.

use geasi::eikonal::{solve_eikonal, EasSet, EasSite, FimOptions};
use geasi::geodesic::{trace_batch, TraceContext, TraceOptions};
use geasi::mesh::search::MeshSearch;
use geasi::mesh::setup::{generate_square_setup, SquareVelocity};
use geasi::mesh::vtk::write_vtk_polylines;
use std::path::Path;

fn main() -> geasi::Result<()> {
    let (mesh, tensors, meas) = generate_square_setup(40, &SquareVelocity::default())?;
    let search = MeshSearch::new(&mesh);
    let eas = EasSet::new(
        vec![
            EasSite {
                position: [5.0, 5.0, 0.0],
                time: 0.0,
            },
            EasSite {
                position: [15.0, 14.0, 0.0],
                time: 2.0,
            },
        ],
        0.0,
        200.0,
    )?;
    let fim = FimOptions::default();
    let map = solve_eikonal(&mesh, &search, &tensors, &eas, &fim)?;

    let ctx = TraceContext::new(&mesh, &search, &tensors, &map, &fim, TraceOptions::default())?;
    let starts: Vec<_> = meas.nodes.iter().map(|&n| mesh.nodes[n]).collect();
    let paths = trace_batch(
        &ctx,
        &starts,
        Some(|sweep: usize, fresh: usize, total: usize| {
            println!("sweep {sweep}: {fresh} new paths converged ({total} total)");
        }),
    );

    let converged = paths.iter().filter(|p| p.converged).count();
    println!("{converged} of {} geodesics converged", paths.len());
    if let Some(p) = paths.iter().find(|p| p.converged && p.tangent.is_some()) {
        println!(
            "example path: {} vertices from {:?} down to site {}",
            p.vertices.len(),
            p.start,
            p.site
        );
    }

    let lines: Vec<_> = paths
        .iter()
        .filter(|p| p.converged)
        .map(|p| p.vertices.clone())
        .collect();
    let out = Path::new("geodesics.vtk");
    write_vtk_polylines(out, &lines)?;
    println!("wrote {}", out.display());
    Ok(())
}
