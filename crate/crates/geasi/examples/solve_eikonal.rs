//! Solves the anisotropic eikonal equation on the heterogeneous square
//! scenario from two activation sites and exports the activation map.

use geasi::eikonal::{solve_eikonal, EasSet, EasSite, FimOptions};
use geasi::mesh::search::MeshSearch;
use geasi::mesh::setup::{generate_square_setup, SquareVelocity};
use geasi::mesh::vtk::{write_vtk, FieldData, VtkFields};
use std::path::Path;

fn main() -> geasi::Result<()> {
    let (mesh, tensors, _) = generate_square_setup(50, &SquareVelocity::default())?;
    let search = MeshSearch::new(&mesh);
    println!(
        "square scenario: {} nodes, {} cells, h = {:.3} mm",
        mesh.node_count(),
        mesh.cell_count(),
        mesh.h
    );

    let eas = EasSet::new(
        vec![
            EasSite {
                position: [6.0, 10.0, 0.0],
                time: 0.0,
            },
            EasSite {
                position: [14.0, 10.0, 0.0],
                time: 4.0,
            },
        ],
        0.0,
        200.0,
    )?;
    let map = solve_eikonal(&mesh, &search, &tensors, &eas, &FimOptions::default())?;

    let latest = map.phi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!("latest activation: {latest:.2} ms");
    for (i, owned) in (0..eas.len())
        .map(|i| map.owner.iter().filter(|&&o| o == i).count())
        .enumerate()
    {
        println!("site {i} owns {owned} nodes");
    }

    let fields = VtkFields {
        point_data: vec![
            ("activation_ms".into(), FieldData::Scalars(map.phi.clone())),
            (
                "owner_site".into(),
                FieldData::IntScalars(map.owner.iter().map(|&o| o as i64).collect()),
            ),
        ],
        cell_data: vec![],
    };
    let out = Path::new("activation.vtk");
    write_vtk(out, &mesh, &fields)?;
    println!("wrote {}", out.display());
    Ok(())
}
