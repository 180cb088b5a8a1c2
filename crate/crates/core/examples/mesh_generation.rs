//! Builds the default disk mesh, reports its geometry and electrode layout,
//! and writes it to JSON.
//!
//! `cargo run --example mesh_generation -- [out.json]`

use mfeit::mesh::{build_disk_mesh, graph_matrices, read_mesh, triangle_areas, write_mesh};

fn main() -> mfeit::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("mfeit_mesh.json"));

    let (mesh, electrodes) = build_disk_mesh(1.0, 432, 32, 0.5)?;
    let areas = triangle_areas(&mesh)?;
    let total: f64 = areas.iter().sum();
    let (min, max) = areas
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(*v), b.max(*v)));
    println!(
        "{} nodes, {} triangles, {} boundary edges",
        mesh.num_nodes(),
        mesh.num_triangles(),
        mesh.boundary_edges.len()
    );
    println!(
        "area {total:.5} (π = {:.5}), triangle areas {min:.2e} .. {max:.2e}",
        std::f64::consts::PI
    );

    let covered: f64 = electrodes
        .electrode_edges
        .iter()
        .flatten()
        .map(|&e| mesh.edge_length(mesh.boundary_edges[e]))
        .sum();
    let perimeter: f64 = mesh
        .boundary_edges
        .iter()
        .map(|&e| mesh.edge_length(e))
        .sum();
    println!(
        "{} electrodes, {} edges each, coverage {:.3} of the boundary",
        electrodes.num_electrodes(),
        electrodes.electrode_edges[0].len(),
        covered / perimeter
    );

    let graph = graph_matrices(&mesh);
    let max_degree = graph.degree.iter().cloned().fold(0.0, f64::max);
    println!(
        "node graph: {} edges, max degree {max_degree}",
        graph.col_indices.len() / 2
    );

    write_mesh(&out, &mesh, &electrodes)?;
    let (back, _) = read_mesh(&out)?;
    assert_eq!(back.nodes, mesh.nodes);
    println!("written to {}", out.display());
    Ok(())
}
