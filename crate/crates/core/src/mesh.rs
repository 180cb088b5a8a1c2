//! Triangulated disk, electrode layout and node-graph matrices.
//!
//! The disk is meshed with concentric rings of nodes (one centre node, ring
//! `k` at radius `k·r/R`) and each pair of neighbouring rings is zipped into
//! triangles by angle. Electrodes are made of whole boundary edges, so the
//! boundary node count is always a multiple of the electrode period.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

/// Contact impedance used when none is given (Ω·m²).
pub const DEFAULT_CONTACT_IMPEDANCE: f64 = 1e-6;

pub const MESH_FORMAT: &str = "mfeit-mesh/1";

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub radius: f64,
    pub nodes: Vec<[f64; 2]>,
    /// Counter-clockwise node triples.
    pub triangles: Vec<[usize; 3]>,
    /// Boundary edges in counter-clockwise order along the circle.
    pub boundary_edges: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElectrodeSetup {
    /// Per electrode, indices into [`Mesh::boundary_edges`].
    pub electrode_edges: Vec<Vec<usize>>,
    pub contact_impedances: Vec<f64>,
    pub coverage_fraction: f64,
}

impl ElectrodeSetup {
    pub fn num_electrodes(&self) -> usize {
        self.electrode_edges.len()
    }

    pub fn validate(&self, mesh: &Mesh) -> Result<()> {
        if self.electrode_edges.len() != self.contact_impedances.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} electrodes but {} contact impedances",
                self.electrode_edges.len(),
                self.contact_impedances.len()
            )));
        }
        if self.electrode_edges.len() < 2 {
            return Err(Error::InvalidInput(
                "at least two electrodes required".into(),
            ));
        }
        if let Some(z) = self.contact_impedances.iter().find(|z| !(**z > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "contact impedance {z} is not positive"
            )));
        }
        let n_edges = mesh.boundary_edges.len();
        let mut owner = vec![usize::MAX; n_edges];
        for (p, edges) in self.electrode_edges.iter().enumerate() {
            if edges.is_empty() {
                return Err(Error::InvalidInput(format!("electrode {p} has no edges")));
            }
            for (k, &e) in edges.iter().enumerate() {
                if e >= n_edges {
                    return Err(Error::InvalidInput(format!(
                        "electrode {p} references boundary edge {e} of {n_edges}"
                    )));
                }
                if owner[e] != usize::MAX {
                    return Err(Error::InvalidInput(format!(
                        "boundary edge {e} shared by electrodes {} and {p}",
                        owner[e]
                    )));
                }
                owner[e] = p;
                if k > 0 {
                    let prev = mesh.boundary_edges[edges[k - 1]];
                    if prev[1] != mesh.boundary_edges[e][0] {
                        return Err(Error::InvalidInput(format!(
                            "electrode {p} edges are not contiguous"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Node adjacency with self-loops, stored row-compressed.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphMatrices {
    pub row_offsets: Vec<usize>,
    pub col_indices: Vec<usize>,
    /// Diagonal of the degree matrix (row sums of the adjacency).
    pub degree: Vec<f64>,
}

impl GraphMatrices {
    pub fn num_nodes(&self) -> usize {
        self.degree.len()
    }

    pub fn neighbours(&self, i: usize) -> &[usize] {
        &self.col_indices[self.row_offsets[i]..self.row_offsets[i + 1]]
    }

    pub fn adjacency_dense(&self) -> DMatrix<f64> {
        let n = self.num_nodes();
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            for &j in self.neighbours(i) {
                a[(i, j)] = 1.0;
            }
        }
        a
    }

    /// Dense `B^{-1/2} A B^{-1/2}`.
    pub fn normalized_adjacency_dense(&self) -> DMatrix<f64> {
        let n = self.num_nodes();
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            for &j in self.neighbours(i) {
                a[(i, j)] = 1.0 / (self.degree[i] * self.degree[j]).sqrt();
            }
        }
        a
    }
}

impl Mesh {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn signed_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        signed_area(self.nodes[a], self.nodes[b], self.nodes[c])
    }

    pub fn centroid(&self, t: usize) -> [f64; 2] {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        [(pa[0] + pb[0] + pc[0]) / 3.0, (pa[1] + pb[1] + pc[1]) / 3.0]
    }

    pub fn edge_length(&self, edge: [usize; 2]) -> f64 {
        let (p, q) = (self.nodes[edge[0]], self.nodes[edge[1]]);
        (p[0] - q[0]).hypot(p[1] - q[1])
    }

    /// Checks index ranges, orientation and boundary-edge ownership.
    pub fn validate(&self) -> Result<()> {
        let nv = self.nodes.len();
        for (t, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&i| i >= nv) {
                return Err(Error::InvalidInput(format!(
                    "triangle {t} references a missing node"
                )));
            }
        }
        triangle_areas(self)?;
        let mut owners = std::collections::HashMap::new();
        for tri in &self.triangles {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                *owners.entry((a.min(b), a.max(b))).or_insert(0usize) += 1;
            }
        }
        for (e, edge) in self.boundary_edges.iter().enumerate() {
            let key = (edge[0].min(edge[1]), edge[0].max(edge[1]));
            if owners.get(&key).copied() != Some(1) {
                return Err(Error::InvalidInput(format!(
                    "boundary edge {e} does not belong to exactly one triangle"
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn signed_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

/// Triangle areas; fails on the first non-positive (degenerate or clockwise) triangle.
pub fn triangle_areas(mesh: &Mesh) -> Result<Vec<f64>> {
    (0..mesh.num_triangles())
        .map(|t| {
            let area = mesh.signed_area(t);
            if area > 0.0 {
                Ok(area)
            } else {
                Err(Error::DegenerateTriangle { index: t, area })
            }
        })
        .collect()
}

pub fn graph_matrices(mesh: &Mesh) -> GraphMatrices {
    let n = mesh.num_nodes();
    let mut lists: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for tri in &mesh.triangles {
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            lists[a].push(b);
            lists[b].push(a);
        }
    }
    let mut row_offsets = Vec::with_capacity(n + 1);
    let mut col_indices = Vec::new();
    let mut degree = Vec::with_capacity(n);
    row_offsets.push(0);
    for mut list in lists {
        list.sort_unstable();
        list.dedup();
        degree.push(list.len() as f64);
        col_indices.extend(list);
        row_offsets.push(col_indices.len());
    }
    GraphMatrices {
        row_offsets,
        col_indices,
        degree,
    }
}

/// Electrode period on the boundary: `edges_on` electrode edges followed by
/// `edges_off` gap edges.
fn electrode_period(coverage: f64) -> Option<(usize, usize)> {
    (2..=200).find_map(|period| {
        let on = (coverage * period as f64).round() as usize;
        if on == 0 || on >= period {
            return None;
        }
        let rel = ((on as f64 / period as f64) - coverage).abs() / coverage;
        (rel <= 0.005).then_some((on, period - on))
    })
}

fn ring_sizes(boundary_nodes: usize, rings: usize) -> Vec<usize> {
    (1..=rings)
        .map(|k| {
            let n = (boundary_nodes as f64 * k as f64 / rings as f64).round() as usize;
            n.max(3)
        })
        .collect()
}

/// Builds a disk mesh with `num_electrodes` equally spaced electrodes
/// covering the fraction `coverage` of the boundary.
///
/// The vertex count lands within ±10% of `target_vertices`; among the ring
/// layouts that do, the one whose radial spacing best matches the boundary
/// spacing wins.
pub fn build_disk_mesh(
    radius: f64,
    target_vertices: usize,
    num_electrodes: usize,
    coverage: f64,
) -> Result<(Mesh, ElectrodeSetup)> {
    if !(radius > 0.0) {
        return Err(Error::InvalidInput(format!(
            "radius {radius} must be positive"
        )));
    }
    if target_vertices < 16 {
        return Err(Error::InvalidInput(format!(
            "target_vertices {target_vertices} is below the minimum of 16"
        )));
    }
    if num_electrodes < 4 {
        return Err(Error::InvalidInput(format!(
            "need at least 4 electrodes, got {num_electrodes}"
        )));
    }
    if !(coverage > 0.0 && coverage < 1.0) {
        return Err(Error::InvalidInput(format!(
            "coverage {coverage} must lie in (0, 1)"
        )));
    }
    let (on, off) = electrode_period(coverage).ok_or_else(|| {
        Error::InvalidInput(format!(
            "coverage {coverage} leaves no electrode-free gap representable on whole edges"
        ))
    })?;
    let period = on + off;
    let min_boundary = num_electrodes * period;
    let tolerance = 0.1 * target_vertices as f64;
    if min_boundary as f64 > target_vertices as f64 + tolerance {
        return Err(Error::InvalidInput(format!(
            "target_vertices {target_vertices} too small to place {num_electrodes} electrodes \
             ({min_boundary} boundary nodes needed)"
        )));
    }

    let mut best: Option<(f64, usize, usize)> = None;
    let mut multiplier = 1;
    while (num_electrodes * period * multiplier) as f64 <= target_vertices as f64 + tolerance {
        let boundary = num_electrodes * period * multiplier;
        for rings in 1..=boundary {
            let total = 1 + ring_sizes(boundary, rings).iter().sum::<usize>();
            if (total as f64 - target_vertices as f64).abs() > tolerance {
                continue;
            }
            let radial = 1.0 / rings as f64;
            let tangential = 2.0 * PI / boundary as f64;
            let score = (radial / tangential).ln().abs();
            if best.map_or(true, |(s, _, _)| score < s) {
                best = Some((score, boundary, rings));
            }
        }
        multiplier += 1;
    }
    let (_, boundary, rings) = best.ok_or_else(|| {
        Error::InvalidInput(format!(
            "no ring layout with {num_electrodes} electrodes matches {target_vertices} vertices"
        ))
    })?;

    let mesh = ring_mesh(radius, &ring_sizes(boundary, rings));
    let edges_on = on * boundary / (num_electrodes * period);
    let stride = boundary / num_electrodes;
    let electrode_edges = (0..num_electrodes)
        .map(|p| (p * stride..p * stride + edges_on).collect())
        .collect();
    let electrodes = ElectrodeSetup {
        electrode_edges,
        contact_impedances: vec![DEFAULT_CONTACT_IMPEDANCE; num_electrodes],
        coverage_fraction: edges_on as f64 / stride as f64,
    };
    Ok((mesh, electrodes))
}

fn half_steps(offset: f64) -> usize {
    (2.0 * offset).round() as usize
}

pub(crate) fn ring_mesh(radius: f64, sizes: &[usize]) -> Mesh {
    let rings = sizes.len();
    let mut nodes = vec![[0.0, 0.0]];
    let mut ring_start = Vec::with_capacity(rings);
    let mut offsets = Vec::with_capacity(rings);
    for (k, &n) in sizes.iter().enumerate() {
        let r = radius * (k + 1) as f64 / rings as f64;
        // Interior rings alternate a half-step twist; the boundary ring stays aligned.
        let offset = if k + 1 == rings {
            0.0
        } else {
            0.5 * ((k + 1) % 2) as f64
        };
        ring_start.push(nodes.len());
        offsets.push(offset);
        for i in 0..n {
            let theta = 2.0 * PI * (i as f64 + offset) / n as f64;
            let (s, c) = theta.sin_cos();
            if k + 1 == rings {
                nodes.push([radius * c, radius * s]);
            } else {
                nodes.push([r * c, r * s]);
            }
        }
    }

    let mut triangles = Vec::new();
    let mut push = |nodes: &[[f64; 2]], mut tri: [usize; 3]| {
        if signed_area(nodes[tri[0]], nodes[tri[1]], nodes[tri[2]]) < 0.0 {
            tri.swap(1, 2);
        }
        triangles.push(tri);
    };

    let first = sizes[0];
    for i in 0..first {
        push(
            &nodes,
            [0, ring_start[0] + i, ring_start[0] + (i + 1) % first],
        );
    }
    for k in 1..rings {
        let (a, b) = (sizes[k - 1], sizes[k]);
        let (sa, sb) = (ring_start[k - 1], ring_start[k]);
        // Angles in units of half steps, compared exactly so that ties break
        // the same way in every rotated copy.
        let (hi, ho) = (half_steps(offsets[k - 1]), half_steps(offsets[k]));
        let (mut i, mut j) = (0, 0);
        while i < a || j < b {
            let advance_inner =
                j == b || (i < a && (2 * (i + 1) + hi) * b <= (2 * (j + 1) + ho) * a);
            if advance_inner {
                push(&nodes, [sa + i % a, sa + (i + 1) % a, sb + j % b]);
                i += 1;
            } else {
                push(&nodes, [sa + i % a, sb + (j + 1) % b, sb + j % b]);
                j += 1;
            }
        }
    }

    let outer = *sizes.last().unwrap();
    let so = *ring_start.last().unwrap();
    let boundary_edges = (0..outer).map(|i| [so + i, so + (i + 1) % outer]).collect();
    Mesh {
        radius,
        nodes,
        triangles,
        boundary_edges,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MeshFile {
    format: String,
    radius: f64,
    nodes: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    boundary_edges: Vec<[usize; 2]>,
    electrodes: Vec<Vec<usize>>,
    contact_impedances: Vec<f64>,
    #[serde(default)]
    coverage_fraction: Option<f64>,
}

pub fn write_mesh(path: &Path, mesh: &Mesh, electrodes: &ElectrodeSetup) -> Result<()> {
    let file = MeshFile {
        format: MESH_FORMAT.to_string(),
        radius: mesh.radius,
        nodes: mesh.nodes.clone(),
        triangles: mesh.triangles.clone(),
        boundary_edges: mesh.boundary_edges.clone(),
        electrodes: electrodes.electrode_edges.clone(),
        contact_impedances: electrodes.contact_impedances.clone(),
        coverage_fraction: Some(electrodes.coverage_fraction),
    };
    io::write_json(path, &file)
}

pub fn read_mesh(path: &Path) -> Result<(Mesh, ElectrodeSetup)> {
    let file: MeshFile = io::read_json(path)?;
    if file.format != MESH_FORMAT {
        return Err(Error::Format {
            path: path.into(),
            message: format!("expected format {MESH_FORMAT:?}, found {:?}", file.format),
        });
    }
    let mesh = Mesh {
        radius: file.radius,
        nodes: file.nodes,
        triangles: file.triangles,
        boundary_edges: file.boundary_edges,
    };
    let covered: f64 = file
        .electrodes
        .iter()
        .flatten()
        .filter_map(|&e| mesh.boundary_edges.get(e))
        .map(|&e| mesh.edge_length(e))
        .sum();
    let perimeter: f64 = mesh
        .boundary_edges
        .iter()
        .map(|&e| mesh.edge_length(e))
        .sum();
    let electrodes = ElectrodeSetup {
        electrode_edges: file.electrodes,
        contact_impedances: file.contact_impedances,
        coverage_fraction: file.coverage_fraction.unwrap_or(covered / perimeter),
    };
    mesh.validate()?;
    electrodes.validate(&mesh)?;
    Ok((mesh, electrodes))
}
