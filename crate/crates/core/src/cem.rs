//! Complete Electrode Model with piecewise-linear potentials.
//!
//! Unknowns are the nodal potentials `u` and the electrode voltages `U`,
//! the latter written in the basis `b_p = e_p - e_{p+1}` of zero-mean
//! vectors, so the system is symmetric positive definite whenever all
//! conductivities and contact impedances are positive.
//!
//! Every current pattern is a combination of the `P - 1` basis currents;
//! the factorized system is solved once per basis current and pattern
//! solutions follow by linearity.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fraction::{fractions_to_conductivity, ConductivityField, FractionMatrix, SpectraSet};
use crate::io;
use crate::mesh::{triangle_areas, ElectrodeSetup, Mesh};

/// Injected current amplitude in amperes.
pub const DEFAULT_CURRENT_AMPLITUDE: f64 = 1e-2;

pub const ADJACENT_PROTOCOL: &str = "adjacent";

#[derive(Debug, Clone, PartialEq)]
pub struct CurrentPatternSet {
    /// `P × H`, one zero-mean pattern per column.
    pub patterns: DMatrix<f64>,
    pub protocol: String,
    pub amplitude: f64,
}

/// Pattern `h` drives `+amplitude` into electrode `h` and draws it out of `h + 1 (mod P)`.
pub fn adjacent_patterns(num_electrodes: usize, amplitude: f64) -> Result<CurrentPatternSet> {
    if num_electrodes < 4 {
        return Err(Error::InvalidInput(format!(
            "adjacent protocol needs at least 4 electrodes, got {num_electrodes}"
        )));
    }
    let p = num_electrodes;
    let mut patterns = DMatrix::zeros(p, p);
    for h in 0..p {
        patterns[(h, h)] = amplitude;
        patterns[((h + 1) % p, h)] = -amplitude;
    }
    Ok(CurrentPatternSet {
        patterns,
        protocol: ADJACENT_PROTOCOL.into(),
        amplitude,
    })
}

impl CurrentPatternSet {
    pub fn num_electrodes(&self) -> usize {
        self.patterns.nrows()
    }

    pub fn num_patterns(&self) -> usize {
        self.patterns.ncols()
    }

    /// Measurements per frequency, `K = (P - 1)·H`.
    pub fn num_measurements(&self) -> usize {
        (self.num_electrodes() - 1) * self.num_patterns()
    }

    pub fn validate(&self) -> Result<()> {
        for (h, col) in self.patterns.column_iter().enumerate() {
            if col.sum().abs() >= 1e-12 {
                return Err(Error::InvalidInput(format!(
                    "current pattern {h} is not zero-mean"
                )));
            }
        }
        Ok(())
    }

    /// Coordinates of each pattern in the basis `b_q = e_q - e_{q+1}`:
    /// `c_q = Σ_{k ≤ q} I_k`, shape `(P - 1) × H`.
    pub fn basis_coordinates(&self) -> DMatrix<f64> {
        let p = self.num_electrodes();
        let mut c = DMatrix::zeros(p - 1, self.num_patterns());
        for (h, col) in self.patterns.column_iter().enumerate() {
            let mut acc = 0.0;
            for q in 0..p - 1 {
                acc += col[q];
                c[(q, h)] = acc;
            }
        }
        c
    }
}

#[derive(Debug, Clone)]
struct ElectrodeTerm {
    /// `(a, b, length)` per boundary edge.
    edges: Vec<(usize, usize, f64)>,
    length: f64,
    impedance: f64,
}

/// Mesh-dependent, conductivity-independent part of the CEM discretization.
#[derive(Debug, Clone)]
pub struct CemModel {
    num_nodes: usize,
    num_electrodes: usize,
    triangles: Vec<[usize; 3]>,
    areas: Vec<f64>,
    /// Gradients of the three hat functions on each triangle.
    gradients: Vec<[[f64; 2]; 3]>,
    electrodes: Vec<ElectrodeTerm>,
    /// Electrode contributions to the full reduced system.
    electrode_block: DMatrix<f64>,
    /// Nonzeros of `electrode_block`, used for refinement residuals.
    electrode_entries: Vec<(usize, usize, f64)>,
}

impl CemModel {
    pub fn new(mesh: &Mesh, electrodes: &ElectrodeSetup) -> Result<Self> {
        electrodes.validate(mesh)?;
        let areas = triangle_areas(mesh)?;
        let gradients = mesh
            .triangles
            .iter()
            .zip(&areas)
            .map(|(tri, &area)| {
                let p = tri.map(|i| mesh.nodes[i]);
                let mut g = [[0.0; 2]; 3];
                for k in 0..3 {
                    let (b, c) = (p[(k + 1) % 3], p[(k + 2) % 3]);
                    g[k] = [(b[1] - c[1]) / (2.0 * area), (c[0] - b[0]) / (2.0 * area)];
                }
                g
            })
            .collect();
        let terms: Vec<ElectrodeTerm> = electrodes
            .electrode_edges
            .iter()
            .zip(&electrodes.contact_impedances)
            .map(|(edges, &z)| {
                let edges: Vec<_> = edges
                    .iter()
                    .map(|&e| {
                        let [a, b] = mesh.boundary_edges[e];
                        (a, b, mesh.edge_length([a, b]))
                    })
                    .collect();
                ElectrodeTerm {
                    length: edges.iter().map(|e| e.2).sum(),
                    edges,
                    impedance: z,
                }
            })
            .collect();

        let nv = mesh.num_nodes();
        let p = terms.len();
        let mut full = DMatrix::zeros(nv + p, nv + p);
        for (q, term) in terms.iter().enumerate() {
            let w = 1.0 / term.impedance;
            for &(a, b, len) in &term.edges {
                full[(a, a)] += w * len / 3.0;
                full[(b, b)] += w * len / 3.0;
                full[(a, b)] += w * len / 6.0;
                full[(b, a)] += w * len / 6.0;
                for node in [a, b] {
                    full[(node, nv + q)] -= w * len / 2.0;
                    full[(nv + q, node)] -= w * len / 2.0;
                }
            }
            full[(nv + q, nv + q)] += w * term.length;
        }
        let lift = voltage_lift(nv, p);
        let electrode_block = lift.transpose() * full * &lift;
        let mut electrode_entries = Vec::new();
        for j in 0..electrode_block.ncols() {
            for i in 0..electrode_block.nrows() {
                let v = electrode_block[(i, j)];
                if v != 0.0 {
                    electrode_entries.push((i, j, v));
                }
            }
        }

        Ok(Self {
            num_nodes: nv,
            num_electrodes: p,
            triangles: mesh.triangles.clone(),
            areas,
            gradients,
            electrodes: terms,
            electrode_block,
            electrode_entries,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_electrodes(&self) -> usize {
        self.num_electrodes
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn areas(&self) -> &[f64] {
        &self.areas
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub(crate) fn hat_gradients(&self, t: usize) -> &[[f64; 2]; 3] {
        &self.gradients[t]
    }

    pub fn electrode_lengths(&self) -> Vec<f64> {
        self.electrodes.iter().map(|e| e.length).collect()
    }

    /// Dimension of the reduced system: nodes plus `P - 1` voltage coordinates.
    pub fn system_size(&self) -> usize {
        self.num_nodes + self.num_electrodes - 1
    }

    fn check_sigma(&self, sigma: &ConductivityField) -> Result<()> {
        if sigma.len() != self.num_triangles() {
            return Err(Error::DimensionMismatch(format!(
                "{} conductivities for {} triangles",
                sigma.len(),
                self.num_triangles()
            )));
        }
        if let Some((n, s)) = sigma.0.iter().enumerate().find(|(_, s)| !(**s > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "conductivity {s} on triangle {n} is not positive"
            )));
        }
        Ok(())
    }

    /// Interior stiffness `Σ_n σ_n ∫ ∇φ_a·∇φ_b` (nodes × nodes).
    pub fn stiffness(&self, sigma: &ConductivityField) -> Result<DMatrix<f64>> {
        self.check_sigma(sigma)?;
        let mut k = DMatrix::zeros(self.num_nodes, self.num_nodes);
        self.add_stiffness(&mut k, sigma);
        Ok(k)
    }

    fn add_stiffness(&self, k: &mut DMatrix<f64>, sigma: &ConductivityField) {
        for (t, tri) in self.triangles.iter().enumerate() {
            let g = &self.gradients[t];
            let w = sigma.0[t] * self.areas[t];
            for a in 0..3 {
                for b in 0..3 {
                    k[(tri[a], tri[b])] += w * (g[a][0] * g[b][0] + g[a][1] * g[b][1]);
                }
            }
        }
    }

    pub fn assemble<'a>(&'a self, sigma: &ConductivityField) -> Result<CemSystem<'a>> {
        self.check_sigma(sigma)?;
        let mut matrix = self.electrode_block.clone();
        self.add_stiffness(&mut matrix, sigma);
        Ok(CemSystem {
            matrix,
            model: self,
            sigma: sigma.clone(),
        })
    }

    /// `rhs - A(σ) x` with every product and sum carried in double-double,
    /// electrode and stiffness parts kept apart so that neither is rounded
    /// against the other.
    fn residual(
        &self,
        sigma: &ConductivityField,
        x: &DMatrix<f64>,
        rhs: &DMatrix<f64>,
    ) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        let mut acc = vec![(0.0, 0.0); x.nrows()];
        for c in 0..x.ncols() {
            for (i, a) in acc.iter_mut().enumerate() {
                *a = (rhs[(i, c)], 0.0);
            }
            for &(i, j, v) in &self.electrode_entries {
                dd_sub_product(&mut acc[i], v, x[(j, c)]);
            }
            for (t, tri) in self.triangles.iter().enumerate() {
                let g = &self.gradients[t];
                let w = sigma.0[t] * self.areas[t];
                for a in 0..3 {
                    for b in 0..3 {
                        let k = w * (g[a][0] * g[b][0] + g[a][1] * g[b][1]);
                        dd_sub_product(&mut acc[tri[a]], k, x[(tri[b], c)]);
                    }
                }
            }
            for (i, a) in acc.iter().enumerate() {
                out[(i, c)] = a.0 + a.1;
            }
        }
        out
    }
}

/// Maps `(u, β)` to `(u, U = Bβ)`.
fn voltage_lift(nv: usize, p: usize) -> DMatrix<f64> {
    let mut lift = DMatrix::zeros(nv + p, nv + p - 1);
    for i in 0..nv {
        lift[(i, i)] = 1.0;
    }
    for q in 0..p - 1 {
        lift[(nv + q, nv + q)] = 1.0;
        lift[(nv + q + 1, nv + q)] = -1.0;
    }
    lift
}

/// `acc -= a·b` in double-double arithmetic.
fn dd_sub_product(acc: &mut (f64, f64), a: f64, b: f64) {
    let p = a * b;
    let p_err = a.mul_add(b, -p);
    let s = acc.0 - p;
    let bb = s - acc.0;
    let s_err = (acc.0 - (s - bb)) + (-p - bb);
    *acc = (s, acc.1 + s_err - p_err);
}

/// Assembled reduced CEM system for one conductivity field.
#[derive(Debug, Clone)]
pub struct CemSystem<'a> {
    pub matrix: DMatrix<f64>,
    model: &'a CemModel,
    sigma: ConductivityField,
}

impl<'a> CemSystem<'a> {
    pub fn factorize(self) -> Result<CemFactorization<'a>> {
        let diag = self.matrix.diagonal();
        let (lo, hi) = (diag.min(), diag.max());
        let chol = Cholesky::new(self.matrix).ok_or_else(|| {
            Error::factorization(
                "CEM system",
                format!("not positive definite; diagonal range [{lo:e}, {hi:e}]"),
            )
        })?;
        Ok(CemFactorization {
            chol,
            model: self.model,
            sigma: self.sigma,
        })
    }
}

/// Number of refinement sweeps applied after the Cholesky solve.
const REFINEMENT_STEPS: usize = 2;

pub struct CemFactorization<'a> {
    chol: Cholesky<f64, Dyn>,
    model: &'a CemModel,
    sigma: ConductivityField,
}

impl CemFactorization<'_> {
    /// Solves `A x = rhs`, refined against an extended-precision residual.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = self.chol.solve(rhs);
        for _ in 0..REFINEMENT_STEPS {
            let r = self.model.residual(&self.sigma, &x, rhs);
            x += self.chol.solve(&r);
        }
        x
    }

    /// Solutions for the basis currents `b_q`, `q = 0..P-1`.
    pub fn solve_basis(&self) -> BasisSolution {
        let (nv, p) = (self.model.num_nodes, self.model.num_electrodes);
        // Right-hand side for current I is (0, Bᵀ I); BᵀB is the [-1 2 -1] tridiagonal.
        let mut rhs = DMatrix::zeros(nv + p - 1, p - 1);
        for q in 0..p - 1 {
            rhs[(nv + q, q)] = 2.0;
            if q > 0 {
                rhs[(nv + q - 1, q)] = -1.0;
            }
            if q + 1 < p - 1 {
                rhs[(nv + q + 1, q)] = -1.0;
            }
        }
        let sol = self.solve(&rhs);
        let potentials = sol.rows(0, nv).into_owned();
        let coords = sol.rows(nv, p - 1);
        let mut voltages = DMatrix::zeros(p, p - 1);
        for q in 0..p - 1 {
            for k in 0..p - 1 {
                let beta = coords[(k, q)];
                voltages[(k, q)] += beta;
                voltages[(k + 1, q)] -= beta;
            }
        }
        BasisSolution {
            potentials,
            voltages,
        }
    }
}

/// Potentials and electrode voltages for the `P - 1` basis currents.
#[derive(Debug, Clone)]
pub struct BasisSolution {
    pub potentials: DMatrix<f64>,
    pub voltages: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardSolution {
    pub basis: BasisSolution,
    /// Nodal potentials, one column per pattern.
    pub potentials: DMatrix<f64>,
    /// Electrode voltages (zero-mean), one column per pattern.
    pub voltages: DMatrix<f64>,
    /// `v`, pattern-major then adjacent electrode pair.
    pub measurements: DVector<f64>,
}

/// Adjacent differences `U_p - U_{p+1}`, `p = 0..P-1`, for every column.
pub fn adjacent_differences(voltages: &DMatrix<f64>) -> DVector<f64> {
    let p = voltages.nrows();
    let mut v = DVector::zeros((p - 1) * voltages.ncols());
    for (h, col) in voltages.column_iter().enumerate() {
        for q in 0..p - 1 {
            v[h * (p - 1) + q] = col[q] - col[q + 1];
        }
    }
    v
}

pub fn solve_forward(
    model: &CemModel,
    sigma: &ConductivityField,
    patterns: &CurrentPatternSet,
) -> Result<ForwardSolution> {
    if patterns.num_electrodes() != model.num_electrodes() {
        return Err(Error::DimensionMismatch(format!(
            "{} electrodes in patterns, {} on the mesh",
            patterns.num_electrodes(),
            model.num_electrodes()
        )));
    }
    patterns.validate()?;
    let fact = model.assemble(sigma)?.factorize()?;
    Ok(forward_from_basis(fact.solve_basis(), patterns))
}

pub(crate) fn forward_from_basis(
    basis: BasisSolution,
    patterns: &CurrentPatternSet,
) -> ForwardSolution {
    let coords = patterns.basis_coordinates();
    let potentials = &basis.potentials * &coords;
    let voltages = &basis.voltages * &coords;
    let measurements = adjacent_differences(&voltages);
    ForwardSolution {
        basis,
        potentials,
        voltages,
        measurements,
    }
}

/// Stacked frequency-difference data, frequency-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementVector {
    pub values: DVector<f64>,
    /// Measurements per frequency.
    pub k: usize,
    /// Working frequency count.
    pub m: usize,
}

impl MeasurementVector {
    pub fn block(&self, i: usize) -> nalgebra::DVectorView<'_, f64> {
        self.values.rows(i * self.k, self.k)
    }
}

/// `Φ(F) = (v_F(ω_i) - v_F(ω_0))_{i=1..M}`; performs `M + 1` forward solves.
pub fn forward_map_phi(
    f: &FractionMatrix,
    spectra: &SpectraSet,
    model: &CemModel,
    patterns: &CurrentPatternSet,
) -> Result<MeasurementVector> {
    let m = spectra.num_frequencies();
    let sols = (0..=m)
        .map(|i| {
            let sigma = fractions_to_conductivity(f, spectra, i)?;
            solve_forward(model, &sigma, patterns)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(stack_differences(&sols))
}

pub(crate) fn stack_differences(sols: &[ForwardSolution]) -> MeasurementVector {
    let k = sols[0].measurements.len();
    let m = sols.len() - 1;
    let mut values = DVector::zeros(k * m);
    for i in 1..=m {
        values
            .rows_mut((i - 1) * k, k)
            .copy_from(&(&sols[i].measurements - &sols[0].measurements));
    }
    MeasurementVector { values, k, m }
}

/// On-disk measurement record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementFile {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "P")]
    pub p: usize,
    pub protocol: String,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    /// Frequency-major, then pattern-major, then adjacent electrode pair.
    pub y: Vec<f64>,
    pub reference_frequency_index: usize,
}

fn default_amplitude() -> f64 {
    DEFAULT_CURRENT_AMPLITUDE
}

impl MeasurementFile {
    pub fn new(y: &MeasurementVector, patterns: &CurrentPatternSet) -> Self {
        Self {
            k: y.k,
            m: y.m,
            h: patterns.num_patterns(),
            p: patterns.num_electrodes(),
            protocol: patterns.protocol.clone(),
            amplitude: patterns.amplitude,
            y: y.values.iter().copied().collect(),
            reference_frequency_index: 0,
        }
    }

    pub fn measurement_vector(&self) -> Result<MeasurementVector> {
        if self.k != (self.p.saturating_sub(1)) * self.h || self.y.len() != self.k * self.m {
            return Err(Error::DimensionMismatch(format!(
                "measurement record K={} M={} H={} P={} with {} values",
                self.k,
                self.m,
                self.h,
                self.p,
                self.y.len()
            )));
        }
        Ok(MeasurementVector {
            values: DVector::from_column_slice(&self.y),
            k: self.k,
            m: self.m,
        })
    }

    pub fn patterns(&self) -> Result<CurrentPatternSet> {
        if self.protocol != ADJACENT_PROTOCOL {
            return Err(Error::InvalidInput(format!(
                "unsupported protocol {:?}",
                self.protocol
            )));
        }
        adjacent_patterns(self.p, self.amplitude)
    }
}

pub fn write_measurements(path: &Path, record: &MeasurementFile) -> Result<()> {
    io::write_json(path, record)
}

pub fn read_measurements(path: &Path) -> Result<MeasurementFile> {
    let record: MeasurementFile = io::read_json(path)?;
    record.measurement_vector().map_err(|e| Error::Format {
        path: path.into(),
        message: e.to_string(),
    })?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_disk_mesh;

    fn setup(target: usize, p: usize) -> (Mesh, ElectrodeSetup, CemModel, CurrentPatternSet) {
        let (mesh, el) = build_disk_mesh(1.0, target, p, 0.5).unwrap();
        let model = CemModel::new(&mesh, &el).unwrap();
        let pats = adjacent_patterns(p, DEFAULT_CURRENT_AMPLITUDE).unwrap();
        (mesh, el, model, pats)
    }

    fn rank(m: &DMatrix<f64>) -> usize {
        let sv = m.clone().svd(false, false).singular_values;
        let tol = sv.max() * 1e-10;
        sv.iter().filter(|s| **s > tol).count()
    }

    #[test]
    fn adjacent_pattern_definition() {
        let p = adjacent_patterns(4, 1.0).unwrap();
        assert_eq!(p.patterns.column(0).as_slice(), &[1.0, -1.0, 0.0, 0.0]);
        assert_eq!(p.patterns.column(3).as_slice(), &[-1.0, 0.0, 0.0, 1.0]);
        for col in p.patterns.column_iter() {
            assert_eq!(col.sum(), 0.0);
        }
        for n in [4, 8, 16, 32] {
            assert_eq!(rank(&adjacent_patterns(n, 1.0).unwrap().patterns), n - 1);
        }
        assert!(adjacent_patterns(3, 1.0).is_err());
    }

    #[test]
    fn basis_coordinates_reconstruct_patterns() {
        let p = adjacent_patterns(8, 2.0).unwrap();
        let c = p.basis_coordinates();
        let mut b = DMatrix::zeros(8, 7);
        for q in 0..7 {
            b[(q, q)] = 1.0;
            b[(q + 1, q)] = -1.0;
        }
        assert!((b * c - &p.patterns).abs().max() < 1e-15);
    }

    #[test]
    fn stiffness_scales_linearly_and_system_is_symmetric() {
        let (mesh, _, model, _) = setup(60, 8);
        let sigma = ConductivityField(DVector::from_fn(mesh.num_triangles(), |i, _| {
            0.1 + 0.01 * (i % 7) as f64
        }));
        let doubled = ConductivityField(&sigma.0 * 2.0);
        let a1 = model.assemble(&sigma).unwrap().matrix;
        let a2 = model.assemble(&doubled).unwrap().matrix;
        let k = model.stiffness(&sigma).unwrap();
        let nv = mesh.num_nodes();
        let diff = (&a2 - &a1).view((0, 0), (nv, nv)).into_owned();
        assert!((diff - &k).abs().max() <= 1e-12 * a1.abs().max());
        assert!((&a2 - &a1).view((nv, 0), (7, nv + 7)).abs().max() == 0.0);
        assert!((&a1 - a1.transpose()).abs().max() <= 1e-12 * a1.abs().max());
    }

    #[test]
    fn two_triangle_square_stiffness() {
        // Unit square split along the diagonal (0,0)-(1,1), σ = 1.
        let mesh = Mesh {
            radius: 1.0,
            nodes: vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
            boundary_edges: vec![[0, 1], [1, 2], [2, 3], [3, 0]],
        };
        let el = ElectrodeSetup {
            electrode_edges: vec![vec![0], vec![2]],
            contact_impedances: vec![1.0, 1.0],
            coverage_fraction: 0.5,
        };
        let model = CemModel::new(&mesh, &el).unwrap();
        let k = model
            .stiffness(&ConductivityField::uniform(2, 1.0))
            .unwrap();
        // Hand assembly: each right triangle contributes ½ [[1,-1,0],[-1,2,-1],[0,-1,1]]
        // with the right-angle vertex in the middle.
        let expected = DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, -0.5, 0.0, -0.5, //
                -0.5, 1.0, -0.5, 0.0, //
                0.0, -0.5, 1.0, -0.5, //
                -0.5, 0.0, -0.5, 1.0,
            ],
        );
        assert!((k - expected).abs().max() < 1e-15);
    }

    #[test]
    fn voltages_zero_mean_and_reciprocal() {
        let (mesh, _, model, pats) = setup(200, 16);
        let sigma = ConductivityField(DVector::from_fn(mesh.num_triangles(), |i, _| {
            0.05 + 0.1 * ((i * 37 % 11) as f64 / 11.0)
        }));
        let sol = solve_forward(&model, &sigma, &pats).unwrap();
        for col in sol.voltages.column_iter() {
            assert!(col.sum().abs() / 16.0 < 1e-10);
        }
        let p = 16;
        let pair = |h: usize, q: usize| sol.measurements[h * (p - 1) + q];
        let scale = sol.measurements.abs().max();
        for a in 0..p - 1 {
            for c in 0..p - 1 {
                assert!((pair(c, a) - pair(a, c)).abs() <= 1e-9 * scale);
            }
        }
    }

    #[test]
    fn transfer_is_linear() {
        let (mesh, _, model, _) = setup(120, 8);
        let sigma = ConductivityField::uniform(mesh.num_triangles(), 0.2);
        let i1 = DVector::from_vec(vec![1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let i2 = DVector::from_vec(vec![0.0, 0.5, 0.0, 0.0, -0.25, 0.0, 0.0, -0.25]);
        let solve = |i: &DVector<f64>| {
            let pats = CurrentPatternSet {
                patterns: DMatrix::from_column_slice(8, 1, i.as_slice()),
                protocol: "custom".into(),
                amplitude: 1.0,
            };
            solve_forward(&model, &sigma, &pats).unwrap().voltages
        };
        let sum = solve(&(&i1 + &i2));
        let parts = solve(&i1) + solve(&i2);
        assert!((sum - parts).abs().max() < 1e-10);
    }

    #[test]
    fn higher_conductivity_lowers_driven_voltages() {
        let (mesh, _, model, pats) = setup(120, 8);
        let low = solve_forward(
            &model,
            &ConductivityField::uniform(mesh.num_triangles(), 0.1),
            &pats,
        )
        .unwrap();
        let high = solve_forward(
            &model,
            &ConductivityField::uniform(mesh.num_triangles(), 0.2),
            &pats,
        )
        .unwrap();
        for h in 0..8 {
            let driven =
                |s: &ForwardSolution| (s.voltages[(h, h)] - s.voltages[((h + 1) % 8, h)]).abs();
            assert!(driven(&high) < driven(&low));
        }
    }

    #[test]
    fn homogeneous_rotation_symmetry() {
        let (mesh, _, model, pats) = setup(432, 32);
        let sol = solve_forward(
            &model,
            &ConductivityField::uniform(mesh.num_triangles(), 0.13),
            &pats,
        )
        .unwrap();
        let p = 32;
        let scale = sol.voltages.abs().max();
        let mut worst: f64 = 0.0;
        for h in 0..p {
            for q in 0..p {
                let rotated = sol.voltages[((q + 1) % p, (h + 1) % p)];
                // Interior rings are not P-fold symmetric; the tolerance reflects that.
                worst = worst.max((rotated - sol.voltages[(q, h)]).abs() / scale);
            }
        }
        assert!(worst < 0.05);
    }

    #[test]
    fn measurements_converge_under_refinement() {
        let sigma_of = |mesh: &Mesh| ConductivityField::uniform(mesh.num_triangles(), 0.13);
        let levels: Vec<DVector<f64>> = [60, 240, 960, 1920]
            .iter()
            .map(|&target| {
                let (mesh, el) = build_disk_mesh(1.0, target, 8, 0.5).unwrap();
                let model = CemModel::new(&mesh, &el).unwrap();
                let pats = adjacent_patterns(8, 1e-3).unwrap();
                solve_forward(&model, &sigma_of(&mesh), &pats)
                    .unwrap()
                    .measurements
            })
            .collect();
        let diffs: Vec<f64> = levels.windows(2).map(|w| (&w[1] - &w[0]).norm()).collect();
        assert!(diffs.windows(2).all(|d| d[1] < d[0]), "{diffs:?}");
    }

    #[test]
    fn identical_spectra_give_zero_phi() {
        let (mesh, _, model, pats) = setup(60, 8);
        let mut s = SpectraSet::overlap();
        s.e = DMatrix::from_fn(3, 2, |j, _| s.eps0[j]);
        let f = FractionMatrix::background(mesh.num_triangles(), 3);
        let phi = forward_map_phi(&f, &s, &model, &pats).unwrap();
        assert_eq!(phi.values.len(), 7 * 8 * 2);
        assert!(phi.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn phi_matches_two_independent_solves() {
        let (mesh, _, model, pats) = setup(120, 8);
        let s = SpectraSet::overlap();
        let mut f = FractionMatrix::background(mesh.num_triangles(), 3).into_values();
        for t in 0..mesh.num_triangles() {
            let c = mesh.centroid(t);
            if c[0].hypot(c[1]) < 0.4 {
                f[(t, 0)] = 0.0;
                f[(t, 1)] = 1.0;
            }
        }
        let f = FractionMatrix::new(f);
        let phi = forward_map_phi(&f, &s, &model, &pats).unwrap();
        let k = pats.num_measurements();
        let v0 = solve_forward(
            &model,
            &fractions_to_conductivity(&f, &s, 0).unwrap(),
            &pats,
        )
        .unwrap();
        for i in 1..=2 {
            let vi = solve_forward(
                &model,
                &fractions_to_conductivity(&f, &s, i).unwrap(),
                &pats,
            )
            .unwrap();
            let expected = &vi.measurements - &v0.measurements;
            assert_eq!(phi.block(i - 1).into_owned(), expected);
        }
        assert_eq!(phi.values.len(), k * 2);
    }

    #[test]
    fn pattern_mismatch_rejected() {
        let (mesh, _, model, _) = setup(60, 8);
        let pats = adjacent_patterns(6, 1.0).unwrap();
        let sigma = ConductivityField::uniform(mesh.num_triangles(), 1.0);
        assert!(matches!(
            solve_forward(&model, &sigma, &pats),
            Err(Error::DimensionMismatch(_))
        ));
        let bad = ConductivityField::uniform(mesh.num_triangles(), -1.0);
        assert!(model.assemble(&bad).is_err());
    }

    #[test]
    fn measurement_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("y.json");
        let pats = adjacent_patterns(8, 1e-3).unwrap();
        let y = MeasurementVector {
            values: DVector::from_fn(112, |i, _| i as f64 * 1e-5),
            k: 56,
            m: 2,
        };
        let rec = MeasurementFile::new(&y, &pats);
        write_measurements(&path, &rec).unwrap();
        let back = read_measurements(&path).unwrap();
        assert_eq!(back, rec);
        assert_eq!(back.measurement_vector().unwrap(), y);
        assert_eq!(back.patterns().unwrap(), pats);
    }
}
