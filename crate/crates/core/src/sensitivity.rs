//! Conductivity and fraction Jacobians, and the Gauss-Newton metric.
//!
//! For a measurement `⟨J, U(I)⟩` the discrete adjoint identity gives
//! `∂/∂σ_n = -∫_{Ω_n} ∇u(I)·∇u(J)`. Because every adjacent measurement
//! current `e_p - e_{p+1}` is one of the basis currents, the adjoint fields
//! are exactly the basis solutions and no extra solves are needed.
//!
//! All measurements are linear in the symmetric basis transfer matrix
//! `S_{pq} = b_pᵀ U(b_q)`, i.e. `v = L·vech(S)`. With the thin QR
//! `L = Q R`, the products `JᵀJ` and `Jᵀr` only need `R·∂vech(S)/∂σ` and
//! `Qᵀr`, which shrinks the row dimension from `(P-1)·H` to `P(P-1)/2` for
//! the adjacent protocol without changing any Gauss-Newton quantity.

use std::io::Write;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::cem::{BasisSolution, CemModel, CurrentPatternSet, ForwardSolution};
use crate::error::{Error, Result};
use crate::fraction::{FractionMatrix, SpectraSet};

/// Row index of `(q, r)`, `q ≤ r`, in the packed upper triangle of an `n × n` matrix.
fn packed_index(q: usize, r: usize, n: usize) -> usize {
    let (q, r) = if q <= r { (q, r) } else { (r, q) };
    q * n - q * (q + 1) / 2 + r
}

fn triangle_gradient(
    model: &CemModel,
    t: usize,
    field: nalgebra::DVectorView<'_, f64>,
) -> [f64; 2] {
    let tri = model.triangles()[t];
    let g = model.hat_gradients(t);
    let mut out = [0.0; 2];
    for k in 0..3 {
        out[0] += field[tri[k]] * g[k][0];
        out[1] += field[tri[k]] * g[k][1];
    }
    out
}

/// Per-triangle gradients of every column of `potentials`: `grads[t][c]`.
fn field_gradients(model: &CemModel, potentials: &DMatrix<f64>) -> Vec<Vec<[f64; 2]>> {
    (0..model.num_triangles())
        .map(|t| {
            potentials
                .column_iter()
                .map(|c| triangle_gradient(model, t, c))
                .collect()
        })
        .collect()
}

/// `∂v/∂σ` (K × N) at the conductivity the forward solution was computed for.
#[derive(Debug, Clone, PartialEq)]
pub struct ConductivityJacobian(pub DMatrix<f64>);

pub fn conductivity_jacobian(
    model: &CemModel,
    patterns: &CurrentPatternSet,
    forward: &ForwardSolution,
) -> Result<ConductivityJacobian> {
    let p = model.num_electrodes();
    if patterns.num_electrodes() != p || forward.potentials.ncols() != patterns.num_patterns() {
        return Err(Error::DimensionMismatch(
            "forward solution does not match the pattern set".into(),
        ));
    }
    let h = patterns.num_patterns();
    let basis = field_gradients(model, &forward.basis.potentials);
    let driven = field_gradients(model, &forward.potentials);
    let mut jac = DMatrix::zeros((p - 1) * h, model.num_triangles());
    for (t, &area) in model.areas().iter().enumerate() {
        for hh in 0..h {
            let gu = driven[t][hh];
            for q in 0..p - 1 {
                let gw = basis[t][q];
                jac[(hh * (p - 1) + q, t)] = -area * (gu[0] * gw[0] + gu[1] * gw[1]);
            }
        }
    }
    Ok(ConductivityJacobian(jac))
}

/// `∂vech(S)/∂σ` with rows in packed upper-triangular order (`P(P-1)/2 × N`).
pub fn transfer_sensitivity(model: &CemModel, basis: &BasisSolution) -> DMatrix<f64> {
    let n = model.num_electrodes() - 1;
    let grads = field_gradients(model, &basis.potentials);
    let mut out = DMatrix::zeros(n * (n + 1) / 2, model.num_triangles());
    for (t, &area) in model.areas().iter().enumerate() {
        let g = &grads[t];
        for q in 0..n {
            for r in q..n {
                out[(packed_index(q, r, n), t)] = -area * (g[q][0] * g[r][0] + g[q][1] * g[r][1]);
            }
        }
    }
    out
}

/// Exact row compression of the measurement map, see the module docs.
#[derive(Debug, Clone)]
pub struct MeasurementCompression {
    /// Orthonormal columns spanning the range of `L` (K × r).
    q: DMatrix<f64>,
    /// Triangular factor (r × P(P-1)/2).
    r: DMatrix<f64>,
}

impl MeasurementCompression {
    pub fn new(patterns: &CurrentPatternSet) -> Self {
        let qr = Self::measurement_map(patterns).qr();
        Self {
            q: qr.q(),
            r: qr.r(),
        }
    }

    /// `L` with `v = L·vech(S)` (K × P(P-1)/2).
    pub fn measurement_map(patterns: &CurrentPatternSet) -> DMatrix<f64> {
        let n = patterns.num_electrodes() - 1;
        let coords = patterns.basis_coordinates();
        let mut l = DMatrix::zeros(n * patterns.num_patterns(), n * (n + 1) / 2);
        for h in 0..patterns.num_patterns() {
            for p in 0..n {
                for q in 0..n {
                    l[(h * n + p, packed_index(p, q, n))] += coords[(q, h)];
                }
            }
        }
        l
    }

    /// Compressed row count per frequency.
    pub fn rows(&self) -> usize {
        self.r.nrows()
    }

    pub fn compress_sensitivity(&self, transfer: &DMatrix<f64>) -> DMatrix<f64> {
        &self.r * transfer
    }

    pub fn compress_data(&self, v: &DVector<f64>) -> DVector<f64> {
        self.q.tr_mul(v)
    }
}

/// `J_Φ(F)`, `(M·K) × (T·N)`, block `(i, j)` = `∂v/∂σ|_{σ_i} ε_{ji} - ∂v/∂σ|_{σ_0} ε_{j0}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiJacobian {
    pub matrix: DMatrix<f64>,
    pub k: usize,
    pub n: usize,
}

impl PhiJacobian {
    /// `jacobians[a]` is the conductivity Jacobian at frequency index `a` (0 = reference).
    pub fn assemble(jacobians: &[ConductivityJacobian], spectra: &SpectraSet) -> Result<Self> {
        let m = spectra.num_frequencies();
        if jacobians.len() != m + 1 {
            return Err(Error::DimensionMismatch(format!(
                "{} conductivity Jacobians for M = {m}",
                jacobians.len()
            )));
        }
        let matrix = combine_blocks(&jacobians.iter().map(|j| &j.0).collect::<Vec<_>>(), spectra);
        Ok(Self {
            k: jacobians[0].0.nrows(),
            n: jacobians[0].0.ncols(),
            matrix,
        })
    }

    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        self.matrix
            .view((i * self.k, j * self.n), (self.k, self.n))
            .into_owned()
    }
}

/// Stacks `X_i ε_{ji} - X_0 ε_{j0}` over frequencies `i = 1..M` (rows) and tissues (columns).
pub(crate) fn combine_blocks(
    per_frequency: &[&DMatrix<f64>],
    spectra: &SpectraSet,
) -> DMatrix<f64> {
    let m = spectra.num_frequencies();
    let t = spectra.num_tissues();
    let (rows, n) = per_frequency[0].shape();
    let mut out = DMatrix::zeros(m * rows, t * n);
    for i in 1..=m {
        for j in 0..t {
            let (ei, e0) = (spectra.eps(j, i), spectra.eps(j, 0));
            let mut block = out.view_mut(((i - 1) * rows, j * n), (rows, n));
            block.zip_zip_apply(per_frequency[i], per_frequency[0], |b, xi, x0| {
                *b = xi * ei - x0 * e0
            });
        }
    }
    out
}

/// Symmetric positive-definite operator used as a proximal metric.
pub trait Metric {
    fn dim(&self) -> usize;
    fn apply(&self, x: &DVector<f64>) -> DVector<f64>;
}

/// Explicit dense SPD matrix.
#[derive(Debug, Clone)]
pub struct DenseMetric(pub DMatrix<f64>);

impl Metric for DenseMetric {
    fn dim(&self) -> usize {
        self.0.nrows()
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.0 * x
    }
}

enum MetricFactor {
    /// Cholesky of `H = JᵀJ + αI`.
    Primal(Cholesky<f64, Dyn>),
    /// Cholesky of `G = JJᵀ + αI`.
    Dual(Cholesky<f64, Dyn>),
}

/// How the Gauss-Newton system is factorized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricStrategy {
    /// Factorize whichever of `JᵀJ + αI` and `JJᵀ + αI` is smaller.
    Auto,
    Primal,
    Dual,
}

/// `H = JᵀJ + αI` held through a factorization.
///
/// When `J` has fewer rows than columns the `rows × rows` matrix
/// `G = JJᵀ + αI` is factorized instead and `H⁻¹` is applied through the
/// push-through identity `H⁻¹Jᵀ = JᵀG⁻¹`.
pub struct GaussNewtonMetric {
    jacobian: DMatrix<f64>,
    alpha: f64,
    factor: MetricFactor,
}

impl GaussNewtonMetric {
    pub fn new(jacobian: DMatrix<f64>, alpha: f64) -> Result<Self> {
        Self::with_strategy(jacobian, alpha, MetricStrategy::Auto)
    }

    pub fn with_strategy(
        jacobian: DMatrix<f64>,
        alpha: f64,
        strategy: MetricStrategy,
    ) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidInput(format!(
                "metric regularization α = {alpha} must be positive"
            )));
        }
        let (rows, cols) = jacobian.shape();
        let primal = match strategy {
            MetricStrategy::Auto => cols <= rows,
            MetricStrategy::Primal => true,
            MetricStrategy::Dual => false,
        };
        let mut gram = if primal {
            jacobian.transpose() * &jacobian
        } else {
            &jacobian * jacobian.transpose()
        };
        let scale = gram.diagonal().max();
        for i in 0..gram.nrows() {
            gram[(i, i)] += alpha;
        }
        let chol = Cholesky::new(gram).ok_or_else(|| {
            Error::factorization(
                "Gauss-Newton metric",
                format!("α = {alpha:e} too small against max diagonal {scale:e}"),
            )
        })?;
        let factor = if primal {
            MetricFactor::Primal(chol)
        } else {
            MetricFactor::Dual(chol)
        };
        Ok(Self {
            jacobian,
            alpha,
            factor,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn jacobian(&self) -> &DMatrix<f64> {
        &self.jacobian
    }

    pub fn is_dual(&self) -> bool {
        matches!(self.factor, MetricFactor::Dual(_))
    }

    /// Explicit `JᵀJ + αI`.
    pub fn dense(&self) -> DMatrix<f64> {
        let mut h = self.jacobian.transpose() * &self.jacobian;
        for i in 0..h.nrows() {
            h[(i, i)] += self.alpha;
        }
        h
    }

    pub fn solve(&self, g: &DVector<f64>) -> DVector<f64> {
        match &self.factor {
            MetricFactor::Primal(chol) => chol.solve(g),
            MetricFactor::Dual(chol) => {
                let inner = chol.solve(&(&self.jacobian * g));
                (g - self.jacobian.tr_mul(&inner)) / self.alpha
            }
        }
    }

    /// `H⁻¹(Jᵀr + α·d)`, evaluated without forming `Jᵀr` in the dual case.
    pub fn newton_direction(&self, residual: &DVector<f64>, offset: &DVector<f64>) -> DVector<f64> {
        match &self.factor {
            MetricFactor::Primal(chol) => {
                chol.solve(&(self.jacobian.tr_mul(residual) + offset * self.alpha))
            }
            MetricFactor::Dual(chol) => {
                let inner = chol.solve(&(residual - &self.jacobian * offset));
                offset + self.jacobian.tr_mul(&inner)
            }
        }
    }
}

impl Metric for GaussNewtonMetric {
    fn dim(&self) -> usize {
        self.jacobian.ncols()
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self.jacobian.tr_mul(&(&self.jacobian * x)) + x * self.alpha
    }
}

/// One outer iterate of the proximal Gauss-Newton method.
///
/// `residual` and the metric Jacobian may be given in any row basis related
/// to the measurement space by an isometry (the compressed basis in
/// practice); only `Jᵀr` and `JᵀJ` enter the step.
pub struct GaussNewtonState {
    pub fractions: FractionMatrix,
    pub reference: FractionMatrix,
    pub residual: DVector<f64>,
    /// `‖Φ(F) - y‖` in the full measurement space.
    pub residual_norm: f64,
    pub alpha: f64,
    pub beta: f64,
    pub metric: GaussNewtonMetric,
}

impl GaussNewtonState {
    pub fn new(
        fractions: FractionMatrix,
        reference: FractionMatrix,
        jacobian: DMatrix<f64>,
        residual: DVector<f64>,
        alpha: f64,
        beta: f64,
    ) -> Result<Self> {
        if fractions.values().shape() != reference.values().shape() {
            return Err(Error::DimensionMismatch(
                "iterate and reference differ in shape".into(),
            ));
        }
        if jacobian.ncols() != fractions.as_slice().len() || jacobian.nrows() != residual.len() {
            return Err(Error::DimensionMismatch(format!(
                "Jacobian {}×{} against {} unknowns and {} residuals",
                jacobian.nrows(),
                jacobian.ncols(),
                fractions.as_slice().len(),
                residual.len()
            )));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::InvalidInput(format!("β = {beta} outside [0, 1]")));
        }
        let residual_norm = residual.norm();
        Ok(Self {
            fractions,
            reference,
            residual_norm,
            residual,
            alpha,
            beta,
            metric: GaussNewtonMetric::new(jacobian, alpha)?,
        })
    }

    fn offset(&self) -> DVector<f64> {
        self.fractions.vectorized() - self.reference.vectorized()
    }

    /// `∇f_α(F) = J_Φᵀ r + α(F - F̂)`.
    pub fn gradient(&self) -> DVector<f64> {
        self.metric.jacobian().tr_mul(&self.residual) + self.offset() * self.alpha
    }

    /// `f_α(F) = ½‖r‖² + (α/2)‖F - F̂‖²`.
    pub fn objective(&self) -> f64 {
        0.5 * self.residual_norm.powi(2) + 0.5 * self.alpha * self.offset().norm_squared()
    }
}

/// `z = F - β H⁻¹ ∇f_α(F)`.
pub fn gradient_step(state: &GaussNewtonState) -> DVector<f64> {
    let direction = state
        .metric
        .newton_direction(&state.residual, &state.offset());
    state.fractions.vectorized() - direction * state.beta
}

/// Writes a dense matrix as `b"MFJ1"`, rows and columns as little-endian
/// `u64`, then row-major little-endian `f64` entries.
pub fn write_matrix_binary(path: &Path, matrix: &DMatrix<f64>) -> Result<()> {
    let mut bytes = Vec::with_capacity(20 + 8 * matrix.len());
    bytes.write_all(b"MFJ1").unwrap();
    bytes.extend_from_slice(&(matrix.nrows() as u64).to_le_bytes());
    bytes.extend_from_slice(&(matrix.ncols() as u64).to_le_bytes());
    for row in matrix.row_iter() {
        for v in row.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::io::write_atomic(path, &bytes)
}

pub fn read_matrix_binary(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Format {
        path: path.into(),
        message: m.into(),
    };
    if bytes.len() < 20 || &bytes[..4] != b"MFJ1" {
        return Err(bad("missing MFJ1 header"));
    }
    let rows = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if bytes.len() != 20 + 8 * rows * cols {
        return Err(bad("payload length does not match the header"));
    }
    let data: Vec<f64> = bytes[20..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cem::{adjacent_patterns, solve_forward, DEFAULT_CURRENT_AMPLITUDE};
    use crate::fraction::ConductivityField;
    use crate::mesh::build_disk_mesh;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_setup() -> (CemModel, CurrentPatternSet, usize) {
        let (mesh, el) = build_disk_mesh(1.0, 90, 8, 0.5).unwrap();
        assert!(mesh.num_nodes() <= 100);
        let model = CemModel::new(&mesh, &el).unwrap();
        let pats = adjacent_patterns(8, DEFAULT_CURRENT_AMPLITUDE).unwrap();
        let n = mesh.num_triangles();
        (model, pats, n)
    }

    fn random_sigma(n: usize, seed: u64) -> ConductivityField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ConductivityField(DVector::from_fn(n, |_, _| rng.random_range(0.05..0.2)))
    }

    #[test]
    fn packed_indices_are_a_bijection() {
        let n = 7;
        let mut seen = vec![false; n * (n + 1) / 2];
        for q in 0..n {
            for r in q..n {
                let k = packed_index(q, r, n);
                assert!(!seen[k]);
                seen[k] = true;
                assert_eq!(k, packed_index(r, q, n));
            }
        }
        assert!(seen.iter().all(|s| *s));
    }

    #[test]
    fn adjoint_jacobian_matches_central_differences() {
        let (model, pats, n) = small_setup();
        let sigma = random_sigma(n, 3);
        let fwd = solve_forward(&model, &sigma, &pats).unwrap();
        let jac = conductivity_jacobian(&model, &pats, &fwd).unwrap().0;
        let mut fd = DMatrix::zeros(jac.nrows(), n);
        for t in 0..n {
            let h = 1e-6 * sigma.0[t];
            let mut plus = sigma.clone();
            plus.0[t] += h;
            let mut minus = sigma.clone();
            minus.0[t] -= h;
            let vp = solve_forward(&model, &plus, &pats).unwrap().measurements;
            let vm = solve_forward(&model, &minus, &pats).unwrap().measurements;
            fd.set_column(t, &((vp - vm) / (2.0 * h)));
        }
        let rel = (&jac - &fd).norm() / fd.norm();
        assert!(rel < 1e-5, "relative error {rel:e}");
    }

    #[test]
    fn jacobian_scales_inverse_square() {
        // Exact only when the contact impedances scale with 1/σ as well.
        let (mesh, el) = build_disk_mesh(1.0, 90, 8, 0.5).unwrap();
        let mut el3 = el.clone();
        el3.contact_impedances.iter_mut().for_each(|z| *z /= 3.0);
        let model = CemModel::new(&mesh, &el).unwrap();
        let model3 = CemModel::new(&mesh, &el3).unwrap();
        let pats = adjacent_patterns(8, DEFAULT_CURRENT_AMPLITUDE).unwrap();
        let n = mesh.num_triangles();
        let sigma = random_sigma(n, 5);
        let scaled = ConductivityField(&sigma.0 * 3.0);
        let j1 = conductivity_jacobian(
            &model,
            &pats,
            &solve_forward(&model, &sigma, &pats).unwrap(),
        )
        .unwrap()
        .0;
        let j3 = conductivity_jacobian(
            &model3,
            &pats,
            &solve_forward(&model3, &scaled, &pats).unwrap(),
        )
        .unwrap()
        .0;
        let rel = (&j3 * 9.0 - &j1).norm() / j1.norm();
        assert!(rel < 1e-8, "{rel:e}");
    }

    #[test]
    fn homogeneous_jacobian_is_rotation_equivariant() {
        // Rings of 8, 16 and 24 nodes are 8-fold symmetric; one electrode per third boundary edge.
        let p = 8;
        let mesh = crate::mesh::ring_mesh(1.0, &[8, 16, 24]);
        let el = crate::mesh::ElectrodeSetup {
            electrode_edges: (0..p).map(|k| vec![3 * k]).collect(),
            contact_impedances: vec![1e-6; p],
            coverage_fraction: 1.0 / 3.0,
        };
        let model = CemModel::new(&mesh, &el).unwrap();
        let pats = adjacent_patterns(p, DEFAULT_CURRENT_AMPLITUDE).unwrap();
        let n = mesh.num_triangles();
        let fwd = solve_forward(&model, &ConductivityField::uniform(n, 0.13), &pats).unwrap();
        let jac = conductivity_jacobian(&model, &pats, &fwd).unwrap().0;

        let (s, c) = (2.0 * std::f64::consts::PI / p as f64).sin_cos();
        let rotated_triangle = |t: usize| {
            let [x, y] = mesh.centroid(t);
            let target = [c * x - s * y, s * x + c * y];
            (0..n)
                .find(|&u| {
                    let q = mesh.centroid(u);
                    (q[0] - target[0]).hypot(q[1] - target[1]) < 1e-9
                })
                .expect("mesh is not rotation symmetric")
        };
        let scale = jac.abs().max();
        for t in 0..n {
            let u = rotated_triangle(t);
            for h in 0..p {
                for q in 0..p - 2 {
                    let a = jac[(h * (p - 1) + q, t)];
                    let b = jac[(((h + 1) % p) * (p - 1) + q + 1, u)];
                    assert!(
                        (a - b).abs() < 1e-9 * scale,
                        "t {t} h {h} q {q}: {a:e} vs {b:e}"
                    );
                }
            }
        }
    }

    #[test]
    fn compressed_form_reproduces_full_jacobian() {
        let (model, pats, n) = small_setup();
        let sigma = random_sigma(n, 9);
        let fwd = solve_forward(&model, &sigma, &pats).unwrap();
        let full = conductivity_jacobian(&model, &pats, &fwd).unwrap().0;
        let transfer = transfer_sensitivity(&model, &fwd.basis);
        let l = MeasurementCompression::measurement_map(&pats);
        assert!((&l * &transfer - &full).abs().max() <= 1e-12 * full.abs().max());

        let comp = MeasurementCompression::new(&pats);
        let jc = comp.compress_sensitivity(&transfer);
        assert_eq!(jc.nrows(), 28);
        let gram_full = full.transpose() * &full;
        let gram_c = jc.transpose() * &jc;
        assert!((gram_full - &gram_c).abs().max() <= 1e-10 * gram_c.abs().max());
        let r = DVector::from_fn(full.nrows(), |i, _| (i as f64).sin());
        let a = full.tr_mul(&r);
        let b = jc.tr_mul(&comp.compress_data(&r));
        assert!((a - &b).norm() <= 1e-12 * b.norm());
    }

    #[test]
    fn phi_jacobian_block_structure() {
        let (model, pats, n) = small_setup();
        let s = SpectraSet::overlap();
        let jacs: Vec<_> = (0..3)
            .map(|i| {
                let sigma = ConductivityField(
                    DVector::from_element(n, s.eps(0, i)) + random_sigma(n, i as u64).0 * 0.1,
                );
                let fwd = solve_forward(&model, &sigma, &pats).unwrap();
                conductivity_jacobian(&model, &pats, &fwd).unwrap()
            })
            .collect();
        let phi = PhiJacobian::assemble(&jacs, &s).unwrap();
        let b = phi.block(1, 2);
        let expected = &jacs[2].0 * s.eps(2, 2) - &jacs[0].0 * s.eps(2, 0);
        assert_eq!(b, expected);

        let mut zero_ref = s.clone();
        zero_ref.eps0[1] = 0.0;
        let phi0 = PhiJacobian::assemble(&jacs, &zero_ref).unwrap();
        assert_eq!(phi0.block(0, 1), &jacs[1].0 * s.eps(1, 1));

        let mut same = s.clone();
        same.e = DMatrix::from_fn(3, 2, |j, _| s.eps0[j]);
        let same_jacs = vec![jacs[0].clone(), jacs[0].clone(), jacs[0].clone()];
        assert!(PhiJacobian::assemble(&same_jacs, &same)
            .unwrap()
            .matrix
            .iter()
            .all(|v| *v == 0.0));

        // Linear in the spectra: doubling E and eps0 doubles every block.
        let mut doubled = s.clone();
        doubled.e *= 2.0;
        doubled.eps0 *= 2.0;
        let phi2 = PhiJacobian::assemble(&jacs, &doubled).unwrap();
        assert!((phi2.matrix - &phi.matrix * 2.0).abs().max() <= 1e-15 * phi.matrix.abs().max());
    }

    fn random_problem(
        rows: usize,
        cols: usize,
        seed: u64,
    ) -> (DMatrix<f64>, DVector<f64>, FractionMatrix, FractionMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let j = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
        let r = DVector::from_fn(rows, |_, _| rng.random_range(-1.0..1.0));
        let f = crate::fraction::row_softmax(&DMatrix::from_fn(cols / 2, 2, |_, _| {
            rng.random_range(-1.0..1.0)
        }))
        .unwrap();
        let g = crate::fraction::row_softmax(&DMatrix::from_fn(cols / 2, 2, |_, _| {
            rng.random_range(-1.0..1.0)
        }))
        .unwrap();
        (j, r, f, g)
    }

    #[test]
    fn gradient_step_matches_dense_solve() {
        for (rows, cols) in [(10, 6), (4, 6)] {
            let (j, r, f, fhat) = random_problem(rows, cols, 11);
            let (alpha, beta) = (0.3, 0.7);
            let state =
                GaussNewtonState::new(f.clone(), fhat.clone(), j.clone(), r.clone(), alpha, beta)
                    .unwrap();
            let z = gradient_step(&state);

            let mut h = j.transpose() * &j;
            for i in 0..cols {
                h[(i, i)] += alpha;
            }
            let grad = j.tr_mul(&r) + (f.vectorized() - fhat.vectorized()) * alpha;
            let expected = f.vectorized() - h.lu().solve(&grad).unwrap() * beta;
            assert!((z - expected).norm() < 1e-10);
            assert!((state.gradient() - grad).norm() < 1e-12);
        }
    }

    #[test]
    fn primal_and_dual_metrics_agree() {
        let (j, _, _, _) = random_problem(5, 12, 2);
        let primal =
            GaussNewtonMetric::with_strategy(j.clone(), 1e-3, MetricStrategy::Primal).unwrap();
        let dual = GaussNewtonMetric::with_strategy(j.clone(), 1e-3, MetricStrategy::Dual).unwrap();
        assert!(dual.is_dual() && !primal.is_dual());
        let g = DVector::from_fn(12, |i, _| (i as f64 * 0.7).cos());
        let a = primal.solve(&g);
        let b = dual.solve(&g);
        assert!((&a - &b).norm() < 1e-8 * a.norm());
        assert!((primal.apply(&a) - &g).norm() < 1e-10 * g.norm());
    }

    #[test]
    fn step_fixed_points_and_tikhonov_pull() {
        let (j, _, f, fhat) = random_problem(6, 8, 4);
        let zero_r = DVector::zeros(6);
        let state =
            GaussNewtonState::new(f.clone(), f.clone(), j.clone(), zero_r.clone(), 1e-2, 0.5)
                .unwrap();
        assert!((gradient_step(&state) - f.vectorized()).norm() < 1e-14);

        let state = GaussNewtonState::new(
            f.clone(),
            fhat.clone(),
            DMatrix::zeros(6, 8),
            zero_r.clone(),
            1e-2,
            0.3,
        )
        .unwrap();
        let expected = f.vectorized() - (f.vectorized() - fhat.vectorized()) * 0.3;
        assert!((gradient_step(&state) - expected).norm() < 1e-12);

        let r = DVector::from_element(6, 1.0);
        let state = GaussNewtonState::new(f.clone(), fhat, j, r, 1e-2, 0.0).unwrap();
        assert_eq!(gradient_step(&state), f.vectorized());
    }

    #[test]
    fn metric_floor_is_alpha() {
        let (j, _, _, _) = random_problem(7, 10, 8);
        let alpha = 0.05;
        let m = GaussNewtonMetric::new(j, alpha).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x = DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
            assert!(m.apply(&x).dot(&x) >= alpha * x.norm_squared() * (1.0 - 1e-12));
        }
        let h = m.dense();
        assert!((&h - h.transpose()).abs().max() == 0.0);
        assert!(h.symmetric_eigen().eigenvalues.min() >= alpha * (1.0 - 1e-10));
    }

    #[test]
    fn rejects_nonpositive_alpha() {
        let (j, r, f, fhat) = random_problem(4, 4, 1);
        assert!(GaussNewtonState::new(f, fhat, j, r, 0.0, 0.3).is_err());
    }

    #[test]
    fn binary_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.bin");
        let m = DMatrix::from_fn(3, 5, |i, j| (i * 5 + j) as f64 - 0.5);
        write_matrix_binary(&path, &m).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"MFJ1");
        assert_eq!(f64::from_le_bytes(bytes[20..28].try_into().unwrap()), -0.5);
        assert_eq!(f64::from_le_bytes(bytes[28..36].try_into().unwrap()), 0.5);
        assert_eq!(read_matrix_binary(&path).unwrap(), m);
    }
}
