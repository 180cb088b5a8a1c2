//! F-EST: reference fractions from one-step conductivity estimates.
//!
//! Each working frequency gets a NOSER-type linearized estimate `σ̂_i` around
//! the all-background field. The fractions of tissues `2..T` then follow from
//! a ridge fit of those estimates against the tissue contrasts across
//! frequencies.

use nalgebra::{Cholesky, DMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cem::MeasurementVector;
use crate::context::ForwardContext;
use crate::error::{Error, Result};
use crate::fraction::{fractions_to_conductivity, ConductivityField, FractionMatrix, SpectraSet};
use crate::sensitivity::transfer_sensitivity;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FestConfig {
    /// Ridge weight `λ`.
    pub lambda: f64,
    /// NOSER weight `λ_N` on `diag(JᵀJ)`.
    pub noser_lambda: f64,
}

impl Default for FestConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            noser_lambda: 1e-2,
        }
    }
}

/// One-step estimate at working frequency `i ∈ 1..=M` from the data block `y_i`:
/// `σ̂_i = σ_ref + (JᵀJ + λ_N diag(JᵀJ))⁻¹ Jᵀ(y_i - [v(σ_ref,i) - v(σ_ref,0)])`,
/// `J = ∂v/∂σ` at `σ_ref,i`.
pub fn noser_estimate(
    ctx: &ForwardContext,
    y: &MeasurementVector,
    freq: usize,
    noser_lambda: f64,
) -> Result<ConductivityField> {
    ctx.check_data(y)?;
    let m = ctx.spectra.num_frequencies();
    if freq == 0 || freq > m {
        return Err(Error::InvalidInput(format!(
            "working frequency index {freq} outside 1..={m}"
        )));
    }
    if !(noser_lambda > 0.0) {
        return Err(Error::InvalidInput(format!(
            "λ_N = {noser_lambda} must be positive"
        )));
    }
    let background = FractionMatrix::background(ctx.num_triangles(), ctx.num_tissues());
    let sigma_ref = fractions_to_conductivity(&background, &ctx.spectra, freq)?;
    let sigma_0 = fractions_to_conductivity(&background, &ctx.spectra, 0)?;
    let (at_ref, at_0) = rayon::join(|| ctx.solve(&sigma_ref), || ctx.solve(&sigma_0));
    let (at_ref, at_0) = (at_ref?, at_0?);
    let misfit = y.block(freq - 1) - (&at_ref.measurements - &at_0.measurements);

    let comp = ctx.compression();
    let jc = comp.compress_sensitivity(&transfer_sensitivity(ctx.model(), &at_ref.basis));
    let mut normal = jc.transpose() * &jc;
    for k in 0..normal.nrows() {
        normal[(k, k)] *= 1.0 + noser_lambda;
    }
    let rhs = jc.tr_mul(&comp.compress_data(&misfit));
    let diag_max = normal.diagonal().max();
    let chol = Cholesky::new(normal).ok_or_else(|| {
        Error::factorization(
            "NOSER normal equations",
            format!("λ_N = {noser_lambda:e}, max diagonal {diag_max:e}"),
        )
    })?;
    Ok(ConductivityField(sigma_ref.0 + chol.solve(&rhs)))
}

/// `Σ` (N × M, deviations from the background spectrum), `Ē` ((T-1) × M) and `λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FestProblem {
    pub sigma: DMatrix<f64>,
    pub e_bar: DMatrix<f64>,
    pub lambda: f64,
}

impl FestProblem {
    /// `Σ_{:,i} = σ̂_i - ε_{1,i}` and `Ē_{j,i} = (ε_{j,i} - ε_{1,i}) - (ε_{j,0} - ε_{1,0})`.
    ///
    /// The NOSER step sees difference data, so `σ̂_i - σ_ref` estimates the
    /// change of `σ_i - σ_0`; the reference-frequency contrast is removed
    /// from `Ē` to match.
    pub fn from_estimates(
        estimates: &[ConductivityField],
        spectra: &SpectraSet,
        lambda: f64,
    ) -> Result<Self> {
        let m = spectra.num_frequencies();
        if estimates.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "{} estimates for M = {m}",
                estimates.len()
            )));
        }
        let n = estimates[0].len();
        let sigma = DMatrix::from_fn(n, m, |r, i| estimates[i].0[r] - spectra.eps(0, i + 1));
        let contrast = |j: usize, i: usize| spectra.eps(j, i) - spectra.eps(0, i);
        let e_bar = DMatrix::from_fn(spectra.num_tissues() - 1, m, |j, i| {
            contrast(j + 1, i + 1) - contrast(j + 1, 0)
        });
        let problem = Self {
            sigma,
            e_bar,
            lambda,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma.ncols() != self.e_bar.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "Σ has {} frequency columns, Ē has {}",
                self.sigma.ncols(),
                self.e_bar.ncols()
            )));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidInput(format!(
                "ridge weight λ = {} must be positive",
                self.lambda
            )));
        }
        Ok(())
    }

    /// `∇J(F̄) = F̄(ĒĒᵀ + λI) - ΣĒᵀ`.
    pub fn gradient(&self, f_bar: &DMatrix<f64>) -> DMatrix<f64> {
        f_bar * self.coefficient() - &self.sigma * self.e_bar.transpose()
    }

    fn coefficient(&self) -> DMatrix<f64> {
        let t1 = self.e_bar.nrows();
        &self.e_bar * self.e_bar.transpose() + DMatrix::identity(t1, t1) * self.lambda
    }
}

#[derive(Debug, Clone)]
pub struct FestSolution {
    /// Unconstrained ridge solution for tissues `2..T` (N × (T-1)).
    pub raw: DMatrix<f64>,
    /// Completed and repaired into Γ.
    pub fractions: FractionMatrix,
}

pub fn fest_solve(problem: &FestProblem) -> Result<FestSolution> {
    problem.validate()?;
    let chol = Cholesky::new(problem.coefficient())
        .ok_or_else(|| Error::factorization("ridge system", format!("λ = {:e}", problem.lambda)))?;
    // F̄ C = ΣĒᵀ with C symmetric, i.e. C F̄ᵀ = ĒΣᵀ.
    let raw = chol
        .solve(&(&problem.e_bar * problem.sigma.transpose()))
        .transpose();
    let n = raw.nrows();
    let t = raw.ncols() + 1;
    let mut full = DMatrix::zeros(n, t);
    for r in 0..n {
        full[(r, 0)] = 1.0 - raw.row(r).sum();
        for j in 1..t {
            full[(r, j)] = raw[(r, j - 1)];
        }
    }
    Ok(FestSolution {
        raw,
        fractions: repair_into_gamma(&full),
    })
}

/// Clamps entries to [0, 1] and renormalizes rows; all-zero rows become background.
pub fn repair_into_gamma(values: &DMatrix<f64>) -> FractionMatrix {
    let mut out = values.map(|v| v.clamp(0.0, 1.0));
    for r in 0..out.nrows() {
        let mut row = out.row_mut(r);
        let s = row.sum();
        if s > 0.0 {
            row.scale_mut(1.0 / s);
        } else {
            row.fill(0.0);
            row[0] = 1.0;
        }
    }
    FractionMatrix::new(out)
}

/// NOSER estimates at every working frequency followed by the ridge fit.
pub fn fest_pipeline(
    ctx: &ForwardContext,
    y: &MeasurementVector,
    cfg: &FestConfig,
) -> Result<FestSolution> {
    let estimates = (1..=ctx.spectra.num_frequencies())
        .into_par_iter()
        .map(|i| noser_estimate(ctx, y, i, cfg.noser_lambda))
        .collect::<Result<Vec<_>>>()?;
    fest_solve(&FestProblem::from_estimates(
        &estimates,
        &ctx.spectra,
        cfg.lambda,
    )?)
}

/// Convenience: `F̂` only.
pub fn fest_estimate(
    ctx: &ForwardContext,
    y: &MeasurementVector,
    cfg: &FestConfig,
) -> Result<FractionMatrix> {
    Ok(fest_pipeline(ctx, y, cfg)?.fractions)
}
