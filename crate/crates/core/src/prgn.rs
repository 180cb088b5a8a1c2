//! Fraction-reconstruction proximal regularized Gauss-Newton (FR-PRGN).
//!
//! Each outer step takes a Gauss-Newton step `z = F - βH⁻¹∇f_α(F)` and then
//! the scaled proximal map `argmin_{G∈Γ} ½‖G - z‖²_H + R(G)`, approximated by
//! entropic mirror descent (EMDA) on the row simplices.
//!
//! The proximal metric is selectable, see [`ProxMetric`]. `z` is formed with
//! the primal or dual Cholesky factor of `H`, whichever system is smaller.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cem::MeasurementVector;
use crate::context::ForwardContext;
use crate::error::{Error, Result};
use crate::fraction::{fractions_to_conductivity, row_softmax, FractionMatrix};
use crate::sensitivity::{gradient_step, GaussNewtonState, Metric};

/// Entries are kept at or above this value so `ln F` stays finite.
pub const INTERIOR_FLOOR: f64 = 1e-300;

/// `ψ(F) = Σ f ln f` on the interior of Γ.
pub fn entropy(f: &FractionMatrix) -> Result<f64> {
    let mut sum = 0.0;
    for (k, &v) in f.as_slice().iter().enumerate() {
        if !(v > 0.0) {
            let n = f.num_elements();
            return Err(Error::Domain(format!(
                "entropy needs positive fractions; entry ({}, {}) is {v}",
                k % n,
                k / n
            )));
        }
        sum += v * v.ln();
    }
    Ok(sum)
}

/// `ψ⋆(X) = Σ_n ln Σ_j exp(x_nj)`.
pub fn entropy_conjugate(x: &DMatrix<f64>) -> f64 {
    x.row_iter()
        .map(|row| {
            let m = row.max();
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        })
        .sum()
}

/// How one EMDA iterate is evaluated. Both forms are the same map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmdaUpdate {
    /// `softmax_r(ln F - t∇)`.
    Softmax,
    /// `F ⊙ exp(-t∇)` normalized per row.
    Multiplicative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmdaConfig {
    /// Inner iteration count `L`.
    pub iterations: usize,
    /// Weight of `R(F) = (α_EMDA/2)‖F‖²`.
    pub alpha_emda: f64,
    /// Lipschitz estimate `L_J̃` in the step rule.
    pub lipschitz: f64,
    pub update: EmdaUpdate,
}

impl Default for EmdaConfig {
    fn default() -> Self {
        Self {
            iterations: 20,
            alpha_emda: 1e-4,
            lipschitz: 1.5,
            update: EmdaUpdate::Softmax,
        }
    }
}

impl EmdaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidInput(
                "EMDA needs at least one iteration".into(),
            ));
        }
        if !(self.alpha_emda >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "α_EMDA = {} must be ≥ 0",
                self.alpha_emda
            )));
        }
        if !(self.lipschitz > 0.0) {
            return Err(Error::InvalidInput(format!(
                "L_J̃ = {} must be positive",
                self.lipschitz
            )));
        }
        Ok(())
    }

    /// `t_ℓ = √(2 ln T) / (L_J̃ √ℓ)`, `ℓ ≥ 1`.
    pub fn step_size(&self, ell: usize, num_tissues: usize) -> f64 {
        (2.0 * (num_tissues as f64).ln()).sqrt() / self.lipschitz / (ell as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrgnConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Stop once `‖F^(k) - F^(k-1)‖_∞ ≤ tol`.
    pub tol: f64,
    pub max_iterations: usize,
    #[serde(default)]
    pub prox_metric: ProxMetric,
}

/// Metric of the proximal step solved by EMDA.
///
/// `GaussNewton` uses `H_k` itself. With a fixed `L_J̃` its 20 inner steps
/// only act on the top of the spectrum of `H_k`, so components of `F` in the
/// near-null space of `J_Φ` (including the random start) never move.
/// `Euclidean` projects the same `z^(k)` with `H = I`; both proxes return
/// `z^(k)` whenever it already lies in Γ.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProxMetric {
    #[default]
    Euclidean,
    GaussNewton,
}

impl std::str::FromStr for ProxMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Self::Euclidean),
            "gauss-newton" => Ok(Self::GaussNewton),
            other => Err(Error::InvalidInput(format!(
                "unknown prox metric {other:?}; expected euclidean or gauss-newton"
            ))),
        }
    }
}

impl Default for PrgnConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-9,
            beta: 0.3,
            tol: 1e-4,
            max_iterations: 50,
            prox_metric: ProxMetric::Euclidean,
        }
    }
}

impl PrgnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidInput(format!(
                "α = {} must be positive",
                self.alpha
            )));
        }
        if !(self.beta >= 0.0 && self.beta <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "β = {} must lie in [0, 1]",
                self.beta
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidInput(format!(
                "tol = {} must be positive",
                self.tol
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidInput(
                "max_iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

fn require_interior(f: &FractionMatrix) -> Result<()> {
    if let Some(k) = f.as_slice().iter().position(|v| !(*v > 0.0)) {
        let n = f.num_elements();
        return Err(Error::Domain(format!(
            "EMDA start must lie in the interior of Γ; entry ({}, {}) is {}",
            k % n,
            k / n,
            f.as_slice()[k]
        )));
    }
    Ok(())
}

fn emda_iterate(
    f: &FractionMatrix,
    grad: &DVector<f64>,
    t: f64,
    update: EmdaUpdate,
) -> Result<FractionMatrix> {
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("EMDA gradient is not finite".into()));
    }
    let (n, tt) = (f.num_elements(), f.num_tissues());
    let grad = DMatrix::from_column_slice(n, tt, grad.as_slice());
    let mut next = match update {
        EmdaUpdate::Softmax => {
            let logits = f.values().map(f64::ln) - grad * t;
            row_softmax(&logits)?.into_values()
        }
        EmdaUpdate::Multiplicative => {
            // Shift by the row minimum of t∇ so the largest weight is exp(0).
            let mut w = DMatrix::zeros(n, tt);
            for r in 0..n {
                let shift = grad.row(r).min() * t;
                for c in 0..tt {
                    w[(r, c)] = f.values()[(r, c)] * (shift - t * grad[(r, c)]).exp();
                }
                let s: f64 = w.row(r).sum();
                w.row_mut(r).scale_mut(1.0 / s);
            }
            w
        }
    };
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("EMDA iterate is not finite".into()));
    }
    for r in 0..n {
        let mut row = next.row_mut(r);
        if row.iter().any(|v| *v < INTERIOR_FLOOR) {
            row.apply(|v| *v = v.max(INTERIOR_FLOOR));
            let s = row.sum();
            row.scale_mut(1.0 / s);
        }
    }
    Ok(FractionMatrix::new(next))
}

/// EMDA for `min_{F∈Γ} ½FᵀHF - bᵀF + (α_EMDA/2)‖F‖²`.
pub fn emda_prox_linear<M: Metric + ?Sized>(
    b: &DVector<f64>,
    metric: &M,
    f_init: &FractionMatrix,
    cfg: &EmdaConfig,
) -> Result<FractionMatrix> {
    cfg.validate()?;
    require_interior(f_init)?;
    let dim = f_init.as_slice().len();
    if metric.dim() != dim || b.len() != dim {
        return Err(Error::DimensionMismatch(format!(
            "metric of size {} and target of length {} for {dim} unknowns",
            metric.dim(),
            b.len()
        )));
    }
    let mut f = f_init.clone();
    for ell in 1..=cfg.iterations {
        let x = f.vectorized();
        let grad = metric.apply(&x) - b + x * cfg.alpha_emda;
        f = emda_iterate(&f, &grad, cfg.step_size(ell, f.num_tissues()), cfg.update)?;
    }
    Ok(f)
}

/// EMDA approximation of `argmin_{F∈Γ} ½‖F - z‖²_H + (α_EMDA/2)‖F‖²`.
pub fn emda_prox<M: Metric + ?Sized>(
    z: &DVector<f64>,
    metric: &M,
    f_init: &FractionMatrix,
    cfg: &EmdaConfig,
) -> Result<FractionMatrix> {
    if z.len() != metric.dim() {
        return Err(Error::DimensionMismatch(format!(
            "target of length {} for a metric of size {}",
            z.len(),
            metric.dim()
        )));
    }
    emda_prox_linear(&metric.apply(z), metric, f_init, cfg)
}

/// `H = I`.
#[derive(Debug, Clone, Copy)]
pub struct IdentityMetric(pub usize);

impl Metric for IdentityMetric {
    fn dim(&self) -> usize {
        self.0
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `‖Φ(F^(k-1)) - y‖` at the linearization point.
    pub residual_norm: f64,
    /// `‖F^(k) - F^(k-1)‖_∞`.
    pub change: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct PrgnOutcome {
    pub fractions: FractionMatrix,
    pub history: Vec<IterationRecord>,
    /// `‖Φ(F*) - y‖`.
    pub final_residual_norm: f64,
    pub converged: bool,
    /// `F^(1), …` when requested.
    pub iterates: Vec<FractionMatrix>,
}

/// A run that stopped on an error, with everything computed before it.
#[derive(Debug)]
pub struct PrgnFailure {
    pub error: Error,
    pub history: Vec<IterationRecord>,
    pub last_iterate: FractionMatrix,
}

impl From<PrgnFailure> for Error {
    fn from(f: PrgnFailure) -> Self {
        f.error
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub keep_iterates: bool,
}

/// Gauss-Newton state at `f` with the Jacobian and residual in compressed
/// rows, and `‖Φ(f) - y‖`.
pub fn linearized_state(
    ctx: &ForwardContext,
    y: &MeasurementVector,
    f: &FractionMatrix,
    f_hat: &FractionMatrix,
    alpha: f64,
    beta: f64,
) -> Result<(GaussNewtonState, f64)> {
    ctx.check_data(y)?;
    ctx.check_fractions(f_hat)?;
    let lin = ctx.linearize(f)?;
    let residual = &lin.phi.values - &y.values;
    let state = GaussNewtonState::new(
        f.clone(),
        f_hat.clone(),
        lin.jacobian,
        ctx.compress_residual(&residual),
        alpha,
        beta,
    )?;
    Ok((state, residual.norm()))
}

pub fn run_fr_prgn(
    ctx: &ForwardContext,
    y: &MeasurementVector,
    f_hat: &FractionMatrix,
    f0: &FractionMatrix,
    prgn: &PrgnConfig,
    emda: &EmdaConfig,
) -> std::result::Result<PrgnOutcome, PrgnFailure> {
    run_fr_prgn_with(ctx, y, f_hat, f0, prgn, emda, &RunOptions::default())
}

pub fn run_fr_prgn_with(
    ctx: &ForwardContext,
    y: &MeasurementVector,
    f_hat: &FractionMatrix,
    f0: &FractionMatrix,
    prgn: &PrgnConfig,
    emda: &EmdaConfig,
    options: &RunOptions,
) -> std::result::Result<PrgnOutcome, PrgnFailure> {
    let mut history = Vec::new();
    let fail = |error: Error, history: Vec<IterationRecord>, last: &FractionMatrix| PrgnFailure {
        error,
        history,
        last_iterate: last.clone(),
    };
    let checks = prgn
        .validate()
        .and_then(|_| emda.validate())
        .and_then(|_| ctx.check_data(y))
        .and_then(|_| ctx.check_fractions(f_hat))
        .and_then(|_| ctx.check_fractions(f0))
        .and_then(|_| require_interior(f0));
    if let Err(e) = checks {
        return Err(fail(e, history, f0));
    }

    let mut f = f0.clone();
    let mut iterates = Vec::new();
    let mut converged = false;
    for k in 1..=prgn.max_iterations {
        let started = Instant::now();
        let (state, residual_norm) =
            match linearized_state(ctx, y, &f, f_hat, prgn.alpha, prgn.beta) {
                Ok(s) => s,
                Err(e) => return Err(fail(e, history, &f)),
            };
        let z = gradient_step(&state);
        let next = match prgn.prox_metric {
            ProxMetric::Euclidean => emda_prox(&z, &IdentityMetric(z.len()), &f, emda),
            ProxMetric::GaussNewton => emda_prox(&z, &state.metric, &f, emda),
        };
        let next = match next {
            Ok(n) => n,
            Err(e) => return Err(fail(e, history, &f)),
        };
        let change = (next.values() - f.values()).amax();
        history.push(IterationRecord {
            iteration: k,
            residual_norm,
            change,
            seconds: started.elapsed().as_secs_f64(),
        });
        f = next;
        if options.keep_iterates {
            iterates.push(f.clone());
        }
        if change <= prgn.tol {
            converged = true;
            break;
        }
    }
    let final_residual_norm = match ctx.phi(&f) {
        Ok(phi) => (phi.values - &y.values).norm(),
        Err(e) => return Err(fail(e, history, &f)),
    };
    Ok(PrgnOutcome {
        fractions: f,
        history,
        final_residual_norm,
        converged,
        iterates,
    })
}

/// `row_softmax(one-hot background + N(0, 1))`: a random start in the interior of Γ.
pub fn perturbed_background_start<R: rand::Rng>(n: usize, t: usize, rng: &mut R) -> FractionMatrix {
    use rand_distr::{Distribution, StandardNormal};
    let logits = DMatrix::from_fn(n, t, |_, j| {
        let noise: f64 = StandardNormal.sample(rng);
        if j == 0 {
            1.0 + noise
        } else {
            noise
        }
    });
    row_softmax(&logits).expect("finite logits")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub prgn: PrgnConfig,
    pub emda: EmdaConfig,
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
    pub final_residual_norm: f64,
    /// `N × T`, row per triangle.
    pub fractions: Vec<Vec<f64>>,
    /// Conductivity per triangle at `ω_0, …, ω_M`.
    pub conductivities: Vec<Vec<f64>>,
    pub seconds_total: f64,
}

impl ReconstructionReport {
    pub fn new(
        ctx: &ForwardContext,
        prgn: &PrgnConfig,
        emda: &EmdaConfig,
        outcome: &PrgnOutcome,
    ) -> Result<Self> {
        let conductivities = (0..=ctx.spectra.num_frequencies())
            .map(|i| {
                fractions_to_conductivity(&outcome.fractions, &ctx.spectra, i)
                    .map(|s| s.0.as_slice().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            prgn: prgn.clone(),
            emda: emda.clone(),
            iterations: outcome.history.clone(),
            converged: outcome.converged,
            final_residual_norm: outcome.final_residual_norm,
            fractions: outcome.fractions.rows(),
            conductivities,
            seconds_total: outcome.history.iter().map(|h| h.seconds).sum(),
        })
    }
}
