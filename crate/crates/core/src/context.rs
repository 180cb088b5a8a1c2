//! Everything the nonlinear map `F ↦ Φ(F)` depends on, bundled once per
//! problem setup.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::cem::{
    solve_forward, stack_differences, CemModel, CurrentPatternSet, ForwardSolution,
    MeasurementVector,
};
use crate::error::{Error, Result};
use crate::fraction::{fractions_to_conductivity, ConductivityField, FractionMatrix, SpectraSet};
use crate::mesh::{ElectrodeSetup, Mesh};
use crate::sensitivity::{
    combine_blocks, conductivity_jacobian, transfer_sensitivity, MeasurementCompression,
    PhiJacobian,
};

pub struct ForwardContext {
    pub mesh: Mesh,
    pub electrodes: ElectrodeSetup,
    pub patterns: CurrentPatternSet,
    pub spectra: SpectraSet,
    model: CemModel,
    compression: MeasurementCompression,
}

/// `Φ` and its Jacobian at one iterate, the Jacobian in compressed rows.
pub struct Linearization {
    pub phi: MeasurementVector,
    /// `(M·r) × (T·N)` with `r` = [`MeasurementCompression::rows`].
    pub jacobian: DMatrix<f64>,
}

impl ForwardContext {
    pub fn new(
        mesh: Mesh,
        electrodes: ElectrodeSetup,
        patterns: CurrentPatternSet,
        spectra: SpectraSet,
    ) -> Result<Self> {
        mesh.validate()?;
        spectra.validate()?;
        patterns.validate()?;
        let model = CemModel::new(&mesh, &electrodes)?;
        if patterns.num_electrodes() != model.num_electrodes() {
            return Err(Error::DimensionMismatch(format!(
                "{} electrodes in patterns, {} on the mesh",
                patterns.num_electrodes(),
                model.num_electrodes()
            )));
        }
        let compression = MeasurementCompression::new(&patterns);
        Ok(Self {
            mesh,
            electrodes,
            patterns,
            spectra,
            model,
            compression,
        })
    }

    pub fn model(&self) -> &CemModel {
        &self.model
    }

    pub fn compression(&self) -> &MeasurementCompression {
        &self.compression
    }

    pub fn num_triangles(&self) -> usize {
        self.model.num_triangles()
    }

    pub fn num_tissues(&self) -> usize {
        self.spectra.num_tissues()
    }

    /// `K = (P-1)·H`.
    pub fn measurements_per_frequency(&self) -> usize {
        self.patterns.num_measurements()
    }

    pub fn check_fractions(&self, f: &FractionMatrix) -> Result<()> {
        if f.num_elements() != self.num_triangles() || f.num_tissues() != self.num_tissues() {
            return Err(Error::DimensionMismatch(format!(
                "fractions are {}×{}, problem is {}×{}",
                f.num_elements(),
                f.num_tissues(),
                self.num_triangles(),
                self.num_tissues()
            )));
        }
        Ok(())
    }

    pub fn check_data(&self, y: &MeasurementVector) -> Result<()> {
        if y.k != self.measurements_per_frequency()
            || y.m != self.spectra.num_frequencies()
            || y.values.len() != y.k * y.m
        {
            return Err(Error::DimensionMismatch(format!(
                "data has K = {}, M = {}, length {}; problem expects K = {}, M = {}",
                y.k,
                y.m,
                y.values.len(),
                self.measurements_per_frequency(),
                self.spectra.num_frequencies()
            )));
        }
        Ok(())
    }

    /// `σ_0, …, σ_M` induced by `f`.
    pub fn conductivities(&self, f: &FractionMatrix) -> Result<Vec<ConductivityField>> {
        self.check_fractions(f)?;
        (0..=self.spectra.num_frequencies())
            .map(|i| fractions_to_conductivity(f, &self.spectra, i))
            .collect()
    }

    pub fn solve(&self, sigma: &ConductivityField) -> Result<ForwardSolution> {
        solve_forward(&self.model, sigma, &self.patterns)
    }

    /// Forward solutions at every frequency, reference first.
    pub fn solve_all(&self, f: &FractionMatrix) -> Result<Vec<ForwardSolution>> {
        self.conductivities(f)?
            .par_iter()
            .map(|sigma| self.solve(sigma))
            .collect()
    }

    pub fn phi(&self, f: &FractionMatrix) -> Result<MeasurementVector> {
        Ok(stack_differences(&self.solve_all(f)?))
    }

    /// `Φ(F)` and the uncompressed `J_Φ(F)`.
    pub fn phi_jacobian(&self, f: &FractionMatrix) -> Result<(MeasurementVector, PhiJacobian)> {
        let sols = self.solve_all(f)?;
        let jacs = sols
            .par_iter()
            .map(|s| conductivity_jacobian(&self.model, &self.patterns, s))
            .collect::<Result<Vec<_>>>()?;
        Ok((
            stack_differences(&sols),
            PhiJacobian::assemble(&jacs, &self.spectra)?,
        ))
    }

    /// `Φ(F)` and `J_Φ(F)` with rows compressed per frequency; see
    /// [`MeasurementCompression`].
    pub fn linearize(&self, f: &FractionMatrix) -> Result<Linearization> {
        let sols = self.solve_all(f)?;
        let reduced: Vec<DMatrix<f64>> = sols
            .par_iter()
            .map(|s| {
                self.compression
                    .compress_sensitivity(&transfer_sensitivity(&self.model, &s.basis))
            })
            .collect();
        let jacobian = combine_blocks(&reduced.iter().collect::<Vec<_>>(), &self.spectra);
        Ok(Linearization {
            phi: stack_differences(&sols),
            jacobian,
        })
    }

    /// Applies the per-frequency compression to a full-length residual.
    pub fn compress_residual(&self, r: &DVector<f64>) -> DVector<f64> {
        let k = self.measurements_per_frequency();
        let rows = self.compression.rows();
        let m = r.len() / k;
        let mut out = DVector::zeros(m * rows);
        for i in 0..m {
            out.rows_mut(i * rows, rows).copy_from(
                &self
                    .compression
                    .compress_data(&r.rows(i * k, k).into_owned()),
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cem::{adjacent_patterns, DEFAULT_CURRENT_AMPLITUDE};
    use crate::fraction::row_softmax;
    use crate::mesh::build_disk_mesh;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn context() -> ForwardContext {
        let (mesh, el) = build_disk_mesh(1.0, 90, 8, 0.5).unwrap();
        let pats = adjacent_patterns(8, DEFAULT_CURRENT_AMPLITUDE).unwrap();
        ForwardContext::new(mesh, el, pats, SpectraSet::overlap()).unwrap()
    }

    fn random_fractions(n: usize, t: usize, seed: u64) -> FractionMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        row_softmax(&DMatrix::from_fn(n, t, |_, _| rng.random_range(-2.0..2.0))).unwrap()
    }

    #[test]
    fn phi_jacobian_matches_directional_differences() {
        let ctx = context();
        let (n, t) = (ctx.num_triangles(), ctx.num_tissues());
        let f = random_fractions(n, t, 1);
        let (_, jac) = ctx.phi_jacobian(&f).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let d = DVector::from_fn(n * t, |_, _| rng.random_range(-1.0..1.0));
            let h = 1e-6;
            let shifted = |s: f64| {
                let v = f.vectorized() + &d * s;
                FractionMatrix::new(DMatrix::from_column_slice(n, t, v.as_slice()))
            };
            let fd = (ctx.phi(&shifted(h)).unwrap().values - ctx.phi(&shifted(-h)).unwrap().values)
                / (2.0 * h);
            let exact = &jac.matrix * &d;
            let rel = (&fd - &exact).norm() / exact.norm();
            assert!(rel < 1e-5, "directional error {rel:e}");
        }
    }

    #[test]
    fn compressed_linearization_preserves_normal_equations() {
        let ctx = context();
        let f = random_fractions(ctx.num_triangles(), 3, 4);
        let (phi, full) = ctx.phi_jacobian(&f).unwrap();
        let lin = ctx.linearize(&f).unwrap();
        assert_eq!(phi, lin.phi);
        assert_eq!(lin.jacobian.nrows(), 2 * 28);
        let a = full.matrix.transpose() * &full.matrix;
        let b = lin.jacobian.transpose() * &lin.jacobian;
        assert!((&a - &b).abs().max() <= 1e-10 * a.abs().max());
        let r = phi.values.map(|v| v.sin());
        let g1 = full.matrix.tr_mul(&r);
        let g2 = lin.jacobian.tr_mul(&ctx.compress_residual(&r));
        assert!((&g1 - &g2).norm() <= 1e-10 * g1.norm());
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let ctx = context();
        assert!(ctx.phi(&FractionMatrix::background(3, 3)).is_err());
        let y = MeasurementVector {
            values: DVector::zeros(10),
            k: 5,
            m: 2,
        };
        assert!(ctx.check_data(&y).is_err());
    }
}
