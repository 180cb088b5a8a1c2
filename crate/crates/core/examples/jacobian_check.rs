//! Adjoint Jacobian of the fraction-to-data map against central finite
//! differences, and the row compression used by the Gauss-Newton solver.
//!
//! `cargo run --example jacobian_check`

use mfeit::cem::{adjacent_patterns, forward_map_phi, DEFAULT_CURRENT_AMPLITUDE};
use mfeit::context::ForwardContext;
use mfeit::fraction::{row_softmax, FractionMatrix, SpectraSet};
use mfeit::mesh::build_disk_mesh;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mfeit::Result<()> {
    let (mesh, electrodes) = build_disk_mesh(1.0, 90, 8, 0.5)?;
    let ctx = ForwardContext::new(
        mesh,
        electrodes,
        adjacent_patterns(8, DEFAULT_CURRENT_AMPLITUDE)?,
        SpectraSet::overlap(),
    )?;
    let (n, t) = (ctx.num_triangles(), ctx.num_tissues());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = row_softmax(&DMatrix::from_fn(n, t, |_, _| rng.random_range(-2.0..2.0)))?;

    let (_, jac) = ctx.phi_jacobian(&f)?;
    println!(
        "J_Φ is {} × {} ({} nodes, P = 8)",
        jac.matrix.nrows(),
        jac.matrix.ncols(),
        ctx.mesh.num_nodes()
    );
    for h in [1e-3, 1e-4, 1e-5, 1e-6, 1e-7] {
        let d = DVector::from_fn(n * t, |_, _| rng.random_range(-1.0..1.0));
        let phi = |s: f64| {
            let v = f.vectorized() + &d * s;
            let g = FractionMatrix::new(DMatrix::from_column_slice(n, t, v.as_slice()));
            forward_map_phi(&g, &ctx.spectra, ctx.model(), &ctx.patterns).map(|y| y.values)
        };
        let fd = (phi(h)? - phi(-h)?) / (2.0 * h);
        let exact = &jac.matrix * &d;
        println!(
            "  step {h:.0e}: relative error {:.2e}",
            (&fd - &exact).norm() / exact.norm()
        );
    }

    let lin = ctx.linearize(&f)?;
    let normal_full = jac.matrix.tr_mul(&jac.matrix);
    let normal_compressed = lin.jacobian.tr_mul(&lin.jacobian);
    println!(
        "compressed rows: {} → {}, max |ΔJᵀJ| / max |JᵀJ| = {:.1e}",
        jac.matrix.nrows(),
        lin.jacobian.nrows(),
        (&normal_full - &normal_compressed).amax() / normal_full.amax()
    );
    Ok(())
}
