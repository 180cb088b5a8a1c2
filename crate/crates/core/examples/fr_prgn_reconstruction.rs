//! Full pipeline on one noisy sample: F-EST reference, then proximal
//! Gauss-Newton with entropic mirror descent from a perturbed start.
//!
//! `cargo run --example fr_prgn_reconstruction -- [iterations]`

use mfeit::metrics::evaluate;
use mfeit::phantom::{DatasetConfig, Family, Split};
use mfeit::pipeline::{reconstruct_sample, PipelineConfig};
use mfeit::prgn::PrgnConfig;

fn main() -> mfeit::Result<()> {
    let iterations = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(50);
    let data = DatasetConfig::new(Family::Overlap, Split::Test, 1, 7);
    let ctx = data.context()?;
    let sample = data.generate_sample(&ctx, 0)?;
    let cfg = PipelineConfig {
        prgn: PrgnConfig {
            max_iterations: iterations,
            ..Default::default()
        },
        ..Default::default()
    };
    let rec = reconstruct_sample(&ctx, &sample.measurements(), &cfg, 0)?;
    for r in rec
        .prgn
        .history
        .iter()
        .filter(|r| r.iteration == 1 || r.iteration % 10 == 0)
    {
        println!(
            "iteration {:3}: residual {:.4e}, step change {:.3e}, {:.2} s",
            r.iteration, r.residual_norm, r.change, r.seconds
        );
    }
    println!(
        "final residual {:.4e}, converged: {}",
        rec.prgn.final_residual_norm, rec.prgn.converged
    );

    let truth = sample.fraction_matrix()?;
    let areas = ctx.model().areas();
    for (name, f) in [("fest", &rec.f_hat), ("fr-prgn", &rec.prgn.fractions)] {
        let e = evaluate("0", name, f, &truth, &ctx.spectra, areas)?;
        println!(
            "{name:8} Err_f {:.3}/{:.3}/{:.3}  Err_σ {:.4}/{:.4}",
            e.err_f[0], e.err_f[1], e.err_f[2], e.err_sigma[0], e.err_sigma[1]
        );
    }
    Ok(())
}
