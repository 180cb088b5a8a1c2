//! Complete electrode model forward solve for a two-inclusion phantom:
//! electrode voltages, reciprocity, and the frequency-difference data.
//!
//! `cargo run --example forward_solve`

use mfeit::cem::{adjacent_patterns, solve_forward, DEFAULT_CURRENT_AMPLITUDE};
use mfeit::context::ForwardContext;
use mfeit::fraction::{fractions_to_conductivity, SpectraSet};
use mfeit::mesh::build_disk_mesh;
use mfeit::phantom::{rasterize_fractions, Family, Inclusion, PhantomSpec};

fn main() -> mfeit::Result<()> {
    let (mesh, electrodes) = build_disk_mesh(1.0, 432, 16, 0.5)?;
    let patterns = adjacent_patterns(16, DEFAULT_CURRENT_AMPLITUDE)?;
    let ctx = ForwardContext::new(mesh, electrodes, patterns, SpectraSet::overlap())?;

    let phantom = PhantomSpec {
        family: Family::Overlap,
        domain_radius: 1.0,
        num_tissues: 3,
        inclusions: vec![
            Inclusion {
                tissue: 1,
                center: [-0.4, 0.1],
                radius: 0.3,
            },
            Inclusion {
                tissue: 2,
                center: [0.35, -0.3],
                radius: 0.25,
            },
        ],
    };
    let f = rasterize_fractions(&phantom, &ctx.mesh);

    let sigma = fractions_to_conductivity(&f, &ctx.spectra, 0)?;
    let sol = solve_forward(ctx.model(), &sigma, &ctx.patterns)?;
    let p = ctx.patterns.num_electrodes();
    println!("pattern 0 electrode voltages (V):");
    for (e, u) in sol.voltages.column(0).iter().enumerate() {
        println!("  E{e:02} {u:+.5e}");
    }
    let mean_max = sol
        .voltages
        .column_iter()
        .map(|c| (c.sum() / p as f64).abs())
        .fold(0.0, f64::max);
    let pair = |h: usize, q: usize| sol.measurements[h * (p - 1) + q];
    let mut asym: f64 = 0.0;
    for a in 0..p - 1 {
        for c in 0..p - 1 {
            asym = asym.max((pair(a, c) - pair(c, a)).abs());
        }
    }
    println!(
        "max |mean U| {mean_max:.1e}, max transfer asymmetry {:.1e} (relative)",
        asym / sol.measurements.amax()
    );

    let y = ctx.phi(&f)?;
    for i in 0..y.m {
        let block = y.block(i);
        println!(
            "Δv at ω{} minus ω0: {} values, norm {:.4e}, range {:+.3e} .. {:+.3e}",
            i + 1,
            block.len(),
            block.norm(),
            block.min(),
            block.max()
        );
    }
    Ok(())
}
