//! Renders a phantom and its F-EST reconstruction to PPM images and dumps
//! the conductivity field as CSV.
//!
//! `cargo run --example render_fields -- [dir]`

use mfeit::fest::{fest_estimate, FestConfig};
use mfeit::fraction::fractions_to_conductivity;
use mfeit::phantom::{DatasetConfig, Family, Split};
use mfeit::render::{render_fractions, render_scalar, write_field_csv};

fn main() -> mfeit::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("mfeit_render"));
    std::fs::create_dir_all(&dir).map_err(|e| mfeit::Error::Io {
        path: dir.clone(),
        source: e,
    })?;

    let data = DatasetConfig::new(Family::Overlap, Split::Test, 1, 7);
    let ctx = data.context()?;
    let sample = data.generate_sample(&ctx, 0)?;
    let truth = sample.fraction_matrix()?;
    let f_hat = fest_estimate(&ctx, &sample.measurements(), &FestConfig::default())?;

    render_fractions(&ctx.mesh, &truth, 256)?.write_ppm(&dir.join("truth_fractions.ppm"))?;
    render_fractions(&ctx.mesh, &f_hat, 256)?.write_ppm(&dir.join("fest_fractions.ppm"))?;

    // Shared color range so the two conductivity images are comparable.
    let s_true = fractions_to_conductivity(&truth, &ctx.spectra, 1)?.0;
    let s_hat = fractions_to_conductivity(&f_hat, &ctx.spectra, 1)?.0;
    let range = (s_true.min().min(s_hat.min()), s_true.max().max(s_hat.max()));
    render_scalar(&ctx.mesh, s_true.as_slice(), Some(range), 256)?
        .write_ppm(&dir.join("truth_sigma1.ppm"))?;
    render_scalar(&ctx.mesh, s_hat.as_slice(), Some(range), 256)?
        .write_ppm(&dir.join("fest_sigma1.ppm"))?;
    write_field_csv(
        &dir.join("sigma1.csv"),
        &ctx.mesh,
        &["truth".into(), "fest".into()],
        &[s_true.as_slice().to_vec(), s_hat.as_slice().to_vec()],
    )?;
    println!(
        "σ₁ range {:.4} .. {:.4} S/m; images and CSV in {}",
        range.0,
        range.1,
        dir.display()
    );
    Ok(())
}
