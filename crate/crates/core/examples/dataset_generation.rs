//! Writes a small synthetic dataset and reads it back.
//!
//! `cargo run --example dataset_generation -- [dir] [count]`

use mfeit::phantom::{generate_dataset, load_dataset, snr_db, DatasetConfig, Family, Split};

fn main() -> mfeit::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args
        .next()
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("mfeit_dataset"));
    let count = args.next().and_then(|c| c.parse().ok()).unwrap_or(4);

    let cfg = DatasetConfig::new(Family::Overlap, Split::Test, count, 7);
    let manifest = generate_dataset(&dir, &cfg)?;
    println!(
        "{} samples in {} ({} preset)",
        manifest.samples.len(),
        dir.display(),
        manifest.spectra_preset
    );

    let (_, ctx, samples) = load_dataset(&dir)?;
    println!(
        "{} triangles, {} measurements per frequency",
        ctx.num_triangles(),
        ctx.measurements_per_frequency()
    );
    for (path, s) in &samples {
        let inclusions: Vec<String> = s
            .phantom
            .inclusions
            .iter()
            .map(|c| {
                format!(
                    "tissue {} r={:.2} at ({:+.2}, {:+.2})",
                    c.tissue + 1,
                    c.radius,
                    c.center[0],
                    c.center[1]
                )
            })
            .collect();
        let snr = snr_db(&s.clean_measurements().values, &s.measurements().values);
        println!(
            "{}: SNR {snr:.1} dB; {}",
            path.file_name().unwrap().to_string_lossy(),
            inclusions.join("; ")
        );
    }
    Ok(())
}
