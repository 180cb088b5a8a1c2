//! Evaluates both methods on a few samples, writes the per-sample error
//! table as CSV and prints the per-method means.
//!
//! `cargo run --example metrics_report -- [count] [out.csv]`

use mfeit::metrics::{aggregate, write_reports_csv};
use mfeit::phantom::{DatasetConfig, Family, Split};
use mfeit::pipeline::{evaluate_dataset, PipelineConfig};
use mfeit::prgn::PrgnConfig;

fn main() -> mfeit::Result<()> {
    let mut args = std::env::args().skip(1);
    let count = args.next().and_then(|c| c.parse().ok()).unwrap_or(2);
    let out = args
        .next()
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("mfeit_errors.csv"));

    // A coarser problem keeps this quick; the CLI runs the full-size one.
    let data = DatasetConfig {
        target_vertices: 200,
        num_electrodes: 16,
        ..DatasetConfig::new(Family::Overlap, Split::Test, count, 7)
    };
    let ctx = data.context()?;
    let samples = (0..count)
        .map(|i| data.generate_sample(&ctx, i))
        .collect::<mfeit::Result<Vec<_>>>()?;
    let cfg = PipelineConfig {
        prgn: PrgnConfig {
            max_iterations: 20,
            ..Default::default()
        },
        ..Default::default()
    };
    let reports = evaluate_dataset(&ctx, &samples, &cfg)?;
    write_reports_csv(&out, &reports)?;
    println!("{} rows written to {}", reports.len(), out.display());
    for s in aggregate(&reports)? {
        println!(
            "{:8} n={} mean Err_f {:?} mean Err_σ {:?}",
            s.method,
            s.count,
            s.mean_err_f
                .iter()
                .map(|v| (v * 1e3).round() / 1e3)
                .collect::<Vec<_>>(),
            s.mean_err_sigma
                .iter()
                .map(|v| (v * 1e4).round() / 1e4)
                .collect::<Vec<_>>()
        );
    }
    Ok(())
}
