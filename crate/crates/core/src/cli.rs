//! The `mfeit` command line.
//!
//! Exit codes: 0 success, 1 invalid input or files, 2 numerical failure.
//! Every run writes `config_echo.json` next to its output, and errors go to
//! stderr as one JSON line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::cem::{
    adjacent_patterns, read_measurements, write_measurements, MeasurementFile,
    DEFAULT_CURRENT_AMPLITUDE,
};
use crate::context::ForwardContext;
use crate::error::{Error, Result};
use crate::fest::{fest_estimate, FestConfig};
use crate::fraction::{
    fractions_to_conductivity, read_fractions, read_spectra, write_fractions, FractionMatrix,
    SpectraSet,
};
use crate::io;
use crate::mesh::{build_disk_mesh, read_mesh, write_mesh, DEFAULT_CONTACT_IMPEDANCE};
use crate::metrics::{aggregate, evaluate, write_reports_csv, ErrorReport};
use crate::phantom::{
    generate_dataset, load_dataset, DatasetConfig, Family, Split, DEFAULT_NOISE_LEVEL,
};
use crate::pipeline::{reconstruct_sample, Method, PipelineConfig, PipelineError};
use crate::prgn::{run_fr_prgn, EmdaConfig, PrgnConfig, ProxMetric, ReconstructionReport};
use crate::render::{render_fractions, render_scalar, write_field_csv};

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "mfeit",
    version,
    about = "Multi-frequency EIT tissue-fraction reconstruction"
)]
pub struct Cli {
    /// Worker threads for sample-level parallelism (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Command {
    /// Structured disk mesh with equally spaced electrodes.
    MeshGen(MeshGenArgs),
    /// Synthetic phantoms with simulated noisy measurements.
    DatasetGen(DatasetGenArgs),
    /// Frequency-difference data for a fraction field.
    Forward(ForwardArgs),
    /// Reference fractions from one-step estimates.
    Fest(FestArgs),
    /// F-EST or FR-PRGN on one measurement file or a whole dataset.
    Reconstruct(ReconstructArgs),
    /// Error table of reconstructions against ground truth.
    Metrics(MetricsArgs),
    /// PPM image and/or CSV of a fraction or conductivity field.
    Render(RenderArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct MeshGenArgs {
    #[arg(long, default_value_t = 432)]
    pub vertices: usize,
    #[arg(long, default_value_t = 32)]
    pub electrodes: usize,
    /// Fraction of the boundary covered by electrodes.
    #[arg(long, default_value_t = 0.5)]
    pub coverage: f64,
    #[arg(long, default_value_t = 1.0)]
    pub radius: f64,
    #[arg(long, default_value_t = DEFAULT_CONTACT_IMPEDANCE)]
    pub contact_impedance: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DatasetGenArgs {
    #[arg(long, default_value = "overlap")]
    pub family: Family,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value_t = 50)]
    pub count: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Relative noise level `δ`.
    #[arg(long, default_value_t = DEFAULT_NOISE_LEVEL)]
    pub delta: f64,
    #[arg(long, default_value_t = 432)]
    pub vertices: usize,
    #[arg(long, default_value_t = 32)]
    pub electrodes: usize,
    #[arg(long, default_value_t = DEFAULT_CURRENT_AMPLITUDE)]
    pub amplitude: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ProblemArgs {
    #[arg(long)]
    pub mesh: PathBuf,
    /// Spectra file; overrides `--preset`.
    #[arg(long)]
    pub spectra: Option<PathBuf>,
    #[arg(long, default_value = "overlap")]
    pub preset: Family,
}

impl ProblemArgs {
    fn spectra(&self) -> Result<SpectraSet> {
        match &self.spectra {
            Some(p) => read_spectra(p),
            None => Ok(self.preset.spectra()),
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct ForwardArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[arg(long)]
    pub fractions: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CURRENT_AMPLITUDE)]
    pub amplitude: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FestArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[arg(long)]
    pub measurements: PathBuf,
    #[command(flatten)]
    pub fest: FestParams,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FestParams {
    /// Ridge weight of the fraction fit.
    #[arg(long = "lambda", default_value_t = FestConfig::default().lambda)]
    pub lambda: f64,
    /// NOSER weight on diag(JᵀJ).
    #[arg(long = "noser-lambda", default_value_t = FestConfig::default().noser_lambda)]
    pub noser_lambda: f64,
}

impl FestParams {
    fn config(&self) -> FestConfig {
        FestConfig {
            lambda: self.lambda,
            noser_lambda: self.noser_lambda,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct PrgnParams {
    #[arg(long, allow_hyphen_values = true, default_value_t = PrgnConfig::default().alpha)]
    pub alpha: f64,
    #[arg(long, allow_hyphen_values = true, default_value_t = PrgnConfig::default().beta)]
    pub beta: f64,
    #[arg(long, default_value_t = PrgnConfig::default().tol)]
    pub tol: f64,
    #[arg(long, default_value_t = PrgnConfig::default().max_iterations)]
    pub max_iterations: usize,
    /// euclidean or gauss-newton.
    #[arg(long, default_value = "euclidean")]
    pub prox_metric: ProxMetric,
    /// EMDA inner iterations `L`.
    #[arg(long, default_value_t = EmdaConfig::default().iterations)]
    pub emda_iterations: usize,
    #[arg(long, default_value_t = EmdaConfig::default().alpha_emda)]
    pub alpha_emda: f64,
    /// Lipschitz estimate `L_J̃` of the EMDA step schedule.
    #[arg(long, default_value_t = EmdaConfig::default().lipschitz)]
    pub lipschitz: f64,
}

impl PrgnParams {
    fn configs(&self) -> (PrgnConfig, EmdaConfig) {
        (
            PrgnConfig {
                alpha: self.alpha,
                beta: self.beta,
                tol: self.tol,
                max_iterations: self.max_iterations,
                prox_metric: self.prox_metric,
            },
            EmdaConfig {
                iterations: self.emda_iterations,
                alpha_emda: self.alpha_emda,
                lipschitz: self.lipschitz,
                ..EmdaConfig::default()
            },
        )
    }
}

#[derive(Debug, Args, Serialize)]
pub struct ReconstructArgs {
    #[arg(long, default_value = "fr-prgn")]
    pub method: Method,
    /// Dataset directory; reconstructs every sample.
    #[arg(long, conflicts_with_all = ["mesh", "measurements"])]
    pub dataset: Option<PathBuf>,
    #[arg(long, requires = "measurements")]
    pub mesh: Option<PathBuf>,
    #[arg(long)]
    pub spectra: Option<PathBuf>,
    #[arg(long, default_value = "overlap")]
    pub preset: Family,
    #[arg(long, requires = "mesh")]
    pub measurements: Option<PathBuf>,
    /// Reference fractions; computed by F-EST when absent.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Seed of the perturbed starting point.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub fest: FestParams,
    #[command(flatten)]
    pub prgn: PrgnParams,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct MetricsArgs {
    /// Dataset directory with ground truth.
    #[arg(long, requires = "reconstructions")]
    pub dataset: Option<PathBuf>,
    /// Output directory of `reconstruct --dataset`.
    #[arg(long)]
    pub reconstructions: Option<PathBuf>,
    /// Single-field mode: ground-truth fractions.
    #[arg(long, conflicts_with = "dataset", requires_all = ["reconstruction", "mesh"])]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub reconstruction: Option<PathBuf>,
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    #[arg(long)]
    pub spectra: Option<PathBuf>,
    #[arg(long, default_value = "overlap")]
    pub preset: Family,
    /// CSV error table.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct RenderArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Fraction file, or a reconstruction report.
    #[arg(long)]
    pub fractions: PathBuf,
    /// `fractions`, or `sigma<i>` for the conductivity at frequency index i.
    #[arg(long, default_value = "fractions")]
    pub field: String,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    /// Fixed color range for scalar fields.
    #[arg(long, num_args = 2, allow_hyphen_values = true, value_names = ["MIN", "MAX"])]
    pub range: Option<Vec<f64>>,
    #[arg(long)]
    pub ppm: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Serialize)]
struct ConfigEcho<'a> {
    program: &'static str,
    version: &'static str,
    #[serde(flatten)]
    cli: &'a Cli,
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    status: &'a str,
    kind: &'a str,
    exit_code: i32,
    message: String,
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidInput(_) => "invalid_input",
        Error::DimensionMismatch(_) => "dimension_mismatch",
        Error::DegenerateTriangle { .. } => "degenerate_triangle",
        Error::Domain(_) => "domain",
        Error::Factorization { .. } => "factorization",
        Error::Numerical(_) => "numerical",
        Error::SamplingExhausted(_) => "sampling_exhausted",
        Error::Io { .. } => "io",
        Error::Format { .. } => "format",
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            let line = ErrorLine {
                status: "error",
                kind: error_kind(&e),
                exit_code: code,
                message: e.to_string(),
            };
            eprintln!(
                "{}",
                serde_json::to_string(&line).unwrap_or_else(|_| e.to_string())
            );
            code
        }
    }
}

fn output_dir(cli: &Cli) -> PathBuf {
    let parent = |p: &Path| p.parent().map(Path::to_path_buf).unwrap_or_default();
    match &cli.command {
        Command::MeshGen(a) => parent(&a.out),
        Command::DatasetGen(a) => a.out.clone(),
        Command::Forward(a) => parent(&a.out),
        Command::Fest(a) => parent(&a.out),
        Command::Reconstruct(a) => a.out.clone(),
        Command::Metrics(a) => parent(&a.out),
        Command::Render(a) => a
            .ppm
            .as_deref()
            .or(a.csv.as_deref())
            .map(parent)
            .unwrap_or_default(),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    if dir.as_os_str().is_empty() {
        return Ok(());
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.into(),
        source: e,
    })
}

pub fn execute(cli: &Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Error::InvalidInput("--jobs must be at least 1".into()));
        }
        // Fails only if a pool already exists, in which case it is reused.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    let dir = output_dir(cli);
    create_dir(&dir)?;
    let echo = ConfigEcho {
        program: "mfeit",
        version: env!("CARGO_PKG_VERSION"),
        cli,
    };
    io::write_json_pretty(&dir.join("config_echo.json"), &echo)?;
    match &cli.command {
        Command::MeshGen(a) => mesh_gen(a),
        Command::DatasetGen(a) => dataset_gen(a),
        Command::Forward(a) => forward(a),
        Command::Fest(a) => fest(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Metrics(a) => metrics(a),
        Command::Render(a) => render(a),
    }
}

fn mesh_gen(a: &MeshGenArgs) -> Result<()> {
    let (mesh, mut el) = build_disk_mesh(a.radius, a.vertices, a.electrodes, a.coverage)?;
    if !(a.contact_impedance > 0.0) {
        return Err(Error::InvalidInput(format!(
            "contact impedance {} must be positive",
            a.contact_impedance
        )));
    }
    el.contact_impedances.fill(a.contact_impedance);
    write_mesh(&a.out, &mesh, &el)?;
    println!(
        "{} nodes, {} triangles, {} electrodes",
        mesh.num_nodes(),
        mesh.num_triangles(),
        el.num_electrodes()
    );
    Ok(())
}

fn dataset_gen(a: &DatasetGenArgs) -> Result<()> {
    let cfg = DatasetConfig {
        delta: a.delta,
        target_vertices: a.vertices,
        num_electrodes: a.electrodes,
        current_amplitude: a.amplitude,
        ..DatasetConfig::new(a.family, a.split, a.count, a.seed)
    };
    let manifest = generate_dataset(&a.out, &cfg)?;
    println!(
        "{} samples written to {}",
        manifest.samples.len(),
        a.out.display()
    );
    Ok(())
}

fn context(problem: &ProblemArgs, amplitude: f64) -> Result<ForwardContext> {
    let (mesh, el) = read_mesh(&problem.mesh)?;
    let patterns = adjacent_patterns(el.num_electrodes(), amplitude)?;
    ForwardContext::new(mesh, el, patterns, problem.spectra()?)
}

fn context_for_measurements(
    mesh: &Path,
    spectra: SpectraSet,
    record: &MeasurementFile,
) -> Result<ForwardContext> {
    let (mesh, el) = read_mesh(mesh)?;
    ForwardContext::new(mesh, el, record.patterns()?, spectra)
}

/// A measurement file, or a dataset sample whose manifest sits beside it.
fn load_record(path: &Path) -> Result<MeasurementFile> {
    match read_measurements(path) {
        Err(Error::Format { .. }) => {
            let sample: crate::phantom::DatasetSample = io::read_json(path)?;
            let dir = path.parent().unwrap_or(Path::new(""));
            let manifest = crate::phantom::read_manifest(dir)?;
            let patterns = adjacent_patterns(
                manifest.config.num_electrodes,
                manifest.config.current_amplitude,
            )?;
            Ok(MeasurementFile::new(&sample.measurements(), &patterns))
        }
        other => other,
    }
}

fn forward(a: &ForwardArgs) -> Result<()> {
    let ctx = context(&a.problem, a.amplitude)?;
    let y = ctx.phi(&read_fractions(&a.fractions)?)?;
    write_measurements(&a.out, &MeasurementFile::new(&y, &ctx.patterns))
}

fn fest(a: &FestArgs) -> Result<()> {
    let record = load_record(&a.measurements)?;
    let ctx = context_for_measurements(&a.problem.mesh, a.problem.spectra()?, &record)?;
    let f_hat = fest_estimate(&ctx, &record.measurement_vector()?, &a.fest.config())?;
    write_fractions(&a.out, &f_hat)
}

fn write_partial(
    out: &Path,
    stem: &str,
    f_hat: &FractionMatrix,
    failure: &crate::prgn::PrgnFailure,
) -> Result<()> {
    write_fractions(&out.join(format!("{stem}.fest.json")), f_hat)?;
    write_fractions(
        &out.join(format!("{stem}.fr-prgn.partial.json")),
        &failure.last_iterate,
    )?;
    io::write_json_pretty(
        &out.join(format!("{stem}.fr-prgn.partial-history.json")),
        &failure.history,
    )
}

fn reconstruct(a: &ReconstructArgs) -> Result<()> {
    let (prgn, emda) = a.prgn.configs();
    let cfg = PipelineConfig {
        fest: a.fest.config(),
        prgn,
        emda,
        seed: a.seed,
    };
    cfg.prgn.validate()?;
    cfg.emda.validate()?;
    if let Some(dir) = &a.dataset {
        let (_, ctx, samples) = load_dataset(dir)?;
        let results: Vec<Result<()>> = samples
            .par_iter()
            .map(|(path, sample)| {
                let stem = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("sample");
                reconstruct_one(
                    &ctx,
                    &sample.measurements(),
                    &cfg,
                    a.method,
                    sample.index,
                    &a.out,
                    stem,
                    None,
                )
            })
            .collect();
        // Every sample runs; the first failure decides the exit code.
        return results.into_iter().collect();
    }
    let (mesh, meas) = match (&a.mesh, &a.measurements) {
        (Some(m), Some(y)) => (m, y),
        _ => {
            return Err(Error::InvalidInput(
                "give --dataset, or --mesh with --measurements".into(),
            ))
        }
    };
    let spectra = match &a.spectra {
        Some(p) => read_spectra(p)?,
        None => a.preset.spectra(),
    };
    let record = load_record(meas)?;
    let ctx = context_for_measurements(mesh, spectra, &record)?;
    let reference = a.reference.as_deref().map(read_fractions).transpose()?;
    let stem = meas
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("measurements");
    reconstruct_one(
        &ctx,
        &record.measurement_vector()?,
        &cfg,
        a.method,
        0,
        &a.out,
        stem,
        reference,
    )
}

#[allow(clippy::too_many_arguments)]
fn reconstruct_one(
    ctx: &ForwardContext,
    y: &crate::cem::MeasurementVector,
    cfg: &PipelineConfig,
    method: Method,
    index: usize,
    out: &Path,
    stem: &str,
    reference: Option<FractionMatrix>,
) -> Result<()> {
    let fest_path = out.join(format!("{stem}.fest.json"));
    if method == Method::Fest {
        return write_fractions(&fest_path, &fest_estimate(ctx, y, &cfg.fest)?);
    }
    let outcome = match reference {
        Some(f_hat) => {
            let run = run_fr_prgn(ctx, y, &f_hat, &cfg.start(ctx, index), &cfg.prgn, &cfg.emda);
            run.map_err(|failure| PipelineError::Prgn { f_hat, failure })
        }
        None => reconstruct_sample(ctx, y, cfg, index).map(|r| {
            let _ = write_fractions(&fest_path, &r.f_hat);
            r.prgn
        }),
    };
    match outcome {
        Ok(o) => {
            write_fractions(&out.join(format!("{stem}.fr-prgn.json")), &o.fractions)?;
            let report = ReconstructionReport::new(ctx, &cfg.prgn, &cfg.emda, &o)?;
            io::write_json_pretty(&out.join(format!("{stem}.fr-prgn.report.json")), &report)
        }
        Err(PipelineError::Prgn { f_hat, failure }) => {
            write_partial(out, stem, &f_hat, &failure)?;
            Err(failure.into())
        }
        Err(PipelineError::Fest(e)) => Err(e),
    }
}

fn metrics(a: &MetricsArgs) -> Result<()> {
    let mut reports: Vec<ErrorReport> = Vec::new();
    if let (Some(dir), Some(rec_dir)) = (&a.dataset, &a.reconstructions) {
        let (_, ctx, samples) = load_dataset(dir)?;
        let areas = ctx.model().areas();
        for (path, sample) in &samples {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("sample");
            let truth = sample.fraction_matrix()?;
            for method in [Method::Fest, Method::FrPrgn] {
                let p = rec_dir.join(format!("{stem}.{}.json", method.name()));
                if p.exists() {
                    let rec = read_fractions(&p)?;
                    reports.push(evaluate(
                        stem,
                        method.name(),
                        &rec,
                        &truth,
                        &ctx.spectra,
                        areas,
                    )?);
                }
            }
        }
    } else if let (Some(truth), Some(rec), Some(mesh)) = (&a.truth, &a.reconstruction, &a.mesh) {
        let (mesh, _) = read_mesh(mesh)?;
        let areas = crate::mesh::triangle_areas(&mesh)?;
        let spectra = match &a.spectra {
            Some(p) => read_spectra(p)?,
            None => a.preset.spectra(),
        };
        let stem = rec
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("reconstruction");
        reports.push(evaluate(
            stem,
            "given",
            &read_fractions(rec)?,
            &read_fractions(truth)?,
            &spectra,
            &areas,
        )?);
    } else {
        return Err(Error::InvalidInput(
            "give --dataset with --reconstructions, or --truth with --reconstruction and --mesh"
                .into(),
        ));
    }
    if reports.is_empty() {
        return Err(Error::InvalidInput("no reconstructions found".into()));
    }
    write_reports_csv(&a.out, &reports)?;
    let summary = aggregate(&reports)?;
    for s in &summary {
        println!(
            "{:8} n={:3}  err_f {:?}  err_sigma {:?}  mean_f {:.4}",
            s.method,
            s.count,
            s.mean_err_f
                .iter()
                .map(|v| format!("{v:.4}"))
                .collect::<Vec<_>>(),
            s.mean_err_sigma
                .iter()
                .map(|v| format!("{v:.4}"))
                .collect::<Vec<_>>(),
            s.mean_err_f_overall
        );
    }
    io::write_json_pretty(&a.out.with_extension("summary.json"), &summary)
}

/// Accepts plain fraction files and reconstruction reports.
fn read_field_fractions(path: &Path) -> Result<FractionMatrix> {
    match read_fractions(path) {
        Ok(f) => Ok(f),
        Err(Error::Format { .. }) => {
            let report: ReconstructionReport = io::read_json(path)?;
            FractionMatrix::from_rows(&report.fractions)
        }
        Err(e) => Err(e),
    }
}

fn render(a: &RenderArgs) -> Result<()> {
    if a.ppm.is_none() && a.csv.is_none() {
        return Err(Error::InvalidInput("give --ppm and/or --csv".into()));
    }
    let (mesh, _) = read_mesh(&a.problem.mesh)?;
    let f = read_field_fractions(&a.fractions)?;
    if f.num_elements() != mesh.num_triangles() {
        return Err(Error::DimensionMismatch(format!(
            "{} fraction rows for {} triangles",
            f.num_elements(),
            mesh.num_triangles()
        )));
    }
    let range = match a.range.as_deref() {
        Some([lo, hi]) if lo < hi => Some((*lo, *hi)),
        Some(_) => return Err(Error::InvalidInput("--range needs MIN < MAX".into())),
        None => None,
    };
    let (image, names, columns) = if a.field == "fractions" {
        let spectra = a.problem.spectra()?;
        let names = spectra
            .tissue_names
            .iter()
            .map(|n| format!("f_{n}"))
            .collect();
        let columns = (0..f.num_tissues())
            .map(|j| f.values().column(j).iter().copied().collect())
            .collect();
        (render_fractions(&mesh, &f, a.size)?, names, columns)
    } else if let Some(i) = a
        .field
        .strip_prefix("sigma")
        .and_then(|s| s.parse::<usize>().ok())
    {
        let sigma = fractions_to_conductivity(&f, &a.problem.spectra()?, i)?;
        let values: Vec<f64> = sigma.0.iter().copied().collect();
        (
            render_scalar(&mesh, &values, range, a.size)?,
            vec![format!("sigma{i}")],
            vec![values],
        )
    } else {
        return Err(Error::InvalidInput(format!(
            "unknown field {:?}; use fractions or sigma<i>",
            a.field
        )));
    };
    if let Some(p) = &a.ppm {
        image.write_ppm(p)?;
    }
    if let Some(p) = &a.csv {
        write_field_csv(p, &mesh, &names, &columns)?;
    }
    Ok(())
}
