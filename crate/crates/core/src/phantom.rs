//! Synthetic phantoms and datasets: random disk inclusions, rasterized to
//! per-triangle fractions, pushed through the forward map with Gaussian noise.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cem::{adjacent_patterns, MeasurementVector, DEFAULT_CURRENT_AMPLITUDE};
use crate::context::ForwardContext;
use crate::error::{Error, Result};
use crate::fraction::{write_spectra, FractionMatrix, SpectraSet};
use crate::io;
use crate::mesh::{build_disk_mesh, write_mesh, Mesh};

pub const MANIFEST_FORMAT: &str = "mfeit-dataset/1";
pub const SAMPLE_FORMAT: &str = "mfeit-sample/1";
/// Default relative noise level `δ`.
pub const DEFAULT_NOISE_LEVEL: f64 = 5e-3;
const MAX_ATTEMPTS: usize = 1000;
/// Inclusions stay within this fraction of the domain radius.
const ADMISSIBLE_RADIUS: f64 = 0.95;
const RADIUS_RANGE: (f64, f64) = (0.15, 0.35);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Overlap,
    NoOverlap,
}

impl Family {
    pub fn spectra(self) -> SpectraSet {
        match self {
            Family::Overlap => SpectraSet::overlap(),
            Family::NoOverlap => SpectraSet::no_overlap(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Overlap => "overlap",
            Family::NoOverlap => "no-overlap",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overlap" => Ok(Family::Overlap),
            "no-overlap" => Ok(Family::NoOverlap),
            other => Err(Error::InvalidInput(format!(
                "unknown family {other:?}; expected overlap or no-overlap"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inclusion {
    /// Tissue column, `1..T` (0 is the background).
    pub tissue: usize,
    pub center: [f64; 2],
    pub radius: f64,
}

impl Inclusion {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (p[0] - self.center[0]).hypot(p[1] - self.center[1]) <= self.radius
    }

    pub fn intersects(&self, other: &Inclusion) -> bool {
        let d = (self.center[0] - other.center[0]).hypot(self.center[1] - other.center[1]);
        d <= self.radius + other.radius
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub family: Family,
    pub domain_radius: f64,
    pub num_tissues: usize,
    pub inclusions: Vec<Inclusion>,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        for (k, inc) in self.inclusions.iter().enumerate() {
            if inc.tissue == 0 || inc.tissue >= self.num_tissues {
                return Err(Error::InvalidInput(format!(
                    "inclusion {k} has tissue {} outside 1..{}",
                    inc.tissue, self.num_tissues
                )));
            }
            let reach = inc.center[0].hypot(inc.center[1]) + inc.radius;
            if !(inc.radius > 0.0) || reach > ADMISSIBLE_RADIUS * self.domain_radius + 1e-12 {
                return Err(Error::InvalidInput(format!(
                    "inclusion {k} reaches radius {reach}, beyond {ADMISSIBLE_RADIUS}·R"
                )));
            }
        }
        if self.family == Family::NoOverlap {
            for (a, ia) in self.inclusions.iter().enumerate() {
                for ib in &self.inclusions[a + 1..] {
                    if ia.intersects(ib) {
                        return Err(Error::InvalidInput(
                            "no-overlap phantom has intersecting inclusions".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

fn draw_inclusions<R: Rng>(t: usize, domain_radius: f64, rng: &mut R) -> Vec<Inclusion> {
    let count = rng.random_range(2..=3);
    // Every non-background tissue appears before any repeats.
    let mut tissues: Vec<usize> = (1..t).collect();
    for i in (1..tissues.len()).rev() {
        tissues.swap(i, rng.random_range(0..=i));
    }
    (0..count)
        .map(|k| {
            let tissue = if k < tissues.len() {
                tissues[k]
            } else {
                rng.random_range(1..t)
            };
            let radius = domain_radius * rng.random_range(RADIUS_RANGE.0..=RADIUS_RANGE.1);
            let reach = ADMISSIBLE_RADIUS * domain_radius - radius;
            let rho = reach * rng.random::<f64>().sqrt();
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            Inclusion {
                tissue,
                center: [rho * theta.cos(), rho * theta.sin()],
                radius,
            }
        })
        .collect()
}

/// Draws 2 or 3 inclusions; the no-overlap family resamples until no two
/// disks touch.
pub fn sample_phantom<R: Rng>(
    family: Family,
    num_tissues: usize,
    domain_radius: f64,
    rng: &mut R,
) -> Result<PhantomSpec> {
    if !(3..=4).contains(&num_tissues) {
        return Err(Error::InvalidInput(format!(
            "T = {num_tissues}; phantoms support T ∈ {{3, 4}}"
        )));
    }
    for _ in 0..MAX_ATTEMPTS {
        let spec = PhantomSpec {
            family,
            domain_radius,
            num_tissues,
            inclusions: draw_inclusions(num_tissues, domain_radius, rng),
        };
        if spec.validate().is_ok() {
            return Ok(spec);
        }
    }
    Err(Error::SamplingExhausted(MAX_ATTEMPTS))
}

/// Centroids of the 16 congruent sub-triangles of a 4×4 subdivision, in barycentric coordinates.
fn subsample_points() -> Vec<[f64; 3]> {
    let m = 4.0;
    let mut pts = Vec::with_capacity(16);
    for i in 0..4 {
        for j in 0..4 - i {
            let (a, b) = (i as f64, j as f64);
            pts.push([
                (a + 1.0 / 3.0) / m,
                (b + 1.0 / 3.0) / m,
                (m - a - b - 2.0 / 3.0) / m,
            ]);
            if i + j < 3 {
                pts.push([
                    (a + 2.0 / 3.0) / m,
                    (b + 2.0 / 3.0) / m,
                    (m - a - b - 4.0 / 3.0) / m,
                ]);
            }
        }
    }
    pts
}

/// Background entry closing the row sum to one.
fn closing_background(others: &[f64]) -> f64 {
    (1.0 - others.iter().sum::<f64>()).max(0.0)
}

/// Per-triangle tissue fractions; overlap regions split their coverage
/// equally among the distinct tissues present.
pub fn rasterize_fractions(spec: &PhantomSpec, mesh: &Mesh) -> FractionMatrix {
    let t = spec.num_tissues;
    let pts = subsample_points();
    let mut values = DMatrix::zeros(mesh.num_triangles(), t);
    let mut covering = Vec::with_capacity(t);
    for (n, tri) in mesh.triangles.iter().enumerate() {
        let v = tri.map(|i| mesh.nodes[i]);
        // Coverage counted in units of 1/(16·lcm(1, 2, 3)) so the tally is exact.
        let mut units = vec![0u32; t];
        for b in &pts {
            let p = [
                b[0] * v[0][0] + b[1] * v[1][0] + b[2] * v[2][0],
                b[0] * v[0][1] + b[1] * v[1][1] + b[2] * v[2][1],
            ];
            covering.clear();
            for inc in spec.inclusions.iter().filter(|inc| inc.contains(p)) {
                if !covering.contains(&inc.tissue) {
                    covering.push(inc.tissue);
                }
            }
            for &j in &covering {
                units[j] += 6 / covering.len() as u32;
            }
        }
        let denom = (6 * pts.len()) as f64;
        let others: Vec<f64> = (1..t).map(|j| units[j] as f64 / denom).collect();
        values[(n, 0)] = closing_background(&others);
        for j in 1..t {
            values[(n, j)] = others[j - 1];
        }
    }
    FractionMatrix::new(values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSample {
    pub format: String,
    pub index: usize,
    pub seed: u64,
    pub stream: u64,
    pub delta: f64,
    pub phantom: PhantomSpec,
    /// `N × T`, one row per triangle.
    pub fractions: Vec<Vec<f64>>,
    pub k: usize,
    pub m: usize,
    pub y_clean: Vec<f64>,
    pub y: Vec<f64>,
}

impl DatasetSample {
    pub fn fraction_matrix(&self) -> Result<FractionMatrix> {
        FractionMatrix::from_rows(&self.fractions)
    }

    pub fn measurements(&self) -> MeasurementVector {
        MeasurementVector {
            values: DVector::from_vec(self.y.clone()),
            k: self.k,
            m: self.m,
        }
    }

    pub fn clean_measurements(&self) -> MeasurementVector {
        MeasurementVector {
            values: DVector::from_vec(self.y_clean.clone()),
            k: self.k,
            m: self.m,
        }
    }
}

/// `y = Φ(F†) + η`, `η ~ N(0, (δ·mean|Φ(F†)|)²)` i.i.d.
pub fn simulate_sample<R: Rng>(
    fractions: &FractionMatrix,
    ctx: &ForwardContext,
    delta: f64,
    rng: &mut R,
) -> Result<(MeasurementVector, MeasurementVector)> {
    if !(delta >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "noise level δ = {delta} must be ≥ 0"
        )));
    }
    let clean = ctx.phi(fractions)?;
    let mut noisy = clean.clone();
    let std = delta * clean.values.iter().map(|v| v.abs()).sum::<f64>() / clean.values.len() as f64;
    if std > 0.0 {
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidInput(e.to_string()))?;
        for v in noisy.values.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    Ok((clean, noisy))
}

/// `20 log10(‖ỹ‖ / ‖y - ỹ‖)`.
pub fn snr_db(clean: &DVector<f64>, noisy: &DVector<f64>) -> f64 {
    20.0 * (clean.norm() / (noisy - clean).norm()).log10()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stream_base(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1 << 32,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!(
                "unknown split {other:?}; expected train or test"
            ))),
        }
    }
}

/// Everything needed to regenerate a dataset bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub family: Family,
    pub split: Split,
    pub count: usize,
    pub seed: u64,
    pub delta: f64,
    pub mesh_radius: f64,
    pub target_vertices: usize,
    pub num_electrodes: usize,
    pub coverage: f64,
    pub current_amplitude: f64,
}

impl DatasetConfig {
    pub fn new(family: Family, split: Split, count: usize, seed: u64) -> Self {
        Self {
            family,
            split,
            count,
            seed,
            delta: DEFAULT_NOISE_LEVEL,
            mesh_radius: 1.0,
            target_vertices: 432,
            num_electrodes: 32,
            coverage: 0.5,
            current_amplitude: DEFAULT_CURRENT_AMPLITUDE,
        }
    }

    pub fn context(&self) -> Result<ForwardContext> {
        let (mesh, electrodes) = build_disk_mesh(
            self.mesh_radius,
            self.target_vertices,
            self.num_electrodes,
            self.coverage,
        )?;
        let patterns = adjacent_patterns(self.num_electrodes, self.current_amplitude)?;
        ForwardContext::new(mesh, electrodes, patterns, self.family.spectra())
    }

    /// RNG for sample `index`: the dataset seed with a split-dependent stream.
    pub fn sample_rng(&self, index: usize) -> (ChaCha8Rng, u64) {
        let stream = self.split.stream_base() + index as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        (rng, stream)
    }

    pub fn generate_sample(&self, ctx: &ForwardContext, index: usize) -> Result<DatasetSample> {
        let (mut rng, stream) = self.sample_rng(index);
        let phantom = sample_phantom(self.family, ctx.num_tissues(), self.mesh_radius, &mut rng)?;
        let f = rasterize_fractions(&phantom, &ctx.mesh);
        let (clean, noisy) = simulate_sample(&f, ctx, self.delta, &mut rng)?;
        Ok(DatasetSample {
            format: SAMPLE_FORMAT.into(),
            index,
            seed: self.seed,
            stream,
            delta: self.delta,
            phantom,
            fractions: f.rows(),
            k: clean.k,
            m: clean.m,
            y_clean: clean.values.as_slice().to_vec(),
            y: noisy.values.as_slice().to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: DatasetConfig,
    pub spectra_preset: String,
    pub mesh_file: String,
    pub spectra_file: String,
    pub samples: Vec<String>,
}

pub fn sample_file_name(index: usize) -> String {
    format!("sample_{index:04}.json")
}

/// Writes `manifest.json`, `mesh.json`, `spectra.json` and one file per sample.
pub fn generate_dataset(dir: &Path, config: &DatasetConfig) -> Result<Manifest> {
    if config.count == 0 {
        return Err(Error::InvalidInput(
            "dataset count must be at least 1".into(),
        ));
    }
    let ctx = config.context()?;
    write_mesh(&dir.join("mesh.json"), &ctx.mesh, &ctx.electrodes)?;
    write_spectra(&dir.join("spectra.json"), &ctx.spectra)?;
    let samples: Vec<String> = (0..config.count)
        .into_par_iter()
        .map(|i| {
            let sample = config.generate_sample(&ctx, i)?;
            let name = sample_file_name(i);
            io::write_json(&dir.join(&name), &sample)?;
            Ok(name)
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        config: config.clone(),
        spectra_preset: config.family.name().into(),
        mesh_file: "mesh.json".into(),
        spectra_file: "spectra.json".into(),
        samples,
    };
    io::write_json_pretty(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let manifest: Manifest = io::read_json(&dir.join("manifest.json"))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Format {
            path: dir.join("manifest.json"),
            message: format!("unsupported manifest format {:?}", manifest.format),
        });
    }
    Ok(manifest)
}

pub fn read_sample(path: &Path) -> Result<DatasetSample> {
    let sample: DatasetSample = io::read_json(path)?;
    if sample.format != SAMPLE_FORMAT {
        return Err(Error::Format {
            path: path.into(),
            message: format!("unsupported sample format {:?}", sample.format),
        });
    }
    if sample.y.len() != sample.k * sample.m || sample.y_clean.len() != sample.y.len() {
        return Err(Error::Format {
            path: path.into(),
            message: "measurement length does not match K·M".into(),
        });
    }
    sample.fraction_matrix()?;
    Ok(sample)
}

/// Loads a dataset directory: context rebuilt from the manifest, samples in order.
pub fn load_dataset(
    dir: &Path,
) -> Result<(Manifest, ForwardContext, Vec<(PathBuf, DatasetSample)>)> {
    let manifest = read_manifest(dir)?;
    let ctx = manifest.config.context()?;
    let samples = manifest
        .samples
        .iter()
        .map(|name| {
            let path = dir.join(name);
            read_sample(&path).map(|s| (path, s))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, ctx, samples))
}
