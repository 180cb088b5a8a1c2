//! Tissue fractions, tissue spectra and the fraction-to-conductivity map.
//!
//! A [`FractionMatrix`] is `N × T` (triangles by tissues). Its vectorized
//! form stacks the tissue columns: `F = [f_1; f_2; …; f_T]`, index `j·N + n`,
//! which is exactly nalgebra's column-major storage.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

/// Γ-membership tolerance applied to fractions read from outside.
pub const GAMMA_INPUT_TOLERANCE: f64 = 1e-8;

pub const FRACTIONS_FORMAT: &str = "mfeit-fractions/1";

#[derive(Debug, Clone, PartialEq)]
pub struct FractionMatrix {
    values: DMatrix<f64>,
}

/// Outcome of a Γ-membership check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaReport {
    /// Largest `max(0, -f_nj)`.
    pub max_negativity: f64,
    /// Largest `|Σ_j f_nj - 1|`.
    pub max_row_sum_deviation: f64,
    pub passed: bool,
}

impl FractionMatrix {
    pub fn new(values: DMatrix<f64>) -> Self {
        Self { values }
    }

    /// Wraps `values` after checking Γ-membership at `tol`.
    pub fn new_in_gamma(values: DMatrix<f64>, tol: f64) -> Result<Self> {
        let f = Self { values };
        let report = f.validate_gamma(tol);
        if !report.passed {
            return Err(Error::Domain(format!(
                "fractions outside Γ: negativity {:e}, row-sum deviation {:e}",
                report.max_negativity, report.max_row_sum_deviation
            )));
        }
        Ok(f)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let t = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != t) {
            return Err(Error::DimensionMismatch("ragged fraction rows".into()));
        }
        Ok(Self {
            values: DMatrix::from_fn(n, t, |i, j| rows[i][j]),
        })
    }

    /// Every element pure background (tissue 0).
    pub fn background(n: usize, t: usize) -> Self {
        let mut values = DMatrix::zeros(n, t);
        values.column_mut(0).fill(1.0);
        Self { values }
    }

    pub fn uniform(n: usize, t: usize) -> Self {
        Self {
            values: DMatrix::from_element(n, t, 1.0 / t as f64),
        }
    }

    pub fn from_vectorized(n: usize, t: usize, v: &[f64]) -> Result<Self> {
        if v.len() != n * t {
            return Err(Error::DimensionMismatch(format!(
                "vectorized fractions of length {} for {n}×{t}",
                v.len()
            )));
        }
        Ok(Self {
            values: DMatrix::from_column_slice(n, t, v),
        })
    }

    pub fn num_elements(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_tissues(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice()
    }

    pub fn vectorized(&self) -> DVector<f64> {
        DVector::from_column_slice(self.values.as_slice())
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect()
    }

    pub fn validate_gamma(&self, tol: f64) -> GammaReport {
        validate_gamma(self, tol)
    }

    pub fn min_entry(&self) -> f64 {
        self.values.min()
    }
}

pub fn validate_gamma(f: &FractionMatrix, tol: f64) -> GammaReport {
    let mut max_negativity: f64 = 0.0;
    let mut max_row_sum_deviation: f64 = 0.0;
    let mut finite = true;
    for row in f.values.row_iter() {
        let mut sum = 0.0;
        for &x in row.iter() {
            finite &= x.is_finite();
            max_negativity = max_negativity.max(-x);
            sum += x;
        }
        max_row_sum_deviation = max_row_sum_deviation.max((sum - 1.0).abs());
    }
    GammaReport {
        max_negativity,
        max_row_sum_deviation,
        passed: finite && max_negativity <= tol && max_row_sum_deviation <= tol,
    }
}

/// Row-wise softmax; the result lies in Γ.
pub fn row_softmax(x: &DMatrix<f64>) -> Result<FractionMatrix> {
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("NaN in softmax input".into()));
    }
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        let max = row.max();
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row /= sum;
    }
    Ok(FractionMatrix::new(out))
}

/// Known tissue spectra: `eps0` at the reference frequency and `E` (T × M)
/// at the working frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectraSet {
    /// `ω_0, ω_1, …, ω_M` in Hz (labels only).
    pub frequencies: Vec<f64>,
    pub eps0: DVector<f64>,
    pub e: DMatrix<f64>,
    pub tissue_names: Vec<String>,
}

impl SpectraSet {
    pub fn new(
        frequencies: Vec<f64>,
        eps0: DVector<f64>,
        e: DMatrix<f64>,
        tissue_names: Vec<String>,
    ) -> Result<Self> {
        let s = Self {
            frequencies,
            eps0,
            e,
            tissue_names,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let (t, m) = self.e.shape();
        if t < 2 || m < 1 {
            return Err(Error::InvalidInput(format!(
                "spectra need T ≥ 2 and M ≥ 1, got {t}×{m}"
            )));
        }
        if self.eps0.len() != t || self.tissue_names.len() != t {
            return Err(Error::DimensionMismatch(format!(
                "eps0 has {} entries and {} names for {t} tissues",
                self.eps0.len(),
                self.tissue_names.len()
            )));
        }
        if self.frequencies.len() != m + 1 {
            return Err(Error::DimensionMismatch(format!(
                "{} frequencies listed for M = {m}",
                self.frequencies.len()
            )));
        }
        if self.e.iter().chain(self.eps0.iter()).any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidInput(
                "spectra entries must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn num_tissues(&self) -> usize {
        self.e.nrows()
    }

    /// Working frequency count `M` (reference excluded).
    pub fn num_frequencies(&self) -> usize {
        self.e.ncols()
    }

    /// Conductivity of tissue `j` at frequency index `i` (0 = reference).
    pub fn eps(&self, j: usize, i: usize) -> f64 {
        if i == 0 {
            self.eps0[j]
        } else {
            self.e[(j, i - 1)]
        }
    }

    pub fn column(&self, i: usize) -> DVector<f64> {
        if i == 0 {
            self.eps0.clone()
        } else {
            self.e.column(i - 1).into_owned()
        }
    }

    /// Saline / carrot / cucumber at 1, 5 and 50 kHz.
    pub fn overlap() -> Self {
        Self {
            frequencies: vec![1e3, 5e3, 50e3],
            eps0: DVector::from_vec(vec![0.13, 0.034, 0.048]),
            e: DMatrix::from_row_slice(3, 2, &[0.13, 0.13, 0.043, 0.150, 0.066, 0.181]),
            tissue_names: vec!["saline".into(), "carrot".into(), "cucumber".into()],
        }
    }

    /// Saline / carrot / cucumber / potato at 1, 100 and 1000 kHz.
    pub fn no_overlap() -> Self {
        Self {
            frequencies: vec![1e3, 100e3, 1000e3],
            eps0: DVector::from_vec(vec![0.13, 0.100, 0.023, 0.008]),
            e: DMatrix::from_row_slice(
                4,
                2,
                &[0.13, 0.13, 0.175, 0.310, 0.250, 0.405, 0.130, 0.230],
            ),
            tissue_names: vec![
                "saline".into(),
                "carrot".into(),
                "cucumber".into(),
                "potato".into(),
            ],
        }
    }
}

/// Per-triangle conductivity at one frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct ConductivityField(pub DVector<f64>);

impl ConductivityField {
    pub fn uniform(n: usize, value: f64) -> Self {
        Self(DVector::from_element(n, value))
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `σ_n = Σ_j f_nj ε_{j,i}`; `freq_index` 0 selects the reference column.
pub fn fractions_to_conductivity(
    f: &FractionMatrix,
    spectra: &SpectraSet,
    freq_index: usize,
) -> Result<ConductivityField> {
    if f.num_tissues() != spectra.num_tissues() {
        return Err(Error::DimensionMismatch(format!(
            "{} fraction columns for {} tissue spectra",
            f.num_tissues(),
            spectra.num_tissues()
        )));
    }
    if freq_index > spectra.num_frequencies() {
        return Err(Error::InvalidInput(format!(
            "frequency index {freq_index} beyond M = {}",
            spectra.num_frequencies()
        )));
    }
    Ok(ConductivityField(&f.values * spectra.column(freq_index)))
}

#[derive(Debug, Serialize, Deserialize)]
struct SpectraFile {
    frequencies: Vec<f64>,
    eps0: Vec<f64>,
    #[serde(rename = "E")]
    e: Vec<Vec<f64>>,
    tissue_names: Vec<String>,
}

pub fn write_spectra(path: &Path, s: &SpectraSet) -> Result<()> {
    let file = SpectraFile {
        frequencies: s.frequencies.clone(),
        eps0: s.eps0.iter().copied().collect(),
        e: s.e
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect(),
        tissue_names: s.tissue_names.clone(),
    };
    io::write_json_pretty(path, &file)
}

pub fn read_spectra(path: &Path) -> Result<SpectraSet> {
    let file: SpectraFile = io::read_json(path)?;
    let t = file.e.len();
    let m = file.e.first().map_or(0, Vec::len);
    if file.e.iter().any(|r| r.len() != m) {
        return Err(Error::Format {
            path: path.into(),
            message: "ragged E matrix".into(),
        });
    }
    let e = DMatrix::from_fn(t, m, |j, i| file.e[j][i]);
    SpectraSet::new(
        file.frequencies,
        DVector::from_vec(file.eps0),
        e,
        file.tissue_names,
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct FractionFile {
    format: String,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "T")]
    t: usize,
    fractions: Vec<Vec<f64>>,
}

pub fn write_fractions(path: &Path, f: &FractionMatrix) -> Result<()> {
    let file = FractionFile {
        format: FRACTIONS_FORMAT.into(),
        n: f.num_elements(),
        t: f.num_tissues(),
        fractions: f.rows(),
    };
    io::write_json(path, &file)
}

/// Reads a fraction field; it must lie in Γ within [`GAMMA_INPUT_TOLERANCE`].
pub fn read_fractions(path: &Path) -> Result<FractionMatrix> {
    let file: FractionFile = io::read_json(path)?;
    if file.fractions.len() != file.n || file.fractions.iter().any(|r| r.len() != file.t) {
        return Err(Error::Format {
            path: path.into(),
            message: format!("fractions do not match declared {}×{}", file.n, file.t),
        });
    }
    let f = FractionMatrix::from_rows(&file.fractions)?;
    let report = f.validate_gamma(GAMMA_INPUT_TOLERANCE);
    if !report.passed {
        return Err(Error::Format {
            path: path.into(),
            message: format!(
                "fractions outside Γ (negativity {:e}, row-sum deviation {:e})",
                report.max_negativity, report.max_row_sum_deviation
            ),
        });
    }
    Ok(f)
}
