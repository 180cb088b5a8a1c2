//! Reconstruction errors: area-weighted relative L2 distances per frequency
//! (conductivity) and per tissue (fractions), and dataset means.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fraction::{fractions_to_conductivity, ConductivityField, FractionMatrix, SpectraSet};

fn weighted_norm(v: impl Iterator<Item = f64>, areas: &[f64]) -> f64 {
    v.zip(areas).map(|(x, a)| a * x * x).sum::<f64>().sqrt()
}

/// `‖σ_rec - σ_gt‖_{L²} / ‖σ_gt‖_{L²}` with per-triangle area weights.
pub fn err_sigma(rec: &ConductivityField, gt: &ConductivityField, areas: &[f64]) -> Result<f64> {
    if rec.len() != gt.len() || gt.len() != areas.len() {
        return Err(Error::DimensionMismatch(format!(
            "fields of length {} and {} with {} areas",
            rec.len(),
            gt.len(),
            areas.len()
        )));
    }
    let denom = weighted_norm(gt.0.iter().copied(), areas);
    if denom == 0.0 {
        return Err(Error::InvalidInput(
            "ground-truth conductivity has zero norm".into(),
        ));
    }
    Ok(weighted_norm(rec.0.iter().zip(gt.0.iter()).map(|(a, b)| a - b), areas) / denom)
}

/// Relative area-weighted L2 error of column `j`; absolute when the
/// ground-truth column vanishes.
pub fn err_fraction(
    rec: &FractionMatrix,
    gt: &FractionMatrix,
    areas: &[f64],
    j: usize,
) -> Result<f64> {
    if rec.values().shape() != gt.values().shape() || gt.num_elements() != areas.len() {
        return Err(Error::DimensionMismatch(format!(
            "fractions {:?} vs {:?} with {} areas",
            rec.values().shape(),
            gt.values().shape(),
            areas.len()
        )));
    }
    if j >= gt.num_tissues() {
        return Err(Error::InvalidInput(format!("tissue {j} out of range")));
    }
    let (r, g) = (rec.values().column(j), gt.values().column(j));
    let num = weighted_norm(r.iter().zip(g.iter()).map(|(a, b)| a - b), areas);
    let denom = weighted_norm(g.iter().copied(), areas);
    Ok(if denom == 0.0 { num } else { num / denom })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub sample: String,
    pub method: String,
    /// One entry per working frequency `ω_1..ω_M`.
    pub err_sigma: Vec<f64>,
    /// One entry per tissue.
    pub err_f: Vec<f64>,
}

pub fn evaluate(
    sample: &str,
    method: &str,
    rec: &FractionMatrix,
    gt: &FractionMatrix,
    spectra: &SpectraSet,
    areas: &[f64],
) -> Result<ErrorReport> {
    let err_f = (0..gt.num_tissues())
        .map(|j| err_fraction(rec, gt, areas, j))
        .collect::<Result<_>>()?;
    let err_sigma = (1..=spectra.num_frequencies())
        .map(|i| {
            err_sigma(
                &fractions_to_conductivity(rec, spectra, i)?,
                &fractions_to_conductivity(gt, spectra, i)?,
                areas,
            )
        })
        .collect::<Result<_>>()?;
    Ok(ErrorReport {
        sample: sample.into(),
        method: method.into(),
        err_sigma,
        err_f,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub count: usize,
    pub mean_err_sigma: Vec<f64>,
    pub mean_err_f: Vec<f64>,
    /// Mean over tissues of the per-tissue means.
    pub mean_err_f_overall: f64,
}

fn column_means(rows: impl Iterator<Item = Vec<f64>>) -> Vec<f64> {
    let mut sum: Vec<f64> = Vec::new();
    let mut count = 0;
    for row in rows {
        if sum.is_empty() {
            sum = vec![0.0; row.len()];
        }
        for (s, v) in sum.iter_mut().zip(&row) {
            *s += v;
        }
        count += 1;
    }
    sum.iter().map(|s| s / count as f64).collect()
}

/// Means of the reports of each method, in order of first appearance.
pub fn aggregate(reports: &[ErrorReport]) -> Result<Vec<Aggregate>> {
    if reports.is_empty() {
        return Err(Error::InvalidInput("no error reports to aggregate".into()));
    }
    let mut methods: Vec<&str> = Vec::new();
    for r in reports {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    methods
        .into_iter()
        .map(|method| {
            let group: Vec<&ErrorReport> = reports.iter().filter(|r| r.method == method).collect();
            let (nf, ns) = (group[0].err_f.len(), group[0].err_sigma.len());
            if group
                .iter()
                .any(|r| r.err_f.len() != nf || r.err_sigma.len() != ns)
            {
                return Err(Error::DimensionMismatch(format!(
                    "reports of {method} differ in length"
                )));
            }
            let mean_err_f = column_means(group.iter().map(|r| r.err_f.clone()));
            Ok(Aggregate {
                method: method.into(),
                count: group.len(),
                mean_err_sigma: column_means(group.iter().map(|r| r.err_sigma.clone())),
                mean_err_f_overall: mean_err_f.iter().sum::<f64>() / nf as f64,
                mean_err_f,
            })
        })
        .collect()
}

/// One row per report: `sample, method, err_f_1.., err_sigma_1..`.
pub fn write_reports_csv(path: &Path, reports: &[ErrorReport]) -> Result<()> {
    let (nf, ns) = reports
        .first()
        .map_or((0, 0), |r| (r.err_f.len(), r.err_sigma.len()));
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["sample".to_string(), "method".to_string()];
    header.extend((1..=nf).map(|j| format!("err_f{j}")));
    header.extend((1..=ns).map(|i| format!("err_sigma{i}")));
    let csv_err = |e: csv::Error| Error::Format {
        path: path.into(),
        message: e.to_string(),
    };
    w.write_record(&header).map_err(csv_err)?;
    for r in reports {
        let mut row = vec![r.sample.clone(), r.method.clone()];
        row.extend(
            r.err_f
                .iter()
                .chain(&r.err_sigma)
                .map(|v| format!("{v:.6e}")),
        );
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format {
        path: path.into(),
        message: e.to_string(),
    })?;
    crate::io::write_atomic(path, &bytes)
}

pub fn read_reports_csv(path: &Path) -> Result<Vec<ErrorReport>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format {
        path: path.into(),
        message: e.to_string(),
    })?;
    let bad = |m: String| Error::Format {
        path: path.into(),
        message: m,
    };
    let headers = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    let nf = headers.iter().filter(|h| h.starts_with("err_f")).count();
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let nums = rec
            .iter()
            .skip(2)
            .map(|v| v.parse::<f64>().map_err(|e| bad(format!("{v:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(ErrorReport {
            sample: rec[0].to_string(),
            method: rec[1].to_string(),
            err_f: nums[..nf].to_vec(),
            err_sigma: nums[nf..].to_vec(),
        });
    }
    Ok(out)
}
