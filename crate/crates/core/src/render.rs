//! Flat-shaded raster images of per-triangle fields as binary PPM, plus CSV
//! export of the raw values.
//!
//! Scalar fields use a blue-white-red ramp: `min` maps to blue, the midpoint
//! to white, `max` to red, values outside are clamped. Fraction fields blend
//! one fixed color per tissue with the fractions as weights.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fraction::FractionMatrix;
use crate::mesh::Mesh;

pub type Rgb = [u8; 3];

/// Pixels outside the mesh.
pub const OUTSIDE: Rgb = [255, 255, 255];

/// Background, then tissues 2, 3, 4.
pub const TISSUE_COLORS: [Rgb; 4] = [
    [215, 215, 215],
    [235, 125, 20],
    [40, 160, 70],
    [120, 80, 180],
];

const RAMP: [Rgb; 3] = [[40, 70, 200], [250, 250, 250], [200, 40, 40]];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major, top row first.
    pub pixels: Vec<Rgb>,
}

impl Image {
    pub fn pixel(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(self.pixels.len() * 3);
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_ppm())
    }
}

fn lerp(a: Rgb, b: Rgb, t: f64) -> Rgb {
    std::array::from_fn(|c| (a[c] as f64 + (b[c] as f64 - a[c] as f64) * t).round() as u8)
}

/// Ramp color of `v` for the range `[min, max]`.
pub fn ramp_color(v: f64, min: f64, max: f64) -> Rgb {
    if !(max > min) {
        return RAMP[1];
    }
    let s = ((v - min) / (max - min)).clamp(0.0, 1.0) * 2.0;
    if s <= 1.0 {
        lerp(RAMP[0], RAMP[1], s)
    } else {
        lerp(RAMP[1], RAMP[2], s - 1.0)
    }
}

pub fn fraction_color(row: &[f64]) -> Rgb {
    std::array::from_fn(|c| {
        let v: f64 = row
            .iter()
            .zip(TISSUE_COLORS.iter())
            .map(|(f, col)| f * col[c] as f64)
            .sum();
        v.round().clamp(0.0, 255.0) as u8
    })
}

/// Fills every triangle with its color on a `size × size` grid covering the
/// bounding square of the mesh. A pixel belongs to the first triangle (in
/// index order) whose closed interior contains its center.
pub fn rasterize(mesh: &Mesh, colors: &[Rgb], size: usize) -> Result<Image> {
    if colors.len() != mesh.num_triangles() {
        return Err(Error::DimensionMismatch(format!(
            "{} colors for {} triangles",
            colors.len(),
            mesh.num_triangles()
        )));
    }
    if size == 0 {
        return Err(Error::InvalidInput("image size must be positive".into()));
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &mesh.nodes {
        for c in 0..2 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let scale = extent / size as f64;
    let center = |i: usize, c: usize| lo[c] + (i as f64 + 0.5) * scale;
    let mut pixels = vec![OUTSIDE; size * size];
    let mut filled = vec![false; size * size];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let v = tri.map(|i| mesh.nodes[i]);
        let (bx0, bx1) = (
            v.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min),
            v.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max),
        );
        let (by0, by1) = (
            v.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min),
            v.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max),
        );
        let to_index = |x: f64, l: f64| ((x - l) / scale - 0.5).floor().max(0.0) as usize;
        let (i0, i1) = (
            to_index(bx0, lo[0]),
            (to_index(bx1, lo[0]) + 1).min(size - 1),
        );
        let (j0, j1) = (
            to_index(by0, lo[1]),
            (to_index(by1, lo[1]) + 1).min(size - 1),
        );
        let det =
            (v[1][0] - v[0][0]) * (v[2][1] - v[0][1]) - (v[2][0] - v[0][0]) * (v[1][1] - v[0][1]);
        for j in j0..=j1 {
            for i in i0..=i1 {
                // Image rows run top to bottom, y upward.
                let k = (size - 1 - j) * size + i;
                if filled[k] {
                    continue;
                }
                let p = [center(i, 0), center(j, 1)];
                let l1 = ((v[1][0] - p[0]) * (v[2][1] - p[1])
                    - (v[2][0] - p[0]) * (v[1][1] - p[1]))
                    / det;
                let l2 = ((v[2][0] - p[0]) * (v[0][1] - p[1])
                    - (v[0][0] - p[0]) * (v[2][1] - p[1]))
                    / det;
                let l3 = 1.0 - l1 - l2;
                if l1 >= 0.0 && l2 >= 0.0 && l3 >= 0.0 {
                    pixels[k] = colors[t];
                    filled[k] = true;
                }
            }
        }
    }
    Ok(Image {
        width: size,
        height: size,
        pixels,
    })
}

/// `range` defaults to the field's own min and max.
pub fn render_scalar(
    mesh: &Mesh,
    values: &[f64],
    range: Option<(f64, f64)>,
    size: usize,
) -> Result<Image> {
    let (min, max) = range.unwrap_or_else(|| {
        values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
                (a.min(*v), b.max(*v))
            })
    });
    let colors: Vec<Rgb> = values.iter().map(|v| ramp_color(*v, min, max)).collect();
    rasterize(mesh, &colors, size)
}

pub fn render_fractions(mesh: &Mesh, f: &FractionMatrix, size: usize) -> Result<Image> {
    if f.num_tissues() > TISSUE_COLORS.len() {
        return Err(Error::InvalidInput(format!(
            "{} tissues; at most {} can be colored",
            f.num_tissues(),
            TISSUE_COLORS.len()
        )));
    }
    let colors: Vec<Rgb> = f.rows().iter().map(|r| fraction_color(r)).collect();
    rasterize(mesh, &colors, size)
}

/// `triangle, cx, cy, <names...>` with one value column per name.
pub fn write_field_csv(
    path: &Path,
    mesh: &Mesh,
    names: &[String],
    columns: &[Vec<f64>],
) -> Result<()> {
    if names.len() != columns.len() || columns.iter().any(|c| c.len() != mesh.num_triangles()) {
        return Err(Error::DimensionMismatch(format!(
            "{} names and {} columns for {} triangles",
            names.len(),
            columns.len(),
            mesh.num_triangles()
        )));
    }
    let csv_err = |e: csv::Error| Error::Format {
        path: path.into(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["triangle".to_string(), "cx".into(), "cy".into()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for t in 0..mesh.num_triangles() {
        let c = mesh.centroid(t);
        let mut row = vec![
            t.to_string(),
            format!("{:.17e}", c[0]),
            format!("{:.17e}", c[1]),
        ];
        row.extend(columns.iter().map(|col| format!("{:.17e}", col[t])));
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format {
        path: path.into(),
        message: e.to_string(),
    })?;
    crate::io::write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_disk_mesh;

    fn mesh() -> Mesh {
        build_disk_mesh(1.0, 432, 32, 0.5).unwrap().0
    }

    #[test]
    fn ramp_endpoints() {
        assert_eq!(ramp_color(0.0, 0.0, 1.0), RAMP[0]);
        assert_eq!(ramp_color(0.5, 0.0, 1.0), RAMP[1]);
        assert_eq!(ramp_color(1.0, 0.0, 1.0), RAMP[2]);
        assert_eq!(ramp_color(7.0, 0.0, 1.0), RAMP[2]);
        assert_eq!(ramp_color(3.0, 2.0, 2.0), RAMP[1]);
    }

    #[test]
    fn pure_rows_get_tissue_colors() {
        assert_eq!(fraction_color(&[1.0, 0.0, 0.0]), TISSUE_COLORS[0]);
        assert_eq!(fraction_color(&[0.0, 0.0, 1.0]), TISSUE_COLORS[2]);
        assert_eq!(fraction_color(&[0.5, 0.5]), [225, 170, 118]);
    }

    #[test]
    fn constant_field_fills_the_disk() {
        let m = mesh();
        let img = render_scalar(&m, &vec![0.13; m.num_triangles()], None, 64).unwrap();
        assert_eq!(img.pixel(32, 32), RAMP[1]);
        assert_eq!(img.pixel(0, 0), OUTSIDE);
        let inside = img.pixels.iter().filter(|p| **p != OUTSIDE).count() as f64;
        let disk = std::f64::consts::PI / 4.0 * 64.0 * 64.0;
        assert!((inside - disk).abs() / disk < 0.03);
    }

    #[test]
    fn centroid_pixels_take_their_triangle_color() {
        let m = build_disk_mesh(1.0, 60, 8, 0.5).unwrap().0;
        let n = m.num_triangles();
        let values: Vec<f64> = (0..n).map(|t| t as f64).collect();
        let size = 400;
        let img = render_scalar(&m, &values, None, size).unwrap();
        let scale = 2.0 / size as f64;
        for t in 0..n {
            let c = m.centroid(t);
            let i = ((c[0] + 1.0) / scale) as usize;
            let j = ((c[1] + 1.0) / scale) as usize;
            assert_eq!(
                img.pixel(i, size - 1 - j),
                ramp_color(t as f64, 0.0, (n - 1) as f64),
                "triangle {t}"
            );
        }
    }

    #[test]
    fn ppm_is_deterministic() {
        let m = mesh();
        let f = FractionMatrix::uniform(m.num_triangles(), 3);
        let a = render_fractions(&m, &f, 48).unwrap().to_ppm();
        let b = render_fractions(&m, &f, 48).unwrap().to_ppm();
        assert_eq!(a, b);
        assert!(a.starts_with(b"P6\n48 48\n255\n"));
        assert_eq!(a.len(), "P6\n48 48\n255\n".len() + 48 * 48 * 3);
    }

    #[test]
    fn csv_has_one_row_per_triangle() {
        let m = build_disk_mesh(1.0, 60, 8, 0.5).unwrap().0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.csv");
        let col: Vec<f64> = (0..m.num_triangles()).map(|t| t as f64 * 0.1).collect();
        write_field_csv(&path, &m, &["sigma1".into()], &[col]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), m.num_triangles() + 1);
        assert!(text.starts_with("triangle,cx,cy,sigma1\n0,"));
        assert!(write_field_csv(&path, &m, &["a".into()], &[vec![1.0]]).is_err());
    }
}
