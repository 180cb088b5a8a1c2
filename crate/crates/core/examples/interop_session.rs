//! Drives the C ABI from Rust the way a foreign caller would: open a
//! session from files, take one physics step, map fields between triangles
//! and nodes, release.
//!
//! `cargo run --example interop_session`

use std::ffi::CString;

use mfeit::cem::{write_measurements, MeasurementFile};
use mfeit::fest::{fest_estimate, FestConfig};
use mfeit::fraction::{write_fractions, write_spectra, FractionMatrix};
use mfeit::interop::*;
use mfeit::mesh::write_mesh;
use mfeit::phantom::{DatasetConfig, Family, Split};

fn cstr(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0u8; 512];
    let n = unsafe { mfeit_last_error(buf.as_mut_ptr().cast(), buf.len()) };
    String::from_utf8_lossy(&buf[..n.min(buf.len() - 1)]).into_owned()
}

fn main() -> mfeit::Result<()> {
    let dir = std::env::temp_dir().join("mfeit_interop");
    std::fs::create_dir_all(&dir).map_err(|e| mfeit::Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let data = DatasetConfig::new(Family::Overlap, Split::Test, 1, 7);
    let ctx = data.context()?;
    let sample = data.generate_sample(&ctx, 0)?;
    let y = sample.measurements();
    let f_hat = fest_estimate(&ctx, &y, &FestConfig::default())?;
    let paths = ["mesh.json", "spectra.json", "y.json", "reference.json"].map(|n| dir.join(n));
    write_mesh(&paths[0], &ctx.mesh, &ctx.electrodes)?;
    write_spectra(&paths[1], &ctx.spectra)?;
    write_measurements(&paths[2], &MeasurementFile::new(&y, &ctx.patterns))?;
    write_fractions(&paths[3], &f_hat)?;
    let [mesh, spectra, meas, reference] = paths.map(|p| cstr(&p));

    let mut handle = 0u64;
    let code = unsafe {
        mfeit_open_session(
            mesh.as_ptr(),
            spectra.as_ptr(),
            meas.as_ptr(),
            1e-9,
            0.3,
            reference.as_ptr(),
            &mut handle,
        )
    };
    assert_eq!(code, MFEIT_OK, "{}", last_error());
    let (mut n, mut nodes, mut t) = (0usize, 0usize, 0usize);
    unsafe { mfeit_session_dims(handle, &mut n, &mut nodes, &mut t) };
    println!("session {handle}: {n} triangles, {nodes} nodes, {t} tissues");

    // Row-major N × T input; the step returns z, not yet projected onto Γ.
    let f: Vec<f64> = FractionMatrix::uniform(n, t).rows().concat();
    let mut z = vec![0.0; n * t];
    let code = unsafe { mfeit_physics_step(handle, f.as_ptr(), f.len(), z.as_mut_ptr(), z.len()) };
    assert_eq!(code, MFEIT_OK, "{}", last_error());
    let row_sums: Vec<f64> = z.chunks(t).map(|r| r.iter().sum()).collect();
    println!(
        "physics step: z range {:.3} .. {:.3}, row sums {:.3} .. {:.3}",
        z.iter().cloned().fold(f64::INFINITY, f64::min),
        z.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        row_sums.iter().cloned().fold(f64::INFINITY, f64::min),
        row_sums.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    );

    let background: Vec<f64> = z.chunks(t).map(|r| r[0]).collect();
    let mut on_nodes = vec![0.0; nodes];
    let mut back = vec![0.0; n];
    unsafe {
        mfeit_tri_to_node(handle, background.as_ptr(), n, on_nodes.as_mut_ptr(), nodes);
        mfeit_node_to_tri(handle, on_nodes.as_ptr(), nodes, back.as_mut_ptr(), n);
    }
    let drift = background
        .iter()
        .zip(&back)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("triangle → node → triangle: max change {drift:.3e} (smoothing)");

    let bad = unsafe { mfeit_physics_step(handle, f.as_ptr(), 3, z.as_mut_ptr(), z.len()) };
    println!("wrong length → code {bad}: {}", last_error());
    assert_eq!(mfeit_release_session(handle), MFEIT_OK);
    assert_eq!(mfeit_release_session(handle), MFEIT_INVALID_HANDLE);
    Ok(())
}
