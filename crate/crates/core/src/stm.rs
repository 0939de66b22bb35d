//! Axial resampling of B-scans by per-B-scan displacements.
//!
//! Output row `r` of B-scan `b` samples the input at `r + d_b` with linear
//! interpolation between the two neighbouring rows, so positive `d_b` moves
//! image content toward smaller row indices and a surface at row `s` ends up
//! at `s - d_b`. Samples falling outside the column replicate the nearest
//! edge row.

use rayon::prelude::*;

use crate::error::{OctError, Result};
use crate::volume::OctVolume;

/// Linear interpolation of `column` at the 0-based real position `pos`,
/// clamped to the first/last sample.
#[inline]
pub fn sample_linear(column: &[f64], pos: f64) -> f64 {
    let last = column.len() - 1;
    if pos <= 0.0 {
        return column[0];
    }
    if pos >= last as f64 {
        return column[last];
    }
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    (1.0 - f) * column[i] + f * column[i + 1]
}

/// Derivative of [`sample_linear`] with respect to `pos`. At integer
/// positions the right-hand slope is returned; zero in the clamped range.
#[inline]
pub fn sample_linear_slope(column: &[f64], pos: f64) -> f64 {
    let last = column.len() - 1;
    if pos < 0.0 || pos >= last as f64 {
        return 0.0;
    }
    let i = pos.floor() as usize;
    column[i + 1] - column[i]
}

/// Resamples one column: `out[r] = column(r + shift)`.
#[inline]
pub fn resample_column(column: &[f64], shift: f64, out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        *o = sample_linear(column, r as f64 + shift);
    }
}

/// Resamples one B-scan image (`n_a` columns of `n_r` rows, column-major)
/// by a single axial shift.
pub fn resample_bscan(bscan: &[f64], n_r: usize, shift: f64) -> Vec<f64> {
    let mut out = vec![0.0; bscan.len()];
    resample_bscan_into(bscan, n_r, shift, &mut out);
    out
}

pub fn resample_bscan_into(bscan: &[f64], n_r: usize, shift: f64, out: &mut [f64]) {
    for (src, dst) in bscan.chunks_exact(n_r).zip(out.chunks_exact_mut(n_r)) {
        resample_column(src, shift, dst);
    }
}

/// Resamples a raw `n_b × n_a × n_r` grid (any feature map) by per-B-scan
/// axial shifts.
pub fn resample_grid(data: &[f64], n_b: usize, n_r: usize, d: &[f64]) -> Result<Vec<f64>> {
    if d.len() != n_b {
        return Err(OctError::Dimension(format!(
            "{} displacements for {} B-scans",
            d.len(),
            n_b
        )));
    }
    if n_b == 0 || n_r == 0 || !data.len().is_multiple_of(n_b * n_r) {
        return Err(OctError::Dimension(format!(
            "grid of {} samples is not divisible into {n_b} B-scans of {n_r}-row columns",
            data.len()
        )));
    }
    if let Some(b) = d.iter().position(|v| !v.is_finite()) {
        return Err(OctError::OutOfRange(format!("non-finite displacement at b={b}")));
    }
    let per_bscan = data.len() / n_b;
    let mut out = vec![0.0; data.len()];
    out.par_chunks_mut(per_bscan)
        .zip(data.par_chunks(per_bscan))
        .zip(d.par_iter())
        .for_each(|((dst, src), &shift)| resample_bscan_into(src, n_r, shift, dst));
    Ok(out)
}

/// Spatial-transformer resampling of a volume by axial displacements.
pub fn resample_axial(v: &OctVolume, d: &[f64]) -> Result<OctVolume> {
    let dims = v.dims();
    let out = resample_grid(v.data(), dims.n_b, dims.n_r, d)?;
    v.with_data(out)
}

/// Resamples every A-scan by its own shift (`shifts` is `n_b × n_a`).
pub fn resample_ascans(v: &OctVolume, shifts: &[f64]) -> Result<OctVolume> {
    let dims = v.dims();
    if shifts.len() != dims.n_b * dims.n_a {
        return Err(OctError::Dimension(format!(
            "{} A-scan shifts for {}x{} A-scans",
            shifts.len(),
            dims.n_b,
            dims.n_a
        )));
    }
    let mut out = vec![0.0; dims.len()];
    out.par_chunks_mut(dims.n_r)
        .zip(v.data().par_chunks(dims.n_r))
        .zip(shifts.par_iter())
        .for_each(|((dst, src), &shift)| resample_column(src, shift, dst));
    v.with_data(out)
}

/// Analytic derivative of the resampled volume with respect to each B-scan's
/// displacement: entry (b, a, r) is `∂Î_b(a, r) / ∂d_b`.
pub fn resample_axial_jacobian(v: &OctVolume, d: &[f64]) -> Result<Vec<f64>> {
    let dims = v.dims();
    if d.len() != dims.n_b {
        return Err(OctError::Dimension(format!(
            "{} displacements for {} B-scans",
            d.len(),
            dims.n_b
        )));
    }
    let mut out = vec![0.0; dims.len()];
    for b in 0..dims.n_b {
        for a in 0..dims.n_a {
            let col = v.ascan(b, a);
            for r in 0..dims.n_r {
                out[v.index(b, a, r)] = sample_linear_slope(col, r as f64 + d[b]);
            }
        }
    }
    Ok(out)
}

/// Displacements expressed for a grid downsampled by `factor`.
pub fn rescale_displacements(d: &[f64], factor: f64) -> Result<Vec<f64>> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(OctError::InvalidConfig(format!(
            "rescale factor must be positive, got {factor}"
        )));
    }
    Ok(d.iter().map(|v| v / factor).collect())
}
