//! Surface ordering repair, Bruch's-membrane flattening and row cropping.

use serde::{Deserialize, Serialize};

use crate::error::{OctError, Result};
use crate::stm::resample_ascans;
use crate::volume::{OctVolume, SurfaceSet};

/// Restores anatomical order per A-scan by swapping adjacent surfaces that
/// are out of order until none are.
pub fn swap_trick(s: &SurfaceSet) -> SurfaceSet {
    let mut out = s.clone();
    let n_l = s.n_surfaces();
    for b in 0..s.n_b() {
        for a in 0..s.n_a() {
            let mut col = s.column(b, a);
            loop {
                let mut swapped = false;
                for l in 1..n_l {
                    if col[l - 1] > col[l] {
                        col.swap(l - 1, l);
                        swapped = true;
                    }
                }
                if !swapped {
                    break;
                }
            }
            for (l, &v) in col.iter().enumerate() {
                out.set(l, b, a, v);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlattenConfig {
    /// Gaussian smoothing of each A-scan before differentiation, in rows.
    pub sigma: f64,
    /// Side of the square median filter over (b, a) applied to the row map.
    pub median_size: usize,
    /// Target 1-based row as a fraction of the row count.
    pub target_fraction: f64,
}

impl Default for FlattenConfig {
    fn default() -> Self {
        Self {
            sigma: 2.0,
            median_size: 5,
            target_fraction: 0.75,
        }
    }
}

impl FlattenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(OctError::InvalidConfig("flatten sigma must be >= 0".into()));
        }
        if self.median_size == 0 || self.median_size.is_multiple_of(2) {
            return Err(OctError::InvalidConfig("median_size must be odd".into()));
        }
        if !(0.0..=1.0).contains(&self.target_fraction) {
            return Err(OctError::InvalidConfig("target_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Target row for `n_r` rows, rounded and kept inside `[1, n_r]`.
    pub fn target_row(&self, n_r: usize) -> f64 {
        (self.target_fraction * n_r as f64).round().clamp(1.0, n_r as f64)
    }
}

/// Flattened volume plus the per-A-scan shifts that produced it.
#[derive(Clone, Debug)]
pub struct Flattened {
    pub volume: OctVolume,
    /// Estimated 1-based BM row per (b, a) after median filtering.
    pub bm_rows: Vec<f64>,
    /// Row shift per (b, a): output row `r` samples input row `r + shift`.
    pub shifts: Vec<f64>,
    pub target_row: f64,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let half = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-half..=half)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|x| x / sum).collect()
}

/// Convolution with replicate padding.
fn smooth(col: &[f64], kernel: &[f64]) -> Vec<f64> {
    let half = (kernel.len() / 2) as i64;
    let n = col.len() as i64;
    (0..n)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * col[(i + k as i64 - half).clamp(0, n - 1) as usize])
                .sum()
        })
        .collect()
}

/// First 1-based row after the most negative smoothed forward difference in
/// the lower half of the A-scan: the bright-to-dark transition under the BM.
pub fn estimate_bm_row(ascan: &[f64], sigma: f64) -> f64 {
    let s = smooth(ascan, &gaussian_kernel(sigma));
    let n = s.len();
    let start = n / 2;
    let mut best = (f64::INFINITY, start);
    for r in start..n.saturating_sub(1) {
        let g = s[r + 1] - s[r];
        if g < best.0 {
            best = (g, r);
        }
    }
    // Forward difference at 0-based r spans 1-based rows r+1 and r+2.
    (best.1 + 2) as f64
}

fn median_filter(map: &[f64], n_b: usize, n_a: usize, size: usize) -> Vec<f64> {
    let h = (size / 2) as i64;
    let mut out = vec![0.0; map.len()];
    let mut buf = Vec::with_capacity(size * size);
    for b in 0..n_b as i64 {
        for a in 0..n_a as i64 {
            buf.clear();
            for bb in (b - h).max(0)..=(b + h).min(n_b as i64 - 1) {
                for aa in (a - h).max(0)..=(a + h).min(n_a as i64 - 1) {
                    buf.push(map[bb as usize * n_a + aa as usize]);
                }
            }
            buf.sort_by(f64::total_cmp);
            let m = buf.len();
            out[b as usize * n_a + a as usize] = if m % 2 == 1 {
                buf[m / 2]
            } else {
                0.5 * (buf[m / 2 - 1] + buf[m / 2])
            };
        }
    }
    out
}

/// Shifts every A-scan so its estimated BM lands on the target row.
pub fn flatten_to_bm(v: &OctVolume, cfg: &FlattenConfig) -> Result<Flattened> {
    cfg.validate()?;
    let dims = v.dims();
    let raw: Vec<f64> = (0..dims.n_b)
        .flat_map(|b| (0..dims.n_a).map(move |a| (b, a)))
        .map(|(b, a)| estimate_bm_row(v.ascan(b, a), cfg.sigma))
        .collect();
    let bm_rows = median_filter(&raw, dims.n_b, dims.n_a, cfg.median_size);
    let target_row = cfg.target_row(dims.n_r);
    let shifts: Vec<f64> = bm_rows.iter().map(|bm| (bm - target_row).round()).collect();
    let volume = resample_ascans(v, &shifts)?;
    Ok(Flattened {
        volume,
        bm_rows,
        shifts,
        target_row,
    })
}

/// Moves surfaces along with a per-A-scan shift map (`r − shift`).
pub fn shift_surfaces_ascans(s: &SurfaceSet, shifts: &[f64]) -> Result<SurfaceSet> {
    if shifts.len() != s.n_b() * s.n_a() {
        return Err(OctError::Dimension(format!(
            "{} shifts for {}x{} A-scans",
            shifts.len(),
            s.n_b(),
            s.n_a()
        )));
    }
    let mut out = s.clone();
    for l in 0..s.n_surfaces() {
        for b in 0..s.n_b() {
            for a in 0..s.n_a() {
                out.set(l, b, a, s.get(l, b, a) - shifts[b * s.n_a() + a]);
            }
        }
    }
    Ok(out)
}

/// Keeps 1-based rows `lo..=hi` and re-bases surfaces so row `lo` becomes 1.
pub fn crop_rows(v: &OctVolume, s: &SurfaceSet, lo: usize, hi: usize) -> Result<(OctVolume, SurfaceSet)> {
    let dims = v.dims();
    if lo < 1 || hi > dims.n_r || hi < lo + 1 {
        return Err(OctError::OutOfRange(format!(
            "crop {lo}:{hi} must satisfy 1 <= lo < hi <= {}",
            dims.n_r
        )));
    }
    if s.n_b() != dims.n_b || s.n_a() != dims.n_a {
        return Err(OctError::Dimension("surfaces do not match the volume".into()));
    }
    let mut offenders = Vec::new();
    for l in 0..s.n_surfaces() {
        for b in 0..s.n_b() {
            for a in 0..s.n_a() {
                let r = s.get(l, b, a);
                if r < lo as f64 || r > hi as f64 {
                    offenders.push((l, b, a, r));
                }
            }
        }
    }
    if !offenders.is_empty() {
        return Err(OctError::SurfaceOutsideCrop { lo, hi, offenders });
    }
    let volume = crop_volume(v, lo, hi)?;
    let mut out = s.clone();
    out.positions_mut().iter_mut().for_each(|r| *r -= (lo - 1) as f64);
    Ok((volume, out))
}

/// Row crop of a volume alone.
pub fn crop_volume(v: &OctVolume, lo: usize, hi: usize) -> Result<OctVolume> {
    let dims = v.dims();
    if lo < 1 || hi > dims.n_r || hi < lo + 1 {
        return Err(OctError::OutOfRange(format!(
            "crop {lo}:{hi} must satisfy 1 <= lo < hi <= {}",
            dims.n_r
        )));
    }
    let n_r = hi - lo + 1;
    let mut data = Vec::with_capacity(dims.n_b * dims.n_a * n_r);
    for b in 0..dims.n_b {
        for a in 0..dims.n_a {
            data.extend_from_slice(&v.ascan(b, a)[lo - 1..hi]);
        }
    }
    OctVolume::new(
        crate::volume::Dims::new(dims.n_b, dims.n_a, n_r),
        v.spacing(),
        data,
    )
}

/// Inverse of [`crop_rows`]: pads back to `n_r` rows with `fill` and
/// restores absolute surface rows.
pub fn uncrop(
    v: &OctVolume,
    s: &SurfaceSet,
    lo: usize,
    n_r: usize,
    fill: f64,
) -> Result<(OctVolume, SurfaceSet)> {
    let dims = v.dims();
    if lo < 1 || lo - 1 + dims.n_r > n_r {
        return Err(OctError::OutOfRange(format!(
            "cannot place {} rows at {lo} inside {n_r}",
            dims.n_r
        )));
    }
    let mut data = Vec::with_capacity(dims.n_b * dims.n_a * n_r);
    for b in 0..dims.n_b {
        for a in 0..dims.n_a {
            data.extend(std::iter::repeat_n(fill, lo - 1));
            data.extend_from_slice(v.ascan(b, a));
            data.extend(std::iter::repeat_n(fill, n_r - (lo - 1) - dims.n_r));
        }
    }
    let volume = OctVolume::new(
        crate::volume::Dims::new(dims.n_b, dims.n_a, n_r),
        v.spacing(),
        data,
    )?;
    let mut out = s.clone();
    out.positions_mut().iter_mut().for_each(|r| *r += (lo - 1) as f64);
    Ok((volume, out))
}
