//! Evaluation metrics: surface distances, adjacent B-scan correlation,
//! inter-B-scan connectivity and motion-recovery error.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::align::global_ncc;
use crate::error::{OctError, Result};
use crate::synth::MotionSpec;
use crate::volume::{gauge_mean_zero, gauge_mode_zero, DisplacementField, OctVolume, SurfaceSet};

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

/// One volume's metric: one value per surface plus the mean over surfaces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceMetric {
    pub per_surface: Vec<f64>,
    pub overall: f64,
}

impl SurfaceMetric {
    fn from_per_surface(per_surface: Vec<f64>) -> Self {
        let overall = per_surface.iter().sum::<f64>() / per_surface.len().max(1) as f64;
        Self {
            per_surface,
            overall,
        }
    }
}

/// Across-volume aggregation of a [`SurfaceMetric`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub per_surface: Vec<MeanStd>,
    pub overall: MeanStd,
}

/// Mean and std of each per-volume value across volumes.
pub fn aggregate(volumes: &[SurfaceMetric]) -> Result<Aggregate> {
    let n_l = volumes.first().map_or(0, |m| m.per_surface.len());
    if volumes.iter().any(|m| m.per_surface.len() != n_l) {
        return Err(OctError::Dimension("volumes have different surface counts".into()));
    }
    let per_surface = (0..n_l)
        .map(|l| MeanStd::of(&volumes.iter().map(|m| m.per_surface[l]).collect::<Vec<_>>()))
        .collect();
    let overall = MeanStd::of(&volumes.iter().map(|m| m.overall).collect::<Vec<_>>());
    Ok(Aggregate {
        per_surface,
        overall,
    })
}

/// Mean absolute row distance in micrometres per surface for one volume.
/// `mask` (`n_b × n_a`, true = evaluate) excludes A-scans without annotation.
pub fn mad(pred: &SurfaceSet, gt: &SurfaceSet, dz: f64, mask: Option<&[bool]>) -> Result<SurfaceMetric> {
    pred.check_same_shape(gt)?;
    let per = pred.n_b() * pred.n_a();
    if let Some(m) = mask {
        if m.len() != per {
            return Err(OctError::Dimension(format!(
                "evaluation mask has {} entries for {per} A-scans",
                m.len()
            )));
        }
    }
    let mut out = Vec::with_capacity(pred.n_surfaces());
    for l in 0..pred.n_surfaces() {
        let (p, g) = (pred.surface(l), gt.surface(l));
        let (mut sum, mut n) = (0.0, 0usize);
        for i in 0..per {
            if mask.is_none_or(|m| m[i]) {
                sum += (p[i] - g[i]).abs();
                n += 1;
            }
        }
        if n == 0 {
            return Err(OctError::EmptySurface(format!("surface {l} has no evaluated A-scans")));
        }
        out.push(sum / n as f64 * dz);
    }
    Ok(SurfaceMetric::from_per_surface(out))
}

/// Linear-interpolation percentile of `values` (sorted in place), `p` in [0, 100].
pub fn percentile(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 1 {
        return values[0];
    }
    let pos = p / 100.0 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

/// For every point of `from`, the distance to its nearest point of `to`.
/// Both curves are sampled at every A-scan, so `to` is scanned outward from
/// the same A-scan and pruned once the lateral offset alone exceeds the best.
fn directed_distances(from: &[f64], to: &[f64], dz: f64, dx: f64, out: &mut Vec<f64>) {
    let n = to.len();
    for (a, &r) in from.iter().enumerate() {
        let mut best = f64::INFINITY;
        for off in 0..n {
            let lateral = off as f64 * dx;
            if lateral > best {
                break;
            }
            for j in [a.checked_sub(off), (off > 0).then_some(a + off)].into_iter().flatten() {
                if j < n {
                    best = best.min(lateral.hypot((to[j] - r) * dz));
                }
            }
        }
        out.push(best);
    }
}

/// 95th percentile of the symmetric point-to-curve distances of one B-scan,
/// with points at `(a·dx, r·dz)`.
pub fn hd95_bscan(pred: &[f64], gt: &[f64], dz: f64, dx: f64) -> f64 {
    let mut d = Vec::with_capacity(pred.len() + gt.len());
    directed_distances(pred, gt, dz, dx, &mut d);
    directed_distances(gt, pred, dz, dx, &mut d);
    percentile(&mut d, 95.0)
}

/// Per-surface HD95 in micrometres, averaged over B-scans.
pub fn hd95(pred: &SurfaceSet, gt: &SurfaceSet, dz: f64, dx: f64) -> Result<SurfaceMetric> {
    pred.check_same_shape(gt)?;
    if pred.n_a() == 0 || pred.n_b() == 0 {
        return Err(OctError::EmptySurface("surfaces have no points".into()));
    }
    let n_a = pred.n_a();
    let mut out = Vec::with_capacity(pred.n_surfaces());
    for l in 0..pred.n_surfaces() {
        let (p, g) = (pred.surface(l), gt.surface(l));
        let total: f64 = (0..pred.n_b())
            .map(|b| hd95_bscan(&p[b * n_a..(b + 1) * n_a], &g[b * n_a..(b + 1) * n_a], dz, dx))
            .sum();
        out.push(total / pred.n_b() as f64);
    }
    Ok(SurfaceMetric::from_per_surface(out))
}

/// Mean global NCC between consecutive B-scans, in [-1, 1].
pub fn ncc_adjacent(v: &OctVolume) -> f64 {
    let n_b = v.dims().n_b;
    (0..n_b - 1)
        .map(|b| global_ncc(v.bscan(b), v.bscan(b + 1)))
        .sum::<f64>()
        / (n_b - 1) as f64
}

/// Counts of `|r[b+1,a] − r[b,a]|` over all surfaces and A-scans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    /// `counts[k]` covers `[k·w, (k+1)·w)`; the last bin is open-ended.
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Writes `bin_start_px,bin_end_px,count`; the last bin has an empty end.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["bin_start_px", "bin_end_px", "count"])?;
        let last = self.counts.len().saturating_sub(1);
        for (k, c) in self.counts.iter().enumerate() {
            let start = k as f64 * self.bin_width;
            let end = if k == last {
                String::new()
            } else {
                ((k + 1) as f64 * self.bin_width).to_string()
            };
            out.write_record([start.to_string(), end, c.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn connectivity_histogram(s: &SurfaceSet, bin_width: f64, n_bins: usize) -> Result<Histogram> {
    if s.n_b() < 2 {
        return Err(OctError::InvalidVolume("connectivity needs at least 2 B-scans".into()));
    }
    if !(bin_width > 0.0 && bin_width.is_finite()) || n_bins == 0 {
        return Err(OctError::InvalidConfig("histogram needs a positive bin width and >= 1 bin".into()));
    }
    let mut counts = vec![0u64; n_bins];
    for l in 0..s.n_surfaces() {
        for b in 0..s.n_b() - 1 {
            for a in 0..s.n_a() {
                let jump = (s.get(l, b + 1, a) - s.get(l, b, a)).abs();
                let k = ((jump / bin_width).floor() as usize).min(n_bins - 1);
                counts[k] += 1;
            }
        }
    }
    Ok(Histogram { bin_width, counts })
}

/// Mean absolute axial and transverse recovery error in pixels, after
/// gauge-fixing estimate and truth the same way.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionError {
    pub axial_px: f64,
    pub transverse_px: f64,
}

pub fn motion_error(est: &DisplacementField, truth: &MotionSpec) -> Result<MotionError> {
    let n = truth.n_b();
    if est.axial.len() != n || est.transverse.len() != n || truth.transverse_truth.len() != n {
        return Err(OctError::Dimension(format!(
            "estimate has {}/{} entries, truth {}",
            est.axial.len(),
            est.transverse.len(),
            n
        )));
    }
    let (mut ea, mut ta) = (est.axial.clone(), truth.axial_truth.clone());
    gauge_mean_zero(&mut ea);
    gauge_mean_zero(&mut ta);
    let (mut et, mut tt) = (est.transverse.clone(), truth.transverse_truth.clone());
    gauge_mode_zero(&mut et);
    gauge_mode_zero(&mut tt);
    let axial_px = ea.iter().zip(&ta).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;
    let transverse_px = et
        .iter()
        .zip(&tt)
        .map(|(a, b)| (a - b).abs() as f64)
        .sum::<f64>()
        / n as f64;
    Ok(MotionError {
        axial_px,
        transverse_px,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Dims, Spacing};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_hd95(p: &[f64], g: &[f64], dz: f64, dx: f64) -> f64 {
        let dist = |a: usize, r: f64, b: usize, s: f64| {
            ((a as f64 - b as f64) * dx).hypot((r - s) * dz)
        };
        let mut d = Vec::new();
        for (x, y) in [(p, g), (g, p)] {
            for (a, &r) in x.iter().enumerate() {
                let best = y
                    .iter()
                    .enumerate()
                    .map(|(b, &s)| dist(a, r, b, s))
                    .fold(f64::INFINITY, f64::min);
                d.push(best);
            }
        }
        d.sort_by(f64::total_cmp);
        let pos = 0.95 * (d.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(d.len() - 1);
        d[lo] + (d[hi] - d[lo]) * (pos - lo as f64)
    }

    #[test]
    fn mad_examples() {
        let gt = SurfaceSet::from_fn(2, 3, 4, |l, b, a| (l * 10 + b + a) as f64).unwrap();
        assert_eq!(mad(&gt, &gt, 3.24, None).unwrap().overall, 0.0);
        let mut off = gt.clone();
        off.positions_mut().iter_mut().for_each(|r| *r += 2.0);
        let m = mad(&off, &gt, 3.24, None).unwrap();
        assert_eq!(m.overall, 2.0 * 3.24);
        let agg = aggregate(&[
            SurfaceMetric::from_per_surface(vec![2.0]),
            SurfaceMetric::from_per_surface(vec![4.0]),
        ])
        .unwrap();
        assert_eq!(agg.overall.mean, 3.0);
        assert_eq!(agg.overall.std, 1.0);
    }

    #[test]
    fn mad_mask_ignores_missing_annotation() {
        let gt = SurfaceSet::from_fn(1, 1, 4, |_, _, _| 5.0).unwrap();
        let pred = SurfaceSet::from_fn(1, 1, 4, |_, _, a| if a == 3 { 50.0 } else { 6.0 }).unwrap();
        let m = mad(&pred, &gt, 1.0, Some(&[true, true, true, false])).unwrap();
        assert_eq!(m.overall, 1.0);
    }

    #[test]
    fn hd95_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n_a = rng.random_range(1..=32);
            let p: Vec<f64> = (0..n_a).map(|_| rng.random_range(1.0..40.0)).collect();
            let g: Vec<f64> = (0..n_a).map(|_| rng.random_range(1.0..40.0)).collect();
            assert_eq!(hd95_bscan(&p, &g, 3.24, 6.7), brute_hd95(&p, &g, 3.24, 6.7));
        }
    }

    #[test]
    fn hd95_offset_is_bounded_by_dz() {
        let gt = SurfaceSet::from_fn(1, 2, 16, |_, b, a| 10.0 + ((a + b) as f64 / 3.0).sin() * 4.0).unwrap();
        let mut off = gt.clone();
        off.positions_mut().iter_mut().for_each(|r| *r += 1.0);
        let h = hd95(&off, &gt, 3.24, 6.7).unwrap().overall;
        assert!(h <= 3.24 + 1e-12 && h > 0.0);
        assert_eq!(hd95(&gt, &gt, 3.24, 6.7).unwrap().overall, 0.0);
    }

    #[test]
    fn ncc_adjacent_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let slice: Vec<f64> = (0..40 * 30).map(|_| rng.random_range(0.0..1.0)).collect();
        let v = OctVolume::from_fn(Dims::new(4, 40, 30), Spacing::default(), |_, a, r| slice[a * 30 + r])
            .unwrap();
        assert!((ncc_adjacent(&v) - 1.0).abs() < 1e-12);
        let v = OctVolume::from_fn(Dims::new(2, 40, 30), Spacing::default(), |_, _, _| rng.random_range(0.0..1.0))
            .unwrap();
        assert!(ncc_adjacent(&v).abs() < 3.0 / (1200f64).sqrt());
    }

    #[test]
    fn histogram_examples() {
        let s = SurfaceSet::from_fn(2, 4, 3, |_, _, _| 7.0).unwrap();
        let h = connectivity_histogram(&s, 1.0, 5).unwrap();
        assert_eq!(h.counts, vec![18, 0, 0, 0, 0]);
        let s = SurfaceSet::from_fn(1, 5, 3, |_, b, _| if b % 2 == 0 { 7.0 } else { 8.0 }).unwrap();
        let h = connectivity_histogram(&s, 1.0, 5).unwrap();
        assert_eq!(h.counts, vec![0, 12, 0, 0, 0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = SurfaceSet::from_fn(3, 6, 5, |_, _, _| rng.random_range(1.0..60.0)).unwrap();
        assert_eq!(connectivity_histogram(&s, 2.0, 4).unwrap().total(), 3 * 5 * 5);
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("bin_start_px,bin_end_px,count\n0,1,0\n1,2,12\n"));
    }

    #[test]
    fn motion_error_is_gauge_free() {
        let truth = MotionSpec {
            axial_truth: vec![1.0, -2.0, 0.5],
            transverse_truth: vec![3, 3, -1],
            group_boundaries: vec![0, 2],
        };
        let exact = DisplacementField {
            axial: truth.axial_truth.clone(),
            transverse: truth.transverse_truth.clone(),
        };
        let e = motion_error(&exact, &truth).unwrap();
        assert_eq!((e.axial_px, e.transverse_px), (0.0, 0.0));
        let shifted = DisplacementField {
            axial: vec![8.0, 5.0, 7.5],
            transverse: vec![0, 0, -4],
        };
        let e = motion_error(&shifted, &truth).unwrap();
        assert!(e.axial_px < 1e-12);
        assert_eq!(e.transverse_px, 0.0);
    }
}
