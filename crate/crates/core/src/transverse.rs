//! Transverse (A-scan direction) alignment of B-scans by matching mean
//! intensity projections of adjacent B-scans.
//!
//! Transverse displacements follow the same convention as axial ones: a
//! displacement `t_b` corrects B-scan `b` by sampling it at `a + t_b`.

use crate::error::{OctError, Result};
use crate::volume::{gauge_mode_zero, DisplacementField, OctVolume, SurfaceSet};

#[inline]
fn clamp_index(a: i64, n: usize) -> usize {
    a.clamp(0, n as i64 - 1) as usize
}

/// Samples B-scan `b` at A-scan `a + t[b]`, replicating the edge A-scans.
pub fn shift_transverse(v: &OctVolume, t: &[i64]) -> Result<OctVolume> {
    let dims = v.dims();
    if t.len() != dims.n_b {
        return Err(OctError::Dimension(format!(
            "{} transverse shifts for {} B-scans",
            t.len(),
            dims.n_b
        )));
    }
    let mut data = Vec::with_capacity(dims.len());
    for (b, &tb) in t.iter().enumerate() {
        for a in 0..dims.n_a {
            data.extend_from_slice(v.ascan(b, clamp_index(a as i64 + tb, dims.n_a)));
        }
    }
    v.with_data(data)
}

/// Surface counterpart of [`shift_transverse`].
pub fn shift_surfaces_transverse(s: &SurfaceSet, t: &[i64]) -> Result<SurfaceSet> {
    if t.len() != s.n_b() {
        return Err(OctError::Dimension(format!(
            "{} transverse shifts for {} B-scans",
            t.len(),
            s.n_b()
        )));
    }
    let mut out = s.clone();
    for l in 0..s.n_surfaces() {
        for (b, &tb) in t.iter().enumerate() {
            for a in 0..s.n_a() {
                out.set(l, b, a, s.get(l, b, clamp_index(a as i64 + tb, s.n_a())));
            }
        }
    }
    Ok(out)
}

/// Per-B-scan strips of mean A-scan intensity (`n_b × n_a`).
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub n_b: usize,
    pub n_a: usize,
    pub values: Vec<f64>,
    /// A-scans whose retinal band contained no row (value set to 0).
    pub empty: usize,
}

impl Projection {
    pub fn strip(&self, b: usize) -> &[f64] {
        &self.values[b * self.n_a..(b + 1) * self.n_a]
    }
}

/// Mean intensity of each A-scan over the integer rows between the first
/// and last surface (inclusive).
pub fn mean_projection(v: &OctVolume, s: &SurfaceSet) -> Result<Projection> {
    let dims = v.dims();
    if s.n_b() != dims.n_b || s.n_a() != dims.n_a {
        return Err(OctError::Dimension("surfaces do not match the volume".into()));
    }
    if s.n_surfaces() == 0 {
        return Err(OctError::Dimension("retina mask needs at least one surface".into()));
    }
    let last = s.n_surfaces() - 1;
    let mut values = Vec::with_capacity(dims.n_b * dims.n_a);
    let mut empty = 0;
    for b in 0..dims.n_b {
        for a in 0..dims.n_a {
            let lo = s.get(0, b, a).ceil().max(1.0) as usize;
            let hi = (s.get(last, b, a).floor() as i64).min(dims.n_r as i64);
            if hi < lo as i64 {
                values.push(0.0);
                empty += 1;
                continue;
            }
            let rows = &v.ascan(b, a)[lo - 1..hi as usize];
            values.push(rows.iter().sum::<f64>() / rows.len() as f64);
        }
    }
    Ok(Projection {
        n_b: dims.n_b,
        n_a: dims.n_a,
        values,
        empty,
    })
}

/// Mean over every row of each A-scan (no retina restriction).
pub fn full_projection(v: &OctVolume) -> Projection {
    let dims = v.dims();
    let values = (0..dims.n_b)
        .flat_map(|b| (0..dims.n_a).map(move |a| (b, a)))
        .map(|(b, a)| v.ascan(b, a).iter().sum::<f64>() / dims.n_r as f64)
        .collect();
    Projection {
        n_b: dims.n_b,
        n_a: dims.n_a,
        values,
        empty: 0,
    }
}

/// Mean squared difference between `fixed[a]` and `moving[a + t]` over the
/// A-scans where both exist.
pub fn projection_mse(fixed: &[f64], moving: &[f64], t: i64) -> f64 {
    let n = fixed.len() as i64;
    let lo = 0.max(-t);
    let hi = n.min(n - t);
    if hi <= lo {
        return f64::INFINITY;
    }
    let sum: f64 = (lo..hi)
        .map(|a| {
            let e = fixed[a as usize] - moving[(a + t) as usize];
            e * e
        })
        .sum();
    sum / (hi - lo) as f64
}

/// Best relative shift of `moving` against `fixed` in `[-radius, radius]`;
/// ties go to the smaller magnitude.
pub fn best_shift(fixed: &[f64], moving: &[f64], radius: usize) -> i64 {
    let r = radius as i64;
    let mut best = (f64::INFINITY, 0i64);
    for t in -r..=r {
        let m = projection_mse(fixed, moving, t);
        let better = m < best.0 || (m == best.0 && (t.abs(), t) < (best.1.abs(), best.1));
        if better {
            best = (m, t);
        }
    }
    best.1
}

/// Pairwise projection matching of adjacent strips, accumulated and
/// gauge-fixed so the most frequent shift is zero.
pub fn align_projections(p: &Projection, radius: usize) -> Result<Vec<i64>> {
    if p.n_b < 2 {
        return Err(OctError::InvalidVolume("transverse alignment needs 2 B-scans".into()));
    }
    if radius < 1 || p.n_a <= radius {
        return Err(OctError::InvalidConfig(format!(
            "transverse radius {radius} must be >= 1 and below the A-scan count {}",
            p.n_a
        )));
    }
    let mut t = vec![0i64; p.n_b];
    for b in 0..p.n_b - 1 {
        t[b + 1] = t[b] + best_shift(p.strip(b), p.strip(b + 1), radius);
    }
    gauge_mode_zero(&mut t);
    Ok(t)
}

/// Transverse alignment from projections restricted to the retina (between
/// the first and last surface) or, with `surfaces = None`, over whole A-scans.
pub fn align_transverse(
    v: &OctVolume,
    surfaces: Option<&SurfaceSet>,
    radius: usize,
) -> Result<DisplacementField> {
    let dims = v.dims();
    if radius < 1 || dims.n_a <= radius {
        return Err(OctError::InvalidConfig(format!(
            "transverse radius {radius} must be >= 1 and below the A-scan count {}",
            dims.n_a
        )));
    }
    let proj = match surfaces {
        Some(s) => mean_projection(v, s)?,
        None => full_projection(v),
    };
    Ok(DisplacementField::transverse_only(align_projections(&proj, radius)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Dims, Spacing};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn band(n_b: usize, n_a: usize, lo: f64, hi: f64) -> SurfaceSet {
        SurfaceSet::from_fn(2, n_b, n_a, |l, _, _| if l == 0 { lo } else { hi }).unwrap()
    }

    #[test]
    fn constant_retina_projects_to_constant() {
        let v = OctVolume::from_fn(Dims::new(2, 5, 12), Spacing::default(), |_, _, r| {
            if (3..9).contains(&r) {
                2.5
            } else {
                0.1 * r as f64
            }
        })
        .unwrap();
        let p = mean_projection(&v, &band(2, 5, 4.0, 9.0)).unwrap();
        assert!(p.values.iter().all(|&x| x == 2.5));
        assert_eq!(p.empty, 0);
    }

    #[test]
    fn ramp_band_mean() {
        let v = OctVolume::from_fn(Dims::new(2, 3, 12), Spacing::default(), |_, _, r| (r + 1) as f64)
            .unwrap();
        let p = mean_projection(&v, &band(2, 3, 5.0, 8.0)).unwrap();
        assert!(p.values.iter().all(|&x| x == 6.5));
    }

    #[test]
    fn empty_band_is_flagged() {
        let v = OctVolume::from_fn(Dims::new(2, 3, 12), Spacing::default(), |_, _, _| 1.0).unwrap();
        let p = mean_projection(&v, &band(2, 3, 5.2, 5.8)).unwrap();
        assert_eq!(p.empty, 6);
        assert!(p.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn random_band_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = Dims::new(3, 7, 20);
        let v = OctVolume::from_fn(dims, Spacing::default(), |_, _, _| rng.random_range(0.0..1.0))
            .unwrap();
        let s = SurfaceSet::from_fn(3, 3, 7, |l, _, _| 2.0 + 5.0 * l as f64 + 0.3).unwrap();
        let p = mean_projection(&v, &s).unwrap();
        for b in 0..3 {
            for a in 0..7 {
                let (mut sum, mut n) = (0.0, 0);
                for r in 1..=20usize {
                    let rf = r as f64;
                    if rf >= s.get(0, b, a) && rf <= s.get(2, b, a) {
                        sum += v.get(b, a, r - 1);
                        n += 1;
                    }
                }
                assert!((p.strip(b)[a] - sum / n as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_projections_give_zero_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let strip: Vec<f64> = (0..32).map(|_| rng.random_range(0.0..1.0)).collect();
        let p = Projection {
            n_b: 4,
            n_a: 32,
            values: strip.iter().cycle().take(128).copied().collect(),
            empty: 0,
        };
        assert_eq!(align_projections(&p, 10).unwrap(), vec![0; 4]);
    }

    #[test]
    fn vessel_column_shift_is_recovered_exactly() {
        // Single bright column; the second strip has it moved right by 4.
        let n_a = 40;
        let mut first = vec![0.0; n_a];
        first[18] = 1.0;
        let mut second = vec![0.0; n_a];
        second[22] = 1.0;
        // Exhaustive oracle over the window.
        let oracle = (-15i64..=15)
            .min_by(|&x, &y| {
                projection_mse(&first, &second, x)
                    .total_cmp(&projection_mse(&first, &second, y))
                    .then((x.abs(), x).cmp(&(y.abs(), y)))
            })
            .unwrap();
        assert_eq!(oracle, 4);
        let p = Projection {
            n_b: 2,
            n_a,
            values: first.iter().chain(&second).copied().collect(),
            empty: 0,
        };
        let t = align_projections(&p, 15).unwrap();
        assert_eq!(t[1] - t[0], 4);
        // Correcting the second strip by its displacement restores the first.
        let corrected: Vec<f64> = (0..n_a as i64)
            .map(|a| second[clamp_index(a + t[1] - t[0], n_a)])
            .collect();
        assert_eq!(corrected, first);
    }

    #[test]
    fn returned_shift_minimizes_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x: Vec<f64> = (0..48).map(|_| rng.random_range(0.0..1.0)).collect();
            let y: Vec<f64> = (0..48).map(|_| rng.random_range(0.0..1.0)).collect();
            let t = best_shift(&x, &y, 12);
            let best = projection_mse(&x, &y, t);
            for k in -12..=12 {
                assert!(best <= projection_mse(&x, &y, k));
            }
        }
    }

    #[test]
    fn radius_must_fit_inside_bscan() {
        let v = OctVolume::from_fn(Dims::new(2, 10, 4), Spacing::default(), |_, a, _| a as f64).unwrap();
        assert!(matches!(align_transverse(&v, None, 10), Err(OctError::InvalidConfig(_))));
        assert!(align_transverse(&v, None, 9).is_ok());
    }

    #[test]
    fn shifting_round_trips_in_the_interior() {
        let v = OctVolume::from_fn(Dims::new(2, 10, 3), Spacing::default(), |b, a, r| {
            (b * 100 + a * 10 + r) as f64
        })
        .unwrap();
        let moved = shift_transverse(&v, &[3, -2]).unwrap();
        assert_eq!(moved.get(0, 0, 1), v.get(0, 3, 1));
        assert_eq!(moved.get(0, 9, 1), v.get(0, 9, 1));
        assert_eq!(moved.get(1, 0, 2), v.get(1, 0, 2));
        assert_eq!(moved.get(1, 5, 2), v.get(1, 3, 2));
        let back = shift_transverse(&moved, &[-3, 2]).unwrap();
        for a in 3..8 {
            assert_eq!(back.get(0, a, 0), v.get(0, a, 0));
            assert_eq!(back.get(1, a, 0), v.get(1, a, 0));
        }
    }
}
