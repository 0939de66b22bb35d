//! Layered retinal phantoms and simulated inter-B-scan motion.
//!
//! Surfaces are a shared low-frequency cosine undulation of the whole layer
//! stack, per-layer cosine thickness modulation, and a Gaussian foveal dip
//! of the innermost surface. Each B-scan's surfaces are then offset so every
//! B-scan has the same mean surface depth: the phantom is its own motion-free
//! reference frame, and any per-B-scan offset is attributable to motion.
//! The volume is rendered as constant-intensity bands, shadowed below
//! vessel columns, and finally degraded with multiplicative speckle and
//! additive Gaussian noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{OctError, Result};
use crate::stm::resample_axial;
use crate::transverse::{shift_surfaces_transverse, shift_transverse};
use crate::volume::{Dims, OctVolume, Spacing, SurfaceSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub n_b: usize,
    pub n_a: usize,
    pub n_r: usize,
    pub spacing: Spacing,
    /// Mean 1-based row of the first surface.
    pub top_depth: f64,
    /// Mean thickness between consecutive surfaces; `L = thicknesses.len() + 1`.
    pub thicknesses: Vec<f64>,
    /// Band intensities from above the first surface to below the last (`L + 1`).
    pub intensities: Vec<f64>,
    /// Number of cosine bumps in the shared stack undulation.
    pub bump_count: usize,
    /// Upper bound on each bump's amplitude, in rows.
    pub bump_amplitude: f64,
    /// Highest bump / modulation frequency, in cycles across the grid extent.
    pub max_frequency: f64,
    /// Relative amplitude of per-layer thickness modulation.
    pub thickness_variation: f64,
    /// Depth of the foveal dip of the first surface, in rows.
    pub fovea_depth: f64,
    /// Gaussian widths of the dip along A-scans and B-scans.
    pub fovea_sigma_a: f64,
    pub fovea_sigma_b: f64,
    pub vessel_count: usize,
    /// Gaussian half-width of a shadow column, in A-scans.
    pub vessel_width: f64,
    /// Fractional intensity loss at a shadow's centre.
    pub vessel_attenuation: f64,
    /// Standard deviation of a per-A-scan intensity offset added outside the
    /// retina (above the first and below the last surface).
    pub background_texture: f64,
    /// Variance of the unit-mean gamma speckle multiplier (0 disables).
    pub speckle_variance: f64,
    /// Standard deviation of additive Gaussian noise (0 disables).
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            n_b: 20,
            n_a: 64,
            n_r: 96,
            spacing: Spacing::default(),
            top_depth: 32.0,
            thicknesses: vec![22.0, 6.0],
            intensities: vec![0.08, 0.45, 0.9, 0.3],
            bump_count: 3,
            bump_amplitude: 2.0,
            max_frequency: 1.0,
            thickness_variation: 0.15,
            fovea_depth: 8.0,
            fovea_sigma_a: 7.0,
            fovea_sigma_b: 3.0,
            vessel_count: 5,
            vessel_width: 1.5,
            vessel_attenuation: 0.6,
            background_texture: 0.05,
            speckle_variance: 0.05,
            noise_sigma: 0.03,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn n_surfaces(&self) -> usize {
        self.thicknesses.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OctError::InvalidSpec(m));
        if self.n_b < 2 || self.n_a < 1 || self.n_r < 2 {
            return bad(format!("dims {}x{}x{} too small", self.n_b, self.n_a, self.n_r));
        }
        if self.intensities.len() != self.n_surfaces() + 1 {
            return bad(format!(
                "{} intensities for {} surfaces (need L + 1)",
                self.intensities.len(),
                self.n_surfaces()
            ));
        }
        if self.thicknesses.iter().any(|&t| !(t.is_finite() && t > 0.0)) {
            return bad("thicknesses must be positive".into());
        }
        let nonneg = [
            self.bump_amplitude,
            self.max_frequency,
            self.thickness_variation,
            self.fovea_depth,
            self.vessel_width,
            self.background_texture,
            self.speckle_variance,
            self.noise_sigma,
        ];
        if nonneg.iter().any(|&x| !(x.is_finite() && x >= 0.0)) {
            return bad("amplitudes, widths and noise parameters must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.vessel_attenuation) {
            return bad("vessel_attenuation must lie in [0, 1]".into());
        }
        if self.thickness_variation >= 1.0 {
            return bad("thickness_variation must be < 1".into());
        }
        if self.fovea_sigma_a <= 0.0 || self.fovea_sigma_b <= 0.0 {
            return bad("fovea widths must be positive".into());
        }
        let stack: f64 = self.thicknesses.iter().sum();
        let swing = self.bump_count as f64 * self.bump_amplitude;
        if self.top_depth - swing < 1.0 || self.top_depth + stack + swing > self.n_r as f64 {
            return bad(format!(
                "layer stack [{:.1}, {:.1}] (with undulation) exceeds rows [1, {}]",
                self.top_depth - swing,
                self.top_depth + stack + swing,
                self.n_r
            ));
        }
        Ok(())
    }
}

struct Cosine {
    amplitude: f64,
    fa: f64,
    fb: f64,
    phase: f64,
}

impl Cosine {
    fn draw(rng: &mut ChaCha8Rng, amplitude: f64, max_frequency: f64) -> Self {
        let f = |rng: &mut ChaCha8Rng| {
            if max_frequency > 0.0 {
                rng.random_range(-max_frequency..=max_frequency)
            } else {
                0.0
            }
        };
        Self {
            amplitude,
            fa: f(rng),
            fb: f(rng),
            phase: rng.random_range(0.0..2.0 * PI),
        }
    }

    fn eval(&self, b: usize, a: usize, n_b: usize, n_a: usize) -> f64 {
        self.amplitude
            * (2.0 * PI * (self.fa * a as f64 / n_a as f64 + self.fb * b as f64 / n_b as f64)
                + self.phase)
                .cos()
    }
}

struct Vessel {
    a0: f64,
    drift: f64,
}

/// Renders constant-intensity bands: row `r` (1-based) of an A-scan takes
/// the intensity of band `#{l : S_l <= r}`.
pub fn render_bands(s: &SurfaceSet, n_r: usize, intensities: &[f64], spacing: Spacing) -> Result<OctVolume> {
    if intensities.len() != s.n_surfaces() + 1 {
        return Err(OctError::InvalidSpec(format!(
            "{} intensities for {} surfaces",
            intensities.len(),
            s.n_surfaces()
        )));
    }
    let dims = Dims::new(s.n_b(), s.n_a(), n_r);
    OctVolume::from_fn(dims, spacing, |b, a, r| {
        let row = (r + 1) as f64;
        let label = (0..s.n_surfaces()).filter(|&l| s.get(l, b, a) <= row).count();
        intensities[label]
    })
}

/// Motion-free phantom volume and its exact surfaces. Deterministic in `spec.seed`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(OctVolume, SurfaceSet)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n_b, n_a, n_r) = (spec.n_b, spec.n_a, spec.n_r);
    let n_l = spec.n_surfaces();

    let bumps: Vec<Cosine> = (0..spec.bump_count)
        .map(|_| {
            let amp = rng.random_range(0.5..=1.0) * spec.bump_amplitude;
            Cosine::draw(&mut rng, amp, spec.max_frequency)
        })
        .collect();
    let modulation: Vec<Cosine> = spec
        .thicknesses
        .iter()
        .map(|&t| Cosine::draw(&mut rng, t * spec.thickness_variation, spec.max_frequency))
        .collect();
    let fovea_a = n_a as f64 * rng.random_range(0.35..0.65);
    let fovea_b = n_b as f64 * rng.random_range(0.35..0.65);

    let mut raw = SurfaceSet::from_fn(n_l, n_b, n_a, |l, b, a| {
        let mut depth = spec.top_depth;
        depth += bumps.iter().map(|c| c.eval(b, a, n_b, n_a)).sum::<f64>();
        for j in 0..l {
            depth += spec.thicknesses[j] + modulation[j].eval(b, a, n_b, n_a);
        }
        if l == 0 {
            let za = (a as f64 - fovea_a) / spec.fovea_sigma_a;
            let zb = (b as f64 - fovea_b) / spec.fovea_sigma_b;
            depth += spec.fovea_depth * (-0.5 * (za * za + zb * zb)).exp();
        }
        depth
    })?;

    // Equalize the per-B-scan mean depth.
    let per_b = n_l * n_a;
    let means: Vec<f64> = (0..n_b)
        .map(|b| {
            let mut acc = 0.0;
            for l in 0..n_l {
                for a in 0..n_a {
                    acc += raw.get(l, b, a);
                }
            }
            acc / per_b as f64
        })
        .collect();
    let global = means.iter().sum::<f64>() / n_b as f64;
    for l in 0..n_l {
        for (b, m) in means.iter().enumerate() {
            for a in 0..n_a {
                let v = raw.get(l, b, a) + global - m;
                raw.set(l, b, a, v);
            }
        }
    }
    let surfaces = raw;
    for b in 0..n_b {
        for a in 0..n_a {
            for l in 1..n_l {
                if surfaces.get(l, b, a) - surfaces.get(l - 1, b, a) < 1.0 {
                    return Err(OctError::InvalidSpec(format!(
                        "layer {l} thinner than one row at b={b}, a={a}; reduce fovea_depth or thickness_variation"
                    )));
                }
            }
        }
    }
    surfaces
        .check_range(n_r)
        .map_err(|e| OctError::InvalidSpec(format!("layer stack exceeds rows: {e}")))?;

    let mut data = render_bands(&surfaces, n_r, &spec.intensities, spec.spacing)?.into_data();

    let vessels: Vec<Vessel> = (0..spec.vessel_count)
        .map(|_| Vessel {
            a0: rng.random_range(0.0..n_a as f64),
            drift: rng.random_range(-0.5..0.5),
        })
        .collect();
    if spec.vessel_attenuation > 0.0 && spec.vessel_width > 0.0 {
        for ves in &vessels {
            for b in 0..n_b {
                let centre = ves.a0 + ves.drift * b as f64;
                for a in 0..n_a {
                    let z = (a as f64 - centre) / spec.vessel_width;
                    let factor = 1.0 - spec.vessel_attenuation * (-0.5 * z * z).exp();
                    let top = surfaces.get(0, b, a);
                    for r in 0..n_r {
                        if (r + 1) as f64 >= top {
                            data[(b * n_a + a) * n_r + r] *= factor;
                        }
                    }
                }
            }
        }
    }

    if spec.background_texture > 0.0 {
        let normal = Normal::new(0.0, spec.background_texture)
            .map_err(|e| OctError::InvalidSpec(format!("background texture: {e}")))?;
        let last = n_l - 1;
        for b in 0..n_b {
            for a in 0..n_a {
                let offset = normal.sample(&mut rng);
                let (top, bottom) = (surfaces.get(0, b, a), surfaces.get(last, b, a));
                for r in 0..n_r {
                    let row = (r + 1) as f64;
                    if row < top || row > bottom {
                        data[(b * n_a + a) * n_r + r] += offset;
                    }
                }
            }
        }
    }
    if spec.speckle_variance > 0.0 {
        let shape = 1.0 / spec.speckle_variance;
        let gamma = Gamma::new(shape, spec.speckle_variance)
            .map_err(|e| OctError::InvalidSpec(format!("speckle: {e}")))?;
        data.iter_mut().for_each(|v| *v *= gamma.sample(&mut rng));
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| OctError::InvalidSpec(format!("noise: {e}")))?;
        data.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    let volume = OctVolume::new(Dims::new(n_b, n_a, n_r), spec.spacing, data)?;
    Ok((volume, surfaces))
}

/// Ground-truth simulated motion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    /// Axial displacement per B-scan in rows: content moves toward larger rows.
    pub axial_truth: Vec<f64>,
    /// Transverse displacement per B-scan in A-scans: content moves toward larger `a`.
    pub transverse_truth: Vec<i64>,
    /// First B-scan index of each transverse group.
    pub group_boundaries: Vec<usize>,
}

impl MotionSpec {
    pub fn zeros(n_b: usize) -> Self {
        Self {
            axial_truth: vec![0.0; n_b],
            transverse_truth: vec![0; n_b],
            group_boundaries: vec![0],
        }
    }

    pub fn n_b(&self) -> usize {
        self.axial_truth.len()
    }

    /// Checks the amplitude bounds and group-wise constancy.
    pub fn validate(&self, max_axial: f64, max_transverse: i64) -> Result<()> {
        let n_b = self.n_b();
        if self.transverse_truth.len() != n_b {
            return Err(OctError::Dimension("axial/transverse truth lengths differ".into()));
        }
        if self.axial_truth.iter().any(|v| !(v.abs() <= max_axial)) {
            return Err(OctError::OutOfRange(format!("axial motion exceeds {max_axial}")));
        }
        if self.transverse_truth.iter().any(|v| v.abs() > max_transverse) {
            return Err(OctError::OutOfRange(format!(
                "transverse motion exceeds {max_transverse}"
            )));
        }
        if self.group_boundaries.first() != Some(&0)
            || self.group_boundaries.windows(2).any(|w| w[0] >= w[1])
            || self.group_boundaries.last().is_some_and(|&g| g >= n_b.max(1))
        {
            return Err(OctError::OutOfRange(format!(
                "bad group boundaries {:?}",
                self.group_boundaries
            )));
        }
        for (g, &start) in self.group_boundaries.iter().enumerate() {
            let end = self.group_boundaries.get(g + 1).copied().unwrap_or(n_b);
            if self.transverse_truth[start..end].iter().any(|&t| t != self.transverse_truth[start]) {
                return Err(OctError::OutOfRange(format!(
                    "transverse truth not constant within group starting at {start}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionConfig {
    pub max_axial: f64,
    pub max_transverse: i64,
    pub min_groups: usize,
    pub max_groups: usize,
    pub axial: bool,
    pub transverse: bool,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            max_axial: 15.0,
            max_transverse: 15,
            min_groups: 3,
            max_groups: 5,
            axial: true,
            transverse: true,
        }
    }
}

/// Draws per-B-scan axial shifts uniformly from `[-max_axial, max_axial]`
/// and groups of consecutive B-scans sharing one uniform integer transverse
/// shift from `[-max_transverse, max_transverse]`.
pub fn draw_motion(n_b: usize, cfg: &MotionConfig, rng: &mut impl Rng) -> Result<MotionSpec> {
    if cfg.min_groups < 1 || cfg.min_groups > cfg.max_groups || cfg.min_groups > n_b {
        return Err(OctError::InvalidConfig(format!(
            "cannot split {n_b} B-scans into {}..={} groups",
            cfg.min_groups, cfg.max_groups
        )));
    }
    let axial_truth: Vec<f64> = (0..n_b)
        .map(|_| {
            if cfg.axial {
                rng.random_range(-cfg.max_axial..=cfg.max_axial)
            } else {
                0.0
            }
        })
        .collect();
    let groups = rng.random_range(cfg.min_groups..=cfg.max_groups.min(n_b));
    let mut cuts: Vec<usize> = (1..n_b).collect();
    // Partial Fisher-Yates: the first groups-1 entries are a uniform subset.
    for i in 0..groups - 1 {
        let j = rng.random_range(i..cuts.len());
        cuts.swap(i, j);
    }
    let mut group_boundaries: Vec<usize> = std::iter::once(0)
        .chain(cuts[..groups - 1].iter().copied())
        .collect();
    group_boundaries.sort_unstable();
    let mut transverse_truth = vec![0i64; n_b];
    for (g, &start) in group_boundaries.iter().enumerate() {
        let end = group_boundaries.get(g + 1).copied().unwrap_or(n_b);
        let t = if cfg.transverse {
            rng.random_range(-cfg.max_transverse..=cfg.max_transverse)
        } else {
            0
        };
        transverse_truth[start..end].iter_mut().for_each(|v| *v = t);
    }
    Ok(MotionSpec {
        axial_truth,
        transverse_truth,
        group_boundaries,
    })
}

/// Corrupts a motion-free volume and its surfaces with the given motion:
/// B-scan `b` is rolled by `transverse_truth[b]` A-scans (edge replicated)
/// and resampled so its content moves down by `axial_truth[b]` rows.
pub fn apply_motion(
    v: &OctVolume,
    s: &SurfaceSet,
    motion: &MotionSpec,
) -> Result<(OctVolume, SurfaceSet)> {
    let dims = v.dims();
    if motion.n_b() != dims.n_b || motion.transverse_truth.len() != dims.n_b {
        return Err(OctError::Dimension(format!(
            "motion for {} B-scans, volume has {}",
            motion.n_b(),
            dims.n_b
        )));
    }
    if s.n_b() != dims.n_b || s.n_a() != dims.n_a {
        return Err(OctError::Dimension("surfaces do not match the volume".into()));
    }
    let undo_t: Vec<i64> = motion.transverse_truth.iter().map(|t| -t).collect();
    let rolled = shift_transverse(v, &undo_t)?;
    let undo_d: Vec<f64> = motion.axial_truth.iter().map(|d| -d).collect();
    let moved = resample_axial(&rolled, &undo_d)?;

    let mut surfaces = shift_surfaces_transverse(s, &undo_t)?;
    for l in 0..surfaces.n_surfaces() {
        for b in 0..dims.n_b {
            for a in 0..dims.n_a {
                let r = surfaces.get(l, b, a) + motion.axial_truth[b];
                surfaces.set(l, b, a, r);
            }
        }
    }
    surfaces.check_range(dims.n_r)?;
    Ok((moved, surfaces))
}

/// Draws motion from `seed` and applies it.
pub fn simulate_motion(
    v: &OctVolume,
    s: &SurfaceSet,
    seed: u64,
    cfg: &MotionConfig,
) -> Result<(OctVolume, SurfaceSet, MotionSpec)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let motion = draw_motion(v.dims().n_b, cfg, &mut rng)?;
    let (cv, cs) = apply_motion(v, s, &motion)?;
    Ok((cv, cs, motion))
}
