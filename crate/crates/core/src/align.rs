//! Axial B-scan alignment.
//!
//! The alignment objective combines a surface term (squared differences of
//! displaced surface positions between adjacent B-scans) with the local
//! normalized cross-correlation of adjacent displaced B-scans. Three solvers
//! are provided: the closed-form minimizer of the surface term, a direct
//! discrete optimizer of the combined objective, and a sequential
//! template-matching baseline that maximizes global NCC between neighbours.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OctError, Result};
use crate::stm::{resample_axial, resample_bscan};
use crate::volume::{gauge_mean_zero, DisplacementField, OctVolume, SurfaceSet};

/// Windowed variance below which a pixel's NCC is defined as zero.
pub const NCC_VARIANCE_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    /// Side length of the square local NCC window (odd, >= 3).
    pub ncc_window: usize,
    /// Integer search radius in rows for each coordinate move.
    pub search_radius: usize,
    pub subpixel_refine: bool,
    /// Maximum number of coordinate-descent sweeps.
    pub max_iters: usize,
    /// Relative objective decrease below which sweeps stop.
    pub tolerance: f64,
    pub w_ncc: f64,
    pub w_smooth: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            ncc_window: 9,
            search_radius: 15,
            subpixel_refine: true,
            max_iters: 4,
            tolerance: 1e-6,
            w_ncc: 1.0,
            w_smooth: 1.0,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ncc_window < 3 || self.ncc_window.is_multiple_of(2) {
            return Err(OctError::InvalidConfig(format!(
                "ncc_window must be odd and >= 3, got {}",
                self.ncc_window
            )));
        }
        if self.search_radius < 1 {
            return Err(OctError::InvalidConfig("search_radius must be >= 1".into()));
        }
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if !ok(self.w_ncc) || !ok(self.w_smooth) || !ok(self.tolerance) {
            return Err(OctError::InvalidConfig(
                "weights and tolerance must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Surface term
// ---------------------------------------------------------------------------

fn check_surfaces_vs_d(s: &SurfaceSet, d: &[f64]) -> Result<()> {
    if s.n_b() != d.len() {
        return Err(OctError::Dimension(format!(
            "{} displacements for {} B-scans of surfaces",
            d.len(),
            s.n_b()
        )));
    }
    Ok(())
}

/// Sum over surfaces, adjacent B-scan pairs and A-scans of
/// `((r[b,a] - d[b]) - (r[b+1,a] - d[b+1]))^2`.
pub fn loss_smooth_a(s: &SurfaceSet, d: &[f64]) -> Result<f64> {
    check_surfaces_vs_d(s, d)?;
    let mut total = 0.0;
    for l in 0..s.n_surfaces() {
        for b in 0..s.n_b().saturating_sub(1) {
            for a in 0..s.n_a() {
                let e = (s.get(l, b, a) - d[b]) - (s.get(l, b + 1, a) - d[b + 1]);
                total += e * e;
            }
        }
    }
    Ok(total)
}

/// Per-link sufficient statistics of the surface term: with
/// `x = r[b] - r[b+1]` over all (l, a) and `t = d[b+1] - d[b]`, the link
/// contributes `Σ(x + t)^2 = sumsq + 2 t sum + n t^2`.
#[derive(Clone, Copy, Debug)]
struct LinkStats {
    n: f64,
    sum: f64,
    sumsq: f64,
}

impl LinkStats {
    fn value(&self, t: f64) -> f64 {
        (self.sumsq + 2.0 * t * self.sum + self.n * t * t).max(0.0)
    }
}

fn link_stats(s: &SurfaceSet) -> Vec<LinkStats> {
    (0..s.n_b().saturating_sub(1))
        .map(|b| {
            let mut st = LinkStats {
                n: 0.0,
                sum: 0.0,
                sumsq: 0.0,
            };
            for l in 0..s.n_surfaces() {
                for a in 0..s.n_a() {
                    let x = s.get(l, b, a) - s.get(l, b + 1, a);
                    st.n += 1.0;
                    st.sum += x;
                    st.sumsq += x * x;
                }
            }
            st
        })
        .collect()
}

/// Exact minimizer of [`loss_smooth_a`] over `d`, gauge-fixed to zero mean.
pub fn solve_supervised(s: &SurfaceSet) -> Result<DisplacementField> {
    if s.n_b() < 2 {
        return Err(OctError::InvalidVolume(format!(
            "need at least 2 B-scans, got {}",
            s.n_b()
        )));
    }
    if s.n_surfaces() == 0 || s.n_a() == 0 {
        return Err(OctError::Dimension("no surface samples to align".into()));
    }
    let mut d = vec![0.0; s.n_b()];
    for (b, st) in link_stats(s).iter().enumerate() {
        // Zero link residual on average: t = -mean(x) = mean(r[b+1] - r[b]).
        d[b + 1] = d[b] - st.sum / st.n;
    }
    gauge_mean_zero(&mut d);
    Ok(DisplacementField::axial_only(d))
}

// ---------------------------------------------------------------------------
// Local NCC
// ---------------------------------------------------------------------------

/// Sums of `src` over clipped `(2h+1)²` windows on an `n_a × n_r` image
/// stored column-major (rows contiguous).
fn box_sum(src: &[f64], n_a: usize, n_r: usize, h: usize) -> Vec<f64> {
    let mut tmp = vec![0.0; src.len()];
    let mut prefix = vec![0.0; n_r.max(n_a) + 1];
    for a in 0..n_a {
        let col = &src[a * n_r..(a + 1) * n_r];
        for r in 0..n_r {
            prefix[r + 1] = prefix[r] + col[r];
        }
        for r in 0..n_r {
            let lo = r.saturating_sub(h);
            let hi = (r + h).min(n_r - 1);
            tmp[a * n_r + r] = prefix[hi + 1] - prefix[lo];
        }
    }
    let mut out = vec![0.0; src.len()];
    for r in 0..n_r {
        for a in 0..n_a {
            prefix[a + 1] = prefix[a] + tmp[a * n_r + r];
        }
        for a in 0..n_a {
            let lo = a.saturating_sub(h);
            let hi = (a + h).min(n_a - 1);
            out[a * n_r + r] = prefix[hi + 1] - prefix[lo];
        }
    }
    out
}

/// Windowed first and second moments of one image.
#[derive(Clone, Debug)]
struct Moments {
    s: Vec<f64>,
    ss: Vec<f64>,
}

/// Local squared-NCC scorer for images of a fixed size. Windows are clipped
/// at the image border and the local mean uses the clipped pixel count.
#[derive(Clone, Debug)]
pub struct LocalNcc {
    n_a: usize,
    n_r: usize,
    half: usize,
    counts: Vec<f64>,
    eps: f64,
}

impl LocalNcc {
    pub fn new(n_a: usize, n_r: usize, window: usize) -> Self {
        let half = window / 2;
        let extent = |i: usize, n: usize| ((i + half).min(n - 1) - i.saturating_sub(half) + 1) as f64;
        let mut counts = vec![0.0; n_a * n_r];
        for a in 0..n_a {
            for r in 0..n_r {
                counts[a * n_r + r] = extent(a, n_a) * extent(r, n_r);
            }
        }
        Self {
            n_a,
            n_r,
            half,
            counts,
            eps: NCC_VARIANCE_EPS,
        }
    }

    fn moments(&self, img: &[f64]) -> Moments {
        let sq: Vec<f64> = img.iter().map(|v| v * v).collect();
        Moments {
            s: box_sum(img, self.n_a, self.n_r, self.half),
            ss: box_sum(&sq, self.n_a, self.n_r, self.half),
        }
    }

    #[inline]
    fn pixel(&self, i: usize, sx: f64, sxx: f64, sy: f64, syy: f64, sxy: f64) -> f64 {
        let n = self.counts[i];
        let vx = sxx - sx * sx / n;
        let vy = syy - sy * sy / n;
        if vx / n < self.eps || vy / n < self.eps {
            return 0.0;
        }
        let cross = sxy - sx * sy / n;
        cross * cross / (vx * vy)
    }

    fn score_with(&self, x: &[f64], mx: &Moments, y: &[f64], my: &Moments) -> f64 {
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let sxy = box_sum(&xy, self.n_a, self.n_r, self.half);
        (0..x.len())
            .map(|i| self.pixel(i, mx.s[i], mx.ss[i], my.s[i], my.ss[i], sxy[i]))
            .sum()
    }

    /// Per-pixel squared local NCC of two images.
    pub fn map(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let (mx, my) = (self.moments(x), self.moments(y));
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let sxy = box_sum(&xy, self.n_a, self.n_r, self.half);
        (0..x.len())
            .map(|i| self.pixel(i, mx.s[i], mx.ss[i], my.s[i], my.ss[i], sxy[i]))
            .collect()
    }

    /// Sum of per-pixel squared local NCC.
    pub fn score(&self, x: &[f64], y: &[f64]) -> f64 {
        self.score_with(x, &self.moments(x), y, &self.moments(y))
    }
}

/// Per-pixel squared local NCC between two `n_a × n_r` images.
pub fn local_ncc_map(x: &[f64], y: &[f64], n_a: usize, n_r: usize, window: usize) -> Vec<f64> {
    LocalNcc::new(n_a, n_r, window).map(x, y)
}

/// Local NCC similarity of the displaced volume: sum over adjacent B-scan
/// pairs and pixels of the squared windowed correlation. Larger is better.
pub fn loss_ncc(v: &OctVolume, d: &[f64], cfg: &AlignConfig) -> Result<f64> {
    cfg.validate()?;
    let warped = resample_axial(v, d)?;
    let dims = v.dims();
    let ncc = LocalNcc::new(dims.n_a, dims.n_r, cfg.ncc_window);
    Ok((0..dims.n_b - 1)
        .map(|b| ncc.score(warped.bscan(b), warped.bscan(b + 1)))
        .sum())
}

/// Global Pearson correlation of two equally sized images; zero when either
/// per-pixel variance falls below [`NCC_VARIANCE_EPS`].
pub fn global_ncc(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, q) in x.iter().zip(y) {
        let (dp, dq) = (p - mx, q - my);
        sxy += dp * dq;
        sxx += dp * dp;
        syy += dq * dq;
    }
    if sxx / n < NCC_VARIANCE_EPS || syy / n < NCC_VARIANCE_EPS {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

// ---------------------------------------------------------------------------
// Direct optimizer
// ---------------------------------------------------------------------------

/// Optimizer output with the objective recorded after initialization and
/// after each coordinate-descent sweep.
#[derive(Clone, Debug)]
pub struct AlignTrace {
    pub field: DisplacementField,
    pub objective: Vec<f64>,
    pub sweeps: usize,
}

struct Objective<'a> {
    v: &'a OctVolume,
    cfg: &'a AlignConfig,
    ncc: LocalNcc,
    links: Option<Vec<LinkStats>>,
}

struct State {
    d: Vec<f64>,
    imgs: Vec<Vec<f64>>,
    moments: Vec<Moments>,
    /// NCC score of link (b, b+1).
    pair: Vec<f64>,
}

impl<'a> Objective<'a> {
    fn n_b(&self) -> usize {
        self.v.dims().n_b
    }

    fn warp(&self, b: usize, shift: f64) -> (Vec<f64>, Moments) {
        let img = resample_bscan(self.v.bscan(b), self.v.dims().n_r, shift);
        let m = self.ncc.moments(&img);
        (img, m)
    }

    fn smooth(&self, link: usize, t: f64) -> f64 {
        match &self.links {
            Some(links) => self.cfg.w_smooth * links[link].value(t),
            None => 0.0,
        }
    }

    fn state(&self, d: Vec<f64>) -> State {
        let (imgs, moments): (Vec<_>, Vec<_>) = (0..self.n_b())
            .into_par_iter()
            .map(|b| self.warp(b, d[b]))
            .unzip();
        let pair = (0..self.n_b() - 1)
            .into_par_iter()
            .map(|b| self.ncc.score_with(&imgs[b], &moments[b], &imgs[b + 1], &moments[b + 1]))
            .collect();
        State {
            d,
            imgs,
            moments,
            pair,
        }
    }

    fn total(&self, st: &State) -> f64 {
        let ncc: f64 = st.pair.iter().sum();
        let smooth: f64 = (0..self.n_b() - 1)
            .map(|b| self.smooth(b, st.d[b + 1] - st.d[b]))
            .sum();
        -self.cfg.w_ncc * ncc + smooth
    }

    /// Terms of the objective that depend on `d[b]`, evaluated with `d[b] = shift`.
    fn local(&self, st: &State, b: usize, shift: f64) -> (f64, Vec<f64>, Moments, [f64; 2]) {
        let (img, m) = self.warp(b, shift);
        let mut value = 0.0;
        let mut pairs = [0.0; 2];
        if b > 0 {
            pairs[0] = self
                .ncc
                .score_with(&st.imgs[b - 1], &st.moments[b - 1], &img, &m);
            value += -self.cfg.w_ncc * pairs[0] + self.smooth(b - 1, shift - st.d[b - 1]);
        }
        if b + 1 < self.n_b() {
            pairs[1] = self
                .ncc
                .score_with(&img, &m, &st.imgs[b + 1], &st.moments[b + 1]);
            value += -self.cfg.w_ncc * pairs[1] + self.smooth(b, st.d[b + 1] - shift);
        }
        (value, img, m, pairs)
    }

    fn current_local(&self, st: &State, b: usize) -> f64 {
        let mut value = 0.0;
        if b > 0 {
            value += -self.cfg.w_ncc * st.pair[b - 1] + self.smooth(b - 1, st.d[b] - st.d[b - 1]);
        }
        if b + 1 < self.n_b() {
            value += -self.cfg.w_ncc * st.pair[b] + self.smooth(b, st.d[b + 1] - st.d[b]);
        }
        value
    }

    /// Best relative shift of B-scan `b + 1` against the fixed B-scan `b`,
    /// scoring only link `b`. Used to build the initial chain.
    fn link_search(&self, fixed: &[f64], fixed_m: &Moments, d_prev: f64, b: usize) -> f64 {
        let reach = 2 * self.cfg.search_radius as i64;
        let score = |t: f64| {
            let (img, m) = self.warp(b + 1, d_prev + t);
            -self.cfg.w_ncc * self.ncc.score_with(fixed, fixed_m, &img, &m) + self.smooth(b, t)
        };
        let values: Vec<f64> = (-reach..=reach)
            .into_par_iter()
            .map(|t| score(t as f64))
            .collect();
        let best = argmin_prefer_small(&values, reach);
        let mut t = best as f64 - reach as f64;
        if self.cfg.subpixel_refine && best > 0 && best + 1 < values.len() {
            if let Some(off) = parabolic_offset(values[best - 1], values[best], values[best + 1]) {
                if score(t + off) < values[best] {
                    t += off;
                }
            }
        }
        t
    }

    fn chain_init(&self) -> Vec<f64> {
        let n_b = self.n_b();
        let mut d = vec![0.0; n_b];
        let (mut fixed, mut fixed_m) = self.warp(0, 0.0);
        for b in 0..n_b - 1 {
            let t = self.link_search(&fixed, &fixed_m, d[b], b);
            d[b + 1] = d[b] + t;
            let next = self.warp(b + 1, d[b + 1]);
            fixed = next.0;
            fixed_m = next.1;
        }
        gauge_mean_zero(&mut d);
        d
    }

    /// One coordinate move on `d[b]`; returns whether `d[b]` changed.
    fn coordinate_step(&self, st: &mut State, b: usize) -> bool {
        let radius = self.cfg.search_radius as i64;
        let base = st.d[b];
        let current = self.current_local(st, b);
        let values: Vec<f64> = (-radius..=radius)
            .into_par_iter()
            .map(|k| {
                if k == 0 {
                    current
                } else {
                    self.local(st, b, base + k as f64).0
                }
            })
            .collect();
        let best = argmin_prefer_small(&values, radius);
        let mut target = base + (best as i64 - radius) as f64;
        let mut best_value = values[best];
        if self.cfg.subpixel_refine && best > 0 && best + 1 < values.len() {
            if let Some(off) = parabolic_offset(values[best - 1], values[best], values[best + 1]) {
                let v = self.local(st, b, target + off).0;
                if v < best_value {
                    target += off;
                    best_value = v;
                }
            }
        }
        if best_value < current && target != base {
            let (_, img, m, pairs) = self.local(st, b, target);
            st.d[b] = target;
            st.imgs[b] = img;
            st.moments[b] = m;
            if b > 0 {
                st.pair[b - 1] = pairs[0];
            }
            if b + 1 < self.n_b() {
                st.pair[b] = pairs[1];
            }
            true
        } else {
            false
        }
    }
}

/// Index of the minimum; ties prefer the entry closest to `center`.
fn argmin_prefer_small(values: &[f64], center: i64) -> usize {
    let mut best = center as usize;
    for (i, &v) in values.iter().enumerate() {
        let closer = (i as i64 - center).abs() < (best as i64 - center).abs();
        if v < values[best] || (v == values[best] && closer) {
            best = i;
        }
    }
    best
}

/// Vertex of the parabola through three equally spaced samples, relative to
/// the middle one. `None` unless the samples are strictly convex.
pub fn parabolic_offset(left: f64, mid: f64, right: f64) -> Option<f64> {
    let denom = left - 2.0 * mid + right;
    if !(denom > 0.0) {
        return None;
    }
    let off = 0.5 * (left - right) / denom;
    (off.abs() < 1.0 && off.is_finite()).then_some(off)
}

/// Direct minimization of `w_ncc·(−NCC) + w_smooth·surface term` over the
/// axial displacements; the surface term is dropped when `s` is `None`.
pub fn optimize_alignment(
    v: &OctVolume,
    s: Option<&SurfaceSet>,
    cfg: &AlignConfig,
) -> Result<DisplacementField> {
    optimize_alignment_traced(v, s, cfg).map(|t| t.field)
}

/// [`optimize_alignment`] with the objective history.
///
/// The displacement chain is first initialized link by link (each B-scan
/// searched against its already-placed predecessor over twice the search
/// radius, since relative offsets of two shifts in `[-R, R]` span `[-2R, 2R]`),
/// then refined by coordinate-descent sweeps in which every `d[b]` is searched
/// over `d[b] + [-R, R]` against both neighbours, followed by optional
/// parabolic sub-pixel refinement. Only strictly improving moves are accepted,
/// so the objective never increases from one sweep to the next.
pub fn optimize_alignment_traced(
    v: &OctVolume,
    s: Option<&SurfaceSet>,
    cfg: &AlignConfig,
) -> Result<AlignTrace> {
    cfg.validate()?;
    let dims = v.dims();
    if dims.n_b < 2 {
        return Err(OctError::InvalidVolume("alignment needs at least 2 B-scans".into()));
    }
    let links = match s {
        Some(s) => {
            if s.n_b() != dims.n_b || s.n_a() != dims.n_a {
                return Err(OctError::Dimension(format!(
                    "surfaces are {}x{}, volume is {}x{}",
                    s.n_b(),
                    s.n_a(),
                    dims.n_b,
                    dims.n_a
                )));
            }
            Some(link_stats(s))
        }
        None => None,
    };
    let obj = Objective {
        v,
        cfg,
        ncc: LocalNcc::new(dims.n_a, dims.n_r, cfg.ncc_window),
        links,
    };

    let zero = obj.state(vec![0.0; dims.n_b]);
    let init = obj.state(obj.chain_init());
    let (zero_f, init_f) = (obj.total(&zero), obj.total(&init));
    let mut st = if init_f <= zero_f { init } else { zero };
    let mut current = init_f.min(zero_f);
    if !current.is_finite() {
        return Err(OctError::Numerical { sweep: 0 });
    }
    let mut objective = vec![current];

    let n_b = dims.n_b;
    let mut dirty = vec![true; n_b];
    let mut sweeps = 0;
    while sweeps < cfg.max_iters {
        sweeps += 1;
        let mut moved = vec![false; n_b];
        for b in 0..n_b {
            // The local objective of b only depends on d[b-1..=b+1].
            if !dirty[b] {
                continue;
            }
            moved[b] = obj.coordinate_step(&mut st, b);
            if moved[b] && b + 1 < n_b {
                dirty[b + 1] = true;
            }
        }
        let next = obj.total(&st);
        if !next.is_finite() {
            return Err(OctError::Numerical { sweep: sweeps });
        }
        objective.push(next);
        for b in 0..n_b {
            dirty[b] = moved[b]
                || (b > 0 && moved[b - 1])
                || (b + 1 < n_b && moved[b + 1]);
        }
        let decrease = current - next;
        current = next;
        if !dirty.iter().any(|&x| x) || decrease <= cfg.tolerance * current.abs().max(1.0) {
            break;
        }
    }

    let mut d = st.d;
    gauge_mean_zero(&mut d);
    Ok(AlignTrace {
        field: DisplacementField::axial_only(d),
        objective,
        sweeps,
    })
}

/// Sequential rigid template matching: each B-scan is matched against its
/// immediate predecessor by maximizing global NCC over relative shifts in
/// `[-2R, 2R]`; the relative shifts are accumulated and gauge-fixed.
pub fn template_match_align(v: &OctVolume, cfg: &AlignConfig) -> Result<DisplacementField> {
    cfg.validate()?;
    let dims = v.dims();
    if dims.n_b < 2 {
        return Err(OctError::InvalidVolume("alignment needs at least 2 B-scans".into()));
    }
    let reach = 2 * cfg.search_radius as i64;
    let mut d = vec![0.0; dims.n_b];
    for b in 0..dims.n_b - 1 {
        let template = v.bscan(b);
        let moving = v.bscan(b + 1);
        let score = |t: f64| -global_ncc(template, &resample_bscan(moving, dims.n_r, t));
        let values: Vec<f64> = (-reach..=reach)
            .into_par_iter()
            .map(|t| score(t as f64))
            .collect();
        let best = argmin_prefer_small(&values, reach);
        let mut t = best as f64 - reach as f64;
        if cfg.subpixel_refine && best > 0 && best + 1 < values.len() {
            if let Some(off) = parabolic_offset(values[best - 1], values[best], values[best + 1]) {
                if score(t + off) < values[best] {
                    t += off;
                }
            }
        }
        d[b + 1] = d[b] + t;
    }
    gauge_mean_zero(&mut d);
    Ok(DisplacementField::axial_only(d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Dims, Spacing};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct O(N·n²) windowed NCC² with clipped windows.
    fn brute_ncc_map(x: &[f64], y: &[f64], n_a: usize, n_r: usize, n: usize) -> Vec<f64> {
        let h = (n / 2) as i64;
        let mut out = vec![0.0; x.len()];
        for a in 0..n_a as i64 {
            for r in 0..n_r as i64 {
                let mut pix = Vec::new();
                for da in -h..=h {
                    for dr in -h..=h {
                        let (aa, rr) = (a + da, r + dr);
                        if aa >= 0 && rr >= 0 && aa < n_a as i64 && rr < n_r as i64 {
                            pix.push((aa as usize) * n_r + rr as usize);
                        }
                    }
                }
                let cnt = pix.len() as f64;
                let mx = pix.iter().map(|&i| x[i]).sum::<f64>() / cnt;
                let my = pix.iter().map(|&i| y[i]).sum::<f64>() / cnt;
                let cross: f64 = pix.iter().map(|&i| (x[i] - mx) * (y[i] - my)).sum();
                let vx: f64 = pix.iter().map(|&i| (x[i] - mx).powi(2)).sum();
                let vy: f64 = pix.iter().map(|&i| (y[i] - my).powi(2)).sum();
                let idx = a as usize * n_r + r as usize;
                out[idx] = if vx / cnt < NCC_VARIANCE_EPS || vy / cnt < NCC_VARIANCE_EPS {
                    0.0
                } else {
                    cross * cross / (vx * vy)
                };
            }
        }
        out
    }

    fn random_surfaces(seed: u64, l: usize, n_b: usize, n_a: usize) -> SurfaceSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SurfaceSet::from_fn(l, n_b, n_a, |_, _, _| rng.random_range(1.0..40.0)).unwrap()
    }

    #[test]
    fn smooth_a_examples() {
        let s = SurfaceSet::from_fn(2, 3, 4, |l, _, _| 5.0 + l as f64).unwrap();
        assert_eq!(loss_smooth_a(&s, &[0.0; 3]).unwrap(), 0.0);
        let s = SurfaceSet::with_default_names(1, 2, 1, vec![5.0, 8.0]).unwrap();
        assert_eq!(loss_smooth_a(&s, &[0.0, 3.0]).unwrap(), 0.0);
        assert!(loss_smooth_a(&s, &[0.0]).is_err());
    }

    #[test]
    fn smooth_a_matches_double_loop() {
        let s = random_surfaces(11, 1, 3, 4);
        let d = [0.3, -1.7, 2.2];
        let mut brute = 0.0;
        for b in 0..2 {
            for a in 0..4 {
                let e = (s.get(0, b, a) - d[b]) - (s.get(0, b + 1, a) - d[b + 1]);
                brute += e * e;
            }
        }
        assert!((loss_smooth_a(&s, &d).unwrap() - brute).abs() < 1e-12);
    }

    #[test]
    fn smooth_a_is_gauge_invariant() {
        let s = random_surfaces(12, 2, 5, 3);
        let d = [0.5, 1.0, -2.0, 0.25, 4.0];
        let shifted: Vec<f64> = d.iter().map(|v| v + 8.0).collect();
        assert_eq!(loss_smooth_a(&s, &d).unwrap(), loss_smooth_a(&s, &shifted).unwrap());
    }

    #[test]
    fn supervised_solver_on_aligned_surfaces_is_zero() {
        let s = SurfaceSet::from_fn(3, 6, 5, |l, _, a| 10.0 + 5.0 * l as f64 + 0.3 * a as f64).unwrap();
        let d = solve_supervised(&s).unwrap();
        assert!(d.axial.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn supervised_solver_is_optimal_and_zeroes_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = random_surfaces(14, 2, 6, 5);
        let d = solve_supervised(&s).unwrap().axial;
        let best = loss_smooth_a(&s, &d).unwrap();
        for _ in 0..1000 {
            let p: Vec<f64> = d.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
            assert!(best <= loss_smooth_a(&s, &p).unwrap());
        }
        // ∂L/∂d_b = Σ_{l,a} (2 e_{b-1} - 2 e_b) with e_b the link residual.
        for b in 0..6 {
            let mut g = 0.0;
            for l in 0..2 {
                for a in 0..5 {
                    if b > 0 {
                        g += 2.0 * ((s.get(l, b - 1, a) - d[b - 1]) - (s.get(l, b, a) - d[b]));
                    }
                    if b + 1 < 6 {
                        g -= 2.0 * ((s.get(l, b, a) - d[b]) - (s.get(l, b + 1, a) - d[b + 1]));
                    }
                }
            }
            assert!(g.abs() < 1e-8, "gradient {g} at b={b}");
        }
        assert!(d.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn supervised_solver_needs_two_bscans() {
        let s = SurfaceSet::with_default_names(1, 1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(solve_supervised(&s).is_err());
    }

    #[test]
    fn local_ncc_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.5 * v + rng.random_range(0.0..0.5)).collect();
        for n in [3, 5] {
            let fast = local_ncc_map(&x, &y, 8, 8, n);
            let brute = brute_ncc_map(&x, &y, 8, 8, n);
            for (f, b) in fast.iter().zip(&brute) {
                assert!((f - b).abs() < 1e-10, "{f} vs {b}");
            }
        }
    }

    #[test]
    fn self_correlation_is_one_and_constant_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x: Vec<f64> = (0..12 * 10).map(|_| rng.random_range(0.0..1.0)).collect();
        let m = local_ncc_map(&x, &x, 12, 10, 9);
        assert!(m.iter().all(|v| (v - 1.0).abs() < 1e-9));
        let c = vec![0.7; 120];
        assert!(local_ncc_map(&x, &c, 12, 10, 9).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn local_ncc_is_affine_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..1.0)).collect();
        let y2: Vec<f64> = y.iter().map(|v| 3.0 * v - 2.0).collect();
        let a = LocalNcc::new(10, 10, 3).score(&x, &y);
        let b = LocalNcc::new(10, 10, 3).score(&x, &y2);
        assert!((a - b).abs() < 1e-9 * a.max(1.0));
    }

    #[test]
    fn loss_ncc_of_identical_bscans_counts_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let img: Vec<f64> = (0..6 * 9).map(|_| rng.random_range(0.0..1.0)).collect();
        let data: Vec<f64> = (0..3).flat_map(|_| img.clone()).collect();
        let v = OctVolume::new(Dims::new(3, 6, 9), Spacing::default(), data).unwrap();
        let score = loss_ncc(&v, &[0.0; 3], &AlignConfig::default()).unwrap();
        assert!((score - 2.0 * 54.0).abs() < 1e-8);
    }

    #[test]
    fn config_validation() {
        let bad = AlignConfig {
            ncc_window: 4,
            ..AlignConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AlignConfig {
            search_radius: 0,
            ..AlignConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn parabola_vertex() {
        // f(x) = (x - 0.3)^2 sampled at -1, 0, 1.
        let f = |x: f64| (x - 0.3) * (x - 0.3);
        let off = parabolic_offset(f(-1.0), f(0.0), f(1.0)).unwrap();
        assert!((off - 0.3).abs() < 1e-12);
        assert!(parabolic_offset(1.0, 2.0, 1.0).is_none());
    }
}
