//! Segmentation and alignment losses with hand-derived gradients.
//!
//! Surface gradients use forward differences along A-scans and B-scans in
//! pixel units; border samples contribute only the differences that exist.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::align::loss_smooth_a;
use crate::error::{OctError, Result};
use crate::volume::{ClassProbabilities, LabelMap, SurfaceDistribution, SurfaceSet};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;
/// Smoothing term of the soft Dice coefficient.
pub const DICE_EPS: f64 = 1e-6;

fn check_dist_vs_surfaces(q: &SurfaceDistribution, s: &SurfaceSet) -> Result<()> {
    if q.n_surfaces() != s.n_surfaces() || q.n_b() != s.n_b() || q.n_a() != s.n_a() {
        return Err(OctError::Dimension(format!(
            "distribution is {}x{}x{}, surfaces are {}x{}x{}",
            q.n_surfaces(),
            q.n_b(),
            q.n_a(),
            s.n_surfaces(),
            s.n_b(),
            s.n_a()
        )));
    }
    Ok(())
}

/// Expected 1-based row under each per-A-scan distribution.
pub fn soft_argmax(q: &SurfaceDistribution) -> Result<SurfaceSet> {
    q.check_normalized()?;
    SurfaceSet::from_fn(q.n_surfaces(), q.n_b(), q.n_a(), |l, b, a| {
        q.vector(l, b, a)
            .iter()
            .enumerate()
            .map(|(r, p)| (r + 1) as f64 * p)
            .sum()
    })
}

/// 0-based storage row of an integer ground-truth position.
fn gt_row(r: f64, n_r: usize, l: usize, b: usize, a: usize) -> Result<usize> {
    if r.fract() != 0.0 || r < 1.0 || r > n_r as f64 {
        return Err(OctError::OutOfRange(format!(
            "ground truth row {r} at (l={l}, b={b}, a={a}) is not an integer in [1, {n_r}]"
        )));
    }
    Ok(r as usize - 1)
}

/// `−Σ log q(r_gt)` over all surfaces and A-scans.
pub fn loss_ce(q: &SurfaceDistribution, gt: &SurfaceSet) -> Result<f64> {
    check_dist_vs_surfaces(q, gt)?;
    let mut total = 0.0;
    for l in 0..q.n_surfaces() {
        for b in 0..q.n_b() {
            for a in 0..q.n_a() {
                let r = gt_row(gt.get(l, b, a), q.n_r(), l, b, a)?;
                total -= q.vector(l, b, a)[r].max(PROB_FLOOR).ln();
            }
        }
    }
    Ok(total)
}

/// Gradient of [`loss_ce`] with respect to `q`.
pub fn grad_ce(q: &SurfaceDistribution, gt: &SurfaceSet) -> Result<SurfaceDistribution> {
    check_dist_vs_surfaces(q, gt)?;
    let mut g = q.zeros_like();
    for l in 0..q.n_surfaces() {
        for b in 0..q.n_b() {
            for a in 0..q.n_a() {
                let r = gt_row(gt.get(l, b, a), q.n_r(), l, b, a)?;
                let o = q.offset(l, b, a) + r;
                let p = q.probs()[o];
                if p > PROB_FLOOR {
                    g.probs_mut()[o] = -1.0 / p;
                }
            }
        }
    }
    Ok(g)
}

#[inline]
fn huber(t: f64) -> f64 {
    if t.abs() < 1.0 {
        0.5 * t * t
    } else {
        t.abs() - 0.5
    }
}

#[inline]
fn huber_slope(t: f64) -> f64 {
    if t.abs() < 1.0 {
        t
    } else {
        t.signum()
    }
}

/// Smooth L1 (Huber, threshold 1) summed over surfaces and A-scans.
pub fn loss_smooth_l1(pred: &SurfaceSet, gt: &SurfaceSet) -> Result<f64> {
    pred.check_same_shape(gt)?;
    Ok(pred
        .positions()
        .iter()
        .zip(gt.positions())
        .map(|(p, g)| huber(p - g))
        .sum())
}

/// Gradient of [`loss_smooth_l1`] with respect to `pred`.
pub fn grad_smooth_l1(pred: &SurfaceSet, gt: &SurfaceSet) -> Result<SurfaceSet> {
    pred.check_same_shape(gt)?;
    let mut g = pred.clone();
    for (o, (p, t)) in g
        .positions_mut()
        .iter_mut()
        .zip(pred.positions().iter().zip(gt.positions()))
    {
        *o = huber_slope(p - t);
    }
    Ok(g)
}

/// Calls `f(i, j)` for every forward-difference pair `S[j] - S[i]` of one
/// surface laid out `(b, a)`.
fn for_each_difference(n_b: usize, n_a: usize, mut f: impl FnMut(usize, usize)) {
    for b in 0..n_b {
        for a in 0..n_a {
            let i = b * n_a + a;
            if a + 1 < n_a {
                f(i, i + 1);
            }
            if b + 1 < n_b {
                f(i, i + n_a);
            }
        }
    }
}

/// Squared forward-difference gradient norm of surface `l`.
pub fn loss_smooth_s_surface(s: &SurfaceSet, l: usize) -> f64 {
    let surf = s.surface(l);
    let mut total = 0.0;
    for_each_difference(s.n_b(), s.n_a(), |i, j| {
        let e = surf[j] - surf[i];
        total += e * e;
    });
    total
}

/// [`loss_smooth_s_surface`] summed over surfaces.
pub fn loss_smooth_s(s: &SurfaceSet) -> f64 {
    (0..s.n_surfaces()).map(|l| loss_smooth_s_surface(s, l)).sum()
}

/// Gradient of [`loss_smooth_s`] with respect to every position.
pub fn grad_smooth_s(s: &SurfaceSet) -> SurfaceSet {
    let mut g = s.clone();
    g.positions_mut().iter_mut().for_each(|x| *x = 0.0);
    let per = s.n_b() * s.n_a();
    for l in 0..s.n_surfaces() {
        let surf = s.surface(l);
        let out = &mut g.positions_mut()[l * per..(l + 1) * per];
        for_each_difference(s.n_b(), s.n_a(), |i, j| {
            let e = 2.0 * (surf[j] - surf[i]);
            out[j] += e;
            out[i] -= e;
        });
    }
    g
}

/// Sum over A-scans of the unsquared forward-difference gradient norm of
/// surface `l`.
pub fn gradient_norm_sum(s: &SurfaceSet, l: usize) -> f64 {
    let surf = s.surface(l);
    let (n_b, n_a) = (s.n_b(), s.n_a());
    let mut total = 0.0;
    for b in 0..n_b {
        for a in 0..n_a {
            let i = b * n_a + a;
            let ga = if a + 1 < n_a { surf[i + 1] - surf[i] } else { 0.0 };
            let gb = if b + 1 < n_b { surf[i + n_a] - surf[i] } else { 0.0 };
            total += ga.hypot(gb);
        }
    }
    total
}

/// Mean voxel cross entropy plus `1 − mean soft Dice` over classes.
pub fn loss_dice_ce(p: &ClassProbabilities, m: &LabelMap) -> Result<f64> {
    if p.n_classes() != m.n_classes() {
        return Err(OctError::Dimension(format!(
            "{} probability classes for {} label classes",
            p.n_classes(),
            m.n_classes()
        )));
    }
    if p.dims() != m.dims() {
        return Err(OctError::Dimension("probability and label grids differ".into()));
    }
    let c = p.n_classes();
    let mut ce = 0.0;
    let mut inter = vec![0.0; c];
    let mut p_mass = vec![0.0; c];
    let mut g_mass = vec![0.0; c];
    for (vox, &lab) in p.probs().chunks_exact(c).zip(m.labels()) {
        let lab = lab as usize;
        ce -= vox[lab].max(PROB_FLOOR).ln();
        inter[lab] += vox[lab];
        g_mass[lab] += 1.0;
        for (acc, &pv) in p_mass.iter_mut().zip(vox) {
            *acc += pv;
        }
    }
    let n_vox = m.labels().len() as f64;
    let dice: f64 = (0..c)
        .map(|k| (2.0 * inter[k] + DICE_EPS) / (p_mass[k] + g_mass[k] + DICE_EPS))
        .sum::<f64>()
        / c as f64;
    Ok(ce / n_vox + (1.0 - dice))
}

/// Base weight and derived per-surface weights of the surface smoothness term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_base: f64,
    pub lambda_l: Vec<f64>,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !ok(self.lambda_base) || !self.lambda_l.iter().all(|&x| ok(x)) {
            return Err(OctError::InvalidConfig(
                "loss weights must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// `λ_l = λ_base / Σ_{b,a} ‖∇S_l‖` per volume, averaged over volumes.
pub fn lambda_weights(gts: &[SurfaceSet], lambda_base: f64) -> Result<LossWeights> {
    let first = gts
        .first()
        .ok_or_else(|| OctError::EmptySurface("no ground-truth volumes for weights".into()))?;
    let n_l = first.n_surfaces();
    let mut acc = vec![0.0; n_l];
    for s in gts {
        if s.n_surfaces() != n_l {
            return Err(OctError::Dimension(format!(
                "volumes have {} and {} surfaces",
                n_l,
                s.n_surfaces()
            )));
        }
        for (l, slot) in acc.iter_mut().enumerate() {
            let denom = gradient_norm_sum(s, l);
            if denom == 0.0 {
                return Err(OctError::FlatSurface { surface: l });
            }
            *slot += lambda_base / denom;
        }
    }
    let weights = LossWeights {
        lambda_base,
        lambda_l: acc.into_iter().map(|x| x / gts.len() as f64).collect(),
    };
    weights.validate()?;
    Ok(weights)
}

/// Per-term breakdown of the segmentation objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegLoss {
    /// Dice + cross entropy of the label head; `None` when no class
    /// probabilities were given.
    pub dice_ce: Option<f64>,
    pub ce: f64,
    pub smooth_l1: f64,
    /// Unweighted smoothness of each predicted surface.
    pub smooth_s: Vec<f64>,
    /// `Σ_l λ_l · smooth_s[l]`.
    pub smooth_s_weighted: f64,
    pub total: f64,
}

/// Segmentation objective: Dice+CE (optional) + surface CE + smooth L1 on
/// the soft-argmax surfaces + weighted smoothness of those surfaces.
pub fn loss_seg_total(
    q: &SurfaceDistribution,
    labels: Option<(&ClassProbabilities, &LabelMap)>,
    gt: &SurfaceSet,
    weights: &LossWeights,
) -> Result<SegLoss> {
    weights.validate()?;
    if weights.lambda_l.len() != q.n_surfaces() {
        return Err(OctError::Dimension(format!(
            "{} surface weights for {} surfaces",
            weights.lambda_l.len(),
            q.n_surfaces()
        )));
    }
    let dice_ce = labels.map(|(p, m)| loss_dice_ce(p, m)).transpose()?;
    let ce = loss_ce(q, gt)?;
    let pred = soft_argmax(q)?;
    let smooth_l1 = loss_smooth_l1(&pred, gt)?;
    let smooth_s: Vec<f64> = (0..pred.n_surfaces())
        .map(|l| loss_smooth_s_surface(&pred, l))
        .collect();
    let smooth_s_weighted: f64 = smooth_s
        .iter()
        .zip(&weights.lambda_l)
        .map(|(s, w)| s * w)
        .sum();
    let total = dice_ce.unwrap_or(0.0) + ce + smooth_l1 + smooth_s_weighted;
    Ok(SegLoss {
        dice_ce,
        ce,
        smooth_l1,
        smooth_s,
        smooth_s_weighted,
        total,
    })
}

fn check_mask(mask: &[bool], n_b: usize) -> Result<()> {
    if mask.len() != n_b {
        return Err(OctError::Dimension(format!(
            "annotation mask has {} entries for {} B-scans",
            mask.len(),
            n_b
        )));
    }
    Ok(())
}

/// Ground-truth rows on annotated B-scans, predicted rows elsewhere.
pub fn assemble_mixed(gt: &SurfaceSet, pred: &SurfaceSet, annotated: &[bool]) -> Result<SurfaceSet> {
    gt.check_same_shape(pred)?;
    check_mask(annotated, gt.n_b())?;
    let mut out = gt.clone();
    for l in 0..gt.n_surfaces() {
        for (b, &ann) in annotated.iter().enumerate() {
            if !ann {
                for a in 0..gt.n_a() {
                    out.set(l, b, a, pred.get(l, b, a));
                }
            }
        }
    }
    Ok(out)
}

/// Surface alignment term on mixed annotated/predicted surfaces. Identical
/// to [`loss_smooth_a`] on the assembled set.
pub fn loss_smooth_a_semi(mixed: &SurfaceSet, d: &[f64], annotated: &[bool]) -> Result<f64> {
    check_mask(annotated, mixed.n_b())?;
    loss_smooth_a(mixed, d)
}

/// Gradient of [`loss_smooth_a`] with respect to the displacements.
pub fn grad_smooth_a(s: &SurfaceSet, d: &[f64]) -> Result<Vec<f64>> {
    Ok(grad_smooth_a_full(s, d)?.0)
}

/// Gradients of [`loss_smooth_a`] with respect to `d` and to every surface position.
fn grad_smooth_a_full(s: &SurfaceSet, d: &[f64]) -> Result<(Vec<f64>, SurfaceSet)> {
    if d.len() != s.n_b() {
        return Err(OctError::Dimension(format!(
            "{} displacements for {} B-scans",
            d.len(),
            s.n_b()
        )));
    }
    let mut gd = vec![0.0; d.len()];
    let mut gs = s.clone();
    gs.positions_mut().iter_mut().for_each(|x| *x = 0.0);
    for l in 0..s.n_surfaces() {
        for b in 0..s.n_b().saturating_sub(1) {
            for a in 0..s.n_a() {
                let e = 2.0 * ((s.get(l, b, a) - d[b]) - (s.get(l, b + 1, a) - d[b + 1]));
                gd[b] -= e;
                gd[b + 1] += e;
                let i = gs.index(l, b, a);
                let j = gs.index(l, b + 1, a);
                gs.positions_mut()[i] += e;
                gs.positions_mut()[j] -= e;
            }
        }
    }
    Ok((gd, gs))
}

/// Gradients of [`loss_smooth_a_semi`] with respect to `d` and to the
/// predicted rows; the latter is zero on annotated B-scans.
pub fn grad_smooth_a_semi(
    mixed: &SurfaceSet,
    d: &[f64],
    annotated: &[bool],
) -> Result<(Vec<f64>, SurfaceSet)> {
    check_mask(annotated, mixed.n_b())?;
    let (gd, mut gs) = grad_smooth_a_full(mixed, d)?;
    for l in 0..mixed.n_surfaces() {
        for (b, &ann) in annotated.iter().enumerate() {
            if ann {
                for a in 0..mixed.n_a() {
                    gs.set(l, b, a, 0.0);
                }
            }
        }
    }
    Ok((gd, gs))
}

/// Losses that have analytic gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossName {
    Ce,
    SmoothL1,
    SmoothS,
    SmoothA,
    SmoothASemi,
}

impl FromStr for LossName {
    type Err = OctError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" | "loss_ce" => Ok(Self::Ce),
            "smooth_l1" | "loss_smooth_l1" => Ok(Self::SmoothL1),
            "smooth_s" | "loss_smooth_s" => Ok(Self::SmoothS),
            "smooth_a" | "loss_smooth_a" => Ok(Self::SmoothA),
            "smooth_a_semi" | "loss_smooth_a_semi" => Ok(Self::SmoothASemi),
            other => Err(OctError::UnknownLoss(other.to_string())),
        }
    }
}

/// Inputs for [`grad`]; each loss reads only the fields it needs.
#[derive(Clone, Debug, Default)]
pub struct LossInputs<'a> {
    pub q: Option<&'a SurfaceDistribution>,
    /// Predicted (or mixed, for the semi-supervised term) surfaces.
    pub surfaces: Option<&'a SurfaceSet>,
    pub gt: Option<&'a SurfaceSet>,
    pub d: Option<&'a [f64]>,
    pub annotated: Option<&'a [bool]>,
}

/// Analytic gradient returned by [`grad`].
#[derive(Clone, Debug, PartialEq)]
pub enum Gradient {
    Distribution(SurfaceDistribution),
    Surfaces(SurfaceSet),
    Displacement(Vec<f64>),
    DisplacementAndSurfaces(Vec<f64>, SurfaceSet),
}

fn need<'a, T: ?Sized>(x: Option<&'a T>, what: &str, loss: LossName) -> Result<&'a T> {
    x.ok_or_else(|| OctError::InvalidConfig(format!("{loss:?} gradient needs `{what}`")))
}

/// Gradient of the named loss.
pub fn grad(name: &str, inputs: &LossInputs) -> Result<Gradient> {
    let loss: LossName = name.parse()?;
    Ok(match loss {
        LossName::Ce => Gradient::Distribution(grad_ce(
            need(inputs.q, "q", loss)?,
            need(inputs.gt, "gt", loss)?,
        )?),
        LossName::SmoothL1 => Gradient::Surfaces(grad_smooth_l1(
            need(inputs.surfaces, "surfaces", loss)?,
            need(inputs.gt, "gt", loss)?,
        )?),
        LossName::SmoothS => Gradient::Surfaces(grad_smooth_s(need(inputs.surfaces, "surfaces", loss)?)),
        LossName::SmoothA => Gradient::Displacement(grad_smooth_a(
            need(inputs.surfaces, "surfaces", loss)?,
            need(inputs.d, "d", loss)?,
        )?),
        LossName::SmoothASemi => {
            let (gd, gs) = grad_smooth_a_semi(
                need(inputs.surfaces, "surfaces", loss)?,
                need(inputs.d, "d", loss)?,
                need(inputs.annotated, "annotated", loss)?,
            )?;
            Gradient::DisplacementAndSurfaces(gd, gs)
        }
    })
}
