//! Shared data model: volumes, surfaces, per-A-scan surface distributions,
//! label maps, displacement fields, and the surface ↔ label conversions.
//!
//! Index conventions: B-scan index `b`, A-scan index `a` and storage row
//! index are 0-based in code. Surface *values* are 1-based row positions,
//! so a surface value `r` refers to storage row `r - 1`.

use serde::{Deserialize, Serialize};

use crate::error::{OctError, Result};

/// Tolerance on per-A-scan probability sums.
pub const NORMALIZATION_TOL: f64 = 1e-6;

/// Grid extents of a volume: B-scans × A-scans × rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n_b: usize,
    pub n_a: usize,
    pub n_r: usize,
}

impl Dims {
    pub fn new(n_b: usize, n_a: usize, n_r: usize) -> Self {
        Self { n_b, n_a, n_r }
    }

    pub fn len(&self) -> usize {
        self.n_b * self.n_a * self.n_r
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixels in one B-scan.
    pub fn bscan_len(&self) -> usize {
        self.n_a * self.n_r
    }
}

/// Physical voxel size in micrometers along row (z), A-scan (x) and B-scan (y).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub dz: f64,
    pub dx: f64,
    pub dy: f64,
}

impl Default for Spacing {
    fn default() -> Self {
        // A2A Bioptigen resolution.
        Self {
            dz: 3.24,
            dx: 6.7,
            dy: 67.0,
        }
    }
}

/// A 3D OCT intensity grid stored (b, a, r) row-major, so each A-scan is
/// a contiguous slice of `n_r` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct OctVolume {
    dims: Dims,
    spacing: Spacing,
    data: Vec<f64>,
}

impl OctVolume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f64>) -> Result<Self> {
        if dims.n_b < 2 || dims.n_a < 1 || dims.n_r < 2 {
            return Err(OctError::InvalidVolume(format!(
                "need n_b >= 2, n_a >= 1, n_r >= 2, got {}x{}x{}",
                dims.n_b, dims.n_a, dims.n_r
            )));
        }
        if data.len() != dims.len() {
            return Err(OctError::Dimension(format!(
                "volume payload has {} samples, dims imply {}",
                data.len(),
                dims.len()
            )));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !(positive(spacing.dz) && positive(spacing.dx) && positive(spacing.dy)) {
            return Err(OctError::InvalidVolume(format!(
                "spacing must be strictly positive, got {spacing:?}"
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(OctError::InvalidVolume(format!(
                "non-finite intensity at flat index {i}"
            )));
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    /// Builds a volume by evaluating `f(b, a, row)` with a 0-based row.
    pub fn from_fn(
        dims: Dims,
        spacing: Spacing,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.len());
        for b in 0..dims.n_b {
            for a in 0..dims.n_a {
                for r in 0..dims.n_r {
                    data.push(f(b, a, r));
                }
            }
        }
        Self::new(dims, spacing, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Same geometry, new payload.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.dims, self.spacing, data)
    }

    #[inline]
    pub fn index(&self, b: usize, a: usize, r: usize) -> usize {
        (b * self.dims.n_a + a) * self.dims.n_r + r
    }

    #[inline]
    pub fn get(&self, b: usize, a: usize, r: usize) -> f64 {
        self.data[self.index(b, a, r)]
    }

    pub fn bscan(&self, b: usize) -> &[f64] {
        let n = self.dims.bscan_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn ascan(&self, b: usize, a: usize) -> &[f64] {
        let start = self.index(b, a, 0);
        &self.data[start..start + self.dims.n_r]
    }
}

/// `L` surfaces, each giving one 1-based row position per (b, a).
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceSet {
    names: Vec<String>,
    n_b: usize,
    n_a: usize,
    positions: Vec<f64>,
}

impl SurfaceSet {
    pub fn new(names: Vec<String>, n_b: usize, n_a: usize, positions: Vec<f64>) -> Result<Self> {
        if positions.len() != names.len() * n_b * n_a {
            return Err(OctError::Dimension(format!(
                "{} surface positions for {} surfaces of {}x{}",
                positions.len(),
                names.len(),
                n_b,
                n_a
            )));
        }
        if let Some(i) = positions.iter().position(|v| !v.is_finite()) {
            return Err(OctError::OutOfRange(format!(
                "non-finite surface position at flat index {i}"
            )));
        }
        Ok(Self {
            names,
            n_b,
            n_a,
            positions,
        })
    }

    /// Surfaces named `S1..SL`.
    pub fn with_default_names(
        n_surfaces: usize,
        n_b: usize,
        n_a: usize,
        positions: Vec<f64>,
    ) -> Result<Self> {
        Self::new(default_names(n_surfaces), n_b, n_a, positions)
    }

    pub fn from_fn(
        n_surfaces: usize,
        n_b: usize,
        n_a: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut positions = Vec::with_capacity(n_surfaces * n_b * n_a);
        for l in 0..n_surfaces {
            for b in 0..n_b {
                for a in 0..n_a {
                    positions.push(f(l, b, a));
                }
            }
        }
        Self::with_default_names(n_surfaces, n_b, n_a, positions)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_surfaces(&self) -> usize {
        self.names.len()
    }

    pub fn n_b(&self) -> usize {
        self.n_b
    }

    pub fn n_a(&self) -> usize {
        self.n_a
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn positions_mut(&mut self) -> &mut [f64] {
        &mut self.positions
    }

    #[inline]
    pub fn index(&self, l: usize, b: usize, a: usize) -> usize {
        (l * self.n_b + b) * self.n_a + a
    }

    #[inline]
    pub fn get(&self, l: usize, b: usize, a: usize) -> f64 {
        self.positions[self.index(l, b, a)]
    }

    #[inline]
    pub fn set(&mut self, l: usize, b: usize, a: usize, value: f64) {
        let i = self.index(l, b, a);
        self.positions[i] = value;
    }

    /// One surface as an `n_b × n_a` slice.
    pub fn surface(&self, l: usize) -> &[f64] {
        let n = self.n_b * self.n_a;
        &self.positions[l * n..(l + 1) * n]
    }

    /// All surface positions of one A-scan, top to bottom.
    pub fn column(&self, b: usize, a: usize) -> Vec<f64> {
        (0..self.n_surfaces()).map(|l| self.get(l, b, a)).collect()
    }

    pub fn same_shape(&self, other: &SurfaceSet) -> bool {
        self.n_surfaces() == other.n_surfaces() && self.n_b == other.n_b && self.n_a == other.n_a
    }

    pub fn check_same_shape(&self, other: &SurfaceSet) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(OctError::Dimension(format!(
                "surface sets differ in shape: {}x{}x{} vs {}x{}x{}",
                self.n_surfaces(),
                self.n_b,
                self.n_a,
                other.n_surfaces(),
                other.n_b,
                other.n_a
            )))
        }
    }

    /// First (b, a, l) where surface `l` lies below surface `l + 1`.
    pub fn first_order_violation(&self) -> Option<(usize, usize, usize)> {
        for b in 0..self.n_b {
            for a in 0..self.n_a {
                for l in 1..self.n_surfaces() {
                    if self.get(l - 1, b, a) > self.get(l, b, a) {
                        return Some((b, a, l - 1));
                    }
                }
            }
        }
        None
    }

    pub fn is_ordered(&self) -> bool {
        self.first_order_violation().is_none()
    }

    pub fn check_ordered(&self) -> Result<()> {
        match self.first_order_violation() {
            None => Ok(()),
            Some((b, a, l)) => Err(OctError::OrderingViolation {
                b,
                a,
                l,
                upper: self.get(l, b, a),
                lower: self.get(l + 1, b, a),
            }),
        }
    }

    /// Every position within `[1, n_r]`.
    pub fn check_range(&self, n_r: usize) -> Result<()> {
        let hi = n_r as f64;
        for l in 0..self.n_surfaces() {
            for b in 0..self.n_b {
                for a in 0..self.n_a {
                    let v = self.get(l, b, a);
                    if !(1.0..=hi).contains(&v) {
                        return Err(OctError::OutOfRange(format!(
                            "surface {l} at b={b}, a={a} is {v}, outside [1, {n_r}]"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Surfaces restricted to the given surface indices.
    pub fn select(&self, surfaces: &[usize]) -> Result<SurfaceSet> {
        let mut names = Vec::with_capacity(surfaces.len());
        let mut positions = Vec::with_capacity(surfaces.len() * self.n_b * self.n_a);
        for &l in surfaces {
            if l >= self.n_surfaces() {
                return Err(OctError::Dimension(format!("no surface {l}")));
            }
            names.push(self.names[l].clone());
            positions.extend_from_slice(self.surface(l));
        }
        SurfaceSet::new(names, self.n_b, self.n_a, positions)
    }
}

pub fn default_names(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("S{i}")).collect()
}

/// Per-A-scan probability vectors over rows, one distribution per surface.
/// Stored (l, b, a, r); `probs[.., r]` is the probability of 1-based row `r + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceDistribution {
    n_surfaces: usize,
    n_b: usize,
    n_a: usize,
    n_r: usize,
    probs: Vec<f64>,
}

impl SurfaceDistribution {
    /// Validated constructor: nonnegative entries and unit sums per A-scan.
    pub fn new(
        n_surfaces: usize,
        n_b: usize,
        n_a: usize,
        n_r: usize,
        probs: Vec<f64>,
    ) -> Result<Self> {
        let q = Self::from_raw(n_surfaces, n_b, n_a, n_r, probs)?;
        q.check_normalized()?;
        Ok(q)
    }

    /// Shape and finiteness checks only. Losses accept raw (possibly
    /// unnormalized) scores; `soft_argmax` re-checks normalization.
    pub fn from_raw(
        n_surfaces: usize,
        n_b: usize,
        n_a: usize,
        n_r: usize,
        probs: Vec<f64>,
    ) -> Result<Self> {
        if probs.len() != n_surfaces * n_b * n_a * n_r {
            return Err(OctError::Dimension(format!(
                "distribution has {} entries, expected {}x{}x{}x{}",
                probs.len(),
                n_surfaces,
                n_b,
                n_a,
                n_r
            )));
        }
        if n_r == 0 {
            return Err(OctError::Dimension("distribution needs n_r >= 1".into()));
        }
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(OctError::OutOfRange("non-finite probability".into()));
        }
        Ok(Self {
            n_surfaces,
            n_b,
            n_a,
            n_r,
            probs,
        })
    }

    pub fn check_normalized(&self) -> Result<()> {
        for l in 0..self.n_surfaces {
            for b in 0..self.n_b {
                for a in 0..self.n_a {
                    let v = self.vector(l, b, a);
                    let sum: f64 = v.iter().sum();
                    if v.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > NORMALIZATION_TOL {
                        return Err(OctError::Normalization { l, b, a, sum });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n_surfaces(&self) -> usize {
        self.n_surfaces
    }
    pub fn n_b(&self) -> usize {
        self.n_b
    }
    pub fn n_a(&self) -> usize {
        self.n_a
    }
    pub fn n_r(&self) -> usize {
        self.n_r
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn probs_mut(&mut self) -> &mut [f64] {
        &mut self.probs
    }

    #[inline]
    pub fn offset(&self, l: usize, b: usize, a: usize) -> usize {
        ((l * self.n_b + b) * self.n_a + a) * self.n_r
    }

    pub fn vector(&self, l: usize, b: usize, a: usize) -> &[f64] {
        let o = self.offset(l, b, a);
        &self.probs[o..o + self.n_r]
    }

    /// Zero-valued grid of the same shape; used for gradients.
    pub fn zeros_like(&self) -> Self {
        Self {
            probs: vec![0.0; self.probs.len()],
            ..self.clone()
        }
    }
}

/// Per-voxel class probabilities over `n_classes = L + 1` layer classes,
/// stored (b, a, r, c).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassProbabilities {
    dims: Dims,
    n_classes: usize,
    probs: Vec<f64>,
}

impl ClassProbabilities {
    pub fn new(dims: Dims, n_classes: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != dims.len() * n_classes {
            return Err(OctError::Dimension(format!(
                "class probabilities have {} entries, expected {}x{}",
                probs.len(),
                dims.len(),
                n_classes
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(OctError::OutOfRange(
                "class probabilities must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            dims,
            n_classes,
            probs,
        })
    }

    /// One-hot probabilities from a label map.
    pub fn one_hot(labels: &LabelMap) -> Self {
        let n_classes = labels.n_classes();
        let mut probs = vec![0.0; labels.labels().len() * n_classes];
        for (i, &c) in labels.labels().iter().enumerate() {
            probs[i * n_classes + c as usize] = 1.0;
        }
        Self {
            dims: labels.dims(),
            n_classes,
            probs,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }
    pub fn n_classes(&self) -> usize {
        self.n_classes
    }
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Pixel-wise layer labels in `0..=L`, stored (b, a, r).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    dims: Dims,
    n_surfaces: usize,
    labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(dims: Dims, n_surfaces: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != dims.len() {
            return Err(OctError::Dimension(format!(
                "label map has {} entries, dims imply {}",
                labels.len(),
                dims.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&c| c as usize > n_surfaces) {
            return Err(OctError::OutOfRange(format!(
                "label {bad} exceeds surface count {n_surfaces}"
            )));
        }
        Ok(Self {
            dims,
            n_surfaces,
            labels,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn n_surfaces(&self) -> usize {
        self.n_surfaces
    }

    pub fn n_classes(&self) -> usize {
        self.n_surfaces + 1
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn column(&self, b: usize, a: usize) -> &[u16] {
        let n_r = self.dims.n_r;
        let start = (b * self.dims.n_a + a) * n_r;
        &self.labels[start..start + n_r]
    }

    /// First non-monotone column, if any.
    pub fn check_monotone(&self) -> Result<()> {
        for b in 0..self.dims.n_b {
            for a in 0..self.dims.n_a {
                if self.column(b, a).windows(2).any(|w| w[1] < w[0]) {
                    return Err(OctError::NonMonotoneColumn { b, a });
                }
            }
        }
        Ok(())
    }
}

/// Per-B-scan displacements: real axial shifts (rows) and integer
/// transverse shifts (A-scans).
///
/// A displacement `d_b` corrects B-scan `b` by sampling it at
/// `row + d_b` (axial) and `a + t_b` (transverse); a feature at row `r`
/// in the input ends up at `r - d_b` in the corrected scan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplacementField {
    pub axial: Vec<f64>,
    pub transverse: Vec<i64>,
}

impl DisplacementField {
    pub fn zeros(n_b: usize) -> Self {
        Self {
            axial: vec![0.0; n_b],
            transverse: vec![0; n_b],
        }
    }

    pub fn axial_only(axial: Vec<f64>) -> Self {
        let n = axial.len();
        Self {
            axial,
            transverse: vec![0; n],
        }
    }

    pub fn transverse_only(transverse: Vec<i64>) -> Self {
        let n = transverse.len();
        Self {
            axial: vec![0.0; n],
            transverse,
        }
    }

    pub fn len(&self) -> usize {
        self.axial.len()
    }

    pub fn is_empty(&self) -> bool {
        self.axial.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.axial.len() != self.transverse.len() {
            return Err(OctError::Dimension(format!(
                "axial has {} entries, transverse {}",
                self.axial.len(),
                self.transverse.len()
            )));
        }
        if self.axial.iter().any(|v| !v.is_finite()) {
            return Err(OctError::OutOfRange("non-finite axial displacement".into()));
        }
        Ok(())
    }
}

/// Subtracts the mean so the displacements sum to zero.
pub fn gauge_mean_zero(d: &mut [f64]) {
    if d.is_empty() {
        return;
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    d.iter_mut().for_each(|v| *v -= mean);
}

/// Most frequent value; ties go to the smaller magnitude, then the smaller value.
pub fn mode(values: &[i64]) -> Option<i64> {
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let mut best: Option<(usize, i64)> = None;
    for run in sorted.chunk_by(|x, y| x == y) {
        let cand = (run.len(), run[0]);
        best = match best {
            None => Some(cand),
            Some(cur) => {
                let better = cand.0 > cur.0
                    || (cand.0 == cur.0
                        && (cand.1.abs(), cand.1) < (cur.1.abs(), cur.1));
                Some(if better { cand } else { cur })
            }
        };
    }
    best.map(|(_, v)| v)
}

/// Shifts integer displacements so the most frequent value becomes zero.
pub fn gauge_mode_zero(t: &mut [i64]) {
    if let Some(m) = mode(t) {
        t.iter_mut().for_each(|v| *v -= m);
    }
}

/// Pixel labels from ordered surfaces: row `r` (1-based) of A-scan (b, a)
/// gets the number of surfaces with position `<= r`.
pub fn surfaces_to_labels(s: &SurfaceSet, n_r: usize) -> Result<LabelMap> {
    s.check_ordered()?;
    let l_count = s.n_surfaces();
    if l_count > u16::MAX as usize {
        return Err(OctError::OutOfRange(format!("{l_count} surfaces")));
    }
    let dims = Dims::new(s.n_b(), s.n_a(), n_r);
    let mut labels = Vec::with_capacity(dims.len());
    for b in 0..s.n_b() {
        for a in 0..s.n_a() {
            let col = s.column(b, a);
            // Ordered column: the label only grows as rows advance.
            let mut label = 0usize;
            for r in 1..=n_r {
                while label < l_count && col[label] <= r as f64 {
                    label += 1;
                }
                labels.push(label as u16);
            }
        }
    }
    LabelMap::new(dims, l_count, labels)
}

/// Result of converting a label map back to surfaces.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelConversion {
    pub surfaces: SurfaceSet,
    /// Number of (surface, A-scan) positions that never reached their label
    /// and were clamped to the last row.
    pub clamped: usize,
}

/// Surface `l` (1-based) sits at `1 + #{rows with label < l}` in each A-scan.
pub fn labels_to_surfaces(m: &LabelMap) -> Result<LabelConversion> {
    m.check_monotone()?;
    let dims = m.dims();
    let l_count = m.n_surfaces();
    let mut positions = vec![0.0; l_count * dims.n_b * dims.n_a];
    let mut clamped = 0;
    for b in 0..dims.n_b {
        for a in 0..dims.n_a {
            let col = m.column(b, a);
            for l in 1..=l_count {
                let below = col.iter().filter(|&&c| (c as usize) < l).count();
                let mut pos = 1 + below;
                if pos > dims.n_r {
                    pos = dims.n_r;
                    clamped += 1;
                }
                positions[((l - 1) * dims.n_b + b) * dims.n_a + a] = pos as f64;
            }
        }
    }
    Ok(LabelConversion {
        surfaces: SurfaceSet::with_default_names(l_count, dims.n_b, dims.n_a, positions)?,
        clamped,
    })
}
