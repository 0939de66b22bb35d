//! File formats.
//!
//! Grids are one file each: a single-line JSON header, a newline, then the
//! raw payload in row-major order. Surfaces and displacements are CSV with
//! 1-based B-scan, A-scan and row indices.

use std::fs;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{OctError, Result};
use crate::volume::{
    ClassProbabilities, Dims, DisplacementField, LabelMap, OctVolume, Spacing, SurfaceDistribution,
    SurfaceSet,
};

pub const DTYPE_F32: &str = "f32le";
pub const DTYPE_U8: &str = "u8";

/// Header of every binary grid file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    pub n_b: usize,
    pub n_a: usize,
    pub n_r: usize,
    /// `[dz, dx, dy]` in micrometres.
    pub spacing_um: [f64; 3],
    pub dtype: String,
    /// Surfaces of a distribution or label file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_l: Option<usize>,
    /// Classes of a class-probability file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_classes: Option<usize>,
}

impl GridHeader {
    fn new(dims: Dims, spacing: Spacing, dtype: &str) -> Self {
        Self {
            n_b: dims.n_b,
            n_a: dims.n_a,
            n_r: dims.n_r,
            spacing_um: [spacing.dz, spacing.dx, spacing.dy],
            dtype: dtype.to_string(),
            n_l: None,
            n_classes: None,
        }
    }

    fn dims(&self) -> Dims {
        Dims::new(self.n_b, self.n_a, self.n_r)
    }

    fn spacing(&self) -> Spacing {
        Spacing {
            dz: self.spacing_um[0],
            dx: self.spacing_um[1],
            dy: self.spacing_um[2],
        }
    }

    fn expect_dtype(&self, dtype: &str) -> Result<()> {
        if self.dtype != dtype {
            return Err(OctError::Format(format!(
                "expected dtype {dtype:?}, found {:?}",
                self.dtype
            )));
        }
        Ok(())
    }
}

/// Writes `bytes` next to `path` and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn encode(header: &GridHeader, payload: Vec<u8>) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec(header)?;
    out.push(b'\n');
    out.extend(payload);
    Ok(out)
}

fn f32_payload(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

fn decode(path: &Path) -> Result<(GridHeader, Vec<u8>)> {
    let mut bytes = Vec::new();
    BufReader::new(fs::File::open(path)?).read_to_end(&mut bytes)?;
    let split = bytes
        .iter()
        .position(|&c| c == b'\n')
        .ok_or_else(|| OctError::Format(format!("{}: missing header line", path.display())))?;
    let header: GridHeader = serde_json::from_slice(&bytes[..split])
        .map_err(|e| OctError::Format(format!("{}: bad header: {e}", path.display())))?;
    bytes.drain(..=split);
    Ok((header, bytes))
}

fn f32_values(path: &Path, payload: &[u8], expected: usize) -> Result<Vec<f64>> {
    if payload.len() != expected * 4 {
        return Err(OctError::Format(format!(
            "{}: payload has {} bytes, header implies {}",
            path.display(),
            payload.len(),
            expected * 4
        )));
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn write_volume(path: &Path, v: &OctVolume) -> Result<()> {
    let header = GridHeader::new(v.dims(), v.spacing(), DTYPE_F32);
    write_atomic(path, &encode(&header, f32_payload(v.data()))?)
}

pub fn read_volume(path: &Path) -> Result<OctVolume> {
    let (header, payload) = decode(path)?;
    header.expect_dtype(DTYPE_F32)?;
    let dims = header.dims();
    let data = f32_values(path, &payload, dims.len())?;
    OctVolume::new(dims, header.spacing(), data)
}

/// Surface distributions, stored (l, b, a, r).
pub fn write_distribution(path: &Path, q: &SurfaceDistribution, spacing: Spacing) -> Result<()> {
    let mut header = GridHeader::new(Dims::new(q.n_b(), q.n_a(), q.n_r()), spacing, DTYPE_F32);
    header.n_l = Some(q.n_surfaces());
    write_atomic(path, &encode(&header, f32_payload(q.probs()))?)
}

/// Reads a distribution and renormalizes each vector to undo f32 rounding.
pub fn read_distribution(path: &Path) -> Result<SurfaceDistribution> {
    let (header, payload) = decode(path)?;
    header.expect_dtype(DTYPE_F32)?;
    let n_l = header
        .n_l
        .ok_or_else(|| OctError::Format(format!("{}: distribution header needs n_l", path.display())))?;
    let dims = header.dims();
    let mut probs = f32_values(path, &payload, n_l * dims.len())?;
    for v in probs.chunks_mut(dims.n_r) {
        let s: f64 = v.iter().sum();
        if s > 0.0 {
            v.iter_mut().for_each(|x| *x /= s);
        }
    }
    SurfaceDistribution::new(n_l, dims.n_b, dims.n_a, dims.n_r, probs)
}

/// Per-voxel class probabilities, stored (b, a, r, c).
pub fn write_class_probabilities(path: &Path, p: &ClassProbabilities, spacing: Spacing) -> Result<()> {
    let mut header = GridHeader::new(p.dims(), spacing, DTYPE_F32);
    header.n_classes = Some(p.n_classes());
    write_atomic(path, &encode(&header, f32_payload(p.probs()))?)
}

pub fn read_class_probabilities(path: &Path) -> Result<ClassProbabilities> {
    let (header, payload) = decode(path)?;
    header.expect_dtype(DTYPE_F32)?;
    let c = header.n_classes.ok_or_else(|| {
        OctError::Format(format!("{}: probability header needs n_classes", path.display()))
    })?;
    let dims = header.dims();
    let probs = f32_values(path, &payload, c * dims.len())?;
    ClassProbabilities::new(dims, c, probs)
}

pub fn write_labels(path: &Path, m: &LabelMap, spacing: Spacing) -> Result<()> {
    let mut header = GridHeader::new(m.dims(), spacing, DTYPE_U8);
    header.n_l = Some(m.n_surfaces());
    let payload = m
        .labels()
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| OctError::Format(format!("label {l} exceeds u8"))))
        .collect::<Result<Vec<u8>>>()?;
    write_atomic(path, &encode(&header, payload)?)
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let (header, payload) = decode(path)?;
    header.expect_dtype(DTYPE_U8)?;
    let n_l = header
        .n_l
        .ok_or_else(|| OctError::Format(format!("{}: label header needs n_l", path.display())))?;
    let dims = header.dims();
    if payload.len() != dims.len() {
        return Err(OctError::Format(format!(
            "{}: payload has {} bytes, header implies {}",
            path.display(),
            payload.len(),
            dims.len()
        )));
    }
    LabelMap::new(dims, n_l, payload.into_iter().map(u16::from).collect())
}

#[derive(Serialize, Deserialize)]
struct SurfaceRow {
    surface: String,
    b: usize,
    a: usize,
    r: f64,
}

/// CSV `surface,b,a,r` with the surface name and 1-based indices.
pub fn surfaces_to_csv<W: Write>(s: &SurfaceSet, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for l in 0..s.n_surfaces() {
        for b in 0..s.n_b() {
            for a in 0..s.n_a() {
                out.serialize(SurfaceRow {
                    surface: s.names()[l].clone(),
                    b: b + 1,
                    a: a + 1,
                    r: s.get(l, b, a),
                })?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Parses surface CSV; surfaces are ordered by first appearance and every
/// (surface, b, a) must occur exactly once.
pub fn surfaces_from_csv<R: Read>(r: R) -> Result<SurfaceSet> {
    let mut rdr = csv::Reader::from_reader(r);
    let rows: Vec<SurfaceRow> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
    let mut names: Vec<String> = Vec::new();
    let (mut n_b, mut n_a) = (0, 0);
    for row in &rows {
        if row.b == 0 || row.a == 0 {
            return Err(OctError::Format("surface CSV indices are 1-based".into()));
        }
        if !names.contains(&row.surface) {
            names.push(row.surface.clone());
        }
        n_b = n_b.max(row.b);
        n_a = n_a.max(row.a);
    }
    let n_l = names.len();
    let mut positions = vec![f64::NAN; n_l * n_b * n_a];
    for row in &rows {
        let l = names.iter().position(|n| n == &row.surface).unwrap_or(0);
        let i = (l * n_b + row.b - 1) * n_a + row.a - 1;
        if !positions[i].is_nan() {
            return Err(OctError::Format(format!(
                "duplicate surface entry {} b={} a={}",
                row.surface, row.b, row.a
            )));
        }
        positions[i] = row.r;
    }
    if positions.iter().any(|p| p.is_nan()) {
        return Err(OctError::Format("surface CSV does not cover every (surface, b, a)".into()));
    }
    SurfaceSet::new(names, n_b, n_a, positions)
}

pub fn write_surfaces(path: &Path, s: &SurfaceSet) -> Result<()> {
    let mut buf = Vec::new();
    surfaces_to_csv(s, &mut buf)?;
    write_atomic(path, &buf)
}

pub fn read_surfaces(path: &Path) -> Result<SurfaceSet> {
    surfaces_from_csv(fs::File::open(path)?)
}

#[derive(Serialize, Deserialize)]
struct DisplacementRow {
    b: usize,
    axial: f64,
    transverse: i64,
}

/// CSV `b,axial,transverse` with 1-based `b`.
pub fn displacement_to_csv<W: Write>(d: &DisplacementField, w: W) -> Result<()> {
    d.validate()?;
    let mut out = csv::Writer::from_writer(w);
    for (b, (&axial, &transverse)) in d.axial.iter().zip(&d.transverse).enumerate() {
        out.serialize(DisplacementRow {
            b: b + 1,
            axial,
            transverse,
        })?;
    }
    out.flush()?;
    Ok(())
}

pub fn displacement_from_csv<R: Read>(r: R) -> Result<DisplacementField> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut rows: Vec<DisplacementRow> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
    rows.sort_by_key(|row| row.b);
    if rows.iter().enumerate().any(|(i, row)| row.b != i + 1) {
        return Err(OctError::Format(
            "displacement CSV must list b = 1..N_B exactly once".into(),
        ));
    }
    let field = DisplacementField {
        axial: rows.iter().map(|r| r.axial).collect(),
        transverse: rows.iter().map(|r| r.transverse).collect(),
    };
    field.validate()?;
    Ok(field)
}

pub fn write_displacement(path: &Path, d: &DisplacementField) -> Result<()> {
    let mut buf = Vec::new();
    displacement_to_csv(d, &mut buf)?;
    write_atomic(path, &buf)
}

pub fn read_displacement(path: &Path) -> Result<DisplacementField> {
    displacement_from_csv(fs::File::open(path)?)
}

/// Pretty JSON followed by a newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut buf = serde_json::to_vec_pretty(value)?;
    buf.push(b'\n');
    write_atomic(path, &buf)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| OctError::Format(format!("{}: {e}", path.display())))
}
