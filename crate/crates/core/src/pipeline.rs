//! End-to-end synthetic experiment: phantoms are corrupted with known motion,
//! aligned by every method and scored against the truth.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{optimize_alignment, solve_supervised, template_match_align, AlignConfig};
use crate::error::{OctError, Result};
use crate::io;
use crate::metrics::{motion_error, ncc_adjacent, MeanStd};
use crate::stm::resample_axial;
use crate::synth::{generate_phantom, simulate_motion, MotionConfig, MotionSpec, PhantomSpec};
use crate::transverse::align_transverse;
use crate::volume::{DisplacementField, OctVolume, SurfaceSet};

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub phantoms: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Template for every phantom; its `seed` is replaced per phantom.
    pub phantom: PhantomSpec,
    pub motion: MotionConfig,
    pub align: AlignConfig,
    /// Relative transverse search radius between adjacent B-scans.
    pub transverse_radius: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            phantoms: 20,
            repeats: 5,
            seed: 0,
            phantom: PhantomSpec::default(),
            motion: MotionConfig::default(),
            align: AlignConfig::default(),
            transverse_radius: 30,
        }
    }
}

/// Axial recovery error of each method, in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxialErrors {
    pub supervised_px: f64,
    pub unsupervised_px: f64,
    pub template_px: f64,
    pub closed_form_px: f64,
}

/// Transverse recovery error after supervised axial correction, in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransverseErrors {
    pub layer_mask_px: f64,
    pub no_layer_mask_px: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeRecord {
    pub phantom: usize,
    pub repeat: usize,
    pub phantom_seed: u64,
    pub motion_seed: u64,
    pub axial_error: AxialErrors,
    pub transverse_error: TransverseErrors,
    pub ncc_adjacent_before: f64,
    /// After supervised axial correction.
    pub ncc_adjacent_after: f64,
}

/// One row of the method table; `None` where a method has no estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub axial_error_px: Option<MeanStd>,
    pub transverse_error_px: Option<MeanStd>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedCount {
    pub phantoms: usize,
    pub holds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: u32,
    pub seed: u64,
    pub phantoms: usize,
    pub repeats: usize,
    pub volumes: usize,
    pub methods: Vec<MethodRow>,
    pub ncc_adjacent_before: MeanStd,
    pub ncc_adjacent_after: MeanStd,
    /// Phantoms whose mean no-mask transverse error is >= the masked one.
    pub no_layer_mask_worse_or_equal: PairedCount,
    /// Phantoms whose mean template axial error is >= the supervised one.
    pub template_worse_or_equal: PairedCount,
    pub records: Vec<VolumeRecord>,
}

/// Wall-clock time spent per stage, summed over volumes. Kept out of the
/// report so reports stay reproducible.
#[derive(Clone, Debug, Default)]
pub struct Timing {
    pub supervised: Duration,
    pub total: Duration,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Worker threads; 0 uses the rayon default.
    pub jobs: usize,
    /// Directory for per-volume artifacts.
    pub artifacts: Option<PathBuf>,
}

/// Per-phantom and per-(phantom, repeat) seeds drawn from the run seed.
pub fn derive_seeds(seed: u64, phantoms: usize, repeats: usize) -> (Vec<u64>, Vec<Vec<u64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phantom_seeds: Vec<u64> = (0..phantoms).map(|_| rng.next_u64()).collect();
    let motion_seeds = (0..phantoms)
        .map(|_| (0..repeats).map(|_| rng.next_u64()).collect())
        .collect();
    (phantom_seeds, motion_seeds)
}

/// Surfaces moved with an axial correction (`r − d_b`), kept inside `[1, n_r]`.
pub fn correct_surfaces_axial(s: &SurfaceSet, d: &[f64], n_r: usize) -> SurfaceSet {
    let mut out = s.clone();
    for l in 0..s.n_surfaces() {
        for (b, &db) in d.iter().enumerate() {
            for a in 0..s.n_a() {
                out.set(l, b, a, (s.get(l, b, a) - db).clamp(1.0, n_r as f64));
            }
        }
    }
    out
}

struct VolumeOutcome {
    record: VolumeRecord,
    supervised_time: Duration,
}

fn process_volume(
    cfg: &PipelineConfig,
    phantom: (&OctVolume, &SurfaceSet),
    ids: (usize, usize, u64, u64),
    artifacts: Option<&PathBuf>,
) -> Result<VolumeOutcome> {
    let (p, r, phantom_seed, motion_seed) = ids;
    let (cv, cs, motion) = simulate_motion(phantom.0, phantom.1, motion_seed, &cfg.motion)?;
    let n_r = cv.dims().n_r;

    let start = Instant::now();
    let sup = optimize_alignment(&cv, Some(&cs), &cfg.align)?;
    let supervised_time = start.elapsed();
    let uns = optimize_alignment(&cv, None, &cfg.align)?;
    let tmpl = template_match_align(&cv, &cfg.align)?;
    let closed = solve_supervised(&cs)?;

    let corrected = resample_axial(&cv, &sup.axial)?;
    let corrected_s = correct_surfaces_axial(&cs, &sup.axial, n_r);
    let masked = align_transverse(&corrected, Some(&corrected_s), cfg.transverse_radius)?;
    let unmasked = align_transverse(&corrected, None, cfg.transverse_radius)?;

    let err = |axial: &[f64], transverse: &[i64]| {
        motion_error(
            &DisplacementField {
                axial: axial.to_vec(),
                transverse: transverse.to_vec(),
            },
            &motion,
        )
    };
    let axial_error = AxialErrors {
        supervised_px: err(&sup.axial, &masked.transverse)?.axial_px,
        unsupervised_px: err(&uns.axial, &masked.transverse)?.axial_px,
        template_px: err(&tmpl.axial, &masked.transverse)?.axial_px,
        closed_form_px: err(&closed.axial, &masked.transverse)?.axial_px,
    };
    let transverse_error = TransverseErrors {
        layer_mask_px: err(&sup.axial, &masked.transverse)?.transverse_px,
        no_layer_mask_px: err(&sup.axial, &unmasked.transverse)?.transverse_px,
    };
    let record = VolumeRecord {
        phantom: p,
        repeat: r,
        phantom_seed,
        motion_seed,
        axial_error,
        transverse_error,
        ncc_adjacent_before: ncc_adjacent(&cv),
        ncc_adjacent_after: ncc_adjacent(&corrected),
    };

    if let Some(dir) = artifacts {
        let dir = dir.join(format!("vol_{p:03}_{r}"));
        io::write_volume(&dir.join("corrupted.vol"), &cv)?;
        io::write_surfaces(&dir.join("surfaces.csv"), &cs)?;
        io::write_json(&dir.join("motion.json"), &motion)?;
        let estimate = DisplacementField {
            axial: sup.axial.clone(),
            transverse: masked.transverse.clone(),
        };
        io::write_displacement(&dir.join("estimate.csv"), &estimate)?;
    }
    Ok(VolumeOutcome {
        record,
        supervised_time,
    })
}

fn stats(records: &[VolumeRecord], f: impl Fn(&VolumeRecord) -> f64) -> MeanStd {
    MeanStd::of(&records.iter().map(f).collect::<Vec<_>>())
}

/// Phantoms where `worse(record)` averaged over repeats is >= `better(record)`.
fn paired(
    records: &[VolumeRecord],
    phantoms: usize,
    worse: impl Fn(&VolumeRecord) -> f64,
    better: impl Fn(&VolumeRecord) -> f64,
) -> PairedCount {
    let holds = (0..phantoms)
        .filter(|&p| {
            let rs: Vec<&VolumeRecord> = records.iter().filter(|r| r.phantom == p).collect();
            let w: f64 = rs.iter().map(|r| worse(r)).sum();
            let b: f64 = rs.iter().map(|r| better(r)).sum();
            w >= b
        })
        .count();
    PairedCount { phantoms, holds }
}

pub fn build_report(cfg: &PipelineConfig, records: Vec<VolumeRecord>) -> Report {
    let row = |method: &str, axial: Option<MeanStd>, transverse: Option<MeanStd>| MethodRow {
        method: method.to_string(),
        axial_error_px: axial,
        transverse_error_px: transverse,
    };
    let masked = stats(&records, |r| r.transverse_error.layer_mask_px);
    let methods = vec![
        row(
            "supervised",
            Some(stats(&records, |r| r.axial_error.supervised_px)),
            Some(masked),
        ),
        row(
            "unsupervised",
            Some(stats(&records, |r| r.axial_error.unsupervised_px)),
            None,
        ),
        row(
            "template",
            Some(stats(&records, |r| r.axial_error.template_px)),
            None,
        ),
        row(
            "closed_form",
            Some(stats(&records, |r| r.axial_error.closed_form_px)),
            None,
        ),
        row(
            "no_layer_mask",
            None,
            Some(stats(&records, |r| r.transverse_error.no_layer_mask_px)),
        ),
    ];
    Report {
        schema: REPORT_SCHEMA,
        seed: cfg.seed,
        phantoms: cfg.phantoms,
        repeats: cfg.repeats,
        volumes: records.len(),
        methods,
        ncc_adjacent_before: stats(&records, |r| r.ncc_adjacent_before),
        ncc_adjacent_after: stats(&records, |r| r.ncc_adjacent_after),
        no_layer_mask_worse_or_equal: paired(
            &records,
            cfg.phantoms,
            |r| r.transverse_error.no_layer_mask_px,
            |r| r.transverse_error.layer_mask_px,
        ),
        template_worse_or_equal: paired(
            &records,
            cfg.phantoms,
            |r| r.axial_error.template_px,
            |r| r.axial_error.supervised_px,
        ),
        records,
    }
}

/// Runs every (phantom, repeat) pair and assembles the report.
pub fn run_pipeline(cfg: &PipelineConfig, opts: &RunOptions) -> Result<(Report, Timing)> {
    if cfg.phantoms == 0 || cfg.repeats == 0 {
        return Err(OctError::InvalidConfig("phantoms and repeats must be >= 1".into()));
    }
    cfg.align.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| OctError::InvalidConfig(format!("thread pool: {e}")))?;
    let start = Instant::now();
    let (phantom_seeds, motion_seeds) = derive_seeds(cfg.seed, cfg.phantoms, cfg.repeats);

    let outcomes: Vec<VolumeOutcome> = pool.install(|| {
        let phantoms: Vec<(OctVolume, SurfaceSet)> = phantom_seeds
            .par_iter()
            .map(|&seed| {
                generate_phantom(&PhantomSpec {
                    seed,
                    ..cfg.phantom.clone()
                })
            })
            .collect::<Result<_>>()?;
        let items: Vec<(usize, usize)> = (0..cfg.phantoms)
            .flat_map(|p| (0..cfg.repeats).map(move |r| (p, r)))
            .collect();
        items
            .par_iter()
            .map(|&(p, r)| {
                process_volume(
                    cfg,
                    (&phantoms[p].0, &phantoms[p].1),
                    (p, r, phantom_seeds[p], motion_seeds[p][r]),
                    opts.artifacts.as_ref(),
                )
            })
            .collect::<Result<_>>()
    })?;

    let timing = Timing {
        supervised: outcomes.iter().map(|o| o.supervised_time).sum(),
        total: start.elapsed(),
    };
    let records = outcomes.into_iter().map(|o| o.record).collect();
    Ok((build_report(cfg, records), timing))
}

/// Motion spec of one pipeline volume, for inspection.
pub fn pipeline_motion(cfg: &PipelineConfig, phantom: usize, repeat: usize) -> Result<MotionSpec> {
    let (_, motion_seeds) = derive_seeds(cfg.seed, cfg.phantoms, cfg.repeats);
    let seed = motion_seeds
        .get(phantom)
        .and_then(|r| r.get(repeat))
        .ok_or_else(|| OctError::OutOfRange(format!("no volume ({phantom}, {repeat})")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(*seed);
    crate::synth::draw_motion(cfg.phantom.n_b, &cfg.motion, &mut rng)
}
