//! `oct-align` command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use oct_align_core::align::{
    loss_smooth_a, optimize_alignment, solve_supervised, template_match_align, AlignConfig,
};
use oct_align_core::io;
use oct_align_core::losses::{lambda_weights, loss_seg_total, LossWeights};
use oct_align_core::metrics::{connectivity_histogram, hd95, mad, ncc_adjacent, SurfaceMetric};
use oct_align_core::pipeline::{run_pipeline, PipelineConfig, RunOptions};
use oct_align_core::post::{crop_rows, crop_volume, flatten_to_bm, shift_surfaces_ascans, FlattenConfig};
use oct_align_core::stm::resample_axial;
use oct_align_core::synth::{generate_phantom, simulate_motion, MotionConfig, PhantomSpec};
use oct_align_core::transverse::align_transverse;
use oct_align_core::{DisplacementField, OctError};
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "oct-align", version, about = "Motion correction and surface processing for volumetric OCT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic phantom, optionally corrupted with motion.
    Phantom {
        /// Phantom parameters as JSON; omitted fields take defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Corrupt with motion drawn from this seed.
        #[arg(long)]
        motion_seed: Option<u64>,
        /// Motion parameters as JSON.
        #[arg(long, requires = "motion_seed")]
        motion: Option<PathBuf>,
    },
    /// Resample a volume by the axial part of a displacement file.
    Apply {
        #[arg(long)]
        vol: PathBuf,
        #[arg(long)]
        disp: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate axial B-scan displacements.
    Align {
        #[arg(long)]
        vol: PathBuf,
        #[arg(long)]
        surfaces: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = AlignMode::Supervised)]
        mode: AlignMode,
        /// Alignment parameters as JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate transverse B-scan displacements from en-face projections.
    Transverse {
        #[arg(long)]
        vol: PathBuf,
        #[arg(long, required_unless_present = "no_layer_mask")]
        surfaces: Option<PathBuf>,
        /// Project whole A-scans instead of the retina between the outer surfaces.
        #[arg(long)]
        no_layer_mask: bool,
        /// Search radius between adjacent B-scans, in A-scans.
        #[arg(long, default_value_t = 30)]
        radius: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Flatten to Bruch's membrane and/or crop rows.
    Preprocess {
        #[arg(long)]
        vol: PathBuf,
        /// Surfaces carried through the same shifts and crop.
        #[arg(long)]
        surfaces: Option<PathBuf>,
        #[arg(long)]
        flatten: bool,
        /// Flattening parameters as JSON.
        #[arg(long, requires = "flatten")]
        flatten_config: Option<PathBuf>,
        /// Inclusive 1-based row range `lo:hi`.
        #[arg(long, value_parser = parse_crop)]
        crop: Option<(usize, usize)>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, requires = "surfaces")]
        out_surfaces: Option<PathBuf>,
    },
    /// Print the per-term breakdown of the segmentation objective.
    Losses {
        #[arg(long)]
        vol: PathBuf,
        /// Surface position distribution.
        #[arg(long)]
        q: PathBuf,
        /// Ground-truth surfaces.
        #[arg(long)]
        surfaces: PathBuf,
        /// Ground-truth label map.
        #[arg(long)]
        labels: PathBuf,
        /// `{"lambda_base": .., "lambda_l": [..]}`; `lambda_l` is derived from the
        /// ground truth when absent.
        #[arg(long)]
        weights: PathBuf,
        /// Predicted class probabilities for the Dice + CE term.
        #[arg(long)]
        probs: Option<PathBuf>,
        /// Displacements scored by the alignment term on the ground truth.
        #[arg(long)]
        disp: Option<PathBuf>,
    },
    /// Score predicted surfaces against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Volume providing the voxel spacing and the adjacent-B-scan NCC.
        #[arg(long)]
        vol: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Connectivity histogram CSV; defaults to `<report>.histogram.csv`.
        #[arg(long)]
        histogram: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        bin_width: f64,
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
    /// Run the full synthetic experiment and write a report.
    Pipeline {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of phantoms.
        #[arg(long)]
        volumes: Option<usize>,
        /// Corruptions per phantom.
        #[arg(long)]
        repeats: Option<usize>,
        /// Worker threads; 0 uses every core.
        #[arg(long, env = "OCT_ALIGN_JOBS", default_value_t = 0)]
        jobs: usize,
        /// Pipeline parameters as JSON; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report path; printed to stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Directory for per-volume displacement files.
        #[arg(long)]
        artifacts: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum AlignMode {
    Supervised,
    Unsupervised,
    Template,
    ClosedForm,
}

fn parse_crop(s: &str) -> Result<(usize, usize), String> {
    let (lo, hi) = s.split_once(':').ok_or("expected lo:hi")?;
    let lo = lo.trim().parse().map_err(|e| format!("bad lower row: {e}"))?;
    let hi = hi.trim().parse().map_err(|e| format!("bad upper row: {e}"))?;
    Ok((lo, hi))
}

#[derive(Debug, Deserialize)]
struct WeightsFile {
    lambda_base: f64,
    #[serde(default)]
    lambda_l: Option<Vec<f64>>,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    schema: u32,
    surfaces: Vec<String>,
    mad_um: SurfaceMetric,
    hd95_um: SurfaceMetric,
    ncc_adjacent: f64,
    histogram_bin_width_px: f64,
    histogram_counts: Vec<u64>,
    histogram_csv: String,
}

/// Failure classes, each with its own exit code.
#[derive(Debug, Clone, Copy)]
enum ErrorClass {
    Usage,
    MissingFile,
    Io,
    MalformedInput,
    InvalidInput,
    InvalidConfig,
    Numerical,
}

impl ErrorClass {
    fn name(self) -> &'static str {
        match self {
            Self::Usage => "usage",
            Self::MissingFile => "missing_file",
            Self::Io => "io",
            Self::MalformedInput => "malformed_input",
            Self::InvalidInput => "invalid_input",
            Self::InvalidConfig => "invalid_config",
            Self::Numerical => "numerical",
        }
    }

    fn code(self) -> u8 {
        match self {
            Self::Io => 1,
            Self::Usage => 2,
            Self::MissingFile => 3,
            Self::MalformedInput => 4,
            Self::InvalidInput => 5,
            Self::InvalidConfig => 6,
            Self::Numerical => 7,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
struct CliError {
    class: ErrorClass,
    message: String,
}

impl From<OctError> for CliError {
    fn from(e: OctError) -> Self {
        let class = match &e {
            OctError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => ErrorClass::MissingFile,
            OctError::Io(_) => ErrorClass::Io,
            OctError::Format(_) | OctError::Csv(_) | OctError::Json(_) => ErrorClass::MalformedInput,
            OctError::InvalidConfig(_) | OctError::InvalidSpec(_) | OctError::UnknownLoss(_) => {
                ErrorClass::InvalidConfig
            }
            OctError::Numerical { .. } => ErrorClass::Numerical,
            _ => ErrorClass::InvalidInput,
        };
        Self {
            class,
            message: e.to_string(),
        }
    }
}

fn with_path(path: &Path, e: OctError) -> CliError {
    let mut err = CliError::from(e);
    err.message = format!("{}: {}", path.display(), err.message);
    err
}

fn read_json_opt<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T, CliError> {
    match path {
        Some(p) => io::read_json(p).map_err(|e| with_path(p, e)),
        None => Ok(T::default()),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| with_path(dir, e.into()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Phantom {
            spec,
            out,
            motion_seed,
            motion,
        } => {
            let spec: PhantomSpec = read_json_opt(spec.as_deref())?;
            let (mut v, mut s) = generate_phantom(&spec)?;
            ensure_dir(&out)?;
            if let Some(seed) = motion_seed {
                let cfg: MotionConfig = read_json_opt(motion.as_deref())?;
                io::write_volume(&out.join("clean_volume.bin"), &v)?;
                io::write_surfaces(&out.join("clean_surfaces.csv"), &s)?;
                let (cv, cs, truth) = simulate_motion(&v, &s, seed, &cfg)?;
                let field = DisplacementField {
                    axial: truth.axial_truth.clone(),
                    transverse: truth.transverse_truth.clone(),
                };
                io::write_displacement(&out.join("motion.csv"), &field)?;
                (v, s) = (cv, cs);
            }
            io::write_volume(&out.join("volume.bin"), &v)?;
            io::write_surfaces(&out.join("surfaces.csv"), &s)?;
        }
        Command::Apply { vol, disp, out } => {
            let v = io::read_volume(&vol).map_err(|e| with_path(&vol, e))?;
            let d = io::read_displacement(&disp).map_err(|e| with_path(&disp, e))?;
            io::write_volume(&out, &resample_axial(&v, &d.axial)?)?;
        }
        Command::Align {
            vol,
            surfaces,
            mode,
            config,
            out,
        } => {
            let v = io::read_volume(&vol).map_err(|e| with_path(&vol, e))?;
            let s = surfaces
                .as_deref()
                .map(|p| io::read_surfaces(p).map_err(|e| with_path(p, e)))
                .transpose()?;
            let cfg: AlignConfig = read_json_opt(config.as_deref())?;
            let need_surfaces = || {
                s.as_ref().ok_or_else(|| CliError {
                    class: ErrorClass::Usage,
                    message: format!("--mode {mode:?} needs --surfaces").to_lowercase(),
                })
            };
            let d = match mode {
                AlignMode::Supervised => optimize_alignment(&v, Some(need_surfaces()?), &cfg)?,
                AlignMode::Unsupervised => optimize_alignment(&v, None, &cfg)?,
                AlignMode::Template => template_match_align(&v, &cfg)?,
                AlignMode::ClosedForm => solve_supervised(need_surfaces()?)?,
            };
            io::write_displacement(&out, &d)?;
        }
        Command::Transverse {
            vol,
            surfaces,
            no_layer_mask,
            radius,
            out,
        } => {
            let v = io::read_volume(&vol).map_err(|e| with_path(&vol, e))?;
            let s = match (no_layer_mask, surfaces.as_deref()) {
                (false, Some(p)) => Some(io::read_surfaces(p).map_err(|e| with_path(p, e))?),
                _ => None,
            };
            io::write_displacement(&out, &align_transverse(&v, s.as_ref(), radius)?)?;
        }
        Command::Preprocess {
            vol,
            surfaces,
            flatten,
            flatten_config,
            crop,
            out,
            out_surfaces,
        } => {
            let mut v = io::read_volume(&vol).map_err(|e| with_path(&vol, e))?;
            let mut s = surfaces
                .as_deref()
                .map(|p| io::read_surfaces(p).map_err(|e| with_path(p, e)))
                .transpose()?;
            if flatten {
                let cfg: FlattenConfig = read_json_opt(flatten_config.as_deref())?;
                let flat = flatten_to_bm(&v, &cfg)?;
                if let Some(surf) = &s {
                    s = Some(shift_surfaces_ascans(surf, &flat.shifts)?);
                }
                v = flat.volume;
            }
            if let Some((lo, hi)) = crop {
                match &s {
                    Some(surf) => {
                        let (cv, cs) = crop_rows(&v, surf, lo, hi)?;
                        v = cv;
                        s = Some(cs);
                    }
                    None => v = crop_volume(&v, lo, hi)?,
                }
            }
            io::write_volume(&out, &v)?;
            if let (Some(path), Some(surf)) = (out_surfaces, &s) {
                io::write_surfaces(&path, surf)?;
            }
        }
        Command::Losses {
            vol,
            q,
            surfaces,
            labels,
            weights,
            probs,
            disp,
        } => {
            let v = io::read_volume(&vol).map_err(|e| with_path(&vol, e))?;
            let qd = io::read_distribution(&q).map_err(|e| with_path(&q, e))?;
            let gt = io::read_surfaces(&surfaces).map_err(|e| with_path(&surfaces, e))?;
            let m = io::read_labels(&labels).map_err(|e| with_path(&labels, e))?;
            let wf: WeightsFile = io::read_json(&weights).map_err(|e| with_path(&weights, e))?;
            let dims = v.dims();
            if (qd.n_b(), qd.n_a(), qd.n_r()) != (dims.n_b, dims.n_a, dims.n_r) || m.dims() != dims {
                return Err(OctError::Dimension("inputs do not match the volume grid".into()).into());
            }
            let w = match wf.lambda_l {
                Some(lambda_l) => LossWeights {
                    lambda_base: wf.lambda_base,
                    lambda_l,
                },
                None => lambda_weights(std::slice::from_ref(&gt), wf.lambda_base)?,
            };
            let p = probs
                .as_deref()
                .map(|path| io::read_class_probabilities(path).map_err(|e| with_path(path, e)))
                .transpose()?;
            let seg = loss_seg_total(&qd, p.as_ref().map(|p| (p, &m)), &gt, &w)?;
            let smooth_a = match disp.as_deref() {
                Some(path) => {
                    let d = io::read_displacement(path).map_err(|e| with_path(path, e))?;
                    Some(loss_smooth_a(&gt, &d.axial)?)
                }
                None => None,
            };
            let body = json!({
                "schema": 1,
                "weights": w,
                "terms": seg,
                "smooth_a": smooth_a,
            });
            println!("{}", serde_json::to_string_pretty(&body).map_err(OctError::from)?);
        }
        Command::Eval {
            pred,
            gt,
            vol,
            report,
            histogram,
            bin_width,
            bins,
        } => {
            let p = io::read_surfaces(&pred).map_err(|e| with_path(&pred, e))?;
            let g = io::read_surfaces(&gt).map_err(|e| with_path(&gt, e))?;
            let v = io::read_volume(&vol).map_err(|e| with_path(&vol, e))?;
            let sp = v.spacing();
            let hist = connectivity_histogram(&p, bin_width, bins)?;
            let hist_path = histogram.unwrap_or_else(|| report.with_extension("histogram.csv"));
            let mut csv = Vec::new();
            hist.write_csv(&mut csv)?;
            io::write_atomic(&hist_path, &csv)?;
            let out = EvalReport {
                schema: 1,
                surfaces: p.names().to_vec(),
                mad_um: mad(&p, &g, sp.dz, None)?,
                hd95_um: hd95(&p, &g, sp.dz, sp.dx)?,
                ncc_adjacent: ncc_adjacent(&v),
                histogram_bin_width_px: hist.bin_width,
                histogram_counts: hist.counts.clone(),
                histogram_csv: hist_path.display().to_string(),
            };
            io::write_json(&report, &out)?;
        }
        Command::Pipeline {
            seed,
            volumes,
            repeats,
            jobs,
            config,
            report,
            artifacts,
        } => {
            let mut cfg: PipelineConfig = read_json_opt(config.as_deref())?;
            cfg.seed = seed;
            if let Some(n) = volumes {
                cfg.phantoms = n;
            }
            if let Some(n) = repeats {
                cfg.repeats = n;
            }
            if let Some(dir) = &artifacts {
                ensure_dir(dir)?;
            }
            let (rep, timing) = run_pipeline(&cfg, &RunOptions { jobs, artifacts })?;
            match report {
                Some(path) => io::write_json(&path, &rep)?,
                None => {
                    let text = serde_json::to_string_pretty(&rep).map_err(OctError::from)?;
                    println!("{text}");
                }
            }
            eprintln!(
                "{} volumes in {:.1}s (supervised alignment {:.1}s)",
                rep.volumes,
                timing.total.as_secs_f64(),
                timing.supervised.as_secs_f64()
            );
        }
    }
    Ok(())
}

fn report_error(err: &CliError) -> ExitCode {
    let body = json!({ "error": { "class": err.class.name(), "message": err.message } });
    let _ = writeln!(std::io::stderr(), "{body}");
    ExitCode::from(err.class.code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            return report_error(&CliError {
                class: ErrorClass::Usage,
                message: e.kind().to_string() + ": " + e.to_string().lines().next().unwrap_or(""),
            })
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_error(&e),
    }
}
