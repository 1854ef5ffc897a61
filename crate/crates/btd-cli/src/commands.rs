//! Subcommand definitions and handlers.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Subcommand};
use nalgebra::Vector3;

use btd::error::Error;
use btd::estimator::{fit_btd, SignAlignment};
use btd::formats;
use btd::metrics::{
    score_deviation, score_ol_or, score_vc, visited_mask, ScoreReport, DEFAULT_EVAL_DILATION,
};
use btd::phantom::{make_phantom, seed_points, simulate_dwi, PhantomKind, PhantomSpec};
use btd::tracer::{trace, trace_baseline, StreamStatus, TraceConfig};

use crate::experiment;
use crate::runconfig;
use crate::{AppError, AppResult};

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom: mask, peaks, seed/target regions, and
    /// ground-truth streamlines.
    Phantom(PhantomArgs),
    /// Fit the divergence-free polynomial field to a peak volume.
    Fit(FitArgs),
    /// Trace streamlines through a fitted field (or run the baseline
    /// tracker over a peak volume).
    Track(TrackArgs),
    /// Score a tractogram against phantom ground truth.
    Score(ScoreArgs),
    /// Run a whole experiment grid from a JSON run file.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
pub struct PhantomArgs {
    /// Phantom geometry: hough, sine, or circle.
    #[arg(long)]
    kind: String,
    /// Sine amplitude parameter (sine only).
    #[arg(long)]
    alpha: Option<f64>,
    /// Circle inner radius in mm (circle only).
    #[arg(long)]
    r1: Option<f64>,
    /// Circle outer radius in mm (circle only).
    #[arg(long)]
    r2: Option<f64>,
    /// Signal-to-noise ratio, or "inf" for noiseless.
    #[arg(long, default_value = "inf")]
    snr: String,
    /// Volume dimensions as X,Y,Z voxels.
    #[arg(long, value_parser = parse_dims)]
    dims: Option<[usize; 3]>,
    /// Number of seed points.
    #[arg(long)]
    seeds: Option<usize>,
    /// Diffusion weighting in s/mm^2.
    #[arg(long)]
    bvalue: Option<f64>,
    /// Number of gradient directions.
    #[arg(long)]
    gradients: Option<usize>,
    /// Noise generator seed.
    #[arg(long, default_value_t = 0)]
    rng_seed: u64,
    /// Write exact analytic peak directions instead of simulating DWI and
    /// fitting tensors.
    #[arg(long)]
    analytic: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("dims must be X,Y,Z".to_string());
    }
    let mut dims = [0usize; 3];
    for (slot, part) in dims.iter_mut().zip(parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|e| format!("bad dim {part:?}: {e}"))?;
    }
    Ok(dims)
}

fn parse_snr(s: &str) -> AppResult<f64> {
    if s == "inf" {
        return Ok(f64::INFINITY);
    }
    s.parse::<f64>()
        .map_err(|e| AppError::usage(format!("bad snr {s:?}: {e}")))
}

pub fn run(command: Command) -> AppResult<ExitCode> {
    match command {
        Command::Phantom(args) => cmd_phantom(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Track(args) => cmd_track(args),
        Command::Score(args) => cmd_score(args),
        Command::Experiment(args) => cmd_experiment(args),
    }
}

fn cmd_phantom(args: PhantomArgs) -> AppResult<ExitCode> {
    let snr = parse_snr(&args.snr)?;
    let kind = match args.kind.as_str() {
        "hough" | "fan" => {
            if args.alpha.is_some() || args.r1.is_some() || args.r2.is_some() {
                return Err(AppError::usage(
                    "--alpha/--r1/--r2 do not apply to the hough phantom",
                ));
            }
            PhantomKind::Fan
        }
        "sine" => {
            if args.r1.is_some() || args.r2.is_some() {
                return Err(AppError::usage(
                    "--r1/--r2 do not apply to the sine phantom",
                ));
            }
            PhantomKind::Sine {
                alpha: args
                    .alpha
                    .ok_or_else(|| AppError::usage("sine phantom needs --alpha"))?,
            }
        }
        "circle" => {
            if args.alpha.is_some() {
                return Err(AppError::usage(
                    "--alpha does not apply to the circle phantom",
                ));
            }
            PhantomKind::Circle {
                r1: args.r1.unwrap_or(10.0),
                r2: args.r2.unwrap_or(20.0),
            }
        }
        other => {
            return Err(AppError::usage(format!(
                "unknown phantom kind {other:?} (expected hough, sine, or circle)"
            )))
        }
    };
    if args.analytic && snr.is_finite() {
        return Err(AppError::usage(
            "--analytic conflicts with a finite --snr: analytic peaks are noiseless",
        ));
    }

    let mut spec = PhantomSpec::new(kind);
    spec.snr = snr;
    if let Some(dims) = args.dims {
        spec.dims = dims;
    }
    if let Some(n) = args.seeds {
        spec.seed_count = n;
    }
    if let Some(b) = args.bvalue {
        spec.bvalue = b;
    }
    if let Some(g) = args.gradients {
        spec.n_gradients = g;
    }
    spec.validate()?;

    let ph = make_phantom(&spec)?;
    fs::create_dir_all(&args.out).map_err(Error::Io)?;
    formats::write_volume(
        &args.out.join("mask.vol"),
        &formats::volume_from_mask(&ph.mask, spec.voxel_size),
    )?;
    formats::write_volume(
        &args.out.join("seeds.vol"),
        &formats::volume_from_mask(&ph.seed_region, spec.voxel_size),
    )?;
    formats::write_volume(
        &args.out.join("targets.vol"),
        &formats::volume_from_mask(&ph.target_region, spec.voxel_size),
    )?;
    formats::write_tractogram(&args.out.join("ground_truth.tsf"), &ph.ground_truth)?;

    if args.analytic {
        let peaks = ph.analytic_peaks();
        formats::write_volume(
            &args.out.join("peaks.vol"),
            &formats::volume_from_peaks(&peaks.peaks, spec.voxel_size),
        )?;
    } else {
        let dwi = simulate_dwi(&ph, &spec, args.rng_seed)?;
        fs::write(args.out.join("gradients.txt"), dwi.gradient_table()).map_err(Error::Io)?;
        let (peaks, flags) = btd::phantom::fit_peaks(&dwi, &ph.mask)?;
        formats::write_volume(
            &args.out.join("peaks.vol"),
            &formats::volume_from_peaks(&peaks.peaks, spec.voxel_size),
        )?;
        formats::write_volume(
            &args.out.join("low_quality.vol"),
            &formats::volume_from_mask(&flags, spec.voxel_size),
        )?;
    }
    eprintln!(
        "phantom {}: {} mask voxels, {} seed voxels, {} ground-truth streamlines",
        spec.kind.name(),
        ph.mask.count_true(),
        ph.seed_region.count_true(),
        ph.ground_truth.len()
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
pub struct FitArgs {
    /// Peak volume (3-channel f32 .vol).
    #[arg(long)]
    peaks: PathBuf,
    /// Bundle mask (1-channel u8 .vol).
    #[arg(long)]
    mask: PathBuf,
    /// Polynomial order, 1..=8.
    #[arg(long)]
    order: usize,
    /// Seed-region mask for peak sign alignment; defaults to the first
    /// masked voxel.
    #[arg(long)]
    seeds: Option<PathBuf>,
    /// Constraint mode: exact or sampled.
    #[arg(long, default_value = "exact")]
    mode: String,
    /// Ridge weight: "auto" or a nonnegative number.
    #[arg(long, default_value = "auto")]
    ridge: String,
    /// Restrict to an in-plane (z-free) divergence-free field.
    #[arg(long)]
    planar: bool,
    /// Align signs against this axis (X,Y,Z) instead of propagating from
    /// the seed region.
    #[arg(long, value_parser = parse_axis)]
    sign_axis: Option<[f64; 3]>,
    /// Output directory for field.json and fit_report.json.
    #[arg(long)]
    out: PathBuf,
}

fn parse_axis(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("axis must be X,Y,Z".to_string());
    }
    let mut axis = [0.0f64; 3];
    for (slot, part) in axis.iter_mut().zip(parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|e| format!("bad component {part:?}: {e}"))?;
    }
    Ok(axis)
}

fn cmd_fit(args: FitArgs) -> AppResult<ExitCode> {
    let peaks_vol = formats::read_volume(&args.peaks)?;
    let mask_vol = formats::read_volume(&args.mask)?;
    let vol = formats::peak_volume_from(&peaks_vol, &mask_vol)?;

    let seed_region: Vec<[usize; 3]> = match &args.seeds {
        Some(path) => {
            let region = formats::mask_from_volume(&formats::read_volume(path)?)?;
            if region.dims() != vol.dims {
                return Err(Error::format(format!(
                    "seed region dims {:?} do not match mask dims {:?}",
                    region.dims(),
                    vol.dims
                ))
                .into());
            }
            region.true_voxels()
        }
        None => vol.mask.true_voxels().into_iter().take(1).collect(),
    };

    let fit_section = runconfig::FitSection {
        mode: Some(args.mode.clone()),
        ridge: Some(if args.ridge == "auto" {
            runconfig::RidgeValue::Text("auto".to_string())
        } else {
            runconfig::RidgeValue::Number(
                args.ridge
                    .parse::<f64>()
                    .map_err(|e| AppError::usage(format!("bad --ridge {:?}: {e}", args.ridge)))?,
            )
        }),
        planar: args.planar,
    };
    let mut cfg = fit_section.config(args.order)?;
    if let Some(axis) = args.sign_axis {
        cfg.sign_alignment = SignAlignment::ReferenceAxis(Vector3::new(axis[0], axis[1], axis[2]));
    }

    let (field, report) = fit_btd(&vol, &seed_region, &cfg)?;
    fs::create_dir_all(&args.out).map_err(Error::Io)?;
    formats::write_field(&args.out.join("field.json"), &field)?;
    fs::write(
        args.out.join("fit_report.json"),
        serde_json::to_string_pretty(&report).map_err(|e| Error::format(e.to_string()))?,
    )
    .map_err(Error::Io)?;
    eprintln!(
        "fit order {}: residual {:.6e}, max divergence {:.3e}, condition {:.3e}",
        args.order, report.residual, report.max_divergence, report.condition_estimate
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
pub struct TrackArgs {
    /// Fitted field (field.json). Required unless --baseline-peaks is given.
    #[arg(long, required_unless_present = "baseline_peaks")]
    field: Option<PathBuf>,
    /// Run the deterministic peak-following baseline over this peak volume
    /// instead of integrating a fitted field.
    #[arg(long, conflicts_with = "field")]
    baseline_peaks: Option<PathBuf>,
    /// Tracing mask (1-channel u8 .vol).
    #[arg(long)]
    mask: PathBuf,
    /// Seed-region mask (1-channel u8 .vol).
    #[arg(long)]
    seeds: PathBuf,
    /// Optional target-region mask; tracing stops there after --min-length.
    #[arg(long)]
    targets: Option<PathBuf>,
    /// Number of seed points distributed over the seed region.
    #[arg(long, default_value_t = 2000)]
    seed_count: usize,
    /// Step size in mm.
    #[arg(long, default_value_t = 0.2)]
    step: f64,
    #[arg(long, default_value_t = 10_000)]
    max_steps: usize,
    /// Discard streamlines shorter than this (mm).
    #[arg(long, default_value_t = 0.0)]
    min_length: f64,
    /// Integrate the raw field vector instead of its unit direction.
    #[arg(long)]
    raw_field: bool,
    /// Baseline only: stop when successive directions turn more than this.
    #[arg(long, default_value_t = 60.0)]
    max_angle: f64,
    /// Output tractogram (.tsf).
    #[arg(long)]
    out: PathBuf,
}

fn cmd_track(args: TrackArgs) -> AppResult<ExitCode> {
    let mask = formats::mask_from_volume(&formats::read_volume(&args.mask)?)?;
    let seeds_vol = formats::read_volume(&args.seeds)?;
    let seed_region = formats::mask_from_volume(&seeds_vol)?;
    if seed_region.dims() != mask.dims() {
        return Err(Error::format("seed region dims do not match mask dims").into());
    }
    let voxel_size = seeds_vol.voxel_size;
    let targets = match &args.targets {
        Some(path) => Some(formats::mask_from_volume(&formats::read_volume(path)?)?),
        None => None,
    };
    let seeds = seed_points(&seed_region.true_voxels(), voxel_size, args.seed_count);
    if seeds.is_empty() {
        return Err(Error::invalid("seed region is empty").into());
    }
    let cfg = TraceConfig {
        step_size: args.step,
        max_steps: args.max_steps,
        min_length: args.min_length,
        normalize_field: !args.raw_field,
        max_angle_deg: args.max_angle,
    };

    let tract = if let Some(peaks_path) = &args.baseline_peaks {
        let peaks_vol = formats::read_volume(peaks_path)?;
        let mask_vol = formats::read_volume(&args.mask)?;
        let vol = formats::peak_volume_from(&peaks_vol, &mask_vol)?;
        trace_baseline(&vol, &seeds, &mask, targets.as_ref(), &cfg)
    } else {
        let field = formats::read_field(args.field.as_ref().expect("clap enforces field"))?;
        trace(&field, &seeds, &mask, voxel_size, targets.as_ref(), &cfg)
    };

    let mut by_status = [0usize; 4];
    for s in &tract.streamlines {
        by_status[match s.status {
            StreamStatus::ExitedMask => 0,
            StreamStatus::ReachedTarget => 1,
            StreamStatus::MaxSteps => 2,
            StreamStatus::Stalled => 3,
        }] += 1;
    }
    eprintln!(
        "kept {} of {} seeds (discarded {}): exited_mask {}, reached_target {}, max_steps {}, stalled {}",
        tract.len(),
        seeds.len(),
        seeds.len() - tract.len(),
        by_status[0],
        by_status[1],
        by_status[2],
        by_status[3]
    );
    formats::write_tractogram(&args.out, &tract)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
pub struct ScoreArgs {
    /// Tractogram to score (.tsf).
    #[arg(long)]
    tractogram: PathBuf,
    /// Bundle mask (1-channel u8 .vol).
    #[arg(long)]
    mask: PathBuf,
    /// Seed-region mask.
    #[arg(long)]
    seeds: PathBuf,
    /// Target-region mask.
    #[arg(long)]
    targets: PathBuf,
    /// Ground-truth tractogram (.tsf); its visited voxels are the truth set
    /// for overlap/overreach.
    #[arg(long)]
    truth: PathBuf,
    /// Circle center as X,Y (mm); enables the radial deviation metric.
    #[arg(long, value_parser = parse_center)]
    circle_center: Option<[f64; 2]>,
    /// Dilation radius (voxels) applied to the truth mask for overreach.
    #[arg(long, default_value_t = DEFAULT_EVAL_DILATION)]
    dilation: usize,
    /// Sum signed radial errors instead of absolute ones.
    #[arg(long)]
    signed_deviation: bool,
    /// Output prefix; writes <prefix>.json and <prefix>.csv.
    #[arg(long)]
    out: PathBuf,
}

fn parse_center(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err("center must be X,Y".to_string());
    }
    let x = parts[0].trim().parse().map_err(|e| format!("bad X: {e}"))?;
    let y = parts[1].trim().parse().map_err(|e| format!("bad Y: {e}"))?;
    Ok([x, y])
}

fn cmd_score(args: ScoreArgs) -> AppResult<ExitCode> {
    let mask_vol = formats::read_volume(&args.mask)?;
    let mask = formats::mask_from_volume(&mask_vol)?;
    let voxel_size = mask_vol.voxel_size;
    let seed_region = formats::mask_from_volume(&formats::read_volume(&args.seeds)?)?;
    let target_region = formats::mask_from_volume(&formats::read_volume(&args.targets)?)?;
    let tract = formats::read_tractogram(&args.tractogram)?;
    let truth_tract = formats::read_tractogram(&args.truth)?;
    let truth = visited_mask(&truth_tract, mask.dims(), voxel_size);

    if tract.is_empty() {
        eprintln!("warning: empty tractogram; valid-connection score is 0");
    }
    let (vc, n_valid) = score_vc(&tract, &seed_region, &target_region, &mask, voxel_size)?;
    let (ol, or_) = score_ol_or(&tract, &truth, voxel_size, args.dilation)?;
    let deviation = match args.circle_center {
        Some(center) if !tract.is_empty() => {
            Some(score_deviation(&tract, center, None, voxel_size[0], args.signed_deviation)?.0)
        }
        _ => None,
    };
    let report = ScoreReport {
        vc,
        ol,
        or_,
        deviation,
        n_streamlines: tract.len(),
        n_valid,
    };
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(Error::Io)?;
        }
    }
    fs::write(
        args.out.with_extension("json"),
        serde_json::to_string_pretty(&report).map_err(|e| Error::format(e.to_string()))?,
    )
    .map_err(Error::Io)?;
    fs::write(
        args.out.with_extension("csv"),
        format!("{}\n{}\n", ScoreReport::csv_header(), report.csv_row()),
    )
    .map_err(Error::Io)?;
    eprintln!(
        "vc {:.4} ol {:.4} or {:.4} deviation {:?} ({} / {} valid)",
        report.vc, report.ol, report.or_, report.deviation, report.n_valid, report.n_streamlines
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
pub struct ExperimentArgs {
    /// Run file (JSON).
    #[arg(long)]
    run: PathBuf,
    /// Override the run file's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Maximum number of phantom cells processed concurrently.
    #[arg(long, default_value_t = 2)]
    jobs: usize,
    /// Print the planned cells and write nothing.
    #[arg(long)]
    dry_run: bool,
}

fn cmd_experiment(args: ExperimentArgs) -> AppResult<ExitCode> {
    let cfg = runconfig::load(&args.run)?;
    let out_dir = experiment::resolve_out_dir(&args.run, &cfg.out, args.out.as_deref());
    let (rows, failures) = experiment::run(&cfg, &out_dir, args.jobs, args.dry_run)?;
    if args.dry_run {
        return Ok(ExitCode::SUCCESS);
    }
    eprintln!(
        "experiment complete: {} scored runs, {} failed cells -> {}",
        rows.len(),
        failures.len(),
        out_dir.display()
    );
    for (label, message) in &failures {
        eprintln!("  failed cell {label}: {message}");
    }
    if failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(4))
    }
}
