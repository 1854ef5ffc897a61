//! Experiment grid execution: phantoms x orders, plus a baseline tracker
//! run per phantom, with per-cell artifacts and aggregate tables.
//!
//! Cells (one per phantom entry) run concurrently up to a job limit; each
//! cell writes only below its own subdirectory, and aggregation happens
//! after all cells join, in run-file order, so outputs are deterministic.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use btd::error::{Error, Result};
use btd::estimator::{fit_btd, PeakVolume};
use btd::formats;
use btd::metrics::{
    score_deviation, score_ol_or, score_vc, visited_mask, ScoreReport, DEFAULT_EVAL_DILATION,
};
use btd::phantom::{fit_peaks, make_phantom, simulate_dwi, Phantom};
use btd::tracer::{trace, trace_baseline, Tractogram};

use crate::runconfig::{PhantomCell, RunConfig};

/// One scored method within a cell.
#[derive(Debug, Clone)]
pub struct Row {
    pub label: String,
    pub snr: f64,
    pub alpha: Option<f64>,
    pub method: String,
    pub score: ScoreReport,
    pub fit_seconds: Option<f64>,
    pub residual: Option<f64>,
    pub max_divergence: Option<f64>,
}

/// Builds the peak volume for a phantom: exact analytic peaks, or the
/// simulate-then-fit pipeline.
pub fn peaks_for(ph: &Phantom, analytic: bool, rng_seed: u64) -> Result<PeakVolume> {
    if analytic {
        Ok(ph.analytic_peaks())
    } else {
        let dwi = simulate_dwi(ph, &ph.spec, rng_seed)?;
        let (peaks, _flags) = fit_peaks(&dwi, &ph.mask)?;
        Ok(peaks)
    }
}

struct CellOutput {
    rows: Vec<Row>,
}

fn run_cell(cell: &PhantomCell, cfg: &RunConfig, out_dir: &Path) -> Result<CellOutput> {
    let spec = cell.spec()?;
    let label = cell.label()?;
    let cell_dir = out_dir.join(&label);
    fs::create_dir_all(&cell_dir)?;

    let ph = make_phantom(&spec)?;
    let truth = visited_mask(&ph.ground_truth, spec.dims, spec.voxel_size);
    let peaks = peaks_for(&ph, cell.analytic, cfg.rng_seed)?;
    let seeds = ph.seed_points();
    let seed_vox = ph.seed_region.true_voxels();
    let trace_cfg = cfg.trace.config(spec.min_length());

    formats::write_volume(
        &cell_dir.join("mask.vol"),
        &formats::volume_from_mask(&ph.mask, spec.voxel_size),
    )?;
    formats::write_tractogram(&cell_dir.join("ground_truth.tsf"), &ph.ground_truth)?;

    let dilation = cfg.metrics.eval_dilation.unwrap_or(DEFAULT_EVAL_DILATION);
    let score = |t: &Tractogram| -> Result<ScoreReport> {
        let (vc, n_valid) = score_vc(
            t,
            &ph.seed_region,
            &ph.target_region,
            &ph.mask,
            spec.voxel_size,
        )?;
        let (ol, or_) = score_ol_or(t, &truth, spec.voxel_size, dilation)?;
        let deviation = match ph.circle_center() {
            Some(center) if !t.is_empty() => Some(
                score_deviation(
                    t,
                    center,
                    None,
                    spec.voxel_size[0],
                    cfg.metrics.signed_deviation,
                )?
                .0,
            ),
            _ => None,
        };
        Ok(ScoreReport {
            vc,
            ol,
            or_,
            deviation,
            n_streamlines: t.len(),
            n_valid,
        })
    };

    let mut rows = Vec::new();
    for &order in &cfg.orders {
        let fit_cfg = cfg.fit.config(order)?;
        let started = Instant::now();
        let (field, report) = fit_btd(&peaks, &seed_vox, &fit_cfg)?;
        let fit_seconds = started.elapsed().as_secs_f64();
        let tract = trace(
            &field,
            &seeds,
            &ph.mask,
            spec.voxel_size,
            Some(&ph.target_region),
            &trace_cfg,
        );
        let sc = score(&tract)?;

        let order_dir = cell_dir.join(format!("order{order}"));
        fs::create_dir_all(&order_dir)?;
        formats::write_field(&order_dir.join("field.json"), &field)?;
        fs::write(
            order_dir.join("fit_report.json"),
            serde_json::to_string_pretty(&report).map_err(|e| Error::format(e.to_string()))?,
        )?;
        formats::write_tractogram(&order_dir.join("tractogram.tsf"), &tract)?;
        write_score(&order_dir.join("score"), &sc)?;
        formats::render_svg(
            &tract,
            &ph.mask,
            spec.voxel_size,
            &order_dir.join("render.svg"),
        )?;

        rows.push(Row {
            label: label.clone(),
            snr: spec.snr,
            alpha: cell.alpha,
            method: format!("order{order}"),
            score: sc,
            fit_seconds: Some(fit_seconds),
            residual: Some(report.residual),
            max_divergence: Some(report.max_divergence),
        });
    }

    if cfg.baseline {
        let tract = trace_baseline(
            &peaks,
            &seeds,
            &ph.mask,
            Some(&ph.target_region),
            &trace_cfg,
        );
        let sc = score(&tract)?;
        let base_dir = cell_dir.join("baseline");
        fs::create_dir_all(&base_dir)?;
        formats::write_tractogram(&base_dir.join("tractogram.tsf"), &tract)?;
        write_score(&base_dir.join("score"), &sc)?;
        formats::render_svg(
            &tract,
            &ph.mask,
            spec.voxel_size,
            &base_dir.join("render.svg"),
        )?;
        rows.push(Row {
            label,
            snr: spec.snr,
            alpha: cell.alpha,
            method: "baseline".to_string(),
            score: sc,
            fit_seconds: None,
            residual: None,
            max_divergence: None,
        });
    }

    Ok(CellOutput { rows })
}

fn write_score(prefix: &Path, score: &ScoreReport) -> Result<()> {
    let json = serde_json::to_string_pretty(score).map_err(|e| Error::format(e.to_string()))?;
    fs::write(prefix.with_extension("json"), json)?;
    fs::write(
        prefix.with_extension("csv"),
        format!("{}\n{}\n", ScoreReport::csv_header(), score.csv_row()),
    )?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// A failed cell: its label and the error message.
pub type CellFailure = (String, String);

/// Runs the whole grid. Returns the scored rows and per-cell failures.
pub fn run(
    cfg: &RunConfig,
    out_dir: &Path,
    jobs: usize,
    dry_run: bool,
) -> Result<(Vec<Row>, Vec<CellFailure>)> {
    if dry_run {
        for cell in &cfg.phantoms {
            let label = cell.label()?;
            for order in &cfg.orders {
                println!("{label}/order{order}");
            }
            if cfg.baseline {
                println!("{label}/baseline");
            }
        }
        return Ok((Vec::new(), Vec::new()));
    }
    fs::create_dir_all(out_dir)?;

    let jobs = jobs.max(1);
    let mut outcomes: Vec<Option<Result<CellOutput>>> =
        (0..cfg.phantoms.len()).map(|_| None).collect();
    for chunk_start in (0..cfg.phantoms.len()).step_by(jobs) {
        let chunk_end = (chunk_start + jobs).min(cfg.phantoms.len());
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for idx in chunk_start..chunk_end {
                let cell = &cfg.phantoms[idx];
                handles.push((idx, scope.spawn(move || run_cell(cell, cfg, out_dir))));
            }
            for (idx, handle) in handles {
                let result = handle
                    .join()
                    .unwrap_or_else(|_| Err(Error::Degenerate("cell worker panicked".into())));
                outcomes[idx] = Some(result);
            }
        });
    }

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (cell, outcome) in cfg.phantoms.iter().zip(outcomes) {
        let label = cell.label().unwrap_or_else(|_| "?".to_string());
        match outcome.expect("every cell has an outcome") {
            Ok(output) => rows.extend(output.rows),
            Err(e) => failures.push((label, e.to_string())),
        }
    }

    // Aggregate CSVs: a long-form summary and a table pivot with one row per
    // method and OL/VC (and deviation where defined) per phantom.
    // summary.csv and table.csv are byte-deterministic given the run file
    // and seed; wall-clock fit timings go to a separate timings.csv.
    let mut summary = String::from(
        "phantom,snr,alpha,method,vc,ol,or,deviation,n_streamlines,n_valid,residual,max_divergence\n",
    );
    let mut timings = String::from("phantom,method,fit_seconds\n");
    for r in &rows {
        summary.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.label,
            if r.snr.is_finite() {
                r.snr.to_string()
            } else {
                "inf".to_string()
            },
            fmt_opt(r.alpha),
            r.method,
            r.score.vc,
            r.score.ol,
            r.score.or_,
            fmt_opt(r.score.deviation),
            r.score.n_streamlines,
            r.score.n_valid,
            fmt_opt(r.residual),
            fmt_opt(r.max_divergence),
        ));
        if let Some(t) = r.fit_seconds {
            timings.push_str(&format!("{},{},{t}\n", r.label, r.method));
        }
    }
    for (label, message) in &failures {
        summary.push_str(&format!("{label},,,failed: {message},,,,,,,,\n"));
    }
    fs::write(out_dir.join("summary.csv"), &summary)?;
    fs::write(out_dir.join("timings.csv"), &timings)?;
    fs::write(out_dir.join("table.csv"), pivot_table(cfg, &rows)?)?;

    Ok((rows, failures))
}

fn pivot_table(cfg: &RunConfig, rows: &[Row]) -> Result<String> {
    let labels: Vec<String> = cfg
        .phantoms
        .iter()
        .map(|c| c.label())
        .collect::<Result<_>>()?;
    let mut methods: Vec<String> = cfg.orders.iter().map(|o| format!("order{o}")).collect();
    if cfg.baseline {
        methods.push("baseline".to_string());
    }
    let mut out = String::from("method");
    for label in &labels {
        out.push_str(&format!(",{label}_OL,{label}_VC,{label}_deviation"));
    }
    out.push('\n');
    for method in &methods {
        out.push_str(method);
        for label in &labels {
            let row = rows
                .iter()
                .find(|r| &r.label == label && &r.method == method);
            match row {
                Some(r) => out.push_str(&format!(
                    ",{},{},{}",
                    r.score.ol,
                    r.score.vc,
                    fmt_opt(r.score.deviation)
                )),
                None => out.push_str(",,,"),
            }
        }
        out.push('\n');
    }
    Ok(out)
}

/// Resolves the effective output directory: the --out flag when given,
/// otherwise the run file's `out` relative to the run file location.
pub fn resolve_out_dir(run_path: &Path, cfg_out: &str, flag: Option<&Path>) -> PathBuf {
    if let Some(dir) = flag {
        return dir.to_path_buf();
    }
    let configured = Path::new(cfg_out);
    if configured.is_absolute() {
        configured.to_path_buf()
    } else {
        run_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(configured)
    }
}
