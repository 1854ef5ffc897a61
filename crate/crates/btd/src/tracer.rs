//! Streamline integration through a fitted field (fourth-order Runge-Kutta)
//! and a deterministic nearest-voxel peak-following baseline tracker.
//!
//! Tracing is forward-only from each seed. A point belongs to the mask when
//! its containing voxel (`floor(p / voxel_size)`) is masked. Streamlines end
//! when the next point would leave the mask, when the current point enters
//! the target region after at least `min_length` of arc, when the field
//! stalls, or at `max_steps`; streamlines shorter than `min_length` are
//! dropped from the output.

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::estimator::PeakVolume;
use crate::grid::{voxel_of, MaskGrid};
use crate::polyfield::PolyField;

/// Field magnitudes below this stall the integration in normalize mode.
pub const STALL_EPS: f64 = 1e-12;

/// Why a streamline stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamStatus {
    ExitedMask,
    ReachedTarget,
    MaxSteps,
    Stalled,
}

impl StreamStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            StreamStatus::ExitedMask => "exited_mask",
            StreamStatus::ReachedTarget => "reached_target",
            StreamStatus::MaxSteps => "max_steps",
            StreamStatus::Stalled => "stalled",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "exited_mask" => Some(StreamStatus::ExitedMask),
            "reached_target" => Some(StreamStatus::ReachedTarget),
            "max_steps" => Some(StreamStatus::MaxSteps),
            "stalled" => Some(StreamStatus::Stalled),
            _ => None,
        }
    }
}

/// Ordered points of one traced fiber, in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct Streamline {
    pub points: Vec<Point3<f64>>,
    pub status: StreamStatus,
}

impl Streamline {
    /// Polyline arc length in mm.
    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }
}

/// A set of streamlines traced with one step size.
#[derive(Debug, Clone, PartialEq)]
pub struct Tractogram {
    pub streamlines: Vec<Streamline>,
    pub step_size: f64,
    /// Free-text record of how the tractogram was produced.
    pub provenance: String,
}

impl Tractogram {
    pub fn len(&self) -> usize {
        self.streamlines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streamlines.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    /// Integration step in mm; arc length per step when the field is
    /// normalized.
    pub step_size: f64,
    pub max_steps: usize,
    /// Streamlines shorter than this are discarded, and target termination
    /// only triggers past this arc length (a bundle that loops back onto its
    /// own seed region would otherwise terminate immediately).
    pub min_length: f64,
    /// Follow the unit direction of the field rather than the raw vector, so
    /// `step_size` is arc length in mm.
    pub normalize_field: bool,
    /// Baseline tracker only: stop when successive directions turn by more
    /// than this per step.
    pub max_angle_deg: f64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            step_size: 0.2,
            max_steps: 10_000,
            min_length: 0.0,
            normalize_field: true,
            max_angle_deg: 60.0,
        }
    }
}

/// One classical RK4 update of `dp/dt = d(p)`; `None` when the field stalls
/// (magnitude below [`STALL_EPS`] at any stage, normalize mode only).
pub fn rk4_step(
    field: &PolyField,
    p: &Point3<f64>,
    h: f64,
    normalize: bool,
) -> Option<Point3<f64>> {
    rk4_step_fn(&|q| field.eval(q), p, h, normalize)
}

fn direction(
    f: &dyn Fn(&Point3<f64>) -> Vector3<f64>,
    p: &Point3<f64>,
    normalize: bool,
) -> Option<Vector3<f64>> {
    let v = f(p);
    if normalize {
        let n = v.norm();
        if n < STALL_EPS {
            return None;
        }
        Some(v / n)
    } else {
        Some(v)
    }
}

fn rk4_step_fn(
    f: &dyn Fn(&Point3<f64>) -> Vector3<f64>,
    p: &Point3<f64>,
    h: f64,
    normalize: bool,
) -> Option<Point3<f64>> {
    let k1 = direction(f, p, normalize)?;
    let k2 = direction(f, &(p + k1 * (h / 2.0)), normalize)?;
    let k3 = direction(f, &(p + k2 * (h / 2.0)), normalize)?;
    let k4 = direction(f, &(p + k3 * h), normalize)?;
    Some(p + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

struct Domain<'a> {
    mask: &'a MaskGrid,
    voxel_size: [f64; 3],
    target: Option<&'a MaskGrid>,
}

impl Domain<'_> {
    fn in_mask(&self, p: &Point3<f64>) -> bool {
        voxel_of(p, self.voxel_size, self.mask.dims()).is_some_and(|v| *self.mask.get(v))
    }

    fn in_target(&self, p: &Point3<f64>) -> bool {
        self.target
            .is_some_and(|t| voxel_of(p, self.voxel_size, t.dims()).is_some_and(|v| *t.get(v)))
    }
}

fn trace_one(
    mut step: impl FnMut(&Point3<f64>) -> Option<Point3<f64>>,
    seed: Point3<f64>,
    domain: &Domain,
    cfg: &TraceConfig,
) -> Streamline {
    let mut points = vec![seed];
    if !domain.in_mask(&seed) {
        return Streamline {
            points,
            status: StreamStatus::ExitedMask,
        };
    }
    let mut length = 0.0;
    let mut status = StreamStatus::MaxSteps;
    for _ in 0..cfg.max_steps {
        let p = *points.last().unwrap();
        if length >= cfg.min_length && domain.in_target(&p) {
            status = StreamStatus::ReachedTarget;
            break;
        }
        let next = match step(&p) {
            Some(q) => q,
            None => {
                status = StreamStatus::Stalled;
                break;
            }
        };
        if !domain.in_mask(&next) {
            status = StreamStatus::ExitedMask;
            break;
        }
        length += (next - p).norm();
        points.push(next);
    }
    Streamline { points, status }
}

/// Integrates one streamline per seed through the fitted field.
///
/// Output order matches seed order; streamlines shorter than
/// `cfg.min_length` are discarded.
pub fn trace(
    field: &PolyField,
    seeds: &[Point3<f64>],
    mask: &MaskGrid,
    voxel_size: [f64; 3],
    target: Option<&MaskGrid>,
    cfg: &TraceConfig,
) -> Tractogram {
    let f = |q: &Point3<f64>| field.eval(q);
    trace_fn(
        &f,
        seeds,
        mask,
        voxel_size,
        target,
        cfg,
        format!("rk4 order={} step={}", field.order(), cfg.step_size),
    )
}

/// RK4 tracing of an arbitrary direction field; shared by the fitted-field
/// path and the phantom ground-truth generator.
pub fn trace_fn(
    f: &dyn Fn(&Point3<f64>) -> Vector3<f64>,
    seeds: &[Point3<f64>],
    mask: &MaskGrid,
    voxel_size: [f64; 3],
    target: Option<&MaskGrid>,
    cfg: &TraceConfig,
    provenance: String,
) -> Tractogram {
    let domain = Domain {
        mask,
        voxel_size,
        target,
    };
    let streamlines = seeds
        .iter()
        .map(|&seed| {
            trace_one(
                |p| rk4_step_fn(f, p, cfg.step_size, cfg.normalize_field),
                seed,
                &domain,
                cfg,
            )
        })
        .filter(|s| s.length() >= cfg.min_length)
        .collect();
    Tractogram {
        streamlines,
        step_size: cfg.step_size,
        provenance,
    }
}

/// Deterministic nearest-voxel peak-following baseline.
///
/// At each step the peak of the containing voxel is followed with its sign
/// chosen to keep a nonnegative dot product with the previous direction;
/// turning more than `cfg.max_angle_deg` per step stalls the streamline. The
/// initial direction per seed is the seed voxel's peak, oriented toward the
/// side that stays inside the mask for longer.
pub fn trace_baseline(
    vol: &PeakVolume,
    seeds: &[Point3<f64>],
    mask: &MaskGrid,
    target: Option<&MaskGrid>,
    cfg: &TraceConfig,
) -> Tractogram {
    let domain = Domain {
        mask,
        voxel_size: vol.voxel_size,
        target,
    };
    let cos_limit = cfg.max_angle_deg.to_radians().cos();
    let lookahead = 2.0 * vol.voxel_size.iter().fold(f64::INFINITY, |a, &b| a.min(b));

    let streamlines: Vec<Streamline> = seeds
        .iter()
        .map(|&seed| {
            let Some(v0) = voxel_of(&seed, vol.voxel_size, vol.dims) else {
                return Streamline {
                    points: vec![seed],
                    status: StreamStatus::ExitedMask,
                };
            };
            let mut prev = *vol.peaks.get(v0);
            if prev.norm() >= STALL_EPS {
                prev = prev.normalize();
                // Orient the first step into the mask.
                let mut score = 0i32;
                let steps = (lookahead / cfg.step_size).ceil() as usize;
                for k in 1..=steps {
                    let d = prev * (k as f64 * cfg.step_size);
                    score += i32::from(domain.in_mask(&(seed + d)));
                    score -= i32::from(domain.in_mask(&(seed - d)));
                }
                if score < 0 {
                    prev = -prev;
                }
            }
            let mut prev_dir = prev;
            trace_one(
                |p| {
                    let v = voxel_of(p, vol.voxel_size, vol.dims)?;
                    let mut g = *vol.peaks.get(v);
                    if g.norm() < STALL_EPS || prev_dir.norm() < STALL_EPS {
                        return None;
                    }
                    g = g.normalize();
                    if g.dot(&prev_dir) < 0.0 {
                        g = -g;
                    }
                    if g.dot(&prev_dir) < cos_limit {
                        return None;
                    }
                    prev_dir = g;
                    Some(p + g * cfg.step_size)
                },
                seed,
                &domain,
                cfg,
            )
        })
        .filter(|s| s.length() >= cfg.min_length)
        .collect();
    Tractogram {
        streamlines,
        step_size: cfg.step_size,
        provenance: format!("baseline peak-following step={}", cfg.step_size),
    }
}
