//! Synthetic single-bundle phantoms with analytic direction fields, a
//! single-tensor DWI simulator with Rician noise, and a log-linear DTI peak
//! extractor.
//!
//! Three geometries are generated, all z-invariant with in-plane directions:
//!
//! * `fan` ("hough"): a stem-plus-flare funnel. Fibers are the curves
//!   `x(y) = cx + x0 (1 + spread * g(y))` with `g` a clamped quadratic flare
//!   above the waist, so a narrow parallel stem at the bottom fans out to a
//!   wide top; exit angles span 80 degrees in total and every fiber runs
//!   from the bottom stem to the top band.
//! * `sine`: a band around one cosine period `y = cy + A cos(wx - pi/4)`
//!   with `A = 0.8 * alpha * Ly`; directions are the curve tangents
//!   (independent of y inside the band).
//! * `circle`: an annulus `r1 <= r <= r2` with counterclockwise tangent
//!   directions; fibers loop back onto the seed rows.

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::estimator::PeakVolume;
use crate::grid::{voxel_center, Grid3, MaskGrid};
use crate::tracer::{trace_fn, TraceConfig, Tractogram};

/// Diffusivities of the simulated single-fiber tensor, in mm^2/s.
pub const LAMBDA_PARALLEL: f64 = 1.7e-3;
pub const LAMBDA_PERP: f64 = 0.3e-3;
/// Isotropic diffusivity outside the bundle mask.
pub const LAMBDA_ISO: f64 = 0.7e-3;
/// Baseline (b = 0) signal level.
pub const S0: f64 = 100.0;

/// Step used when integrating ground-truth streamlines, in mm.
pub const GROUND_TRUTH_STEP: f64 = 0.1;

/// Fractional anisotropy below which a fitted peak is flagged unreliable.
pub const FA_FLAG_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhantomKind {
    /// Stem-to-arc fan (the "hough" geometry).
    Fan,
    Sine {
        alpha: f64,
    },
    Circle {
        r1: f64,
        r2: f64,
    },
}

impl PhantomKind {
    pub fn name(&self) -> &'static str {
        match self {
            PhantomKind::Fan => "hough",
            PhantomKind::Sine { .. } => "sine",
            PhantomKind::Circle { .. } => "circle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    /// Signal-to-noise ratio; `f64::INFINITY` disables noise.
    pub snr: f64,
    pub bvalue: f64,
    pub n_gradients: usize,
    pub seed_count: usize,
}

impl PhantomSpec {
    /// Default acquisition and geometry: 1 mm isotropic voxels, 78
    /// gradients at b = 1000, 60x60x6 for fan/circle with 2000/720 seeds,
    /// 100x100x6 for sine with 2000 seeds.
    pub fn new(kind: PhantomKind) -> Self {
        let (dims, seed_count) = match kind {
            PhantomKind::Fan => ([60, 60, 6], 2000),
            PhantomKind::Sine { .. } => ([100, 100, 6], 2000),
            PhantomKind::Circle { .. } => ([60, 60, 6], 720),
        };
        PhantomSpec {
            kind,
            dims,
            voxel_size: [1.0; 3],
            snr: f64::INFINITY,
            bvalue: 1000.0,
            n_gradients: 78,
            seed_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::invalid("phantom dims must be positive"));
        }
        if self.voxel_size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("voxel size must be positive"));
        }
        if !(self.snr > 0.0) {
            return Err(Error::invalid("snr must be positive (or infinite)"));
        }
        if self.n_gradients < 6 {
            return Err(Error::invalid("need at least 6 gradient directions"));
        }
        if self.seed_count == 0 {
            return Err(Error::invalid("seed count must be positive"));
        }
        match self.kind {
            PhantomKind::Sine { alpha } => {
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(Error::invalid("sine alpha must be in [0, 1]"));
                }
                let ly = self.dims[1] as f64 * self.voxel_size[1];
                let amp = 0.8 * alpha * ly;
                if amp + SINE_HALF_BAND + 1.0 > ly / 2.0 {
                    return Err(Error::invalid(format!(
                        "sine amplitude {amp:.1} mm does not fit the volume; \
                         lower alpha or enlarge dims"
                    )));
                }
            }
            PhantomKind::Circle { r1, r2 } => {
                if !(r1 > 0.0) || !(r2 > r1) {
                    return Err(Error::invalid("circle radii must satisfy 0 < r1 < r2"));
                }
                let cx = self.dims[0] as f64 * self.voxel_size[0] / 2.0;
                let cy = self.dims[1] as f64 * self.voxel_size[1] / 2.0;
                if r2 > cx.min(cy) {
                    return Err(Error::invalid("outer radius does not fit the volume"));
                }
            }
            PhantomKind::Fan => {}
        }
        Ok(())
    }

    /// Minimum accepted streamline length for this geometry: one full inner
    /// loop for the circle, 5 mm otherwise.
    pub fn min_length(&self) -> f64 {
        match self.kind {
            PhantomKind::Circle { r1, .. } => std::f64::consts::TAU * r1,
            _ => 5.0,
        }
    }
}

/// Half-height of the sine band, mm.
pub const SINE_HALF_BAND: f64 = 7.0;
/// Periods of the sine curve across the volume width.
pub const SINE_PERIODS: f64 = 1.0;
/// Phase offset of the sine curve, so seeding does not start on a
/// curvature crest.
pub const SINE_PHASE: f64 = -std::f64::consts::FRAC_PI_4;
/// Fan stem half-width, mm.
pub const FAN_STEM_HALF_WIDTH: f64 = 4.0;
/// Height at which the fan starts flaring, mm.
pub const FAN_WAIST: f64 = 24.0;
/// Relative widening of the fan at the top: the stem half-width grows by
/// `1 + FAN_SPREAD` (exit angles span roughly +-40 degrees).
pub const FAN_SPREAD: f64 = 4.0;
/// Total fan height as a fraction of the volume height.
pub const FAN_HEIGHT_FRAC: f64 = 58.0 / 60.0;
/// Number of bottom voxel rows forming the fan/stem seed region.
pub const FAN_SEED_ROWS: usize = 6;
/// Number of top voxel rows forming the fan target region.
pub const FAN_TARGET_ROWS: usize = 2;
/// Number of voxel rows in the circle seed box.
pub const CIRCLE_SEED_ROWS: usize = 4;
/// Columns of seed/target voxels on the sine band's ends.
pub const SINE_SEED_COLS: usize = 2;

/// Closed-form unit direction field of a phantom geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnalyticField {
    /// Tangents of the funnel fiber family
    /// `x(y) = cx + x0 (1 + spread * g(y))`, `g(y) = max(0, (y-waist)/len)^2`.
    FunnelTangent {
        cx: f64,
        waist: f64,
        flare_len: f64,
        spread: f64,
    },
    /// Tangents of `y = cy + amp * cos(omega * x + phase)` translates.
    SineTangent { amp: f64, omega: f64, phase: f64 },
    /// Counterclockwise circle tangents around a center.
    CircleTangent { center: [f64; 2] },
}

impl AnalyticField {
    pub fn direction(&self, p: &Point3<f64>) -> Vector3<f64> {
        match *self {
            AnalyticField::FunnelTangent {
                cx,
                waist,
                flare_len,
                spread,
            } => {
                let t = ((p.y - waist).max(0.0)) / flare_len;
                let x0 = (p.x - cx) / (1.0 + spread * t * t);
                let slope = x0 * spread * 2.0 * t / flare_len;
                Vector3::new(slope, 1.0, 0.0).normalize()
            }
            AnalyticField::SineTangent { amp, omega, phase } => {
                let slope = -amp * omega * (omega * p.x + phase).sin();
                Vector3::new(1.0, slope, 0.0).normalize()
            }
            AnalyticField::CircleTangent { center } => {
                let v = Vector3::new(-(p.y - center[1]), p.x - center[0], 0.0);
                let n = v.norm();
                if n < 1e-12 {
                    Vector3::x()
                } else {
                    v / n
                }
            }
        }
    }

    /// Lateral fiber coordinate of the funnel family (stem offset).
    pub fn funnel_offset(&self, p: &Point3<f64>) -> Option<f64> {
        match *self {
            AnalyticField::FunnelTangent {
                cx,
                waist,
                flare_len,
                spread,
            } => {
                let t = ((p.y - waist).max(0.0)) / flare_len;
                Some((p.x - cx) / (1.0 + spread * t * t))
            }
            _ => None,
        }
    }
}

/// A generated phantom: analytic field, bundle mask, seed and target voxel
/// regions, and ground-truth streamlines.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub field: AnalyticField,
    pub mask: MaskGrid,
    pub seed_region: MaskGrid,
    pub target_region: MaskGrid,
    pub ground_truth: Tractogram,
}

impl Phantom {
    /// Seed points for tracing, derived from the seed region (see
    /// [`seed_points`]).
    pub fn seed_points(&self) -> Vec<Point3<f64>> {
        seed_points(
            &self.seed_region.true_voxels(),
            self.spec.voxel_size,
            self.spec.seed_count,
        )
    }

    /// Peak volume holding the exact analytic directions (no simulation).
    pub fn analytic_peaks(&self) -> PeakVolume {
        let peaks = Grid3::from_fn(self.spec.dims, |v| {
            if *self.mask.get(v) {
                self.field.direction(&voxel_center(v, self.spec.voxel_size))
            } else {
                Vector3::zeros()
            }
        });
        PeakVolume {
            dims: self.spec.dims,
            voxel_size: self.spec.voxel_size,
            mask: self.mask.clone(),
            peaks,
            extra_peaks: None,
        }
    }

    /// In-plane circle center (for the deviation metric); `None` for
    /// non-circle geometries.
    pub fn circle_center(&self) -> Option<[f64; 2]> {
        match self.field {
            AnalyticField::CircleTangent { center } => Some(center),
            _ => None,
        }
    }
}

/// Builds the analytic phantom for a spec: mask, regions, direction field,
/// and ground truth traced through the analytic field at 0.1 mm steps.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let dims = spec.dims;
    let vs = spec.voxel_size;
    let lx = dims[0] as f64 * vs[0];
    let ly = dims[1] as f64 * vs[1];

    let (field, mask, seed_region, target_region) = match spec.kind {
        PhantomKind::Fan => {
            let height = FAN_HEIGHT_FRAC * ly;
            let field = AnalyticField::FunnelTangent {
                cx: lx / 2.0,
                waist: FAN_WAIST * ly / 60.0,
                flare_len: height - FAN_WAIST * ly / 60.0,
                spread: FAN_SPREAD,
            };
            let mask = MaskGrid::from_fn(dims, |v| {
                let p = voxel_center(v, vs);
                p.y <= height && field.funnel_offset(&p).unwrap().abs() <= FAN_STEM_HALF_WIDTH
            });
            let seed = MaskGrid::from_fn(dims, |v| *mask.get(v) && v[1] < FAN_SEED_ROWS);
            let top = height - FAN_TARGET_ROWS as f64 * vs[1];
            let target = MaskGrid::from_fn(dims, |v| *mask.get(v) && voxel_center(v, vs).y >= top);
            (field, mask, seed, target)
        }
        PhantomKind::Sine { alpha } => {
            let amp = 0.8 * alpha * ly;
            let omega = std::f64::consts::TAU * SINE_PERIODS / lx;
            let cy = ly / 2.0;
            let in_band = |p: &Point3<f64>| {
                (p.y - cy - amp * (omega * p.x + SINE_PHASE).cos()).abs() <= SINE_HALF_BAND
            };
            let mask = MaskGrid::from_fn(dims, |v| in_band(&voxel_center(v, vs)));
            let seed = MaskGrid::from_fn(dims, |v| *mask.get(v) && v[0] < SINE_SEED_COLS);
            let target =
                MaskGrid::from_fn(dims, |v| *mask.get(v) && v[0] >= dims[0] - SINE_SEED_COLS);
            (
                AnalyticField::SineTangent {
                    amp,
                    omega,
                    phase: SINE_PHASE,
                },
                mask,
                seed,
                target,
            )
        }
        PhantomKind::Circle { r1, r2 } => {
            let center = [lx / 2.0, ly / 2.0];
            let in_annulus = |p: &Point3<f64>| {
                let r = (p.x - center[0]).hypot(p.y - center[1]);
                r >= r1 && r <= r2
            };
            let mask = MaskGrid::from_fn(dims, |v| in_annulus(&voxel_center(v, vs)));
            // Four voxel rows centered on the annulus' rightmost horizontal
            // cross-section; the bundle loops back onto this box, so it is
            // both the seed and the target region.
            let half_rows = CIRCLE_SEED_ROWS as f64 / 2.0;
            let seed = MaskGrid::from_fn(dims, |v| {
                if !*mask.get(v) {
                    return false;
                }
                let p = voxel_center(v, vs);
                p.x > center[0] && (p.y - center[1]).abs() <= half_rows * vs[1]
            });
            let target = seed.clone();
            (AnalyticField::CircleTangent { center }, mask, seed, target)
        }
    };

    if mask.count_true() == 0 {
        return Err(Error::invalid("phantom mask is empty"));
    }
    if seed_region.count_true() == 0 || target_region.count_true() == 0 {
        return Err(Error::invalid("phantom seed/target region is empty"));
    }

    let seeds = seed_points(&seed_region.true_voxels(), vs, spec.seed_count);
    let cfg = TraceConfig {
        step_size: GROUND_TRUTH_STEP,
        max_steps: 100_000,
        min_length: spec.min_length(),
        normalize_field: true,
        max_angle_deg: 180.0,
    };
    let dir = |p: &Point3<f64>| field.direction(p);
    let ground_truth = trace_fn(
        &dir,
        &seeds,
        &mask,
        vs,
        Some(&target_region),
        &cfg,
        format!(
            "analytic {} ground truth step={GROUND_TRUTH_STEP}",
            spec.kind.name()
        ),
    );

    Ok(Phantom {
        spec: *spec,
        field,
        mask,
        seed_region,
        target_region,
        ground_truth,
    })
}

/// Deterministic, jitter-free seed placement over a voxel region.
///
/// When `count <= region`, seeds sit at evenly strided voxel centers. When
/// more seeds are requested, each voxel is subdivided into an `m^3` sub-grid
/// (smallest `m` that provides enough slots) and sub-cells are enumerated
/// round-robin across the region so every voxel receives an equal share
/// (plus-minus one).
pub fn seed_points(region: &[[usize; 3]], voxel_size: [f64; 3], count: usize) -> Vec<Point3<f64>> {
    if region.is_empty() || count == 0 {
        return Vec::new();
    }
    let len = region.len();
    if count <= len {
        return (0..count)
            .map(|i| voxel_center(region[i * len / count], voxel_size))
            .collect();
    }
    let per_voxel = count.div_ceil(len);
    let m = (1..)
        .find(|&m: &usize| m * m * m >= per_voxel)
        .expect("subdivision level exists");
    let mut out = Vec::with_capacity(count);
    'fill: for s in 0..m * m * m {
        let sx = s % m;
        let sy = (s / m) % m;
        let sz = s / (m * m);
        let offset = [
            ((sx as f64 + 0.5) / m as f64 - 0.5) * voxel_size[0],
            ((sy as f64 + 0.5) / m as f64 - 0.5) * voxel_size[1],
            ((sz as f64 + 0.5) / m as f64 - 0.5) * voxel_size[2],
        ];
        for &v in region {
            let c = voxel_center(v, voxel_size);
            out.push(Point3::new(
                c.x + offset[0],
                c.y + offset[1],
                c.z + offset[2],
            ));
            if out.len() == count {
                break 'fill;
            }
        }
    }
    out
}

/// Simulated diffusion-weighted volume.
#[derive(Debug, Clone, PartialEq)]
pub struct DwiVolume {
    /// Unit gradient directions with their b-values.
    pub gradients: Vec<(Vector3<f64>, f64)>,
    /// Per-voxel signal vectors, one entry per gradient.
    pub signals: Grid3<Vec<f64>>,
    pub s0: f64,
    pub voxel_size: [f64; 3],
}

impl DwiVolume {
    /// Gradient table as text, one `gx gy gz b` line per gradient.
    pub fn gradient_table(&self) -> String {
        let mut out = String::new();
        for (g, b) in &self.gradients {
            out.push_str(&format!("{} {} {} {}\n", g.x, g.y, g.z, b));
        }
        out
    }
}

/// Evenly distributed unit directions (spherical Fibonacci lattice).
pub fn fibonacci_directions(n: usize) -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            Vector3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Rician-distributed magnitude sample around `value` with noise level
/// `sigma`.
fn rician(value: f64, sigma: f64, rng: &mut ChaCha8Rng) -> f64 {
    let e1: f64 = rng.sample(StandardNormal);
    let e2: f64 = rng.sample(StandardNormal);
    (value + sigma * e1).hypot(sigma * e2)
}

/// Simulates the tensor-model DWI signal of a phantom.
///
/// Masked voxels carry a single prolate tensor with principal eigenvector
/// along the analytic direction and eigenvalues
/// (1.7, 0.3, 0.3) x 10^-3 mm^2/s; voxels outside the mask are isotropic at
/// 0.7 x 10^-3. Noise is Rician with sigma = S0 / snr. The generator is
/// counter-based per voxel (a fresh stream seeded from `rng_seed` and the
/// voxel index), so results do not depend on evaluation order.
pub fn simulate_dwi(ph: &Phantom, spec: &PhantomSpec, rng_seed: u64) -> Result<DwiVolume> {
    spec.validate()?;
    let dirs = fibonacci_directions(spec.n_gradients);
    let gradients: Vec<(Vector3<f64>, f64)> = dirs.into_iter().map(|g| (g, spec.bvalue)).collect();
    let sigma = if spec.snr.is_finite() {
        S0 / spec.snr
    } else {
        0.0
    };
    let signals = Grid3::from_fn(spec.dims, |v| {
        let masked = *ph.mask.get(v);
        let d = ph.field.direction(&voxel_center(v, spec.voxel_size));
        let mut rng =
            ChaCha8Rng::seed_from_u64(splitmix64(rng_seed ^ splitmix64(ph.mask.linear(v) as u64)));
        gradients
            .iter()
            .map(|(g, b)| {
                let adc = if masked {
                    let cos = g.dot(&d);
                    LAMBDA_PERP + (LAMBDA_PARALLEL - LAMBDA_PERP) * cos * cos
                } else {
                    LAMBDA_ISO
                };
                let clean = S0 * (-b * adc).exp();
                if sigma > 0.0 {
                    rician(clean, sigma, &mut rng)
                } else {
                    clean
                }
            })
            .collect()
    });
    Ok(DwiVolume {
        gradients,
        signals,
        s0: S0,
        voxel_size: spec.voxel_size,
    })
}

/// Log-linear DTI fit: recovers the six tensor components per masked voxel
/// from `ln(S/S0) = -b g^T D g` and extracts the principal eigenvector as
/// the primary peak.
///
/// Returns the peak volume and a flag grid marking voxels whose fit was
/// low-anisotropy (FA below [`FA_FLAG_THRESHOLD`]) or not positive definite.
pub fn fit_peaks(dwi: &DwiVolume, mask: &MaskGrid) -> Result<(PeakVolume, MaskGrid)> {
    let dims = mask.dims();
    if dwi.signals.dims() != dims {
        return Err(Error::invalid("dwi/mask dims mismatch"));
    }
    let n = dwi.gradients.len();
    if n < 6 {
        return Err(Error::invalid("need at least 6 gradients for a DTI fit"));
    }
    let mut design = nalgebra::DMatrix::zeros(n, 6);
    for (row, (g, b)) in dwi.gradients.iter().enumerate() {
        design[(row, 0)] = b * g.x * g.x;
        design[(row, 1)] = b * g.y * g.y;
        design[(row, 2)] = b * g.z * g.z;
        design[(row, 3)] = 2.0 * b * g.x * g.y;
        design[(row, 4)] = 2.0 * b * g.x * g.z;
        design[(row, 5)] = 2.0 * b * g.y * g.z;
    }
    let svd = design.svd(true, true);
    let floor = 1e-6 * dwi.s0;

    let mut peaks = Grid3::filled(dims, Vector3::zeros());
    let mut flags = MaskGrid::filled(dims, false);
    let mut rhs = nalgebra::DVector::zeros(n);
    for v in mask.true_voxels() {
        let sig = dwi.signals.get(v);
        for (i, &s) in sig.iter().enumerate() {
            rhs[i] = -(s.max(floor) / dwi.s0).ln();
        }
        let d6 = svd
            .solve(&rhs, 1e-12)
            .map_err(|e| Error::Degenerate(e.to_string()))?;
        let tensor = nalgebra::Matrix3::new(
            d6[0], d6[3], d6[4], //
            d6[3], d6[1], d6[5], //
            d6[4], d6[5], d6[2],
        );
        let eig = tensor.symmetric_eigen();
        let mut max_i = 0;
        for i in 1..3 {
            if eig.eigenvalues[i] > eig.eigenvalues[max_i] {
                max_i = i;
            }
        }
        let mut peak = eig.eigenvectors.column(max_i).into_owned();
        // Canonical sign: make the largest-magnitude component positive.
        let dominant = (0..3)
            .max_by(|&a, &b| peak[a].abs().partial_cmp(&peak[b].abs()).unwrap())
            .unwrap();
        if peak[dominant] < 0.0 {
            peak = -peak;
        }
        peaks.set(v, peak.normalize());

        let mean = eig.eigenvalues.iter().sum::<f64>() / 3.0;
        let dev: f64 = eig.eigenvalues.iter().map(|l| (l - mean).powi(2)).sum();
        let sq: f64 = eig.eigenvalues.iter().map(|l| l * l).sum();
        let fa = if sq > 0.0 {
            (1.5 * dev / sq).sqrt()
        } else {
            0.0
        };
        let min_eig = eig
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if fa < FA_FLAG_THRESHOLD || min_eig <= 0.0 {
            flags.set(v, true);
        }
    }
    Ok((
        PeakVolume {
            dims,
            voxel_size: dwi.voxel_size,
            mask: mask.clone(),
            peaks,
            extra_peaks: None,
        },
        flags,
    ))
}

/// Angular error between two axial directions (sign-insensitive), degrees.
pub fn axial_angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let cos = (a.dot(b) / (a.norm() * b.norm())).abs().min(1.0);
    cos.acos().to_degrees()
}
