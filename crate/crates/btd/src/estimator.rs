//! Estimation of bundle-specific field coefficients from per-voxel peak
//! directions under the divergence-free constraint.
//!
//! The solve eliminates the constraint exactly: flattened coefficients are
//! parametrized as `vec(A) = N z` with `N` an orthonormal basis of the
//! constraint map's null space, an orthogonal (QR) compression reduces the
//! per-voxel least-squares system, and a small SVD produces the minimum-norm
//! `z`. Constraint satisfaction is therefore exact by construction rather
//! than enforced by a penalty.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{voxel_center, voxel_of, Grid3, MaskGrid};
use crate::polyfield::{CoordFrame, DivergenceMap, MonomialBasis, PolyField, MAX_ORDER};

/// Unit-norm tolerance for stored peaks.
pub const PEAK_NORM_TOL: f64 = 1e-6;

/// 3-D grid of per-voxel fiber peak directions with a bundle mask.
///
/// Masked voxels carry one nonzero unit primary peak; peaks of unmasked
/// voxels are ignored. `extra_peaks` holds additional candidate directions
/// for crossing-fiber voxels and may be absent.
#[derive(Debug, Clone)]
pub struct PeakVolume {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub mask: MaskGrid,
    pub peaks: Grid3<Vector3<f64>>,
    pub extra_peaks: Option<Grid3<Vec<Vector3<f64>>>>,
}

impl PeakVolume {
    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::invalid("volume dims must be positive"));
        }
        if self.voxel_size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("voxel size must be positive"));
        }
        if self.mask.dims() != self.dims || self.peaks.dims() != self.dims {
            return Err(Error::invalid("mask/peaks dims mismatch"));
        }
        for v in self.mask.true_voxels() {
            let norm = self.peaks.get(v).norm();
            if (norm - 1.0).abs() > PEAK_NORM_TOL {
                return Err(Error::invalid(format!(
                    "masked voxel {v:?} has peak norm {norm}, expected unit"
                )));
            }
        }
        Ok(())
    }

    /// Candidate peaks at a voxel: the primary followed by any extras.
    fn candidates(&self, v: [usize; 3]) -> Vec<Vector3<f64>> {
        let mut c = vec![*self.peaks.get(v)];
        if let Some(extra) = &self.extra_peaks {
            c.extend(extra.get(v).iter().copied());
        }
        c
    }
}

/// How the divergence-free condition is imposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstraintMode {
    /// Every coefficient of the divergence polynomial is zero; the fitted
    /// field is divergence-free identically.
    ExactDivergenceFree,
    /// The divergence polynomial vanishes at the masked voxel centers only.
    /// On any reasonably sized mask this coincides with the exact mode; it is
    /// kept for fidelity experiments.
    SampledAtVoxels,
}

/// How antipodally ambiguous peaks are given consistent signs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SignAlignment {
    /// Breadth-first propagation from the seed region: each voxel's sign is
    /// chosen so its peak has nonnegative dot product with the already
    /// aligned neighbor it was reached from.
    Propagation,
    /// Sign chosen per voxel so the peak has nonnegative dot with the axis.
    ReferenceAxis(Vector3<f64>),
}

/// Selection rule when voxels carry more than one candidate peak.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MultiPeakPolicy {
    PrimaryOnly,
    /// Alternate between choosing, per voxel, the candidate closest in angle
    /// to the current fitted field and refitting. `iterations` counts the
    /// total number of least-squares solves.
    NearestToField {
        iterations: usize,
    },
}

/// Ridge weight on the flattened coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regularization {
    /// `1e-8 * (number of masked voxels)`; guards against rank deficiency
    /// on small masks without visibly biasing the fit.
    Auto,
    /// Fixed weight; zero disables the ridge.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub order: usize,
    pub constraint_mode: ConstraintMode,
    pub sign_alignment: SignAlignment,
    pub regularization: Regularization,
    pub multi_peak: MultiPeakPolicy,
    /// Restrict the field to `(v_x, v_y, 0)` with vanishing in-plane
    /// divergence. For bundles confined to a thin slab the unrestricted fit
    /// satisfies the constraint by venting in-plane misfit into spurious
    /// through-plane flow, which drives traced streamlines out of the slab;
    /// the planar subspace removes that channel and is still divergence-free
    /// identically.
    pub planar: bool,
}

impl FitConfig {
    pub fn order(order: usize) -> Self {
        FitConfig {
            order,
            constraint_mode: ConstraintMode::ExactDivergenceFree,
            sign_alignment: SignAlignment::Propagation,
            regularization: Regularization::Auto,
            multi_peak: MultiPeakPolicy::PrimaryOnly,
            planar: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.order < 1 || self.order > MAX_ORDER {
            return Err(Error::invalid(format!(
                "fit order must be in 1..={MAX_ORDER}, got {}",
                self.order
            )));
        }
        if let Regularization::Fixed(w) = self.regularization {
            if !(w >= 0.0) {
                return Err(Error::invalid("ridge weight must be nonnegative"));
            }
        }
        if let MultiPeakPolicy::NearestToField { iterations } = self.multi_peak {
            if iterations < 1 {
                return Err(Error::invalid("nearest-to-field needs >= 1 iteration"));
            }
        }
        Ok(())
    }
}

/// Outcome diagnostics of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Achieved data objective `||G - A C||_F^2` (ridge term excluded).
    pub residual: f64,
    /// Largest `|div v|` over the masked voxel centers.
    pub max_divergence: f64,
    /// Singular-value ratio of the reduced design.
    pub condition_estimate: f64,
    /// Number of least-squares solves performed.
    pub iterations_used: usize,
}

/// Per-voxel signs (+1/-1) making the masked peaks consistently oriented.
#[derive(Debug, Clone)]
pub struct SignField {
    pub signs: Grid3<i8>,
    /// Masked voxels that could not be reached from the seed region and were
    /// aligned by the reference-axis fallback instead.
    pub fallback_voxels: usize,
}

impl SignField {
    pub fn aligned_peak(&self, vol: &PeakVolume, v: [usize; 3]) -> Vector3<f64> {
        *vol.peaks.get(v) * f64::from(*self.signs.get(v))
    }
}

fn sign_for(peak: &Vector3<f64>, reference: &Vector3<f64>) -> i8 {
    if peak.dot(reference) < 0.0 {
        -1
    } else {
        1
    }
}

/// Assigns consistent signs to the antipodally ambiguous peaks.
///
/// Under propagation the component containing the seed region is aligned by
/// breadth-first sweep (26-connected); components unreachable from the seeds
/// are flagged and aligned against the mean direction of the reached set.
/// The overall orientation is then chosen so that stepping along the aligned
/// peaks from the seed region tends to stay inside the mask.
pub fn align_signs(
    vol: &PeakVolume,
    cfg: &FitConfig,
    seed_region: &[[usize; 3]],
) -> Result<SignField> {
    vol.validate()?;
    if seed_region.is_empty() {
        return Err(Error::invalid("seed region is empty"));
    }
    for &s in seed_region {
        if !*vol.mask.get(s) {
            return Err(Error::invalid(format!(
                "seed voxel {s:?} is outside the mask"
            )));
        }
    }
    let mut signs = Grid3::filled(vol.dims, 1i8);

    if let SignAlignment::ReferenceAxis(axis) = cfg.sign_alignment {
        for v in vol.mask.true_voxels() {
            signs.set(v, sign_for(vol.peaks.get(v), &axis));
        }
        return Ok(SignField {
            signs,
            fallback_voxels: 0,
        });
    }

    let mut visited = Grid3::filled(vol.dims, false);
    let mut queue = VecDeque::new();
    let mut seeds_sorted = seed_region.to_vec();
    seeds_sorted.sort_unstable();
    let root = seeds_sorted[0];
    visited.set(root, true);
    queue.push_back(root);
    let sweep =
        |queue: &mut VecDeque<[usize; 3]>, visited: &mut Grid3<bool>, signs: &mut Grid3<i8>| {
            while let Some(cur) = queue.pop_front() {
                let aligned = *vol.peaks.get(cur) * f64::from(*signs.get(cur));
                for nb in vol.mask.neighbors26(cur) {
                    if *vol.mask.get(nb) && !*visited.get(nb) {
                        visited.set(nb, true);
                        signs.set(nb, sign_for(vol.peaks.get(nb), &aligned));
                        queue.push_back(nb);
                    }
                }
            }
        };
    sweep(&mut queue, &mut visited, &mut signs);

    // Components the sweep never reached: orient by the mean of the aligned
    // peaks, then propagate within each component for local consistency.
    let mut fallback_voxels = 0usize;
    let unreached: Vec<[usize; 3]> = vol
        .mask
        .true_voxels()
        .into_iter()
        .filter(|&v| !*visited.get(v))
        .collect();
    if !unreached.is_empty() {
        let mut mean = Vector3::zeros();
        for v in vol.mask.true_voxels() {
            if *visited.get(v) {
                mean += *vol.peaks.get(v) * f64::from(*signs.get(v));
            }
        }
        let axis = if mean.norm() > 1e-12 {
            mean.normalize()
        } else {
            Vector3::x()
        };
        for v in unreached {
            if *visited.get(v) {
                continue;
            }
            visited.set(v, true);
            signs.set(v, sign_for(vol.peaks.get(v), &axis));
            queue.push_back(v);
            sweep(&mut queue, &mut visited, &mut signs);
        }
        fallback_voxels = vol
            .mask
            .count_true()
            .saturating_sub(count_reached_from(vol, &seeds_sorted));
    }

    // Global orientation: step from the seed voxels along the aligned peaks
    // and prefer the direction that stays inside the mask.
    let delta = 1.5 * vol.voxel_size.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let mut score = 0i64;
    for &s in &seeds_sorted {
        let c = voxel_center(s, vol.voxel_size);
        let d = *vol.peaks.get(s) * f64::from(*signs.get(s));
        let fwd = c + d * delta;
        let bwd = c - d * delta;
        score += i64::from(in_mask(&vol.mask, vol.voxel_size, &fwd));
        score -= i64::from(in_mask(&vol.mask, vol.voxel_size, &bwd));
    }
    if score < 0 {
        for s in signs.data_mut() {
            *s = -*s;
        }
    }

    Ok(SignField {
        signs,
        fallback_voxels,
    })
}

fn count_reached_from(vol: &PeakVolume, seeds: &[[usize; 3]]) -> usize {
    let mut visited = Grid3::filled(vol.dims, false);
    let mut queue = VecDeque::new();
    visited.set(seeds[0], true);
    queue.push_back(seeds[0]);
    let mut n = 1usize;
    while let Some(cur) = queue.pop_front() {
        for nb in vol.mask.neighbors26(cur) {
            if *vol.mask.get(nb) && !*visited.get(nb) {
                visited.set(nb, true);
                n += 1;
                queue.push_back(nb);
            }
        }
    }
    n
}

fn in_mask(mask: &MaskGrid, voxel_size: [f64; 3], p: &Point3<f64>) -> bool {
    voxel_of(p, voxel_size, mask.dims()).is_some_and(|v| *mask.get(v))
}

/// The per-voxel least-squares system of a fit.
#[derive(Debug, Clone)]
pub struct AssembledSystem {
    /// Basis evaluations, one column per masked voxel (`m x gamma`).
    pub design: DMatrix<f64>,
    /// Sign-aligned unit peaks (`3 x gamma`).
    pub targets: DMatrix<f64>,
    /// Masked voxels in column order.
    pub voxels: Vec<[usize; 3]>,
}

/// Evaluates the monomial basis at every masked voxel center in the given
/// normalization frame and gathers the sign-aligned peaks.
pub fn assemble_system(
    vol: &PeakVolume,
    signs: &SignField,
    cfg: &FitConfig,
    frame: &CoordFrame,
) -> Result<AssembledSystem> {
    cfg.validate()?;
    let voxels = vol.mask.true_voxels();
    if voxels.is_empty() {
        return Err(Error::invalid("mask is empty"));
    }
    let basis = MonomialBasis::new(cfg.order)?;
    let gamma = voxels.len();
    let mut design = DMatrix::zeros(basis.len(), gamma);
    let mut targets = DMatrix::zeros(3, gamma);
    let mut col = vec![0.0; basis.len()];
    for (j, &v) in voxels.iter().enumerate() {
        let q = frame.normalize(&voxel_center(v, vol.voxel_size));
        basis.eval_into(&q, &mut col);
        for (i, &value) in col.iter().enumerate() {
            design[(i, j)] = value;
        }
        let g = signs.aligned_peak(vol, v).normalize();
        targets[(0, j)] = g.x;
        targets[(1, j)] = g.y;
        targets[(2, j)] = g.z;
    }
    Ok(AssembledSystem {
        design,
        targets,
        voxels,
    })
}

/// Null-space basis for the sampled constraint mode.
///
/// The sampled constraint is `W D vec(A) = 0` with `W` the order `n-1` basis
/// evaluated at the voxel centers. Any null direction of `W` adds a
/// divergence polynomial that vanishes on the grid; those extra directions
/// are `D^T (D D^T)^{-1} k` for null vectors `k` of `W`, orthonormalized and
/// appended to the exact-mode basis.
fn sampled_null_basis(
    map: &DivergenceMap,
    voxels_q: &[Point3<f64>],
    order: usize,
) -> Result<DMatrix<f64>> {
    let base = map.null_basis();
    if order < 2 {
        return Ok(base);
    }
    let out_basis = MonomialBasis::new(order - 1)?;
    let m_out = out_basis.len();
    let gamma = voxels_q.len();
    let mut w = DMatrix::zeros(gamma, m_out);
    for (r, q) in voxels_q.iter().enumerate() {
        let row = out_basis.eval(q);
        for c in 0..m_out {
            w[(r, c)] = row[c];
        }
    }
    let gram = w.transpose() * &w;
    let eig = gram.symmetric_eigen();
    let max_eig = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let tol = max_eig * 1e-10;
    let mut extras: Vec<DVector<f64>> = Vec::new();
    // D D^T is diagonal because constraint rows have disjoint supports.
    let dense = map.to_dense();
    let row_norms: Vec<f64> = (0..dense.nrows())
        .map(|r| dense.row(r).norm_squared())
        .collect();
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda <= tol {
            let k = eig.eigenvectors.column(i);
            let scaled = DVector::from_iterator(
                dense.nrows(),
                k.iter().zip(&row_norms).map(|(&ki, &n2)| ki / n2),
            );
            extras.push(dense.transpose() * scaled);
        }
    }
    if extras.is_empty() {
        return Ok(base);
    }
    let mut extra_m = DMatrix::zeros(map.n_inputs(), extras.len());
    for (c, e) in extras.iter().enumerate() {
        extra_m.set_column(c, e);
    }
    let qr = extra_m.qr();
    let q = qr.q();
    let mut full = DMatrix::zeros(map.n_inputs(), base.ncols() + q.ncols());
    full.view_mut((0, 0), (map.n_inputs(), base.ncols()))
        .copy_from(&base);
    full.view_mut((0, base.ncols()), (map.n_inputs(), q.ncols()))
        .copy_from(&q);
    Ok(full)
}

struct ReducedSolve {
    coeffs: DMatrix<f64>,
    condition: f64,
}

/// Minimum-norm solve of `min_z ||B N z - g||^2 + ridge ||z||^2` where `B`
/// applies the design per component. The design is first compressed by a QR
/// factorization so the final SVD works on a `3m x q`-sized problem.
fn solve_constrained(
    design: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    nullb: &DMatrix<f64>,
    ridge: f64,
) -> Result<ReducedSolve> {
    let m = design.nrows();
    let gamma = design.ncols();
    let q = nullb.ncols();

    // Orthogonal compression: ||C^T a - g||^2 = ||R a - Q^T g||^2 + const.
    let (b_r, t): (DMatrix<f64>, DMatrix<f64>) = if gamma > m {
        let qr = design.transpose().qr();
        let qt = qr.q().transpose();
        (qr.r(), qt * targets.transpose())
    } else {
        (design.transpose(), targets.transpose())
    };
    let rows_b = b_r.nrows();

    let ridge_rows = if ridge > 0.0 { q } else { 0 };
    let mut reduced = DMatrix::zeros(3 * rows_b + ridge_rows, q);
    let mut rhs = DVector::zeros(3 * rows_b + ridge_rows);
    for comp in 0..3 {
        let n_comp = nullb.rows(comp * m, m);
        let block = &b_r * n_comp;
        reduced
            .view_mut((comp * rows_b, 0), (rows_b, q))
            .copy_from(&block);
        rhs.rows_mut(comp * rows_b, rows_b)
            .copy_from(&t.column(comp));
    }
    if ridge > 0.0 {
        let s = ridge.sqrt();
        for i in 0..q {
            reduced[(3 * rows_b + i, i)] = s;
        }
    }

    let svd = reduced.svd(true, true);
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    if !(sigma_max > 0.0) {
        return Err(Error::Degenerate(
            "reduced design has numerical rank zero".into(),
        ));
    }
    let eps = sigma_max * 1e-12;
    let sigma_min = svd
        .singular_values
        .iter()
        .cloned()
        .filter(|&s| s > eps)
        .fold(f64::INFINITY, f64::min);
    let z = svd
        .solve(&rhs, eps)
        .map_err(|e| Error::Degenerate(e.to_string()))?;

    let flat = nullb * z;
    let mut coeffs = DMatrix::zeros(3, m);
    for comp in 0..3 {
        for col in 0..m {
            coeffs[(comp, col)] = flat[comp * m + col];
        }
    }
    Ok(ReducedSolve {
        coeffs,
        condition: sigma_max / sigma_min,
    })
}

/// Fits the bundle-specific field to a peak volume.
///
/// Returns the fitted polynomial field (with its normalization frame) and a
/// diagnostic report. The seed region drives peak sign alignment.
pub fn fit_btd(
    vol: &PeakVolume,
    seed_region: &[[usize; 3]],
    cfg: &FitConfig,
) -> Result<(PolyField, FitReport)> {
    cfg.validate()?;
    let signs = align_signs(vol, cfg, seed_region)?;
    let frame = CoordFrame::from_mask_bbox(&vol.mask, vol.voxel_size)?;
    let mut system = assemble_system(vol, &signs, cfg, &frame)?;
    let gamma = system.voxels.len();

    let map = DivergenceMap::with_scale(cfg.order, frame.scale)?;
    let nullb = if cfg.planar {
        map.planar_null_basis()
    } else {
        match cfg.constraint_mode {
            ConstraintMode::ExactDivergenceFree => map.null_basis(),
            ConstraintMode::SampledAtVoxels => {
                let centers: Vec<Point3<f64>> = system
                    .voxels
                    .iter()
                    .map(|&v| frame.normalize(&voxel_center(v, vol.voxel_size)))
                    .collect();
                sampled_null_basis(&map, &centers, cfg.order)?
            }
        }
    };
    assert!(
        nullb.ncols() > 0,
        "divergence constraint null space is empty"
    );

    let ridge = match cfg.regularization {
        Regularization::Auto => 1e-8 * gamma as f64,
        Regularization::Fixed(w) => w,
    };

    let mut solve = solve_constrained(&system.design, &system.targets, &nullb, ridge)?;
    let mut iterations_used = 1usize;

    if let MultiPeakPolicy::NearestToField { iterations } = cfg.multi_peak {
        for _ in 1..iterations {
            let field = PolyField::new(cfg.order, solve.coeffs.clone(), frame)?;
            for (j, &v) in system.voxels.iter().enumerate() {
                let dir = field.eval(&voxel_center(v, vol.voxel_size));
                if dir.norm() < 1e-12 {
                    continue;
                }
                let dir = dir.normalize();
                let mut best = *vol.peaks.get(v);
                let mut best_dot = 0.0f64;
                for cand in vol.candidates(v) {
                    let d = cand.dot(&dir);
                    if d.abs() > best_dot.abs() {
                        best = cand;
                        best_dot = d;
                    }
                }
                let g = (best * best_dot.signum()).normalize();
                system.targets[(0, j)] = g.x;
                system.targets[(1, j)] = g.y;
                system.targets[(2, j)] = g.z;
            }
            solve = solve_constrained(&system.design, &system.targets, &nullb, ridge)?;
            iterations_used += 1;
        }
    }

    let field = PolyField::new(cfg.order, solve.coeffs, frame)?;
    let residual = (field.coeffs() * &system.design - &system.targets).norm_squared();
    let max_divergence = system
        .voxels
        .iter()
        .map(|&v| field.divergence_at(&voxel_center(v, vol.voxel_size)).abs())
        .fold(0.0f64, f64::max);

    Ok((
        field,
        FitReport {
            residual,
            max_divergence,
            condition_estimate: solve.condition,
            iterations_used,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn line_volume(n: usize, peak: Vector3<f64>) -> PeakVolume {
        let dims = [n, 1, 1];
        PeakVolume {
            dims,
            voxel_size: [1.0; 3],
            mask: MaskGrid::filled(dims, true),
            peaks: Grid3::filled(dims, peak),
            extra_peaks: None,
        }
    }

    #[test]
    fn constant_peaks_align_to_plus_one() {
        let vol = line_volume(8, Vector3::x());
        let cfg = FitConfig::order(1);
        let signs = align_signs(&vol, &cfg, &[[0, 0, 0]]).unwrap();
        assert!(signs.signs.data().iter().all(|&s| s == 1));
        assert_eq!(signs.fallback_voxels, 0);
    }

    #[test]
    fn alternating_signs_on_a_line_are_undone() {
        let mut vol = line_volume(9, Vector3::x());
        for x in 0..9 {
            let sign = if x % 2 == 0 { 1.0 } else { -1.0 };
            vol.peaks.set([x, 0, 0], Vector3::x() * sign);
        }
        let cfg = FitConfig::order(1);
        let signs = align_signs(&vol, &cfg, &[[0, 0, 0]]).unwrap();
        for x in 0..9 {
            let aligned = signs.aligned_peak(&vol, [x, 0, 0]);
            assert_relative_eq!(aligned, Vector3::x(), epsilon = 1e-12);
        }
    }

    #[test]
    fn empty_seed_region_is_rejected() {
        let vol = line_volume(4, Vector3::x());
        let cfg = FitConfig::order(1);
        assert!(matches!(
            align_signs(&vol, &cfg, &[]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn seed_outside_mask_is_rejected() {
        let mut vol = line_volume(4, Vector3::x());
        vol.mask.set([3, 0, 0], false);
        let cfg = FitConfig::order(1);
        assert!(align_signs(&vol, &cfg, &[[3, 0, 0]]).is_err());
    }

    #[test]
    fn disconnected_component_uses_fallback() {
        // Two line segments separated by an unmasked gap.
        let dims = [9, 1, 1];
        let mut mask = MaskGrid::filled(dims, true);
        mask.set([4, 0, 0], false);
        let vol = PeakVolume {
            dims,
            voxel_size: [1.0; 3],
            mask,
            peaks: Grid3::filled(dims, Vector3::x()),
            extra_peaks: None,
        };
        let cfg = FitConfig::order(1);
        let signs = align_signs(&vol, &cfg, &[[0, 0, 0]]).unwrap();
        assert_eq!(signs.fallback_voxels, 4);
        assert!(signs.signs.data().iter().all(|&s| s == 1));
    }

    #[test]
    fn reference_axis_mode_flips_against_axis() {
        let mut vol = line_volume(2, Vector3::x());
        vol.peaks.set([1, 0, 0], -Vector3::x());
        let mut cfg = FitConfig::order(1);
        cfg.sign_alignment = SignAlignment::ReferenceAxis(Vector3::x());
        let signs = align_signs(&vol, &cfg, &[[0, 0, 0]]).unwrap();
        assert_eq!(*signs.signs.get([0, 0, 0]), 1);
        assert_eq!(*signs.signs.get([1, 0, 0]), -1);
    }

    #[test]
    fn assembled_design_columns_are_basis_evaluations() {
        let vol = line_volume(2, Vector3::x());
        let cfg = FitConfig::order(1);
        let signs = align_signs(&vol, &cfg, &[[0, 0, 0]]).unwrap();
        let sys = assemble_system(&vol, &signs, &cfg, &CoordFrame::identity()).unwrap();
        // Voxel centers (0.5, 0.5, 0.5) and (1.5, 0.5, 0.5).
        assert_eq!(sys.design.column(0).as_slice(), &[0.5, 0.5, 0.5, 1.0]);
        assert_eq!(sys.design.column(1).as_slice(), &[1.5, 0.5, 0.5, 1.0]);
        for j in 0..2 {
            assert_relative_eq!(sys.targets.column(j).norm(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn order_five_design_has_56_rows() {
        let vol = line_volume(7, Vector3::x());
        let cfg = FitConfig::order(5);
        let signs = align_signs(&vol, &cfg, &[[0, 0, 0]]).unwrap();
        let sys = assemble_system(&vol, &signs, &cfg, &CoordFrame::identity()).unwrap();
        assert_eq!(sys.design.nrows(), 56);
        assert_eq!(sys.design.ncols(), 7);
    }

    fn block_volume(dims: [usize; 3], dir: impl Fn(Point3<f64>) -> Vector3<f64>) -> PeakVolume {
        let mask = MaskGrid::filled(dims, true);
        let peaks = Grid3::from_fn(dims, |v| dir(voxel_center(v, [1.0; 3])).normalize());
        PeakVolume {
            dims,
            voxel_size: [1.0; 3],
            mask,
            peaks,
            extra_peaks: None,
        }
    }

    #[test]
    fn constant_peaks_fit_exactly_at_order_five() {
        let vol = block_volume([6, 5, 4], |_| Vector3::x());
        let cfg = FitConfig::order(5);
        let (field, report) = fit_btd(&vol, &[[0, 0, 0]], &cfg).unwrap();
        for v in vol.mask.true_voxels() {
            let d = field.eval(&voxel_center(v, [1.0; 3]));
            assert_relative_eq!(d, Vector3::x(), epsilon = 1e-6);
        }
        assert!(report.residual < 1e-10, "residual {}", report.residual);
        assert!(report.max_divergence < 1e-10);
    }

    #[test]
    fn divergence_free_target_is_recovered() {
        // Unit tangents of circles, v = (-(y-c), x-c, 0)/r: the unit field
        // itself is divergence-free, so the constraint must cost (nearly)
        // nothing relative to an unconstrained fit.
        let c = 20.0;
        let dims = [40, 40, 3];
        let annulus = |p: Point3<f64>| {
            let r = ((p.x - c).powi(2) + (p.y - c).powi(2)).sqrt();
            (8.0..=16.0).contains(&r)
        };
        let mask = MaskGrid::from_fn(dims, |v| annulus(voxel_center(v, [1.0; 3])));
        let peaks = Grid3::from_fn(dims, |v| {
            let p = voxel_center(v, [1.0; 3]);
            if annulus(p) {
                Vector3::new(-(p.y - c), p.x - c, 0.0).normalize()
            } else {
                Vector3::zeros()
            }
        });
        let seed = mask.true_voxels()[0];
        let vol = PeakVolume {
            dims,
            voxel_size: [1.0; 3],
            mask,
            peaks,
            extra_peaks: None,
        };
        for order in [3usize, 5] {
            let mut cfg = FitConfig::order(order);
            cfg.regularization = Regularization::Fixed(0.0);
            let (field, report) = fit_btd(&vol, &[seed], &cfg).unwrap();
            assert!(report.max_divergence < 1e-8);

            // Unconstrained least squares on the same system.
            let signs = align_signs(&vol, &cfg, &[seed]).unwrap();
            let sys = assemble_system(&vol, &signs, &cfg, field.frame()).unwrap();
            let design_t = sys.design.transpose();
            let mut unconstrained = 0.0;
            for comp in 0..3 {
                let rhs = sys.targets.row(comp).transpose();
                let sol = design_t.clone().svd(true, true).solve(&rhs, 1e-12).unwrap();
                unconstrained += (&design_t * sol - rhs).norm_squared();
            }
            assert!(
                report.residual <= unconstrained + 1e-6,
                "order {order}: constrained {} vs unconstrained {}",
                report.residual,
                unconstrained
            );
        }
    }

    /// Dense KKT (Lagrange multiplier) solve used as an independent oracle.
    fn kkt_oracle(
        design: &DMatrix<f64>,
        targets: &DMatrix<f64>,
        map: &DivergenceMap,
        ridge: f64,
    ) -> DMatrix<f64> {
        let m = design.nrows();
        let d = map.to_dense();
        let n_c = d.nrows();
        let n = 3 * m;
        let gram = design * design.transpose();
        let mut kkt = DMatrix::zeros(n + n_c, n + n_c);
        for comp in 0..3 {
            let mut block = kkt.view_mut((comp * m, comp * m), (m, m));
            block.copy_from(&gram);
            for i in 0..m {
                block[(i, i)] += ridge;
            }
        }
        kkt.view_mut((0, n), (n, n_c)).copy_from(&d.transpose());
        kkt.view_mut((n, 0), (n_c, n)).copy_from(&d);
        let mut rhs = DVector::zeros(n + n_c);
        for comp in 0..3 {
            let b = design * targets.row(comp).transpose();
            rhs.rows_mut(comp * m, m).copy_from(&b);
        }
        let sol = kkt.lu().solve(&rhs).expect("KKT system is nonsingular");
        let mut coeffs = DMatrix::zeros(3, m);
        for comp in 0..3 {
            for col in 0..m {
                coeffs[(comp, col)] = sol[comp * m + col];
            }
        }
        coeffs
    }

    #[test]
    fn null_space_solution_matches_dense_kkt() {
        // Random 5-voxel order-2 instances.
        let mut rng = StdRng::seed_from_u64(21);
        for _ in 0..20 {
            let dims = [4, 4, 4];
            let mut mask = MaskGrid::filled(dims, false);
            let mut placed = 0;
            while placed < 5 {
                let v = [
                    rng.random_range(0..4),
                    rng.random_range(0..4),
                    rng.random_range(0..4),
                ];
                if !*mask.get(v) {
                    mask.set(v, true);
                    placed += 1;
                }
            }
            let peaks = Grid3::from_fn(dims, |_| {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
                .normalize()
            });
            let vol = PeakVolume {
                dims,
                voxel_size: [1.0; 3],
                mask: mask.clone(),
                peaks,
                extra_peaks: None,
            };
            let seeds = mask.true_voxels();
            let mut cfg = FitConfig::order(2);
            cfg.regularization = Regularization::Fixed(1e-4);
            cfg.sign_alignment = SignAlignment::ReferenceAxis(Vector3::x());
            let (field, _) = fit_btd(&vol, &seeds, &cfg).unwrap();

            let signs = align_signs(&vol, &cfg, &seeds).unwrap();
            let frame = *field.frame();
            let sys = assemble_system(&vol, &signs, &cfg, &frame).unwrap();
            let map = DivergenceMap::with_scale(2, frame.scale).unwrap();
            let oracle = kkt_oracle(&sys.design, &sys.targets, &map, 1e-4);
            let diff = (field.coeffs() - &oracle)
                .iter()
                .cloned()
                .fold(0.0f64, |a, b| a.max(b.abs()));
            assert!(diff < 1e-8, "max coefficient difference {diff}");
        }
    }

    #[test]
    fn sampled_mode_matches_exact_mode_on_generic_masks() {
        let vol = block_volume([6, 6, 3], |p| {
            Vector3::new(1.0, 0.2 * (p.x * 0.3).sin(), 0.0)
        });
        let mut exact_cfg = FitConfig::order(3);
        exact_cfg.regularization = Regularization::Fixed(1e-8);
        let mut sampled_cfg = exact_cfg.clone();
        sampled_cfg.constraint_mode = ConstraintMode::SampledAtVoxels;
        let (fe, _) = fit_btd(&vol, &[[0, 0, 0]], &exact_cfg).unwrap();
        let (fs, _) = fit_btd(&vol, &[[0, 0, 0]], &sampled_cfg).unwrap();
        let diff = (fe.coeffs() - fs.coeffs())
            .iter()
            .cloned()
            .fold(0.0f64, |a, b| a.max(b.abs()));
        assert!(diff < 1e-7, "coefficient difference {diff}");
    }

    #[test]
    fn residual_is_monotone_in_order() {
        let vol = block_volume([10, 6, 3], |p| {
            Vector3::new(1.0, (0.4 * p.x).sin() * 0.8, 0.0)
        });
        let mut last = f64::INFINITY;
        for order in 1..=5 {
            let mut cfg = FitConfig::order(order);
            cfg.regularization = Regularization::Fixed(0.0);
            let (_, report) = fit_btd(&vol, &[[0, 0, 0]], &cfg).unwrap();
            assert!(
                report.residual <= last + 1e-9,
                "order {order}: residual {} above previous {}",
                report.residual,
                last
            );
            last = report.residual;
        }
    }

    #[test]
    fn translation_equivariance() {
        let dims = [6, 5, 3];
        let dir = |p: Point3<f64>| Vector3::new(1.0, 0.15 * p.x, 0.0);
        let vol = block_volume(dims, dir);
        let cfg = FitConfig::order(3);
        let (f0, _) = fit_btd(&vol, &[[0, 0, 0]], &cfg).unwrap();

        // Same geometry embedded at an offset inside a larger grid.
        let offset = [4usize, 3, 2];
        let big_dims = [14, 12, 9];
        let mut mask = MaskGrid::filled(big_dims, false);
        let mut peaks = Grid3::filled(big_dims, Vector3::zeros());
        for v in vol.mask.true_voxels() {
            let w = [v[0] + offset[0], v[1] + offset[1], v[2] + offset[2]];
            mask.set(w, true);
            // Same peak as at the corresponding source voxel.
            peaks.set(w, *vol.peaks.get(v));
        }
        let shifted = PeakVolume {
            dims: big_dims,
            voxel_size: [1.0; 3],
            mask,
            peaks,
            extra_peaks: None,
        };
        let (f1, _) = fit_btd(&shifted, &[[4, 3, 2]], &cfg).unwrap();

        let shift = Vector3::new(4.0, 3.0, 2.0);
        for v in vol.mask.true_voxels() {
            let p = voxel_center(v, [1.0; 3]);
            let d0 = f0.eval(&p);
            let d1 = f1.eval(&(p + shift));
            assert_relative_eq!(d0, d1, epsilon = 1e-8);
        }
    }

    #[test]
    fn stored_sign_flips_do_not_change_the_fit() {
        let dims = [10, 4, 3];
        let vol = block_volume(dims, |p| Vector3::new(1.0, 0.1 * p.x, 0.0));
        let cfg = FitConfig::order(2);
        let seeds: Vec<[usize; 3]> = (0..4)
            .flat_map(|y| (0..3).map(move |z| [0usize, y, z]))
            .collect();
        let (f0, _) = fit_btd(&vol, &seeds, &cfg).unwrap();

        let mut rng = StdRng::seed_from_u64(5);
        let mut flipped = vol.clone();
        for v in flipped.mask.true_voxels() {
            if rng.random_bool(0.5) {
                let p = *flipped.peaks.get(v);
                flipped.peaks.set(v, -p);
            }
        }
        let (f1, _) = fit_btd(&flipped, &seeds, &cfg).unwrap();
        let diff = (f0.coeffs() - f1.coeffs())
            .iter()
            .cloned()
            .fold(0.0f64, |a, b| a.max(b.abs()));
        assert!(diff < 1e-9, "coefficient difference {diff}");
    }

    #[test]
    fn fit_perturbations_never_improve_the_objective() {
        let vol = block_volume([7, 5, 3], |p| {
            Vector3::new(1.0, 0.2 * (0.5 * p.x).cos(), 0.0)
        });
        let mut cfg = FitConfig::order(3);
        cfg.regularization = Regularization::Fixed(1e-6);
        let (field, _) = fit_btd(&vol, &[[0, 0, 0]], &cfg).unwrap();
        let signs = align_signs(&vol, &cfg, &[[0, 0, 0]]).unwrap();
        let frame = *field.frame();
        let sys = assemble_system(&vol, &signs, &cfg, &frame).unwrap();
        let map = DivergenceMap::with_scale(3, frame.scale).unwrap();
        let nullb = map.null_basis();
        let m = sys.design.nrows();

        let objective = |coeffs: &DMatrix<f64>| {
            (coeffs * &sys.design - &sys.targets).norm_squared() + 1e-6 * coeffs.norm_squared()
        };
        let base = objective(field.coeffs());
        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..50 {
            let dz = DVector::from_fn(nullb.ncols(), |_, _| rng.random_range(-1.0..1.0));
            let dz = dz.normalize() * 1e-3;
            let flat = &nullb * dz;
            let mut perturbed = field.coeffs().clone();
            for comp in 0..3 {
                for col in 0..m {
                    perturbed[(comp, col)] += flat[comp * m + col];
                }
            }
            assert!(
                objective(&perturbed) >= base - 1e-9,
                "perturbation improved the objective"
            );
        }
    }

    #[test]
    fn single_voxel_high_order_falls_back_to_minimum_norm() {
        let dims = [1, 1, 1];
        let vol = PeakVolume {
            dims,
            voxel_size: [1.0; 3],
            mask: MaskGrid::filled(dims, true),
            peaks: Grid3::filled(dims, Vector3::x()),
            extra_peaks: None,
        };
        let mut cfg = FitConfig::order(8);
        cfg.regularization = Regularization::Fixed(0.0);
        let (field, report) = fit_btd(&vol, &[[0, 0, 0]], &cfg).unwrap();
        assert!(report.residual < 1e-18);
        let d = field.eval(&Point3::new(0.5, 0.5, 0.5));
        assert_relative_eq!(d, Vector3::x(), epsilon = 1e-9);
    }

    #[test]
    fn planar_fit_has_no_through_plane_component() {
        // A gently curving in-plane field on a thin slab.
        let vol = block_volume([10, 6, 2], |p| {
            Vector3::new(1.0, 0.2 * (0.4 * p.x).sin(), 0.0)
        });
        let mut cfg = FitConfig::order(4);
        cfg.planar = true;
        let (field, report) = fit_btd(&vol, &[[0, 0, 0]], &cfg).unwrap();
        // The z-component row is identically zero and the field is still
        // divergence-free.
        assert!(field.coeffs().row(2).iter().all(|&c| c == 0.0));
        assert!(report.max_divergence < 1e-10);
        let d = field.eval(&Point3::new(5.0, 3.0, 1.0));
        assert_eq!(d.z, 0.0);
        assert!(d.x > 0.5);
    }

    #[test]
    fn nearest_to_field_resolves_crossing_voxels() {
        // A straight corridor where every voxel also carries a spurious
        // crossing peak; the primary of a few voxels is the wrong one.
        let dims = [12, 3, 3];
        let mask = MaskGrid::filled(dims, true);
        let crossing = Vector3::new(0.0, 1.0, 0.0);
        let mut peaks = Grid3::filled(dims, Vector3::x());
        let mut extra = Grid3::filled(dims, vec![crossing]);
        for x in [4usize, 7] {
            for y in 0..3 {
                for z in 0..3 {
                    peaks.set([x, y, z], crossing);
                    extra.set([x, y, z], vec![Vector3::x()]);
                }
            }
        }
        let vol = PeakVolume {
            dims,
            voxel_size: [1.0; 3],
            mask,
            peaks,
            extra_peaks: Some(extra),
        };
        let mut cfg = FitConfig::order(2);
        cfg.multi_peak = MultiPeakPolicy::NearestToField { iterations: 3 };
        let seeds: Vec<[usize; 3]> = (0..3)
            .flat_map(|y| (0..3).map(move |z| [0usize, y, z]))
            .collect();
        let (field, report) = fit_btd(&vol, &seeds, &cfg).unwrap();
        assert_eq!(report.iterations_used, 3);
        let d = field.eval(&Point3::new(4.5, 1.5, 1.5)).normalize();
        assert!(
            d.x.abs() > 0.95,
            "field at the corrupted voxel should follow the corridor, got {d:?}"
        );
    }
}
