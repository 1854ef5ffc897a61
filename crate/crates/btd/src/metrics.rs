//! Tractogram scoring against phantom ground truth: valid connections (VC),
//! bundle overlap (OL), bundle overreach (OR), and the radial deviation
//! metric for circular bundles.
//!
//! A streamline is a valid connection when it starts in the seed region,
//! ends in the target region, and never leaves the bundle mask dilated by
//! one voxel. OL counts the fraction of ground-truth voxels visited by at
//! least one streamline point; OR counts visited voxels outside the dilated
//! ground truth, relative to the ground-truth voxel count. The ground-truth
//! voxel set is conventionally the set of voxels the ground-truth
//! streamlines pass through.

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{voxel_of, MaskGrid};
use crate::tracer::Tractogram;

/// Default dilation radius (6-connected) applied to masks when scoring.
pub const DEFAULT_EVAL_DILATION: usize = 1;

/// Scores of one (tractogram, ground truth) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub vc: f64,
    pub ol: f64,
    #[serde(rename = "or")]
    pub or_: f64,
    pub deviation: Option<f64>,
    pub n_streamlines: usize,
    pub n_valid: usize,
}

impl ScoreReport {
    /// Fixed-order CSV header matching [`ScoreReport::csv_row`].
    pub fn csv_header() -> &'static str {
        "vc,ol,or,deviation,n_streamlines,n_valid"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.vc,
            self.ol,
            self.or_,
            self.deviation.map_or(String::new(), |d| d.to_string()),
            self.n_streamlines,
            self.n_valid
        )
    }
}

/// Voxels visited by at least one streamline point.
pub fn visited_mask(t: &Tractogram, dims: [usize; 3], voxel_size: [f64; 3]) -> MaskGrid {
    let mut visited = MaskGrid::filled(dims, false);
    for s in &t.streamlines {
        for p in &s.points {
            if let Some(v) = voxel_of(p, voxel_size, dims) {
                visited.set(v, true);
            }
        }
    }
    visited
}

/// Fraction of streamlines connecting seed to target inside the dilated
/// mask. Returns `(vc, n_valid)`; an empty tractogram scores 0.
pub fn score_vc(
    t: &Tractogram,
    seed_region: &MaskGrid,
    target_region: &MaskGrid,
    mask: &MaskGrid,
    voxel_size: [f64; 3],
) -> Result<(f64, usize)> {
    if seed_region.count_true() == 0 || target_region.count_true() == 0 {
        return Err(Error::invalid("seed/target regions must be nonempty"));
    }
    if t.is_empty() {
        return Ok((0.0, 0));
    }
    let dims = mask.dims();
    let dilated = mask.dilate(DEFAULT_EVAL_DILATION);
    let in_region = |p: &Point3<f64>, region: &MaskGrid| {
        voxel_of(p, voxel_size, dims).is_some_and(|v| *region.get(v))
    };
    let n_valid = t
        .streamlines
        .iter()
        .filter(|s| {
            let first = match s.points.first() {
                Some(p) => p,
                None => return false,
            };
            let last = s.points.last().unwrap();
            in_region(first, seed_region)
                && in_region(last, target_region)
                && s.points.iter().all(|p| in_region(p, &dilated))
        })
        .count();
    Ok((n_valid as f64 / t.len() as f64, n_valid))
}

/// Bundle overlap and overreach against a ground-truth voxel set.
///
/// `OL = |truth visited by t| / |truth|`;
/// `OR = |visited by t outside dilate(truth, eval_dilation)| / |truth|`.
pub fn score_ol_or(
    t: &Tractogram,
    truth_mask: &MaskGrid,
    voxel_size: [f64; 3],
    eval_dilation: usize,
) -> Result<(f64, f64)> {
    let n_truth = truth_mask.count_true();
    if n_truth == 0 {
        return Err(Error::invalid("ground-truth mask is empty"));
    }
    let visited = visited_mask(t, truth_mask.dims(), voxel_size);
    let dilated = truth_mask.dilate(eval_dilation);
    let mut covered = 0usize;
    let mut overreach = 0usize;
    for v in visited.true_voxels() {
        if *truth_mask.get(v) {
            covered += 1;
        }
        if !*dilated.get(v) {
            overreach += 1;
        }
    }
    Ok((
        covered as f64 / n_truth as f64,
        overreach as f64 / n_truth as f64,
    ))
}

/// Mean radial error per point against each streamline's seed radius, in
/// voxels.
///
/// For streamline `j` with seed radius `R_j = |seed_j - center|` (in-plane),
/// the per-point radial error is `sqrt((x-Uc)^2 + (y-Vc)^2) - R_j`; errors
/// are summed over all points of all streamlines and divided by the total
/// point count. Absolute errors are used by default; `signed` sums the raw
/// differences (inward and outward deviations then cancel).
///
/// When `seeds` is given, each streamline is matched to the nearest seed and
/// streamlines whose first point lies more than 1e-6 mm from every seed are
/// excluded (their count is returned). Otherwise the first point of each
/// streamline is its seed.
pub fn score_deviation(
    t: &Tractogram,
    center: [f64; 2],
    seeds: Option<&[Point3<f64>]>,
    voxel_size_xy: f64,
    signed: bool,
) -> Result<(f64, usize)> {
    let mut sum = 0.0;
    let mut n_points = 0usize;
    let mut excluded = 0usize;
    for s in &t.streamlines {
        let first = match s.points.first() {
            Some(p) => *p,
            None => continue,
        };
        let seed = match seeds {
            None => first,
            Some(list) => {
                let best = list
                    .iter()
                    .min_by(|a, b| {
                        ((*a - first).norm())
                            .partial_cmp(&(*b - first).norm())
                            .unwrap()
                    })
                    .copied();
                match best {
                    Some(b) if (b - first).norm() <= 1e-6 => b,
                    _ => {
                        excluded += 1;
                        continue;
                    }
                }
            }
        };
        let r_seed = (seed.x - center[0]).hypot(seed.y - center[1]);
        for p in &s.points {
            let err = (p.x - center[0]).hypot(p.y - center[1]) - r_seed;
            sum += if signed { err } else { err.abs() };
            n_points += 1;
        }
    }
    if n_points == 0 {
        return Err(Error::invalid(
            "no streamlines with known seeds to score deviation on",
        ));
    }
    Ok((sum / n_points as f64 / voxel_size_xy, excluded))
}

/// Assembles the full report for one tractogram.
pub fn score_report(
    t: &Tractogram,
    seed_region: &MaskGrid,
    target_region: &MaskGrid,
    mask: &MaskGrid,
    truth_mask: &MaskGrid,
    voxel_size: [f64; 3],
    circle_center: Option<[f64; 2]>,
) -> Result<ScoreReport> {
    let (vc, n_valid) = score_vc(t, seed_region, target_region, mask, voxel_size)?;
    let (ol, or_) = score_ol_or(t, truth_mask, voxel_size, DEFAULT_EVAL_DILATION)?;
    let deviation = match circle_center {
        Some(center) if !t.is_empty() => {
            Some(score_deviation(t, center, None, voxel_size[0], false)?.0)
        }
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
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracer::{StreamStatus, Streamline, Tractogram};
    use approx::assert_relative_eq;

    fn straight_tractogram(n: usize, x_end: f64) -> Tractogram {
        let streamlines = (0..n)
            .map(|i| {
                let y = 1.5 + i as f64 * 0.01;
                let mut points = Vec::new();
                let mut x = 0.5;
                while x < x_end {
                    points.push(Point3::new(x, y, 0.5));
                    x += 0.2;
                }
                Streamline {
                    points,
                    status: StreamStatus::ReachedTarget,
                }
            })
            .collect();
        Tractogram {
            streamlines,
            step_size: 0.2,
            provenance: "test".into(),
        }
    }

    fn corridor_regions(nx: usize) -> (MaskGrid, MaskGrid, MaskGrid) {
        let dims = [nx, 3, 1];
        let mask = MaskGrid::filled(dims, true);
        let seed = MaskGrid::from_fn(dims, |v| v[0] == 0);
        let target = MaskGrid::from_fn(dims, |v| v[0] == nx - 1);
        (mask, seed, target)
    }

    #[test]
    fn all_valid_scores_one() {
        let (mask, seed, target) = corridor_regions(10);
        let t = straight_tractogram(8, 9.9);
        let (vc, n) = score_vc(&t, &seed, &target, &mask, [1.0; 3]).unwrap();
        assert_eq!(vc, 1.0);
        assert_eq!(n, 8);
    }

    #[test]
    fn half_terminating_mid_mask_scores_half() {
        let (mask, seed, target) = corridor_regions(10);
        let mut t = straight_tractogram(4, 9.9);
        let mut short = straight_tractogram(4, 5.0);
        t.streamlines.append(&mut short.streamlines);
        let (vc, n) = score_vc(&t, &seed, &target, &mask, [1.0; 3]).unwrap();
        assert_eq!(vc, 0.5);
        assert_eq!(n, 4);
    }

    #[test]
    fn empty_tractogram_scores_zero() {
        let (mask, seed, target) = corridor_regions(10);
        let t = Tractogram {
            streamlines: vec![],
            step_size: 0.2,
            provenance: "empty".into(),
        };
        let (vc, n) = score_vc(&t, &seed, &target, &mask, [1.0; 3]).unwrap();
        assert_eq!((vc, n), (0.0, 0));
        let (ol, or_) = score_ol_or(&t, &mask, [1.0; 3], 1).unwrap();
        assert_eq!((ol, or_), (0.0, 0.0));
    }

    #[test]
    fn streamline_leaving_dilated_mask_is_invalid() {
        let (mask, seed, target) = corridor_regions(10);
        let mut t = straight_tractogram(1, 9.9);
        // Push one point two voxels above the corridor (outside dilation 1).
        t.streamlines[0].points[5].y = 5.5;
        let (vc, _) = score_vc(&t, &seed, &target, &mask, [1.0; 3]).unwrap();
        assert_eq!(vc, 0.0);
    }

    #[test]
    fn self_score_is_perfect_overlap_no_overreach() {
        let t = straight_tractogram(3, 9.9);
        let truth = visited_mask(&t, [10, 3, 1], [1.0; 3]);
        let (ol, or_) = score_ol_or(&t, &truth, [1.0; 3], 1).unwrap();
        assert_eq!(ol, 1.0);
        assert_eq!(or_, 0.0);
    }

    #[test]
    fn chord_across_an_annulus_has_low_overlap_and_overreach() {
        // Ground truth: circle of radius 10 at (15,15); tractogram: straight
        // chord through the middle.
        let dims = [30, 30, 1];
        let truth = MaskGrid::from_fn(dims, |v| {
            let p = crate::grid::voxel_center(v, [1.0; 3]);
            let r = (p.x - 15.0).hypot(p.y - 15.0);
            (9.0..=11.0).contains(&r)
        });
        let chord: Vec<Point3<f64>> = (0..150)
            .map(|i| Point3::new(0.5 + 0.2 * i as f64, 15.5, 0.5))
            .collect();
        let t = Tractogram {
            streamlines: vec![Streamline {
                points: chord,
                status: StreamStatus::ExitedMask,
            }],
            step_size: 0.2,
            provenance: "chord".into(),
        };
        let (ol, or_) = score_ol_or(&t, &truth, [1.0; 3], 1).unwrap();
        // Independent geometric count: the chord y=15.5 crosses the annulus
        // band twice, visiting ~2 voxels per crossing per side.
        assert!(ol < 0.1, "ol {ol}");
        assert!(or_ > 0.0, "or {or_}");
    }

    fn circle_streamline(center: [f64; 2], r: f64, n: usize) -> Streamline {
        let points = (0..n)
            .map(|i| {
                let a = i as f64 / n as f64 * std::f64::consts::TAU;
                Point3::new(center[0] + r * a.cos(), center[1] + r * a.sin(), 0.5)
            })
            .collect();
        Streamline {
            points,
            status: StreamStatus::ReachedTarget,
        }
    }

    #[test]
    fn deviation_zero_on_exact_circles() {
        let center = [30.0, 30.0];
        let t = Tractogram {
            streamlines: vec![
                circle_streamline(center, 12.0, 200),
                circle_streamline(center, 17.0, 300),
            ],
            step_size: 0.2,
            provenance: "circles".into(),
        };
        let (dev, excluded) = score_deviation(&t, center, None, 1.0, false).unwrap();
        assert_relative_eq!(dev, 0.0, epsilon = 1e-12);
        assert_eq!(excluded, 0);
    }

    #[test]
    fn deviation_counts_uniform_offset_in_voxels() {
        let center = [30.0, 30.0];
        // Streamline starts on radius 12 but the rest of its points sit on
        // radius 13: every non-seed point contributes 1 voxel of error.
        let mut s = circle_streamline(center, 13.0, 100);
        s.points[0] = Point3::new(center[0] + 12.0, center[1], 0.5);
        let t = Tractogram {
            streamlines: vec![s],
            step_size: 0.2,
            provenance: "offset".into(),
        };
        let (dev, _) = score_deviation(&t, center, None, 1.0, false).unwrap();
        assert_relative_eq!(dev, 99.0 / 100.0, epsilon = 1e-12);
        // The signed variant agrees here (all errors outward).
        let (signed, _) = score_deviation(&t, center, None, 1.0, true).unwrap();
        assert_relative_eq!(signed, 99.0 / 100.0, epsilon = 1e-12);
    }

    #[test]
    fn signed_deviation_lets_errors_cancel() {
        let center = [0.0, 0.0];
        let mut s = circle_streamline(center, 10.0, 4);
        // Two points out by +1, two in by -1.
        s.points[0] = Point3::new(11.0, 0.0, 0.5);
        s.points[1] = Point3::new(0.0, 11.0, 0.5);
        s.points[2] = Point3::new(-9.0, 0.0, 0.5);
        s.points[3] = Point3::new(0.0, -9.0, 0.5);
        // Seed radius comes from the first point: 11.
        let t = Tractogram {
            streamlines: vec![s],
            step_size: 0.2,
            provenance: "cancel".into(),
        };
        let (abs_dev, _) = score_deviation(&t, center, None, 1.0, false).unwrap();
        let (signed_dev, _) = score_deviation(&t, center, None, 1.0, true).unwrap();
        assert!(signed_dev < abs_dev);
    }

    #[test]
    fn unknown_seeds_are_excluded() {
        let center = [30.0, 30.0];
        let t = Tractogram {
            streamlines: vec![
                circle_streamline(center, 12.0, 50),
                circle_streamline(center, 14.0, 50),
            ],
            step_size: 0.2,
            provenance: "match".into(),
        };
        // Only the first streamline's seed is listed.
        let seeds = vec![Point3::new(42.0, 30.0, 0.5)];
        let (dev, excluded) = score_deviation(&t, center, Some(&seeds), 1.0, false).unwrap();
        assert_eq!(excluded, 1);
        assert_relative_eq!(dev, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let (mask, seed, target) = corridor_regions(12);
        let mut t = straight_tractogram(6, 11.9);
        t.streamlines[2].points[3].y = 5.5; // make one invalid
        let mut shuffled = t.clone();
        shuffled.streamlines.reverse();
        shuffled.streamlines.swap(1, 4);
        let a = score_report(&t, &seed, &target, &mask, &mask, [1.0; 3], None).unwrap();
        let b = score_report(&shuffled, &seed, &target, &mask, &mask, [1.0; 3], None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn report_serializes_with_fixed_csv_order() {
        let r = ScoreReport {
            vc: 0.5,
            ol: 0.25,
            or_: 0.0,
            deviation: None,
            n_streamlines: 4,
            n_valid: 2,
        };
        assert_eq!(
            ScoreReport::csv_header(),
            "vc,ol,or,deviation,n_streamlines,n_valid"
        );
        assert_eq!(r.csv_row(), "0.5,0.25,0,,4,2");
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"or\":0.0") || json.contains("\"or\":0"));
    }
}
