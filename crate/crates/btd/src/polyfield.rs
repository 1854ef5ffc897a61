//! Canonical monomial bases, polynomial 3-vector fields, and the divergence
//! operator as a sparse linear map on coefficients.
//!
//! A field of order `n` is `v(p) = A * C(q)` where `A` is a `3 x m`
//! coefficient matrix, `C` the vector of all monomials `x^i y^j z^k` with
//! `i + j + k <= n`, and `q` the point in the normalized coordinates of the
//! field's [`CoordFrame`]. Terms are grouped by total degree, descending from
//! `n` to 0; inside a degree block pure powers come first, then mixed terms,
//! each ordered lexicographically by descending exponents. Order 2 reads
//! `[x2, y2, z2, xy, xz, yz, x, y, z, 1]` and order 1 reads `[x, y, z, 1]`.
//!
//! The divergence of such a field is a polynomial of order `n - 1` whose
//! coefficient for the output monomial `x^i y^j z^k` is
//! `(i+1) a^x_{(i+1)jk} + (j+1) a^y_{i(j+1)k} + (k+1) a^z_{ij(k+1)}`,
//! so "divergence-free" is a sparse linear condition on the entries of `A`.

use nalgebra::{DMatrix, DVector, Point3, Vector3};

use crate::error::{Error, Result};
use crate::grid::MaskGrid;

/// Hard cap on the polynomial order; higher orders are numerically
/// unworkable on voxel-scale grids and never needed in practice.
pub const MAX_ORDER: usize = 8;

/// Number of monomials `x^i y^j z^k` with `i + j + k <= n`,
/// i.e. `binomial(n + 3, 3)`.
pub fn basis_len(order: usize) -> usize {
    (order + 1) * (order + 2) * (order + 3) / 6
}

/// Number of monomials of total degree exactly `d`: `(d+1)(d+2)/2`.
pub fn degree_block_len(d: usize) -> usize {
    (d + 1) * (d + 2) / 2
}

/// Ordered monomial basis of all terms with total degree `<= order`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonomialBasis {
    order: usize,
    terms: Vec<[u32; 3]>,
}

fn degree_block(d: usize) -> Vec<[u32; 3]> {
    let mut block: Vec<[u32; 3]> = Vec::with_capacity(degree_block_len(d));
    for i in (0..=d).rev() {
        for j in (0..=d - i).rev() {
            let k = d - i - j;
            block.push([i as u32, j as u32, k as u32]);
        }
    }
    // Pure powers first, then mixed terms; both sub-groups keep descending
    // lexicographic exponent order. This reproduces the canonical
    // [x2, y2, z2, xy, xz, yz] layout at degree 2.
    block.sort_by_key(|t| {
        let nonzero = t.iter().filter(|&&e| e > 0).count();
        (
            nonzero,
            std::cmp::Reverse(t[0]),
            std::cmp::Reverse(t[1]),
            std::cmp::Reverse(t[2]),
        )
    });
    block
}

impl MonomialBasis {
    /// Builds the canonical basis for `1 <= order <= MAX_ORDER`.
    pub fn new(order: usize) -> Result<Self> {
        if !(1..=MAX_ORDER).contains(&order) {
            return Err(Error::invalid(format!(
                "basis order must be in 1..={MAX_ORDER}, got {order}"
            )));
        }
        let mut terms = Vec::with_capacity(basis_len(order));
        for d in (0..=order).rev() {
            terms.extend(degree_block(d));
        }
        debug_assert_eq!(terms.len(), basis_len(order));
        Ok(MonomialBasis { order, terms })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn terms(&self) -> &[[u32; 3]] {
        &self.terms
    }

    /// Position of the exponent triple in the basis.
    pub fn index_of(&self, term: [u32; 3]) -> Option<usize> {
        self.terms.iter().position(|&t| t == term)
    }

    /// Evaluates every monomial at the (already normalized) point `q`.
    pub fn eval_into(&self, q: &Point3<f64>, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.terms.len());
        let pow = AxisPowers::new(q, self.order);
        for (slot, t) in out.iter_mut().zip(&self.terms) {
            *slot = pow.term(t);
        }
    }

    pub fn eval(&self, q: &Point3<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.terms.len());
        self.eval_into(q, out.as_mut_slice());
        out
    }

    /// Evaluates `d/dq_axis` of every monomial at the normalized point `q`.
    pub fn eval_partial(&self, q: &Point3<f64>, axis: usize) -> DVector<f64> {
        let pow = AxisPowers::new(q, self.order);
        let mut out = DVector::zeros(self.terms.len());
        for (slot, t) in out.iter_mut().zip(&self.terms) {
            let e = t[axis];
            if e == 0 {
                continue;
            }
            let mut lowered = *t;
            lowered[axis] = e - 1;
            *slot = e as f64 * pow.term(&lowered);
        }
        out
    }
}

/// Precomputed per-axis powers for monomial evaluation.
struct AxisPowers {
    pow: [Vec<f64>; 3],
}

impl AxisPowers {
    fn new(q: &Point3<f64>, order: usize) -> Self {
        let mut pow = [
            Vec::with_capacity(order + 1),
            Vec::with_capacity(order + 1),
            Vec::with_capacity(order + 1),
        ];
        for a in 0..3 {
            let mut value = 1.0;
            pow[a].push(1.0);
            for _ in 0..order {
                value *= q[a];
                pow[a].push(value);
            }
        }
        AxisPowers { pow }
    }

    #[inline]
    fn term(&self, t: &[u32; 3]) -> f64 {
        self.pow[0][t[0] as usize] * self.pow[1][t[1] as usize] * self.pow[2][t[2] as usize]
    }
}

/// Affine normalization applied before monomials are evaluated:
/// `q = (p - center) / scale`, componentwise.
///
/// Fitting maps the bundle mask's bounding box to `[-1, 1]^3` so that
/// high-order monomials stay well conditioned; the frame travels with the
/// field, so callers only ever see world (mm) coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordFrame {
    pub center: [f64; 3],
    pub scale: [f64; 3],
}

/// Minimum half-extent per axis, so flat masks do not blow up the scale.
pub const MIN_FRAME_SCALE_MM: f64 = 1.0;

impl CoordFrame {
    pub fn identity() -> Self {
        CoordFrame {
            center: [0.0; 3],
            scale: [1.0; 3],
        }
    }

    pub fn new(center: [f64; 3], scale: [f64; 3]) -> Result<Self> {
        if scale.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!(
                "frame scale components must be strictly positive, got {scale:?}"
            )));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("frame center must be finite"));
        }
        Ok(CoordFrame { center, scale })
    }

    /// Frame centered on the mask's bounding box with one isotropic scale,
    /// the largest half-extent (floored at [`MIN_FRAME_SCALE_MM`]).
    ///
    /// The box maps into `[-1, 1]^3` and thin axes stay well inside. Scaling
    /// per axis instead would make derivatives along a thin axis cheap in
    /// coefficient terms, and the divergence constraint then dumps in-plane
    /// misfit into spurious flow along that axis; the isotropic scale keeps
    /// the constraint geometry faithful to millimeter space.
    pub fn from_mask_bbox(mask: &MaskGrid, voxel_size: [f64; 3]) -> Result<Self> {
        let (lo, hi) = mask
            .bounding_box()
            .ok_or_else(|| Error::invalid("cannot build a frame from an empty mask"))?;
        let mut center = [0.0; 3];
        let mut half = [0.0; 3];
        for a in 0..3 {
            let lo_mm = lo[a] as f64 * voxel_size[a];
            let hi_mm = (hi[a] + 1) as f64 * voxel_size[a];
            center[a] = 0.5 * (lo_mm + hi_mm);
            half[a] = 0.5 * (hi_mm - lo_mm);
        }
        let scale = half.iter().fold(MIN_FRAME_SCALE_MM, |acc, &h| acc.max(h));
        Ok(CoordFrame {
            center,
            scale: [scale; 3],
        })
    }

    #[inline]
    pub fn normalize(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::new(
            (p.x - self.center[0]) / self.scale[0],
            (p.y - self.center[1]) / self.scale[1],
            (p.z - self.center[2]) / self.scale[2],
        )
    }
}

/// Polynomial 3-vector field `v(p) = A * C((p - center) / scale)`.
///
/// Rows of `A` are the x, y, z components; columns follow the basis order.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyField {
    order: usize,
    coeffs: DMatrix<f64>,
    frame: CoordFrame,
    basis: MonomialBasis,
}

impl PolyField {
    pub fn new(order: usize, coeffs: DMatrix<f64>, frame: CoordFrame) -> Result<Self> {
        let basis = MonomialBasis::new(order)?;
        if coeffs.nrows() != 3 || coeffs.ncols() != basis.len() {
            return Err(Error::invalid(format!(
                "coefficient matrix must be 3 x {}, got {} x {}",
                basis.len(),
                coeffs.nrows(),
                coeffs.ncols()
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("coefficients must be finite"));
        }
        Ok(PolyField {
            order,
            coeffs,
            frame,
            basis,
        })
    }

    /// Order-1 field that evaluates to `v` everywhere.
    pub fn constant(v: Vector3<f64>) -> Self {
        let basis = MonomialBasis::new(1).unwrap();
        let mut coeffs = DMatrix::zeros(3, basis.len());
        let c = basis.index_of([0, 0, 0]).unwrap();
        coeffs[(0, c)] = v.x;
        coeffs[(1, c)] = v.y;
        coeffs[(2, c)] = v.z;
        PolyField {
            order: 1,
            coeffs,
            frame: CoordFrame::identity(),
            basis,
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn coeffs(&self) -> &DMatrix<f64> {
        &self.coeffs
    }

    pub fn frame(&self) -> &CoordFrame {
        &self.frame
    }

    pub fn basis(&self) -> &MonomialBasis {
        &self.basis
    }

    /// `A * C(q(p))`.
    pub fn eval(&self, p: &Point3<f64>) -> Vector3<f64> {
        let q = self.frame.normalize(p);
        let pow = AxisPowers::new(&q, self.order);
        let mut out = Vector3::zeros();
        for (col, t) in self.basis.terms().iter().enumerate() {
            let m = pow.term(t);
            out.x += self.coeffs[(0, col)] * m;
            out.y += self.coeffs[(1, col)] * m;
            out.z += self.coeffs[(2, col)] * m;
        }
        out
    }

    /// Analytic divergence at `p` in world coordinates (the chain rule brings
    /// in one factor `1 / scale` per axis).
    pub fn divergence_at(&self, p: &Point3<f64>) -> f64 {
        let q = self.frame.normalize(p);
        let pow = AxisPowers::new(&q, self.order);
        let mut div = 0.0;
        for (col, t) in self.basis.terms().iter().enumerate() {
            for axis in 0..3 {
                let e = t[axis];
                if e == 0 {
                    continue;
                }
                let mut lowered = *t;
                lowered[axis] = e - 1;
                div += self.coeffs[(axis, col)] * e as f64 * pow.term(&lowered)
                    / self.frame.scale[axis];
            }
        }
        div
    }
}

/// One divergence constraint row: `sum_axis weight[axis] * flat[col[axis]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivRow {
    /// Indices into the flattened coefficient vector `[a_x | a_y | a_z]`.
    pub cols: [usize; 3],
    pub weights: [f64; 3],
}

/// Sparse linear map from flattened field coefficients to the coefficient
/// vector `H` of the divergence polynomial (order `n - 1`).
///
/// Row `r` corresponds to the r-th monomial of the order `n - 1` basis; each
/// row touches exactly three coefficients and no coefficient appears in more
/// than one row.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceMap {
    order: usize,
    rows: Vec<DivRow>,
    n_inputs: usize,
}

impl DivergenceMap {
    /// Divergence map in normalized coordinates (unit scale).
    pub fn new(order: usize) -> Result<Self> {
        Self::with_scale(order, [1.0; 3])
    }

    /// Divergence map in world coordinates for a frame with the given scale.
    pub fn with_scale(order: usize, scale: [f64; 3]) -> Result<Self> {
        let basis = MonomialBasis::new(order)?;
        let m = basis.len();
        let out_basis = if order >= 2 {
            MonomialBasis::new(order - 1)?
        } else {
            // Order 1 divergence is a constant: a single [0,0,0] "basis".
            MonomialBasis {
                order: 0,
                terms: vec![[0, 0, 0]],
            }
        };
        let mut rows = Vec::with_capacity(out_basis.len());
        for t in out_basis.terms() {
            let mut cols = [0usize; 3];
            let mut weights = [0.0f64; 3];
            for axis in 0..3 {
                let mut raised = *t;
                raised[axis] += 1;
                let col = basis
                    .index_of(raised)
                    .expect("raised exponent stays within the order-n basis");
                cols[axis] = axis * m + col;
                weights[axis] = (t[axis] + 1) as f64 / scale[axis];
            }
            rows.push(DivRow { cols, weights });
        }
        Ok(DivergenceMap {
            order,
            rows,
            n_inputs: 3 * m,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of constraint rows, `binomial(order + 2, 3)` for order >= 2
    /// and 1 for order 1.
    pub fn n_outputs(&self) -> usize {
        self.rows.len()
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn rows(&self) -> &[DivRow] {
        &self.rows
    }

    /// Applies the map to flattened coefficients `[a_x | a_y | a_z]`.
    pub fn apply(&self, flat: &[f64]) -> DVector<f64> {
        assert_eq!(flat.len(), self.n_inputs);
        DVector::from_iterator(
            self.rows.len(),
            self.rows.iter().map(|r| {
                r.weights[0] * flat[r.cols[0]]
                    + r.weights[1] * flat[r.cols[1]]
                    + r.weights[2] * flat[r.cols[2]]
            }),
        )
    }

    /// Dense `M x 3m` matrix form.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.rows.len(), self.n_inputs);
        for (r, row) in self.rows.iter().enumerate() {
            for axis in 0..3 {
                d[(r, row.cols[axis])] = row.weights[axis];
            }
        }
        d
    }

    /// Orthonormal basis of the subspace of the null space with all z-row
    /// coefficients zero: planar fields `(v_x, v_y, 0)` whose in-plane
    /// divergence vanishes identically. Shape `3m x (2m - M)`.
    ///
    /// Useful for bundles confined to a thin slab, where the full
    /// three-component fit can satisfy the constraint by venting in-plane
    /// misfit into spurious through-plane flow.
    pub fn planar_null_basis(&self) -> DMatrix<f64> {
        let m = self.n_inputs / 3;
        let q = 2 * m - self.rows.len();
        let mut n = DMatrix::zeros(self.n_inputs, q);
        let mut constrained = vec![false; 2 * m];
        let mut col = 0;
        for row in &self.rows {
            constrained[row.cols[0]] = true;
            constrained[row.cols[1]] = true;
            // In-plane null direction of (w_x, w_y).
            let norm = row.weights[0].hypot(row.weights[1]);
            n[(row.cols[0], col)] = -row.weights[1] / norm;
            n[(row.cols[1], col)] = row.weights[0] / norm;
            col += 1;
        }
        for (c, taken) in constrained.iter().enumerate() {
            if !taken {
                n[(c, col)] = 1.0;
                col += 1;
            }
        }
        assert_eq!(col, q, "planar null space must be nonempty");
        n
    }

    /// Orthonormal basis of the null space, shape `3m x (3m - M)`.
    ///
    /// Constraint rows have pairwise disjoint supports of size three, so the
    /// null space splits into a 2-D orthonormal pair per row plus a unit
    /// vector per unconstrained coefficient.
    pub fn null_basis(&self) -> DMatrix<f64> {
        let q = self.n_inputs - self.rows.len();
        let mut n = DMatrix::zeros(self.n_inputs, q);
        let mut constrained = vec![false; self.n_inputs];
        let mut col = 0;
        for row in &self.rows {
            for &c in &row.cols {
                constrained[c] = true;
            }
            let w = Vector3::new(row.weights[0], row.weights[1], row.weights[2]);
            // Pick the axis least aligned with w to seed the cross products.
            let mut seed = Vector3::zeros();
            let min_axis = (0..3)
                .min_by(|&a, &b| w[a].abs().partial_cmp(&w[b].abs()).unwrap())
                .unwrap();
            seed[min_axis] = 1.0;
            let n1 = w.cross(&seed).normalize();
            let n2 = w.cross(&n1).normalize();
            for (axis, &c) in row.cols.iter().enumerate() {
                n[(c, col)] = n1[axis];
                n[(c, col + 1)] = n2[axis];
            }
            col += 2;
        }
        for (c, taken) in constrained.iter().enumerate() {
            if !taken {
                n[(c, col)] = 1.0;
                col += 1;
            }
        }
        assert_eq!(col, q, "null space of the divergence map must be nonempty");
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn term_names(basis: &MonomialBasis) -> Vec<[u32; 3]> {
        basis.terms().to_vec()
    }

    #[test]
    fn order_one_basis_is_x_y_z_one() {
        let b = MonomialBasis::new(1).unwrap();
        assert_eq!(
            term_names(&b),
            vec![[1, 0, 0], [0, 1, 0], [0, 0, 1], [0, 0, 0]]
        );
    }

    #[test]
    fn order_two_basis_matches_canonical_listing() {
        // [x2, y2, z2, xy, xz, yz, x, y, z, 1]
        let b = MonomialBasis::new(2).unwrap();
        assert_eq!(
            term_names(&b),
            vec![
                [2, 0, 0],
                [0, 2, 0],
                [0, 0, 2],
                [1, 1, 0],
                [1, 0, 1],
                [0, 1, 1],
                [1, 0, 0],
                [0, 1, 0],
                [0, 0, 1],
                [0, 0, 0],
            ]
        );
    }

    #[test]
    fn order_five_has_56_terms_by_enumeration() {
        // Independent count: enumerate all exponent triples with i+j+k <= 5.
        let mut expected = 0usize;
        for i in 0..=5 {
            for j in 0..=5 - i {
                for _k in 0..=5 - i - j {
                    expected += 1;
                }
            }
        }
        assert_eq!(expected, 56);
        let b = MonomialBasis::new(5).unwrap();
        assert_eq!(b.len(), 56);
        let mut sorted = b.terms().to_vec();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 56, "no duplicate exponent triples");
    }

    #[test]
    fn basis_counts_and_block_sizes() {
        for order in 1..=6 {
            let b = MonomialBasis::new(order).unwrap();
            assert_eq!(b.len(), basis_len(order));
            let mut offset = 0;
            for d in (0..=order).rev() {
                let block = &b.terms()[offset..offset + degree_block_len(d)];
                assert!(block.iter().all(|t| (t[0] + t[1] + t[2]) as usize == d));
                offset += degree_block_len(d);
            }
            assert_eq!(offset, b.len());
        }
    }

    #[test]
    fn order_out_of_range_is_rejected() {
        assert!(MonomialBasis::new(0).is_err());
        assert!(MonomialBasis::new(MAX_ORDER + 1).is_err());
    }

    #[test]
    fn eval_order_one_identity_frame() {
        let b = MonomialBasis::new(1).unwrap();
        let v = b.eval(&Point3::new(2.0, 3.0, 4.0));
        assert_eq!(v.as_slice(), &[2.0, 3.0, 4.0, 1.0]);
    }

    #[test]
    fn eval_order_two_at_ones_is_all_ones() {
        let b = MonomialBasis::new(2).unwrap();
        let v = b.eval(&Point3::new(1.0, 1.0, 1.0));
        assert!(v.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn eval_centered_frame_keeps_only_constant() {
        let b = MonomialBasis::new(2).unwrap();
        let frame = CoordFrame::new([1.0, 1.0, 1.0], [1.0, 1.0, 1.0]).unwrap();
        let q = frame.normalize(&Point3::new(1.0, 1.0, 1.0));
        let v = b.eval(&q);
        let expected: Vec<f64> = b
            .terms()
            .iter()
            .map(|t| if *t == [0, 0, 0] { 1.0 } else { 0.0 })
            .collect();
        assert_eq!(v.as_slice(), expected.as_slice());
    }

    #[test]
    fn constant_field_evaluates_everywhere() {
        let f = PolyField::constant(Vector3::new(1.0, 0.0, 0.0));
        for p in [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(-3.0, 7.0, 2.0),
            Point3::new(100.0, -50.0, 0.5),
        ] {
            assert_eq!(f.eval(&p), Vector3::new(1.0, 0.0, 0.0));
        }
    }

    #[test]
    fn zero_field_evaluates_to_zero() {
        let basis = MonomialBasis::new(3).unwrap();
        let f = PolyField::new(3, DMatrix::zeros(3, basis.len()), CoordFrame::identity()).unwrap();
        assert_eq!(f.eval(&Point3::new(2.0, -1.0, 5.0)), Vector3::zeros());
    }

    #[test]
    fn pure_y_coefficient_in_x_row() {
        // v_x = y: order-1 coefficients [0, 1, 0, 0] in the x row.
        let basis = MonomialBasis::new(1).unwrap();
        let mut coeffs = DMatrix::zeros(3, basis.len());
        coeffs[(0, basis.index_of([0, 1, 0]).unwrap())] = 1.0;
        let f = PolyField::new(1, coeffs, CoordFrame::identity()).unwrap();
        let v = f.eval(&Point3::new(5.0, 2.0, 7.0));
        assert_eq!(v.x, 2.0);
        assert_eq!(v.y, 0.0);
    }

    #[test]
    fn divergence_map_order_one_single_row() {
        let d = DivergenceMap::new(1).unwrap();
        assert_eq!(d.n_outputs(), 1);
        let basis = MonomialBasis::new(1).unwrap();
        let m = basis.len();
        let row = d.rows()[0];
        assert_eq!(row.cols[0], basis.index_of([1, 0, 0]).unwrap());
        assert_eq!(row.cols[1], m + basis.index_of([0, 1, 0]).unwrap());
        assert_eq!(row.cols[2], 2 * m + basis.index_of([0, 0, 1]).unwrap());
        assert_eq!(row.weights, [1.0, 1.0, 1.0]);
    }

    #[test]
    fn divergence_map_order_two_first_row() {
        // First output monomial is x: picks 2*a^x_200 + a^y_110 + a^z_101.
        let d = DivergenceMap::new(2).unwrap();
        assert_eq!(d.n_outputs(), 4);
        let basis = MonomialBasis::new(2).unwrap();
        let m = basis.len();
        let row = d.rows()[0];
        assert_eq!(row.cols[0], basis.index_of([2, 0, 0]).unwrap());
        assert_eq!(row.cols[1], m + basis.index_of([1, 1, 0]).unwrap());
        assert_eq!(row.cols[2], 2 * m + basis.index_of([1, 0, 1]).unwrap());
        assert_eq!(row.weights, [2.0, 1.0, 1.0]);
    }

    #[test]
    fn divergence_map_sizes_match_formula() {
        for order in 1..=6usize {
            let d = DivergenceMap::new(order).unwrap();
            // M = sum over degrees 0..n of d*(d+1)/2
            let expected: usize = (0..=order).map(|d| d * (d + 1) / 2).sum();
            assert_eq!(d.n_outputs(), expected.max(1));
            assert_eq!(d.n_inputs(), 3 * basis_len(order));
        }
    }

    #[test]
    fn zero_coefficients_have_zero_divergence_vector() {
        let d = DivergenceMap::new(4).unwrap();
        let h = d.apply(&vec![0.0; d.n_inputs()]);
        assert!(h.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn divergence_of_rotation_and_shear_fields() {
        // v = (x, -y, 0) has divergence 0; v = (x, 0, 0) has divergence 1.
        let basis = MonomialBasis::new(1).unwrap();
        let ix = basis.index_of([1, 0, 0]).unwrap();
        let iy = basis.index_of([0, 1, 0]).unwrap();

        let mut c1 = DMatrix::zeros(3, basis.len());
        c1[(0, ix)] = 1.0;
        c1[(1, iy)] = -1.0;
        let f1 = PolyField::new(1, c1, CoordFrame::identity()).unwrap();
        assert_eq!(f1.divergence_at(&Point3::new(3.0, -2.0, 1.0)), 0.0);

        let mut c2 = DMatrix::zeros(3, basis.len());
        c2[(0, ix)] = 1.0;
        let f2 = PolyField::new(1, c2, CoordFrame::identity()).unwrap();
        assert_eq!(f2.divergence_at(&Point3::new(9.0, 9.0, 9.0)), 1.0);
    }

    fn random_field(order: usize, frame: CoordFrame, rng: &mut StdRng) -> PolyField {
        let m = basis_len(order);
        let coeffs = DMatrix::from_fn(3, m, |_, _| rng.random_range(-1.0..1.0));
        PolyField::new(order, coeffs, frame).unwrap()
    }

    #[test]
    fn divergence_matches_central_finite_differences() {
        // Finite-difference oracle with step 1e-4 on normalized coordinates.
        let mut rng = StdRng::seed_from_u64(7);
        let frame = CoordFrame::new([12.0, -3.0, 4.0], [5.0, 2.0, 8.0]).unwrap();
        for order in [2usize, 3, 5] {
            let f = random_field(order, frame, &mut rng);
            for _ in 0..100 {
                let p = Point3::new(
                    rng.random_range(7.0..17.0),
                    rng.random_range(-5.0..-1.0),
                    rng.random_range(-4.0..12.0),
                );
                let mut fd = 0.0;
                for axis in 0..3 {
                    let h = 1e-4 * frame.scale[axis];
                    let mut hi = p;
                    let mut lo = p;
                    hi[axis] += h;
                    lo[axis] -= h;
                    fd += (f.eval(&hi)[axis] - f.eval(&lo)[axis]) / (2.0 * h);
                }
                let analytic = f.divergence_at(&p);
                let denom = analytic.abs().max(1.0);
                assert!(
                    (analytic - fd).abs() / denom < 1e-6,
                    "order {order}: analytic {analytic} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn divergence_map_roundtrip_against_divergence_at() {
        // H = map(vec(A)) evaluated against the order n-1 basis must equal
        // the analytic divergence at random points.
        let mut rng = StdRng::seed_from_u64(11);
        for order in [2usize, 3, 4] {
            let frame = CoordFrame::new([0.5, -1.0, 2.0], [2.0, 3.0, 1.5]).unwrap();
            let f = random_field(order, frame, &mut rng);
            let map = DivergenceMap::with_scale(order, frame.scale).unwrap();
            let flat: Vec<f64> = (0..3)
                .flat_map(|r| f.coeffs().row(r).iter().copied().collect::<Vec<_>>())
                .collect();
            let h = map.apply(&flat);
            let out_basis = MonomialBasis::new(order - 1).unwrap_or_else(|_| MonomialBasis {
                order: 0,
                terms: vec![[0, 0, 0]],
            });
            for _ in 0..1000 {
                let q = Point3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                let p = Point3::new(
                    q.x * frame.scale[0] + frame.center[0],
                    q.y * frame.scale[1] + frame.center[1],
                    q.z * frame.scale[2] + frame.center[2],
                );
                let via_map = h.dot(&out_basis.eval(&q));
                assert_relative_eq!(
                    via_map,
                    f.divergence_at(&p),
                    epsilon = 1e-10,
                    max_relative = 1e-10
                );
            }
        }
    }

    #[test]
    fn eval_is_linear_in_coefficients() {
        let mut rng = StdRng::seed_from_u64(3);
        let frame = CoordFrame::identity();
        for _ in 0..20 {
            let f1 = random_field(3, frame, &mut rng);
            let f2 = random_field(3, frame, &mut rng);
            let sum = PolyField::new(3, f1.coeffs() + f2.coeffs(), frame).unwrap();
            let p = Point3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let lhs = sum.eval(&p);
            let rhs = f1.eval(&p) + f2.eval(&p);
            assert_relative_eq!(lhs, rhs, epsilon = 1e-12);
        }
    }

    #[test]
    fn null_basis_is_orthonormal_and_annihilated() {
        for order in [1usize, 2, 3, 5] {
            let map = DivergenceMap::with_scale(order, [2.0, 1.0, 0.5]).unwrap();
            let n = map.null_basis();
            assert_eq!(n.ncols(), map.n_inputs() - map.n_outputs());
            let gram = n.transpose() * &n;
            assert_relative_eq!(
                gram,
                DMatrix::identity(n.ncols(), n.ncols()),
                epsilon = 1e-12
            );
            let dn = map.to_dense() * &n;
            assert!(dn.iter().all(|&x| x.abs() < 1e-12));
        }
    }

    #[test]
    fn planar_null_basis_is_orthonormal_in_plane_and_annihilated() {
        for order in [1usize, 3, 5] {
            let map = DivergenceMap::with_scale(order, [1.5, 1.5, 1.5]).unwrap();
            let n = map.planar_null_basis();
            let m = map.n_inputs() / 3;
            assert_eq!(n.ncols(), 2 * m - map.n_outputs());
            let gram = n.transpose() * &n;
            assert_relative_eq!(
                gram,
                DMatrix::identity(n.ncols(), n.ncols()),
                epsilon = 1e-12
            );
            let dn = map.to_dense() * &n;
            assert!(dn.iter().all(|&x| x.abs() < 1e-12));
            // No z-row coefficients at all.
            for r in 2 * m..3 * m {
                assert!(n.row(r).iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn frame_rejects_nonpositive_scale() {
        assert!(CoordFrame::new([0.0; 3], [1.0, 0.0, 1.0]).is_err());
        assert!(CoordFrame::new([0.0; 3], [1.0, -2.0, 1.0]).is_err());
    }
}
