//! Dense 3-D voxel grids, binary masks, and mask morphology.
//!
//! Grids are stored x-fastest: `index = x + dims[0] * (y + dims[1] * z)`.
//! A point in millimeters belongs to the voxel `floor(p / voxel_size)`, so
//! boundary points land in the higher-index voxel.

use nalgebra::Point3;

/// Index offsets of the 6-connected neighborhood.
pub const NEIGHBORS_6: [[i64; 3]; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

/// Dense 3-D grid with x-fastest storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

impl<T: Clone> Grid3<T> {
    pub fn filled(dims: [usize; 3], value: T) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Grid3 {
            dims,
            data: vec![value; n],
        }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut([usize; 3]) -> T) -> Self {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f([x, y, z]));
                }
            }
        }
        Grid3 { dims, data }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<T>) -> Self {
        assert_eq!(data.len(), dims[0] * dims[1] * dims[2]);
        Grid3 { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn linear(&self, v: [usize; 3]) -> usize {
        debug_assert!(v[0] < self.dims[0] && v[1] < self.dims[1] && v[2] < self.dims[2]);
        v[0] + self.dims[0] * (v[1] + self.dims[1] * v[2])
    }

    #[inline]
    pub fn get(&self, v: [usize; 3]) -> &T {
        &self.data[self.linear(v)]
    }

    #[inline]
    pub fn set(&mut self, v: [usize; 3], value: T) {
        let i = self.linear(v);
        self.data[i] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Voxel indices in storage (x-fastest) order.
    pub fn indices(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let dims = self.dims;
        (0..dims[2])
            .flat_map(move |z| (0..dims[1]).flat_map(move |y| (0..dims[0]).map(move |x| [x, y, z])))
    }

    /// In-bounds 6-connected neighbors of `v`.
    pub fn neighbors6(&self, v: [usize; 3]) -> impl Iterator<Item = [usize; 3]> + '_ {
        let dims = self.dims;
        NEIGHBORS_6.iter().filter_map(move |d| {
            let mut out = [0usize; 3];
            for a in 0..3 {
                let c = v[a] as i64 + d[a];
                if c < 0 || c >= dims[a] as i64 {
                    return None;
                }
                out[a] = c as usize;
            }
            Some(out)
        })
    }

    /// In-bounds 26-connected neighbors of `v`.
    pub fn neighbors26(&self, v: [usize; 3]) -> Vec<[usize; 3]> {
        let mut out = Vec::with_capacity(26);
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let c = [v[0] as i64 + dx, v[1] as i64 + dy, v[2] as i64 + dz];
                    if c.iter()
                        .zip(self.dims.iter())
                        .all(|(&ci, &di)| ci >= 0 && ci < di as i64)
                    {
                        out.push([c[0] as usize, c[1] as usize, c[2] as usize]);
                    }
                }
            }
        }
        out
    }
}

/// Binary voxel mask.
pub type MaskGrid = Grid3<bool>;

impl Grid3<bool> {
    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// True voxels in storage order.
    pub fn true_voxels(&self) -> Vec<[usize; 3]> {
        self.indices().filter(|&v| *self.get(v)).collect()
    }

    /// Binary dilation with the 6-connected structuring element,
    /// applied `iterations` times.
    pub fn dilate(&self, iterations: usize) -> Self {
        let mut current = self.clone();
        for _ in 0..iterations {
            let mut next = current.clone();
            for v in current.indices() {
                if *current.get(v) {
                    for n in current.neighbors6(v) {
                        next.set(n, true);
                    }
                }
            }
            current = next;
        }
        current
    }

    /// Inclusive index bounding box of the true voxels, if any.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for v in self.indices() {
            if *self.get(v) {
                any = true;
                for a in 0..3 {
                    lo[a] = lo[a].min(v[a]);
                    hi[a] = hi[a].max(v[a]);
                }
            }
        }
        any.then_some((lo, hi))
    }
}

/// Center of voxel `v` in mm.
#[inline]
pub fn voxel_center(v: [usize; 3], voxel_size: [f64; 3]) -> Point3<f64> {
    Point3::new(
        (v[0] as f64 + 0.5) * voxel_size[0],
        (v[1] as f64 + 0.5) * voxel_size[1],
        (v[2] as f64 + 0.5) * voxel_size[2],
    )
}

/// Containing voxel of a point in mm, or `None` when outside the grid.
#[inline]
pub fn voxel_of(p: &Point3<f64>, voxel_size: [f64; 3], dims: [usize; 3]) -> Option<[usize; 3]> {
    let mut v = [0usize; 3];
    for a in 0..3 {
        let c = (p[a] / voxel_size[a]).floor();
        if c < 0.0 || c >= dims[a] as f64 {
            return None;
        }
        v[a] = c as usize;
    }
    Some(v)
}
