//! Scalar volumes in world coordinates, trilinear resampling and image
//! distances.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Vec3};
use crate::par::{ordered_sum, ordered_sum_n};

/// Default isotropic voxel size in mm.
pub const DEFAULT_SPACING_MM: f64 = 3.0;

/// Continuous indices closer than this to a lattice point snap onto it.
const SNAP: f64 = 1e-9;

/// Voxel lattice: dimensions, spacing (mm/voxel) and the world position of
/// the center of voxel (0, 0, 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: Vec3,
    pub origin: Vec3,
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: Vec3, origin: Vec3) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig(format!("grid dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidConfig(format!("grid spacing must be positive, got {spacing:?}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidConfig("grid origin must be finite".into()));
        }
        Ok(Self { dims, spacing, origin })
    }

    /// Grid whose geometric center sits at the world origin.
    pub fn centered(dims: [usize; 3], spacing: Vec3) -> Result<Self> {
        let origin = Vec3::new(
            -(dims[0] as f64 - 1.0) / 2.0 * spacing.x,
            -(dims[1] as f64 - 1.0) / 2.0 * spacing.y,
            -(dims[2] as f64 - 1.0) / 2.0 * spacing.z,
        );
        Self::new(dims, spacing, origin)
    }

    pub fn cube(size: usize, spacing_mm: f64) -> Result<Self> {
        Self::centered([size; 3], Vec3::repeat(spacing_mm))
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear index, x fastest.
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    #[inline]
    pub fn world(&self, i: usize, j: usize, k: usize) -> Vec3 {
        Vec3::new(
            self.origin.x + i as f64 * self.spacing.x,
            self.origin.y + j as f64 * self.spacing.y,
            self.origin.z + k as f64 * self.spacing.z,
        )
    }

    #[inline]
    pub fn world_of(&self, idx: usize) -> Vec3 {
        let [i, j, k] = self.coords(idx);
        self.world(i, j, k)
    }

    pub fn center(&self) -> Vec3 {
        self.origin
            + Vec3::new(
                (self.dims[0] as f64 - 1.0) / 2.0 * self.spacing.x,
                (self.dims[1] as f64 - 1.0) / 2.0 * self.spacing.y,
                (self.dims[2] as f64 - 1.0) / 2.0 * self.spacing.z,
            )
    }

    /// Half of the largest physical extent, in mm.
    pub fn half_extent(&self) -> f64 {
        (0..3)
            .map(|a| self.dims[a] as f64 * self.spacing[a] / 2.0)
            .fold(0.0, f64::max)
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.x * self.spacing.y * self.spacing.z
    }

    /// Continuous voxel index of a world point, snapped onto nearby lattice
    /// points.
    #[inline]
    pub fn continuous_index(&self, p: &Vec3) -> Vec3 {
        let mut c = (p - self.origin).component_div(&self.spacing);
        for x in c.iter_mut() {
            let r = x.round();
            if (*x - r).abs() < SNAP {
                *x = r;
            }
        }
        c
    }

    /// Whether the voxel is at least `margin` voxels away from every face.
    #[inline]
    pub fn is_interior(&self, i: usize, j: usize, k: usize, margin: usize) -> bool {
        i >= margin
            && j >= margin
            && k >= margin
            && i + margin < self.dims[0]
            && j + margin < self.dims[1]
            && k + margin < self.dims[2]
    }

    pub fn ensure_same(&self, other: &Grid) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch(format!(
                "dims {:?}/{:?}, spacing {:?}/{:?}, origin {:?}/{:?}",
                self.dims,
                other.dims,
                self.spacing.as_slice(),
                other.spacing.as_slice(),
                self.origin.as_slice(),
                other.origin.as_slice()
            )));
        }
        Ok(())
    }

    /// Trilinear stencil of a continuous index: up to eight `(linear index,
    /// weight)` pairs; neighbors outside the grid are dropped (zero padding).
    #[inline]
    pub(crate) fn stencil(&self, c: &Vec3, mut visit: impl FnMut(usize, f64)) {
        let [nx, ny, nz] = self.dims;
        if !(c.x > -1.0 && c.y > -1.0 && c.z > -1.0) || c.x >= nx as f64 || c.y >= ny as f64 || c.z >= nz as f64 {
            return;
        }
        let (fx, fy, fz) = (c.x.floor(), c.y.floor(), c.z.floor());
        let (tx, ty, tz) = (c.x - fx, c.y - fy, c.z - fz);
        let (ix, iy, iz) = (fx as isize, fy as isize, fz as isize);
        for (dz, wz) in [(0, 1.0 - tz), (1, tz)] {
            let z = iz + dz;
            if wz == 0.0 || z < 0 || z >= nz as isize {
                continue;
            }
            for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
                let y = iy + dy;
                if wy == 0.0 || y < 0 || y >= ny as isize {
                    continue;
                }
                for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                    let x = ix + dx;
                    if wx == 0.0 || x < 0 || x >= nx as isize {
                        continue;
                    }
                    visit(self.index(x as usize, y as usize, z as usize), wx * wy * wz);
                }
            }
        }
    }
}

/// A 3D scalar image on a [`Grid`]; data is stored x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub grid: Grid,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "volume data has {} values, grid needs {}",
                data.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            data: vec![0.0; grid.len()],
            grid,
        }
    }

    /// Samples `f` at every voxel center.
    pub fn from_fn(grid: Grid, f: impl Fn(Vec3) -> f64 + Sync) -> Self {
        let data = (0..grid.len()).into_par_iter().map(|i| f(grid.world_of(i))).collect();
        Self { grid, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> Vec3 {
        self.grid.spacing
    }

    pub fn origin(&self) -> Vec3 {
        self.grid.origin
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Trilinear interpolation at a world point; zero outside the grid.
    #[inline]
    pub fn sample(&self, p: &Vec3) -> f64 {
        let c = self.grid.continuous_index(p);
        let mut acc = 0.0;
        self.grid.stencil(&c, |idx, w| acc += self.data[idx] * w);
        acc
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> Volume {
        Volume {
            grid: self.grid,
            data: self.data.par_iter().map(|&x| f(x)).collect(),
        }
    }
}

/// Trilinear interpolation of `vol` at world point `p`.
pub fn trilinear_sample(vol: &Volume, p: &Vec3) -> f64 {
    vol.sample(p)
}

/// Pull-back resampling: output voxel at world point `p` holds
/// `vol(q(p))`, on the input grid.
pub fn resample_rigid(vol: &Volume, q: &RigidTransform) -> Volume {
    let grid = vol.grid;
    let data = (0..grid.len())
        .into_par_iter()
        .map(|idx| vol.sample(&q.apply(&grid.world_of(idx))))
        .collect();
    Volume { grid, data }
}

/// Linear rescale to `[0, 1]`; constant volumes map to zeros.
pub fn normalize_intensity(vol: &Volume) -> Volume {
    let (lo, hi) = (vol.min(), vol.max());
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        return Volume::zeros(vol.grid);
    }
    vol.map(|x| (x - lo) / range)
}

/// Mean squared voxel difference.
pub fn ssd(a: &Volume, b: &Volume) -> Result<f64> {
    a.grid.ensure_same(&b.grid)?;
    let n = a.data.len();
    Ok(ordered_sum(n, |i| {
        let d = a.data[i] - b.data[i];
        d * d
    }) / n as f64)
}

/// Pearson correlation of voxel values; 0 if either volume is constant.
pub fn ncc(a: &Volume, b: &Volume) -> Result<f64> {
    a.grid.ensure_same(&b.grid)?;
    let n = a.data.len();
    let [sa, sb] = ordered_sum_n(n, |i| [a.data[i], b.data[i]]);
    let (ma, mb) = (sa / n as f64, sb / n as f64);
    let [cov, va, vb] = ordered_sum_n(n, |i| {
        let (x, y) = (a.data[i] - ma, b.data[i] - mb);
        [x * y, x * x, y * y]
    });
    if !(va > 0.0) || !(vb > 0.0) {
        return Ok(0.0);
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// Dice overlap of the masks `v > threshold_fraction · max(v)`.
///
/// Two empty masks have overlap 1.
pub fn dice(a: &Volume, b: &Volume, threshold_fraction: f64) -> Result<f64> {
    a.grid.ensure_same(&b.grid)?;
    if !(threshold_fraction > 0.0 && threshold_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "dice threshold fraction must lie in (0, 1), got {threshold_fraction}"
        )));
    }
    let (ta, tb) = (threshold_fraction * a.max(), threshold_fraction * b.max());
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (ia, ib) = (x > ta, y > tb);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rot_z, rotation_from_euler, EulerOrder};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(grid: Grid, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..grid.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        Volume::new(grid, data).unwrap()
    }

    fn smooth_blob(grid: Grid) -> Volume {
        Volume::from_fn(grid, |p| {
            let a = (-(p - Vec3::new(6.0, -3.0, 2.0)).norm_squared() / (2.0 * 64.0)).exp();
            let b = 0.5 * (-(p - Vec3::new(-8.0, 5.0, -4.0)).norm_squared() / (2.0 * 36.0)).exp();
            a + b
        })
    }

    #[test]
    fn grid_validation() {
        assert!(Grid::new([0, 2, 2], Vec3::repeat(1.0), Vec3::zeros()).is_err());
        assert!(Grid::new([2, 2, 2], Vec3::new(1.0, 0.0, 1.0), Vec3::zeros()).is_err());
        assert!(Volume::new(Grid::cube(2, 1.0).unwrap(), vec![0.0; 7]).is_err());
        assert_eq!(Grid::cube(64, 3.0).unwrap().center(), Vec3::zeros());
    }

    #[test]
    fn sample_lattice_and_midpoint() {
        let grid = Grid::new([4, 5, 6], Vec3::new(0.7, 1.3, 2.1), Vec3::new(-1.1, 0.4, 3.3)).unwrap();
        let v = random_volume(grid, 1);
        for idx in 0..grid.len() {
            assert_eq!(v.sample(&grid.world_of(idx)), v.data[idx]);
        }
        let mid = (grid.world(1, 2, 3) + grid.world(2, 2, 3)) / 2.0;
        let expected = (v.at(1, 2, 3) + v.at(2, 2, 3)) / 2.0;
        assert!((v.sample(&mid) - expected).abs() < 1e-15);
        assert_eq!(v.sample(&Vec3::new(1e3, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn sample_reproduces_affine_fields() {
        let grid = Grid::cube(12, 2.5).unwrap();
        let f = |p: &Vec3| 2.0 * p.x + 3.0 * p.y - p.z;
        let v = Volume::from_fn(grid, |p| f(&p));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lo = grid.origin;
        let hi = grid.world(11, 11, 11);
        for _ in 0..1000 {
            let p = Vec3::new(rng.random_range(lo.x..hi.x), rng.random_range(lo.y..hi.y), rng.random_range(lo.z..hi.z));
            assert!((v.sample(&p) - f(&p)).abs() < 1e-9);
        }
    }

    #[test]
    fn resample_identity_is_bitwise() {
        let grid = Grid::new([5, 6, 7], Vec3::new(0.7, 1.1, 3.0), Vec3::new(0.3, -2.0, 1.0)).unwrap();
        let v = random_volume(grid, 3);
        assert_eq!(resample_rigid(&v, &RigidTransform::identity()), v);
    }

    #[test]
    fn resample_quarter_turn_is_index_permutation() {
        let n = 9;
        let grid = Grid::cube(n, 3.0).unwrap();
        let v = random_volume(grid, 4);
        let q = RigidTransform::from_rotation(rotation_from_euler(0.0, 0.0, 90.0, EulerOrder::Xyz));
        let out = resample_rigid(&v, &q);
        // output(i,j,k) = v(R p): R p maps (x,y) -> (-y,x), i.e. index (n-1-j, i)
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    assert_eq!(out.at(i, j, k), v.at(n - 1 - j, i, k));
                }
            }
        }
    }

    #[test]
    fn resample_integer_shift() {
        let grid = Grid::cube(8, 2.0).unwrap();
        let v = random_volume(grid, 5);
        let out = resample_rigid(&v, &RigidTransform::from_translation(Vec3::new(2.0, 0.0, 0.0)));
        for k in 0..8 {
            for j in 0..8 {
                for i in 0..8 {
                    let expected = if i + 1 < 8 { v.at(i + 1, j, k) } else { 0.0 };
                    assert_eq!(out.at(i, j, k), expected);
                }
            }
        }
    }

    #[test]
    fn resample_roundtrip_is_close_in_interior() {
        let grid = Grid::cube(24, 3.0).unwrap();
        let v = smooth_blob(grid);
        let q = RigidTransform::new(rot_z(17.0) * crate::geometry::rot_x(-9.0), Vec3::new(2.3, -1.7, 0.9));
        let back = resample_rigid(&resample_rigid(&v, &q), &q.inverse());
        let mut acc = 0.0;
        let mut n = 0;
        for k in 0..24 {
            for j in 0..24 {
                for i in 0..24 {
                    if grid.is_interior(i, j, k, 2) {
                        let d = back.at(i, j, k) - v.at(i, j, k);
                        acc += d * d;
                        n += 1;
                    }
                }
            }
        }
        assert!(acc / (n as f64) < 1e-3);
    }

    #[test]
    fn normalize_cases() {
        let grid = Grid::cube(3, 1.0).unwrap();
        let data: Vec<f64> = (0..27).map(|i| 10.0 + 20.0 * i as f64 / 26.0).collect();
        let v = Volume::new(grid, data.clone()).unwrap();
        let n = normalize_intensity(&v);
        for (a, b) in n.data.iter().zip(&data) {
            assert!((a - (b - 10.0) / 20.0).abs() < 1e-15);
        }
        assert_eq!(n.min(), 0.0);
        assert_eq!(n.max(), 1.0);
        assert_eq!(normalize_intensity(&n), n);
        let c = Volume::new(grid, vec![4.2; 27]).unwrap();
        assert!(normalize_intensity(&c).data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ssd_ncc_cases() {
        let grid = Grid::cube(2, 1.0).unwrap();
        let a = Volume::new(grid, vec![1.0, 2.0, 0.0, 4.0, 3.0, 1.0, 0.5, 2.5]).unwrap();
        let b = Volume::new(grid, vec![0.0, 2.0, 1.0, 3.0, 3.0, 2.0, 0.5, 0.5]).unwrap();
        assert_eq!(ssd(&a, &a).unwrap(), 0.0);
        // direct formula: diffs 1,0,-1,1,0,-1,0,2 -> squares sum 8
        assert!((ssd(&a, &b).unwrap() - 8.0 / 8.0).abs() < 1e-15);
        assert!((ncc(&a, &a.map(|x| 2.0 * x + 5.0)).unwrap() - 1.0).abs() < 1e-12);
        let ma = a.data.iter().sum::<f64>() / 8.0;
        let mb = b.data.iter().sum::<f64>() / 8.0;
        let cov: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.data.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.data.iter().map(|y| (y - mb).powi(2)).sum();
        assert!((ncc(&a, &b).unwrap() - cov / (va * vb).sqrt()).abs() < 1e-12);

        let other = Volume::zeros(Grid::cube(3, 1.0).unwrap());
        assert!(matches!(ssd(&a, &other), Err(Error::GridMismatch(_))));
        assert!(matches!(ncc(&a, &other), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn dice_cases() {
        let grid = Grid::new([20, 10, 1], Vec3::repeat(1.0), Vec3::zeros()).unwrap();
        let mask = |range: std::ops::Range<usize>| {
            let mut d = vec![0.0; 200];
            for i in range {
                d[i] = 1.0;
            }
            Volume::new(grid, d).unwrap()
        };
        let a = mask(0..100);
        assert_eq!(dice(&a, &a, 0.5).unwrap(), 1.0);
        assert_eq!(dice(&a, &mask(100..160), 0.5).unwrap(), 0.0);
        assert_eq!(dice(&a, &mask(60..120), 0.5).unwrap(), 0.5);
        let z = Volume::zeros(grid);
        assert_eq!(dice(&z, &z, 0.5).unwrap(), 1.0);
        assert!(dice(&a, &a, 1.5).is_err());
    }

    #[test]
    fn ssd_is_zero_only_for_equal_data() {
        let grid = Grid::cube(4, 1.0).unwrap();
        let a = random_volume(grid, 6);
        let mut b = a.clone();
        b.data[17] += 1e-3;
        assert!(ssd(&a, &b).unwrap() > 0.0);
    }
}
