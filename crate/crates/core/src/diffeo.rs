//! Stationary-velocity-field registration for residual non-rigid
//! distortion.
//!
//! A velocity field is exponentiated by scaling and squaring into a
//! displacement field `u`, with `φ(p) = p + u(p)`. Registration minimizes
//! `ssd(warp(moving, exp(v)), fixed) + reg_weight · mean |∇v|²` by smoothed
//! gradient steps with a backtracking line search.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eqfeatures::gaussian_kernel;
use crate::error::{Error, Result};
use crate::geometry::{Mat3, Vec3};
use crate::par::ordered_sum;
use crate::volume::{ssd, Grid, Volume};

/// Voxels within this distance of a face carry zero velocity.
pub const BOUNDARY_MARGIN: usize = 2;

/// A 3-vector per voxel, in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub grid: Grid,
    pub data: Vec<Vec3>,
}

/// Generator of a diffeomorphism (mm per unit time).
pub type VelocityField = VectorField;
/// Displacement `u` of `φ = id + u` (mm).
pub type DeformationField = VectorField;

impl VectorField {
    pub fn zeros(grid: Grid) -> Self {
        Self {
            data: vec![Vec3::zeros(); grid.len()],
            grid,
        }
    }

    pub fn new(grid: Grid, data: Vec<Vec3>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!("field has {} vectors, grid needs {}", data.len(), grid.len())));
        }
        Ok(Self { grid, data })
    }

    pub fn from_fn(grid: Grid, f: impl Fn(Vec3) -> Vec3 + Sync) -> Self {
        let data = (0..grid.len()).into_par_iter().map(|i| f(grid.world_of(i))).collect();
        Self { grid, data }
    }

    /// Trilinear interpolation; zero outside the grid.
    #[inline]
    pub fn sample(&self, p: &Vec3) -> Vec3 {
        let c = self.grid.continuous_index(p);
        let mut acc = Vec3::zeros();
        self.grid.stencil(&c, |idx, w| acc += self.data[idx] * w);
        acc
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            grid: self.grid,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn max_norm(&self) -> f64 {
        self.data.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Largest vector norm over voxels at least `margin` voxels from the
    /// boundary.
    pub fn max_interior_norm(&self, margin: usize) -> f64 {
        (0..self.grid.len())
            .filter(|&i| {
                let [x, y, z] = self.grid.coords(i);
                self.grid.is_interior(x, y, z, margin)
            })
            .map(|i| self.data[i].norm())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Sets every vector within `margin` voxels of a face to zero.
    pub fn zero_boundary(&mut self, margin: usize) {
        let grid = self.grid;
        self.data.par_iter_mut().enumerate().for_each(|(i, v)| {
            let [x, y, z] = grid.coords(i);
            if !grid.is_interior(x, y, z, margin) {
                *v = Vec3::zeros();
            }
        });
    }

    /// Gaussian smoothing of each component.
    pub fn smoothed(&self, sigma_mm: f64) -> Self {
        let mut out = self.clone();
        for c in 0..3 {
            let comp = Volume {
                grid: self.grid,
                data: self.data.iter().map(|v| v[c]).collect(),
            };
            let s = crate::eqfeatures::gaussian_smooth(&comp, sigma_mm);
            for (o, x) in out.data.iter_mut().zip(s.data) {
                o[c] = x;
            }
        }
        out
    }

    /// Jacobian `∂u/∂x` at a voxel by central differences (one-sided at
    /// faces).
    fn jacobian(&self, i: usize, j: usize, k: usize) -> Mat3 {
        let c = [i, j, k];
        let mut jac = Mat3::zeros();
        for axis in 0..3 {
            let n = self.grid.dims[axis];
            let (lo, hi) = (c[axis].saturating_sub(1), (c[axis] + 1).min(n - 1));
            if lo == hi {
                continue;
            }
            let (mut a, mut b) = (c, c);
            a[axis] = lo;
            b[axis] = hi;
            let d = (self.data[self.grid.index(b[0], b[1], b[2])] - self.data[self.grid.index(a[0], a[1], a[2])])
                / ((hi - lo) as f64 * self.grid.spacing[axis]);
            jac.set_column(axis, &d);
        }
        jac
    }

    /// `det(I + ∂u/∂x)` at every voxel.
    pub fn jacobian_determinants(&self) -> Vec<f64> {
        (0..self.grid.len())
            .into_par_iter()
            .map(|idx| {
                let [i, j, k] = self.grid.coords(idx);
                (Mat3::identity() + self.jacobian(i, j, k)).determinant()
            })
            .collect()
    }

    /// Smallest Jacobian determinant over voxels at least `margin` voxels
    /// from the boundary.
    pub fn min_interior_jacobian(&self, margin: usize) -> f64 {
        let dets = self.jacobian_determinants();
        (0..self.grid.len())
            .filter(|&idx| {
                let [i, j, k] = self.grid.coords(idx);
                self.grid.is_interior(i, j, k, margin)
            })
            .map(|idx| dets[idx])
            .fold(f64::INFINITY, f64::min)
    }
}

/// `(a ∘ b)(p) = b(p) + a(p + b(p))` as displacement fields.
pub fn compose_deformations(a: &DeformationField, b: &DeformationField) -> Result<DeformationField> {
    a.grid.ensure_same(&b.grid)?;
    let grid = a.grid;
    let data = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let ub = b.data[idx];
            ub + a.sample(&(grid.world_of(idx) + ub))
        })
        .collect();
    Ok(VectorField { grid, data })
}

/// Scaling and squaring: `exp(v) ≈ (id + v / 2^steps)` composed with itself
/// `2^steps` times.
pub fn exponentiate(v: &VelocityField, steps: u32) -> DeformationField {
    let mut phi = v.scaled(1.0 / 2f64.powi(steps as i32));
    for _ in 0..steps {
        phi = compose_deformations(&phi, &phi).expect("same grid");
    }
    phi
}

/// `out(p) = vol(p + u(p))`.
pub fn warp(vol: &Volume, phi: &DeformationField) -> Result<Volume> {
    vol.grid.ensure_same(&phi.grid)?;
    let grid = vol.grid;
    let data = (0..grid.len())
        .into_par_iter()
        .map(|idx| vol.sample(&(grid.world_of(idx) + phi.data[idx])))
        .collect();
    Ok(Volume { grid, data })
}

/// Settings for [`register_svf`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvfConfig {
    pub iterations: usize,
    /// Largest per-voxel velocity update of a full step, mm.
    pub step_size: f64,
    pub smooth_sigma_mm: f64,
    pub reg_weight: f64,
    pub steps: u32,
    pub max_halvings: usize,
}

impl Default for SvfConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            step_size: 1.0,
            smooth_sigma_mm: 4.5,
            reg_weight: 0.01,
            steps: 6,
            max_halvings: 10,
        }
    }
}

/// Result of a registration run.
#[derive(Debug, Clone)]
pub struct SvfRegistration {
    pub velocity: VelocityField,
    /// `E(v)` before the first step and after every accepted step.
    pub energy_trace: Vec<f64>,
}

impl SvfRegistration {
    pub fn deformation(&self, steps: u32) -> DeformationField {
        exponentiate(&self.velocity, steps)
    }
}

/// `mean_voxels Σ_c |∇v_c|²` with forward differences in world units.
pub fn gradient_energy(v: &VelocityField) -> f64 {
    let grid = v.grid;
    let n = grid.len();
    ordered_sum(n, |idx| {
        let [i, j, k] = grid.coords(idx);
        let c = [i, j, k];
        let mut e = 0.0;
        for axis in 0..3 {
            if c[axis] + 1 >= grid.dims[axis] {
                continue;
            }
            let mut nb = c;
            nb[axis] += 1;
            let d = (v.data[grid.index(nb[0], nb[1], nb[2])] - v.data[idx]) / grid.spacing[axis];
            e += d.norm_squared();
        }
        e
    }) / n as f64
}

/// Gradient of [`gradient_energy`] with respect to each voxel's vector.
fn gradient_energy_grad(v: &VelocityField) -> Vec<Vec3> {
    let grid = v.grid;
    let n = grid.len() as f64;
    (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let [i, j, k] = grid.coords(idx);
            let c = [i, j, k];
            let mut g = Vec3::zeros();
            for axis in 0..3 {
                let h2 = grid.spacing[axis] * grid.spacing[axis];
                if c[axis] + 1 < grid.dims[axis] {
                    let mut nb = c;
                    nb[axis] += 1;
                    g += (v.data[idx] - v.data[grid.index(nb[0], nb[1], nb[2])]) * (2.0 / h2);
                }
                if c[axis] > 0 {
                    let mut nb = c;
                    nb[axis] -= 1;
                    g += (v.data[idx] - v.data[grid.index(nb[0], nb[1], nb[2])]) * (2.0 / h2);
                }
            }
            g / n
        })
        .collect()
}

fn image_gradient(vol: &Volume) -> Vec<Vec3> {
    let grid = vol.grid;
    (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let [i, j, k] = grid.coords(idx);
            let c = [i, j, k];
            let mut g = Vec3::zeros();
            for axis in 0..3 {
                let n = grid.dims[axis];
                let (lo, hi) = (c[axis].saturating_sub(1), (c[axis] + 1).min(n - 1));
                if lo == hi {
                    continue;
                }
                let (mut a, mut b) = (c, c);
                a[axis] = lo;
                b[axis] = hi;
                g[axis] = (vol.data[grid.index(b[0], b[1], b[2])] - vol.data[grid.index(a[0], a[1], a[2])])
                    / ((hi - lo) as f64 * grid.spacing[axis]);
            }
            g
        })
        .collect()
}

struct Energy {
    total: f64,
    warped: Volume,
}

fn energy(moving: &Volume, fixed: &Volume, v: &VelocityField, cfg: &SvfConfig) -> Result<Energy> {
    let warped = warp(moving, &exponentiate(v, cfg.steps))?;
    let total = ssd(&warped, fixed)? + cfg.reg_weight * gradient_energy(v);
    Ok(Energy { total, warped })
}

/// Registers `moving` onto `fixed` with a stationary velocity field.
///
/// The returned field satisfies `E(v) ≤ E(0)`; the energy trace never
/// increases because only steps that lower the energy are accepted.
pub fn register_svf(moving: &Volume, fixed: &Volume, cfg: &SvfConfig) -> Result<SvfRegistration> {
    moving.grid.ensure_same(&fixed.grid)?;
    if !(cfg.step_size > 0.0) || !(cfg.smooth_sigma_mm > 0.0) || cfg.reg_weight < 0.0 || cfg.steps == 0 {
        return Err(Error::InvalidConfig(format!("invalid registration settings {cfg:?}")));
    }
    let grid = moving.grid;
    let n = grid.len() as f64;
    let mut v = VectorField::zeros(grid);
    let mut current = energy(moving, fixed, &v, cfg)?;
    if !current.total.is_finite() {
        return Err(Error::NonFiniteEnergy(0));
    }
    let mut trace = vec![current.total];

    for iteration in 0..cfg.iterations {
        let grad_img = image_gradient(&current.warped);
        let reg_grad = gradient_energy_grad(&v);
        let raw: Vec<Vec3> = (0..grid.len())
            .into_par_iter()
            .map(|i| {
                let residual = current.warped.data[i] - fixed.data[i];
                -(grad_img[i] * (2.0 * residual / n) + reg_grad[i] * cfg.reg_weight)
            })
            .collect();
        let mut direction = VectorField { grid, data: raw }.smoothed(cfg.smooth_sigma_mm);
        direction.zero_boundary(BOUNDARY_MARGIN);
        let peak = direction.max_norm();
        if !(peak > 0.0) {
            break;
        }
        if !peak.is_finite() {
            return Err(Error::NonFiniteEnergy(iteration + 1));
        }
        let base = direction.scaled(cfg.step_size / peak);

        let mut accepted = None;
        let mut alpha = 1.0;
        for _ in 0..=cfg.max_halvings {
            let mut trial = v.clone();
            for (t, d) in trial.data.iter_mut().zip(&base.data) {
                *t += d * alpha;
            }
            let e = energy(moving, fixed, &trial, cfg)?;
            if !e.total.is_finite() {
                return Err(Error::NonFiniteEnergy(iteration + 1));
            }
            if e.total < current.total {
                accepted = Some((trial, e));
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((trial, e)) => {
                v = trial;
                current = e;
                trace.push(current.total);
            }
            None => break,
        }
    }

    Ok(SvfRegistration {
        velocity: v,
        energy_trace: trace,
    })
}

/// A smooth random velocity field with peak norm `magnitude_mm`, zero on
/// the boundary margin.
pub fn random_smooth_field(grid: Grid, magnitude_mm: f64, smooth_sigma_mm: f64, rng: &mut impl rand::Rng) -> VelocityField {
    use rand_distr::{Distribution, StandardNormal};
    let data = (0..grid.len())
        .map(|_| {
            Vec3::new(
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            )
        })
        .collect();
    let mut noise = VectorField { grid, data };
    // smoothing spreads support by the kernel radius; clear that much more
    let spread = (0..3).map(|a| smoothing_radius(smooth_sigma_mm, grid.spacing[a])).max().unwrap_or(0);
    noise.zero_boundary(BOUNDARY_MARGIN + spread);
    let mut field = noise.smoothed(smooth_sigma_mm);
    field.zero_boundary(BOUNDARY_MARGIN);
    let peak = field.max_norm();
    if peak > 0.0 && magnitude_mm > 0.0 {
        field = field.scaled(magnitude_mm / peak);
    } else {
        field = VectorField::zeros(grid);
    }
    field
}

/// Kernel radius used by [`VectorField::smoothed`], in voxels.
pub fn smoothing_radius(sigma_mm: f64, spacing_mm: f64) -> usize {
    gaussian_kernel(sigma_mm, spacing_mm).len() / 2
}
