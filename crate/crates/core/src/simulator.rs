//! Reproducible phantoms, bounded smooth trajectories and synthetic
//! sequences.
//!
//! All randomness comes from ChaCha8 (`rand_chacha`) seeded with the
//! configured 64-bit seed; each stage draws from its own stream so that the
//! phantom, trajectory, noise and distortion are independent and stable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffeo::{exponentiate, random_smooth_field, warp};
use crate::eqfeatures::{representation, FilterBank};
use crate::error::{Error, Result};
use crate::geometry::{rotation_from_euler, EulerOrder, RigidTransform, Vec3};
use crate::procrustes::svd3;
use crate::tracker::MotionSequence;
use crate::volume::{normalize_intensity, resample_rigid, Grid, Volume, DEFAULT_SPACING_MM};

const STREAM_PHANTOM: u64 = 1;
const STREAM_TRAJECTORY: u64 = 2;
const STREAM_NOISE: u64 = 1 << 20;
const STREAM_DISTORTION: u64 = 2 << 20;

/// Smoothing scale of the random distortion velocity, mm.
const DISTORTION_SIGMA_MM: f64 = 12.0;

/// Small-motion regime bounds (mm, degrees).
pub const SMALL_REGIME: (f64, f64) = (10.0, 5.0);
/// Large-motion regime bounds (mm, degrees).
pub const LARGE_REGIME: (f64, f64) = (30.0, 20.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub seed: u64,
    /// Voxels per side.
    pub size: usize,
    pub spacing_mm: f64,
    pub frames: usize,
    pub t_max_mm: f64,
    pub r_max_deg: f64,
    pub noise_sigma: f64,
    pub contrast_drift: f64,
    pub distortion_mm: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 64,
            spacing_mm: DEFAULT_SPACING_MM,
            frames: 20,
            t_max_mm: SMALL_REGIME.0,
            r_max_deg: SMALL_REGIME.1,
            noise_sigma: 0.0,
            contrast_drift: 0.0,
            distortion_mm: 0.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.size < 16 {
            return fail(format!("size must be at least 16, got {}", self.size));
        }
        if self.frames < 2 {
            return fail(format!("frames must be at least 2, got {}", self.frames));
        }
        if !(self.spacing_mm > 0.0) || !self.spacing_mm.is_finite() {
            return fail(format!("spacing must be positive, got {}", self.spacing_mm));
        }
        for (name, v) in [
            ("t_max_mm", self.t_max_mm),
            ("r_max_deg", self.r_max_deg),
            ("noise_sigma", self.noise_sigma),
            ("distortion_mm", self.distortion_mm),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return fail(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.contrast_drift) {
            return fail(format!("contrast_drift must lie in [0, 1], got {}", self.contrast_drift));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::cube(self.size, self.spacing_mm)
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Parameters of an ellipsoidal head with interior Gaussian blobs.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    /// Semi-axes, mm.
    pub axes: Vec3,
    pub blobs: Vec<Blob>,
    /// Width of the smooth head boundary, mm.
    pub edge_mm: f64,
    /// Intensity of the head before blobs are added.
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub center: Vec3,
    pub sigma_mm: f64,
    pub amplitude: f64,
}

const HEAD_LEVEL: f64 = 0.3;

/// Required smallest singular value of the phantom's centered point cloud,
/// as a fraction of the field of view.
pub const MIN_SPREAD: f64 = 0.005;

/// Uniformly distributed rotation (normalized Gaussian quaternion).
pub fn random_rotation(rng: &mut impl Rng) -> crate::geometry::Mat3 {
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    crate::geometry::quaternion_to_rotation(q.map(|x| x / n))
}

impl PhantomSpec {
    /// Three structural blobs sit along random orthogonal directions: a
    /// bright one that dominates the high intensity powers, a dimmer and
    /// wider one that dominates the moderate powers, and a dark one. Up to
    /// three faint blobs are added at random. All blobs are at least three
    /// voxels wide so that trilinear resampling barely changes them.
    fn draw(rng: &mut impl Rng, extent: f64, spacing: f64) -> Self {
        let axes = Vec3::new(
            extent * rng.random_range(0.175..0.225),
            extent * rng.random_range(0.175..0.225),
            extent * rng.random_range(0.175..0.225),
        );
        let frame = random_rotation(rng);
        let unit_ball = |rng: &mut dyn rand::RngCore| loop {
            let d = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if d.norm_squared() <= 1.0 {
                break d;
            }
        };
        let place = |rng: &mut dyn rand::RngCore, axis: usize, radius: f64| {
            let dir = frame.column(axis).into_owned() * radius + unit_ball(rng) * 0.08;
            dir.component_mul(&axes)
        };
        let mut blobs = vec![
            Blob {
                center: place(rng, 0, 0.5),
                sigma_mm: spacing * rng.random_range(2.8..3.2),
                amplitude: rng.random_range(0.9..1.1),
            },
            Blob {
                center: place(rng, 1, 0.5),
                sigma_mm: spacing * rng.random_range(3.3..3.7),
                amplitude: rng.random_range(0.6..0.8),
            },
            Blob {
                center: place(rng, 2, 0.45),
                sigma_mm: spacing * rng.random_range(2.8..3.2),
                amplitude: -rng.random_range(0.2..0.3),
            },
        ];
        let extra = rng.random_range(0..=3);
        for _ in 0..extra {
            blobs.push(Blob {
                center: (unit_ball(rng) * 0.6).component_mul(&axes),
                sigma_mm: spacing * rng.random_range(2.0..3.0),
                amplitude: rng.random_range(0.05..0.15),
            });
        }
        Self {
            axes,
            blobs,
            edge_mm: 1.5 * spacing,
            level: HEAD_LEVEL,
        }
    }

    /// Smooth head indicator: 1 inside, 0 beyond `edge_mm` (measured along
    /// the shortest semi-axis) outside the ellipsoid.
    pub fn head(&self, p: &Vec3) -> f64 {
        let rho = p.component_div(&self.axes).norm();
        let d = (rho - 1.0) * self.axes.min();
        if d >= self.edge_mm {
            return 0.0;
        }
        if d <= -self.edge_mm {
            return 1.0;
        }
        let t = (self.edge_mm - d) / (2.0 * self.edge_mm);
        t * t * (3.0 - 2.0 * t)
    }

    pub fn value(&self, p: &Vec3) -> f64 {
        let h = self.head(p);
        if h == 0.0 {
            return 0.0;
        }
        let blobs: f64 = self
            .blobs
            .iter()
            .map(|b| b.amplitude * (-(p - b.center).norm_squared() / (2.0 * b.sigma_mm * b.sigma_mm)).exp())
            .sum();
        h * (self.level + blobs)
    }

    pub fn render(&self, grid: Grid) -> Volume {
        normalize_intensity(&Volume::from_fn(grid, |p| self.value(&p)))
    }

    /// Draws phantoms from the configured seed until the default filter
    /// bank's point cloud spans three dimensions (smallest singular value of
    /// the centered points above MIN_SPREAD of the field of view).
    pub fn generate(cfg: &SimConfig) -> Result<(Self, Volume)> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        let extent = cfg.size as f64 * cfg.spacing_mm;
        let mut rng = cfg.rng(STREAM_PHANTOM);
        let bank = FilterBank::default_bank();
        for _ in 0..64 {
            let spec = Self::draw(&mut rng, extent, cfg.spacing_mm);
            let vol = spec.render(grid);
            if point_spread(&representation(&bank, &vol)?.points) > MIN_SPREAD * extent {
                return Ok((spec, vol));
            }
        }
        Err(Error::InvalidConfig("could not draw an asymmetric phantom".into()))
    }
}

/// Smallest singular value of the centered point matrix, mm.
pub fn point_spread(points: &[Vec3]) -> f64 {
    let n = points.len() as f64;
    let c = points.iter().sum::<Vec3>() / n;
    let m = points.iter().fold(crate::geometry::Mat3::zeros(), |acc, p| acc + (p - c) * (p - c).transpose());
    svd3(&m).sigma[2].sqrt()
}

/// A seeded head phantom normalized to `[0, 1]` with exact zero background.
pub fn make_phantom(cfg: &SimConfig) -> Result<Volume> {
    Ok(PhantomSpec::generate(cfg)?.1)
}

fn smooth3(x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(x.len() - 1);
            x[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

fn bounded_walk(rng: &mut impl Rng, frames: usize, dims: usize) -> Vec<Vec<f64>> {
    (0..dims)
        .map(|_| {
            let mut acc = 0.0;
            let walk: Vec<f64> = (0..frames)
                .map(|t| {
                    if t > 0 {
                        let step: f64 = StandardNormal.sample(rng);
                        acc += step;
                    }
                    acc
                })
                .collect();
            let s = smooth3(&walk);
            s.iter().map(|x| x - s[0]).collect()
        })
        .collect()
}

fn rescale(paths: &mut [Vec<f64>], bound: f64) {
    let peak = paths.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
    for path in paths.iter_mut() {
        for x in path.iter_mut() {
            *x = if peak > 0.0 && bound > 0.0 { *x * (bound / peak) } else { 0.0 };
        }
    }
}

/// Smooth bounded random walk of `frames` rigid poses starting at the
/// identity. The largest absolute translation component equals `t_max_mm`
/// and the largest absolute Euler angle (intrinsic X-Y-Z) equals
/// `r_max_deg`. Rotations are about the world origin (the grid center).
pub fn make_trajectory(cfg: &SimConfig) -> Result<Vec<RigidTransform>> {
    cfg.validate()?;
    let mut rng = cfg.rng(STREAM_TRAJECTORY);
    let mut trans = bounded_walk(&mut rng, cfg.frames, 3);
    let mut angles = bounded_walk(&mut rng, cfg.frames, 3);
    rescale(&mut trans, cfg.t_max_mm);
    rescale(&mut angles, cfg.r_max_deg);
    Ok((0..cfg.frames)
        .map(|t| {
            RigidTransform::new(
                rotation_from_euler(angles[0][t], angles[1][t], angles[2][t], EulerOrder::Xyz),
                Vec3::new(trans[0][t], trans[1][t], trans[2][t]),
            )
        })
        .collect())
}

/// Moves the phantom along the trajectory and applies the configured
/// artifacts: additive Gaussian noise, a sinusoidal global intensity drift
/// and a smooth random diffeomorphic distortion, in that order.
pub fn synthesize(phantom: &Volume, traj: &[RigidTransform], cfg: &SimConfig) -> Result<(Vec<Volume>, MotionSequence)> {
    cfg.validate()?;
    if traj.len() != cfg.frames {
        return Err(Error::LengthMismatch(format!(
            "trajectory has {} poses, configuration asks for {} frames",
            traj.len(),
            cfg.frames
        )));
    }
    let frames: Vec<Volume> = (0..traj.len())
        .into_par_iter()
        .map(|t| synthesize_frame(phantom, &traj[t], t, cfg))
        .collect();
    Ok((frames, MotionSequence::from_accumulated(traj)))
}

fn synthesize_frame(phantom: &Volume, pose: &RigidTransform, t: usize, cfg: &SimConfig) -> Volume {
    let mut frame = resample_rigid(phantom, &pose.inverse());
    if cfg.noise_sigma > 0.0 {
        let mut rng = cfg.rng(STREAM_NOISE + t as u64);
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("valid sigma");
        for x in frame.data.iter_mut() {
            *x += normal.sample(&mut rng);
        }
    }
    if cfg.contrast_drift > 0.0 {
        let factor = 1.0 + cfg.contrast_drift * (2.0 * std::f64::consts::PI * t as f64 / cfg.frames as f64).sin();
        frame = frame.map(|x| x * factor);
    }
    if cfg.distortion_mm > 0.0 {
        let mut rng = cfg.rng(STREAM_DISTORTION + t as u64);
        let v = random_smooth_field(frame.grid, cfg.distortion_mm, DISTORTION_SIGMA_MM, &mut rng);
        frame = warp(&frame, &exponentiate(&v, 6)).expect("same grid");
    }
    frame
}

/// Phantom, trajectory and frames for one configuration.
pub struct SimulatedSequence {
    pub config: SimConfig,
    pub phantom: Volume,
    pub trajectory: Vec<RigidTransform>,
    pub frames: Vec<Volume>,
    pub truth: MotionSequence,
}

pub fn simulate(cfg: &SimConfig) -> Result<SimulatedSequence> {
    let phantom = make_phantom(cfg)?;
    let trajectory = make_trajectory(cfg)?;
    let (frames, truth) = synthesize(&phantom, &trajectory, cfg)?;
    Ok(SimulatedSequence {
        config: cfg.clone(),
        phantom,
        trajectory,
        frames,
        truth,
    })
}
