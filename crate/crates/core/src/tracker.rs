//! Sequence pipeline: per-frame point clouds, optional attention refinement,
//! closed-form adjacent-pair rigid estimates accumulated to frame 0, an
//! optional diffeomorphic residual per pair, alignment and error metrics.
//!
//! Conventions: `transforms[t]` carries frame `t` onto frame `t + 1`, so
//! `z_{t+1} ≈ q_t(z_t)` for the point clouds and
//! `frame_t(p) ≈ frame_{t+1}(q_t(p))` for the images. All rotations act about
//! the world origin, which is the grid center.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffeo::{register_svf, warp, DeformationField, SvfConfig};
use crate::eqfeatures::{representation, FilterBank, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::{geodesic_angle, RigidTransform};
use crate::procrustes::estimate_rigid;
use crate::temporal::{refine_clouds, AttentionParams, TokenFrame};
use crate::volume::{dice, ncc, resample_rigid, ssd, Volume};

/// Dice masks threshold at this fraction of each volume's maximum.
pub const DICE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub transforms: Vec<RigidTransform>,
    pub accumulated: Vec<RigidTransform>,
    /// Residual displacement per pair, in frame-`t` coordinates:
    /// `frame_t(p) ≈ frame_{t+1}(q_t(p + u_t(p)))`.
    pub residuals: Option<Vec<DeformationField>>,
}

impl MotionSequence {
    pub fn from_pairwise(transforms: Vec<RigidTransform>) -> Self {
        let mut accumulated = Vec::with_capacity(transforms.len() + 1);
        accumulated.push(RigidTransform::identity());
        for q in &transforms {
            let last = accumulated.last().expect("non-empty");
            accumulated.push(q.compose(last));
        }
        Self {
            transforms,
            accumulated,
            residuals: None,
        }
    }

    /// Poses relative to frame 0 (the first must be the identity up to
    /// rounding) converted to adjacent-pair transforms.
    pub fn from_accumulated(poses: &[RigidTransform]) -> Self {
        let transforms = poses.windows(2).map(|w| w[1].compose(&w[0].inverse())).collect();
        Self::from_pairwise(transforms)
    }

    pub fn frames(&self) -> usize {
        self.accumulated.len()
    }

    pub fn identity(frames: usize) -> Self {
        Self::from_pairwise(vec![RigidTransform::identity(); frames.saturating_sub(1)])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackOptions {
    pub diffeo: bool,
    pub svf: SvfConfig,
}

impl Default for TrackOptions {
    fn default() -> Self {
        Self {
            diffeo: false,
            svf: SvfConfig::default(),
        }
    }
}

/// Image agreement of one adjacent pair before and after correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairImageStats {
    pub ssd_pre: f64,
    pub ssd_post: f64,
    pub ncc_pre: f64,
    pub ncc_post: f64,
}

/// Wall-clock seconds. Never part of deterministic outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackTiming {
    /// Work attributable to each pair: features of its second frame, the
    /// rigid estimate and, if enabled, the residual registration.
    pub pair_secs: Vec<f64>,
    pub sequence_secs: f64,
}

#[derive(Debug, Clone)]
pub struct Tracked {
    pub motion: MotionSequence,
    pub clouds: Vec<PointCloud>,
    pub timing: TrackTiming,
}

/// Kabsch weights: each channel's mass relative to its mass in the first
/// frame, times its gain. Raw masses of different channels differ by orders
/// of magnitude, so this gives every channel a comparable vote.
pub fn relative_weights(clouds: &[PointCloud], gains: &[f64]) -> Vec<PointCloud> {
    let base = &clouds[0];
    clouds
        .iter()
        .map(|c| {
            let masses = (0..c.len())
                .map(|k| {
                    if base.is_valid(k) && c.is_valid(k) {
                        gains.get(k).copied().unwrap_or(1.0) * c.masses[k] / base.masses[k]
                    } else {
                        0.0
                    }
                })
                .collect();
            PointCloud::new(c.points.clone(), masses)
        })
        .collect()
}

/// Closed-form rigid transform between every adjacent pair of clouds.
pub fn estimate_pairwise(clouds: &[PointCloud], gains: &[f64]) -> Result<Vec<RigidTransform>> {
    if clouds.len() < 2 {
        return Err(Error::LengthMismatch(format!("need at least 2 frames, got {}", clouds.len())));
    }
    let weighted = relative_weights(clouds, gains);
    (0..clouds.len() - 1)
        .into_par_iter()
        .map(|t| {
            estimate_rigid(&weighted[t], &weighted[t + 1])
                .map(|r| r.transform)
                .map_err(|e| e.at_frame(t))
        })
        .collect()
}

fn check_sequence(frames: &[Volume]) -> Result<()> {
    if frames.len() < 2 {
        return Err(Error::LengthMismatch(format!("need at least 2 frames, got {}", frames.len())));
    }
    for f in &frames[1..] {
        frames[0].grid.ensure_same(&f.grid)?;
    }
    Ok(())
}

/// Estimates the motion of a sequence.
pub fn track(frames: &[Volume], bank: &FilterBank, params: Option<&AttentionParams>, opts: &TrackOptions) -> Result<Tracked> {
    check_sequence(frames)?;
    let start = Instant::now();
    let timed_clouds = frames
        .par_iter()
        .map(|f| {
            let t0 = Instant::now();
            representation(bank, f).map(|c| (c, t0.elapsed().as_secs_f64()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut clouds, feature_secs): (Vec<PointCloud>, Vec<f64>) = timed_clouds.into_iter().unzip();
    if let Some(params) = params {
        clouds = refine_clouds(&clouds, params, TokenFrame::for_grid(&frames[0].grid))?;
    }
    let gains = bank.gains();
    let t0 = Instant::now();
    let transforms = estimate_pairwise(&clouds, &gains)?;
    let estimate_secs = t0.elapsed().as_secs_f64() / transforms.len() as f64;
    let mut motion = MotionSequence::from_pairwise(transforms);
    let mut pair_secs: Vec<f64> = feature_secs[1..].iter().map(|s| s + estimate_secs).collect();

    if opts.diffeo {
        let fields = (0..frames.len() - 1)
            .into_par_iter()
            .map(|t| {
                let t0 = Instant::now();
                let moving = resample_rigid(&frames[t + 1], &motion.transforms[t]);
                let reg = register_svf(&moving, &frames[t], &opts.svf)?;
                Ok((reg.deformation(opts.svf.steps), t0.elapsed().as_secs_f64()))
            })
            .collect::<Result<Vec<_>>>()?;
        let (fields, secs): (Vec<_>, Vec<_>) = fields.into_iter().unzip();
        for (p, s) in pair_secs.iter_mut().zip(secs) {
            *p += s;
        }
        motion.residuals = Some(fields);
    }
    Ok(Tracked {
        motion,
        clouds,
        timing: TrackTiming {
            pair_secs,
            sequence_secs: start.elapsed().as_secs_f64(),
        },
    })
}

/// Second frame of pair `t` brought onto the first: rigidly, then through
/// the residual field if there is one.
pub fn corrected_pair(frames: &[Volume], motion: &MotionSequence, t: usize) -> Result<Volume> {
    let moved = resample_rigid(&frames[t + 1], &motion.transforms[t]);
    match &motion.residuals {
        Some(fields) => warp(&moved, &fields[t]),
        None => Ok(moved),
    }
}

/// Every frame resampled into frame-0 space.
pub fn align(frames: &[Volume], motion: &MotionSequence) -> Result<Vec<Volume>> {
    if frames.len() != motion.frames() {
        return Err(Error::LengthMismatch(format!(
            "{} frames but motion for {}",
            frames.len(),
            motion.frames()
        )));
    }
    if let Some(fields) = &motion.residuals {
        if fields.len() + 1 != frames.len() {
            return Err(Error::LengthMismatch(format!("{} residual fields for {} frames", fields.len(), frames.len())));
        }
    }
    for f in frames.iter().skip(1) {
        frames[0].grid.ensure_same(&f.grid)?;
    }
    let residuals = match &motion.residuals {
        None => {
            return Ok(frames
                .par_iter()
                .zip(&motion.accumulated)
                .map(|(f, q)| resample_rigid(f, q))
                .collect())
        }
        Some(fields) => fields,
    };
    for u in residuals {
        frames[0].grid.ensure_same(&u.grid)?;
    }
    // Chain p -> q_t(p + u_t(p)) pointwise from frame 0 and sample once.
    let grid = frames[0].grid;
    Ok(frames
        .par_iter()
        .enumerate()
        .map(|(t, f)| {
            let data = (0..grid.len())
                .into_par_iter()
                .map(|idx| {
                    let mut p = grid.world_of(idx);
                    for s in 0..t {
                        p = motion.transforms[s].apply(&(p + residuals[s].sample(&p)));
                    }
                    f.sample(&p)
                })
                .collect();
            Volume { grid, data }
        })
        .collect())
}

/// Image agreement of every adjacent pair, uncorrected and corrected.
pub fn pair_image_stats(frames: &[Volume], motion: &MotionSequence) -> Result<Vec<PairImageStats>> {
    if frames.len() != motion.frames() {
        return Err(Error::LengthMismatch(format!(
            "{} frames but motion for {}",
            frames.len(),
            motion.frames()
        )));
    }
    (0..frames.len() - 1)
        .into_par_iter()
        .map(|t| {
            let corrected = corrected_pair(frames, motion, t)?;
            Ok(PairImageStats {
                ssd_pre: ssd(&frames[t], &frames[t + 1])?,
                ssd_post: ssd(&frames[t], &corrected)?,
                ncc_pre: ncc(&frames[t], &frames[t + 1])?,
                ncc_post: ncc(&frames[t], &corrected)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub pair: usize,
    /// `|T̂_t − T*_t|` of the adjacent-pair transforms, mm.
    pub trans_err_mm: f64,
    pub ang_err_deg: f64,
    /// The same errors for the poses relative to frame 0.
    pub acc_trans_err_mm: f64,
    pub acc_ang_err_deg: f64,
    /// Overlap of aligned frame `t + 1` with the reference.
    pub dice: Option<f64>,
    pub ssd_pre: Option<f64>,
    pub ssd_post: Option<f64>,
    pub ncc_pre: Option<f64>,
    pub ncc_post: Option<f64>,
    pub secs: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (zero for a single value).
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub pairs: usize,
    pub trans_err_mm: MeanStd,
    pub ang_err_deg: MeanStd,
    pub acc_trans_err_mm: MeanStd,
    pub acc_ang_err_deg: MeanStd,
    pub dice: Option<MeanStd>,
    pub ssd_pre: Option<MeanStd>,
    pub ssd_post: Option<MeanStd>,
    pub ncc_pre: Option<MeanStd>,
    pub ncc_post: Option<MeanStd>,
    pub secs: Option<MeanStd>,
    pub sequence_secs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingReport {
    pub pairs: Vec<PairReport>,
    pub sequence_secs: Option<f64>,
}

impl TrackingReport {
    /// Compares adjacent-pair and accumulated transforms only.
    pub fn from_motion(estimated: &MotionSequence, truth: &MotionSequence) -> Result<Self> {
        if estimated.frames() != truth.frames() {
            return Err(Error::LengthMismatch(format!(
                "estimated motion has {} frames, truth has {}",
                estimated.frames(),
                truth.frames()
            )));
        }
        let pairs = (0..estimated.transforms.len())
            .map(|t| {
                let (e, g) = (&estimated.transforms[t], &truth.transforms[t]);
                let (ea, ga) = (&estimated.accumulated[t + 1], &truth.accumulated[t + 1]);
                PairReport {
                    pair: t,
                    trans_err_mm: (e.translation - g.translation).norm(),
                    ang_err_deg: geodesic_angle(&e.rotation, &g.rotation),
                    acc_trans_err_mm: (ea.translation - ga.translation).norm(),
                    acc_ang_err_deg: geodesic_angle(&ea.rotation, &ga.rotation),
                    dice: None,
                    ssd_pre: None,
                    ssd_post: None,
                    ncc_pre: None,
                    ncc_post: None,
                    secs: None,
                }
            })
            .collect();
        Ok(Self {
            pairs,
            sequence_secs: None,
        })
    }

    /// Dice of each aligned frame `t + 1` against `reference`.
    pub fn with_dice(mut self, aligned: &[Volume], reference: &Volume) -> Result<Self> {
        if aligned.len() != self.pairs.len() + 1 {
            return Err(Error::LengthMismatch(format!(
                "{} aligned frames for {} pairs",
                aligned.len(),
                self.pairs.len()
            )));
        }
        let values = aligned[1..]
            .par_iter()
            .map(|a| dice(a, reference, DICE_THRESHOLD))
            .collect::<Result<Vec<_>>>()?;
        for (p, d) in self.pairs.iter_mut().zip(values) {
            p.dice = Some(d);
        }
        Ok(self)
    }

    pub fn with_image_stats(mut self, stats: &[PairImageStats]) -> Result<Self> {
        if stats.len() != self.pairs.len() {
            return Err(Error::LengthMismatch(format!("{} image stats for {} pairs", stats.len(), self.pairs.len())));
        }
        for (p, s) in self.pairs.iter_mut().zip(stats) {
            p.ssd_pre = Some(s.ssd_pre);
            p.ssd_post = Some(s.ssd_post);
            p.ncc_pre = Some(s.ncc_pre);
            p.ncc_post = Some(s.ncc_post);
        }
        Ok(self)
    }

    pub fn with_timing(mut self, timing: &TrackTiming) -> Result<Self> {
        if timing.pair_secs.len() != self.pairs.len() {
            return Err(Error::LengthMismatch(format!(
                "{} pair timings for {} pairs",
                timing.pair_secs.len(),
                self.pairs.len()
            )));
        }
        for (p, s) in self.pairs.iter_mut().zip(&timing.pair_secs) {
            p.secs = Some(*s);
        }
        self.sequence_secs = Some(timing.sequence_secs);
        Ok(self)
    }

    pub fn summary(&self) -> ReportSummary {
        let column = |f: &dyn Fn(&PairReport) -> f64| MeanStd::of(&self.pairs.iter().map(f).collect::<Vec<_>>());
        let optional = |f: &dyn Fn(&PairReport) -> Option<f64>| {
            let values: Option<Vec<f64>> = self.pairs.iter().map(f).collect();
            values.and_then(|v| MeanStd::of(&v))
        };
        let zero = MeanStd { mean: 0.0, std: 0.0, n: 0 };
        ReportSummary {
            pairs: self.pairs.len(),
            trans_err_mm: column(&|p| p.trans_err_mm).unwrap_or(zero),
            ang_err_deg: column(&|p| p.ang_err_deg).unwrap_or(zero),
            acc_trans_err_mm: column(&|p| p.acc_trans_err_mm).unwrap_or(zero),
            acc_ang_err_deg: column(&|p| p.acc_ang_err_deg).unwrap_or(zero),
            dice: optional(&|p| p.dice),
            ssd_pre: optional(&|p| p.ssd_pre),
            ssd_post: optional(&|p| p.ssd_post),
            ncc_pre: optional(&|p| p.ncc_pre),
            ncc_post: optional(&|p| p.ncc_post),
            secs: optional(&|p| p.secs),
            sequence_secs: self.sequence_secs,
        }
    }
}

/// Transform errors per pair plus dice of the aligned frames against the
/// reference.
pub fn evaluate(estimated: &MotionSequence, truth: &MotionSequence, aligned: &[Volume], reference: &Volume) -> Result<TrackingReport> {
    TrackingReport::from_motion(estimated, truth)?.with_dice(aligned, reference)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{axis_angle, rot_x, rot_z, Vec3};
    use crate::simulator::{make_phantom, make_trajectory, synthesize, SimConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn phantom(size: usize, seed: u64) -> Volume {
        make_phantom(&SimConfig { seed, size, spacing_mm: 192.0 / size as f64, ..SimConfig::default() }).unwrap()
    }

    fn bank() -> FilterBank {
        FilterBank::default_bank()
    }

    #[test]
    fn accumulation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pairs: Vec<_> = (0..9)
            .map(|_| {
                RigidTransform::new(
                    axis_angle(&Vec3::new(rng.random(), rng.random(), rng.random()), rng.random_range(0.0..30.0)),
                    Vec3::new(rng.random(), rng.random(), rng.random()) * 10.0,
                )
            })
            .collect();
        let m = MotionSequence::from_pairwise(pairs);
        assert_eq!(m.accumulated[0], RigidTransform::identity());
        for t in 0..9 {
            assert_eq!(m.accumulated[t + 1], m.transforms[t].compose(&m.accumulated[t]));
        }
    }

    #[test]
    fn identical_frames_give_identity() {
        let p = phantom(40, 1);
        let frames = vec![p.clone(); 4];
        let out = track(&frames, &bank(), None, &TrackOptions::default()).unwrap();
        for q in &out.motion.transforms {
            assert!((q.rotation - crate::Mat3::identity()).amax() < 1e-8);
            assert!(q.translation.norm() < 1e-8);
        }
        assert_eq!(out.timing.pair_secs.len(), 3);
        let aligned = align(&frames, &out.motion).unwrap();
        assert!(aligned.iter().zip(&frames).all(|(a, f)| (a.data.iter().zip(&f.data)).all(|(x, y)| (x - y).abs() < 1e-6)));
    }

    #[test]
    fn identity_motion_aligns_to_input() {
        let p = phantom(40, 2);
        let frames = vec![p.clone(), p.map(|x| 0.5 * x)];
        let aligned = align(&frames, &MotionSequence::identity(2)).unwrap();
        assert_eq!(aligned, frames);
    }

    #[test]
    fn recovers_single_rigid_motion() {
        let p = phantom(64, 3);
        let q = RigidTransform::new(axis_angle(&Vec3::new(1.0, -2.0, 0.5), 4.0), Vec3::new(3.0, -2.0, 1.5));
        let frames = vec![p.clone(), resample_rigid(&p, &q.inverse())];
        let out = track(&frames, &bank(), None, &TrackOptions::default()).unwrap();
        let e = &out.motion.transforms[0];
        assert!((e.translation - q.translation).norm() < 1.0, "{}", (e.translation - q.translation).norm());
        // single pairs scatter around the sub-degree sequence mean
        assert!(geodesic_angle(&e.rotation, &q.rotation) < 1.5, "{}", geodesic_angle(&e.rotation, &q.rotation));
    }

    #[test]
    fn integer_voxel_shift_is_exact() {
        let p = phantom(64, 4);
        let q = RigidTransform::from_translation(Vec3::new(6.0, 0.0, -3.0));
        let frames = vec![p.clone(), resample_rigid(&p, &q.inverse())];
        let out = track(&frames, &bank(), None, &TrackOptions::default()).unwrap();
        let e = &out.motion.transforms[0];
        assert!((e.translation - q.translation).norm() < 1e-6, "{}", (e.translation - q.translation).norm());
        assert!(geodesic_angle(&e.rotation, &q.rotation) < 1e-6, "{}", geodesic_angle(&e.rotation, &q.rotation));
    }

    #[test]
    fn reverse_sequence_gives_inverse_pairs() {
        let cfg = SimConfig { seed: 5, size: 48, spacing_mm: 4.0, frames: 4, ..SimConfig::default() };
        let phantom = make_phantom(&cfg).unwrap();
        let (frames, _) = synthesize(&phantom, &make_trajectory(&cfg).unwrap(), &cfg).unwrap();
        let forward = track(&frames, &bank(), None, &TrackOptions::default()).unwrap().motion;
        let mut rev = frames.clone();
        rev.reverse();
        let backward = track(&rev, &bank(), None, &TrackOptions::default()).unwrap().motion;
        let n = forward.transforms.len();
        for t in 0..n {
            let round = forward.transforms[t].compose(&backward.transforms[n - 1 - t]);
            assert!(round.translation.norm() < 0.25, "{}", round.translation.norm());
            assert!(round.angle_deg() < 0.25, "{}", round.angle_deg());
        }
    }

    #[test]
    fn degenerate_pair_reports_frame() {
        let grid = crate::Grid::cube(40, 4.8).unwrap();
        let blank = Volume::zeros(grid);
        let p = phantom(40, 6);
        let frames = vec![p.clone(), p.clone(), blank];
        match track(&frames, &bank(), None, &TrackOptions::default()) {
            Err(Error::DegenerateGeometry { frame: Some(1), .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ground_truth_alignment_overlaps() {
        let cfg = SimConfig { seed: 7, size: 48, spacing_mm: 4.0, frames: 5, t_max_mm: 10.0, r_max_deg: 5.0, ..SimConfig::default() };
        let phantom = make_phantom(&cfg).unwrap();
        let traj = make_trajectory(&cfg).unwrap();
        let (frames, truth) = synthesize(&phantom, &traj, &cfg).unwrap();
        let aligned = align(&frames, &truth).unwrap();
        let report = evaluate(&truth, &truth, &aligned, &phantom).unwrap();
        let s = report.summary();
        assert_eq!(s.trans_err_mm.mean, 0.0);
        assert_eq!(s.ang_err_deg.mean, 0.0);
        assert!(s.dice.unwrap().mean > 0.95, "{:?}", s.dice);

        let unaligned = evaluate(&truth, &truth, &frames, &phantom).unwrap().summary();
        let est = track(&frames, &bank(), None, &TrackOptions::default()).unwrap().motion;
        let est_aligned = align(&frames, &est).unwrap();
        let tracked = evaluate(&est, &truth, &est_aligned, &phantom).unwrap().summary();
        assert!(tracked.dice.unwrap().mean >= unaligned.dice.unwrap().mean);
    }

    #[test]
    fn shift_error_is_exact() {
        let truth = MotionSequence::from_pairwise(vec![RigidTransform::from_translation(Vec3::new(10.0, 0.0, 0.0))]);
        let r = TrackingReport::from_motion(&MotionSequence::identity(2), &truth).unwrap();
        assert_eq!(r.pairs[0].trans_err_mm, 10.0);
        assert_eq!(r.pairs[0].ang_err_deg, 0.0);
        assert!(TrackingReport::from_motion(&MotionSequence::identity(3), &truth).is_err());
    }

    #[test]
    fn perturbation_errors_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let truth: Vec<_> = (0..6)
            .map(|_| RigidTransform::new(axis_angle(&Vec3::new(rng.random(), 1.0, rng.random()), rng.random_range(1.0..20.0)), Vec3::new(rng.random(), rng.random(), rng.random()) * 20.0))
            .collect();
        let deltas: Vec<_> = (0..6)
            .map(|_| {
                let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                (rng.random_range(0.1..5.0), axis, Vec3::new(rng.random(), rng.random(), rng.random()) * 3.0)
            })
            .collect();
        // rotate about the truth's own rotation, shift the translation directly
        let est: Vec<_> = truth
            .iter()
            .zip(&deltas)
            .map(|(q, (deg, axis, dt))| RigidTransform::new(axis_angle(axis, *deg) * q.rotation, q.translation + dt))
            .collect();
        let r = TrackingReport::from_motion(&MotionSequence::from_pairwise(est), &MotionSequence::from_pairwise(truth)).unwrap();
        for (p, (deg, _, dt)) in r.pairs.iter().zip(&deltas) {
            assert!((p.trans_err_mm - dt.norm()).abs() < 1e-9);
            assert!((p.ang_err_deg - deg).abs() < 1e-9);
        }
    }

    #[test]
    fn summary_statistics() {
        let truth = MotionSequence::from_pairwise(vec![
            RigidTransform::from_translation(Vec3::new(1.0, 0.0, 0.0)),
            RigidTransform::from_translation(Vec3::new(0.0, 3.0, 0.0)),
            RigidTransform::from_rotation(rot_x(10.0)),
        ]);
        let s = TrackingReport::from_motion(&MotionSequence::identity(4), &truth).unwrap().summary();
        assert!((s.trans_err_mm.mean - 4.0 / 3.0).abs() < 1e-12);
        let var = ((1.0 - 4.0 / 3.0f64).powi(2) + (3.0 - 4.0 / 3.0f64).powi(2) + (4.0 / 3.0f64).powi(2)) / 2.0;
        assert!((s.trans_err_mm.std - var.sqrt()).abs() < 1e-12);
        assert!((s.ang_err_deg.mean - 10.0 / 3.0).abs() < 1e-12);
        assert!(s.dice.is_none());
        assert_eq!(MeanStd::of(&[2.0]).unwrap().std, 0.0);
    }

    #[test]
    fn residual_alignment_without_fields_matches_rigid() {
        let p = phantom(40, 9);
        let q = RigidTransform::new(rot_z(5.0), Vec3::new(2.0, 0.0, 1.0));
        let frames = vec![p.clone(), resample_rigid(&p, &q.inverse()), resample_rigid(&p, &q.compose(&q).inverse())];
        let mut m = MotionSequence::from_pairwise(vec![q, q]);
        let rigid = align(&frames, &m).unwrap();
        m.residuals = Some(vec![DeformationField::zeros(p.grid); 2]);
        let chained = align(&frames, &m).unwrap();
        for (a, b) in rigid.iter().zip(&chained) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| (x - y).abs() < 1e-9));
        }
    }

    #[test]
    fn diffeo_lowers_pair_ssd() {
        let cfg = SimConfig { seed: 11, size: 40, spacing_mm: 4.8, frames: 3, t_max_mm: 6.0, r_max_deg: 3.0, distortion_mm: 2.0, ..SimConfig::default() };
        let phantom = make_phantom(&cfg).unwrap();
        let (frames, _) = synthesize(&phantom, &make_trajectory(&cfg).unwrap(), &cfg).unwrap();
        let rigid = track(&frames, &bank(), None, &TrackOptions::default()).unwrap().motion;
        let opts = TrackOptions { diffeo: true, ..TrackOptions::default() };
        let full = track(&frames, &bank(), None, &opts).unwrap().motion;
        assert_eq!(full.transforms, rigid.transforms);
        let a = pair_image_stats(&frames, &rigid).unwrap();
        let b = pair_image_stats(&frames, &full).unwrap();
        for (r, f) in a.iter().zip(&b) {
            assert!(f.ssd_post < r.ssd_post);
            assert_eq!(f.ssd_pre, r.ssd_pre);
        }
        assert_eq!(align(&frames, &full).unwrap().len(), 3);
    }
}
