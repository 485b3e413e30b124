use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::attention::{gradient, AttentionParams, TokenSequence, DEFAULT_HEADS};
use super::{refine_clouds, TokenFrame};
use crate::eqfeatures::{representation, FilterBank, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use crate::tracker::estimate_pairwise;
use crate::volume::{resample_rigid, ssd, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Weight of the deformation smoothness term in the logged image objective.
    pub beta: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Cosine annealing of the learning rate over all optimizer steps.
    pub cosine: bool,
    pub weight_decay: f64,
    pub heads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 4,
            beta: 0.5,
            epochs: 20,
            seed: 0,
            cosine: true,
            weight_decay: 1e-4,
            heads: DEFAULT_HEADS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return fail(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        if !(self.beta >= 0.0) {
            return fail(format!("beta must be non-negative, got {}", self.beta));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        Ok(())
    }
}

/// Learning rate for optimizer step `step` of `total` (0-based).
pub fn learning_rate_at(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    if !cfg.cosine || total == 0 {
        return cfg.learning_rate;
    }
    0.5 * cfg.learning_rate * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// One simulated sequence: its frames, the pose of every frame and the
/// motion-free reference volume the frames were generated from.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub frames: Vec<Volume>,
    pub trajectory: Vec<RigidTransform>,
    pub reference: Volume,
}

/// Features and surrogate targets of one example, in attention units.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub clouds: Vec<PointCloud>,
    pub tokens: TokenSequence,
    pub targets: DMatrix<f64>,
    /// 1 where both the frame and the reference channel carry mass.
    pub mask: DMatrix<f64>,
    pub frame: TokenFrame,
}

impl PreparedExample {
    /// Mean squared token error over valid coordinates, and its gradient.
    pub fn loss(&self, z: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let count = self.mask.sum().max(1.0);
        let diff = (z - &self.targets).component_mul(&self.mask);
        (diff.norm_squared() / count, diff * (2.0 / count))
    }
}

pub fn prepare_example(example: &TrainingExample, bank: &FilterBank) -> Result<PreparedExample> {
    if example.frames.len() != example.trajectory.len() || example.frames.len() < 2 {
        return Err(Error::LengthMismatch(format!(
            "{} frames with {} poses",
            example.frames.len(),
            example.trajectory.len()
        )));
    }
    let grid = example.reference.grid;
    let frame = TokenFrame::for_grid(&grid);
    let reference = representation(bank, &example.reference)?;
    let clouds = example
        .frames
        .par_iter()
        .map(|f| {
            grid.ensure_same(&f.grid)?;
            representation(bank, f)
        })
        .collect::<Result<Vec<_>>>()?;
    let expected: Vec<PointCloud> = example.trajectory.iter().map(|q| reference.transformed(q)).collect();
    let tokens = frame.tokens(&clouds);
    let targets = frame.tokens(&expected).tokens;
    let mask = DMatrix::from_fn(clouds.len(), 3 * reference.len(), |t, c| {
        let k = c / 3;
        if clouds[t].is_valid(k) && reference.is_valid(k) {
            1.0
        } else {
            0.0
        }
    });
    Ok(PreparedExample {
        clouds,
        tokens,
        targets,
        mask,
        frame,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 0 is the untrained model.
    pub epoch: usize,
    /// Mean surrogate loss over the epoch's batches, without weight decay.
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean ssd between rigidly aligned adjacent validation frames.
    pub val_dist: f64,
    /// Smoothness of the residual deformation (zero without one).
    pub val_geo: f64,
    /// `val_dist + beta * val_geo`.
    pub val_objective: f64,
    /// Learning rate of the last step of the epoch.
    pub learning_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation surrogate loss.
    pub params: AttentionParams,
    /// The filter bank. Gains get no gradient from the token surrogate and are
    /// returned unchanged.
    pub bank: FilterBank,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
}

fn mean_loss(params: &AttentionParams, set: &[PreparedExample]) -> Result<f64> {
    let seqs: Vec<TokenSequence> = set.iter().map(|e| e.tokens.clone()).collect();
    let (total, _) = gradient(params, &seqs, |i, z| set[i].loss(z), 0.0)?;
    Ok(total / set.len() as f64)
}

fn image_objective(params: &AttentionParams, set: &[PreparedExample], frames: &[&[Volume]], gains: &[f64]) -> Result<f64> {
    let per_example = set
        .iter()
        .zip(frames)
        .map(|(e, frames)| {
            let refined = refine_clouds(&e.clouds, params, e.frame)?;
            let pairs = estimate_pairwise(&refined, &gains)?;
            let total: f64 = pairs
                .par_iter()
                .enumerate()
                .map(|(t, q)| ssd(&resample_rigid(&frames[t + 1], q), &frames[t]))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .sum();
            Ok(total / pairs.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per_example.iter().sum::<f64>() / per_example.len() as f64)
}

struct Adam {
    m: AttentionParams,
    v: AttentionParams,
    step: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &AttentionParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut AttentionParams, grad: &AttentionParams, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::B1.powi(self.step);
        let c2 = 1.0 - Self::B2.powi(self.step);
        let tensors = params.tensors_mut().into_iter().zip(self.m.tensors_mut()).zip(self.v.tensors_mut());
        for ((p, (m, v)), g) in tensors.map(|((p, m), v)| (p, (m, v))).zip(grad.tensors()) {
            for i in 0..p.len() {
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * g[i];
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Adam on the token surrogate with L2 weight decay, mini-batches drawn in
/// a seeded order. Every epoch logs the training and validation surrogate
/// losses and the image-space objective on the validation sequences.
pub fn train(
    training: &[TrainingExample],
    validation: &[TrainingExample],
    bank: &FilterBank,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if training.is_empty() || validation.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let prepare = |set: &[TrainingExample]| set.iter().map(|e| prepare_example(e, bank)).collect::<Result<Vec<_>>>();
    let train_set = prepare(training)?;
    let val_set = prepare(validation)?;
    let gains = bank.gains();
    let val_frames: Vec<&[Volume]> = validation.iter().map(|e| e.frames.as_slice()).collect();
    let d = train_set[0].tokens.width();
    if train_set.iter().chain(&val_set).any(|e| e.tokens.width() != d) {
        return Err(Error::ShapeMismatch("examples have different channel counts".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = AttentionParams::init(d, cfg.heads, &mut rng)?;
    let mut adam = Adam::new(&params);
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;

    let log = |epoch: usize, params: &AttentionParams, train_loss: f64, lr: f64| -> Result<EpochLog> {
        let val_loss = mean_loss(params, &val_set)?;
        let val_dist = image_objective(params, &val_set, &val_frames, &gains)?;
        let val_geo = 0.0;
        Ok(EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_dist,
            val_geo,
            val_objective: val_dist + cfg.beta * val_geo,
            learning_rate: lr,
        })
    };

    let initial = log(0, &params, mean_loss(&params, &train_set)?, learning_rate_at(cfg, 0, total_steps))?;
    let mut best = (initial.val_loss, 0, params.clone());
    let mut history = vec![initial];
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut lr = cfg.learning_rate;
        for batch in order.chunks(cfg.batch_size) {
            let seqs: Vec<TokenSequence> = batch.iter().map(|&i| train_set[i].tokens.clone()).collect();
            let n = batch.len() as f64;
            let result = gradient(
                &params,
                &seqs,
                |i, z| {
                    let (l, g) = train_set[batch[i]].loss(z);
                    (l / n, g / n)
                },
                cfg.weight_decay,
            );
            let (value, grad) = result.map_err(|_| Error::DivergenceDetected { epoch, loss: f64::NAN })?;
            epoch_loss += (value - cfg.weight_decay * params.squared_norm()) * n;
            lr = learning_rate_at(cfg, step, total_steps);
            adam.update(&mut params, &grad, lr);
            step += 1;
        }
        if !params.is_finite() {
            return Err(Error::DivergenceDetected { epoch, loss: f64::NAN });
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let entry = log(epoch, &params, train_loss, lr).map_err(|e| match e {
            Error::NonFiniteGradient(_) | Error::NonFiniteInput(_) | Error::DegenerateGeometry { .. } => {
                Error::DivergenceDetected { epoch, loss: train_loss }
            }
            other => other,
        })?;
        if !entry.val_loss.is_finite() || !entry.train_loss.is_finite() {
            return Err(Error::DivergenceDetected { epoch, loss: entry.val_loss });
        }
        if entry.val_loss < best.0 {
            best = (entry.val_loss, epoch, params.clone());
        }
        history.push(entry);
    }
    Ok(TrainOutcome {
        params: best.2,
        bank: bank.clone(),
        best_epoch: best.1,
        history,
    })
}
