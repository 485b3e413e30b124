//! Temporal refinement of per-frame point clouds: sinusoidal frame encoding,
//! a small self-attention stack with its own reverse pass, training against
//! ground-truth motion, and the model file format.

mod attention;
mod encoding;
mod model;
mod train;

pub use attention::{
    attend, backward, forward, gradient, AttentionParams, Block, Forward, TokenSequence, DEFAULT_HEADS, FF_EXPANSION, LAYERS,
};
pub use encoding::{encoding_for_times, frequency, positional_encoding, PositionalEncoding};
pub use model::{load_model, meta_path, save_model, Model, ModelMeta, MODEL_MAGIC, MODEL_VERSION};
pub use train::{learning_rate_at, prepare_example, train, EpochLog, PreparedExample, TrainConfig, TrainOutcome, TrainingExample};

use nalgebra::DMatrix;

use crate::eqfeatures::PointCloud;
use crate::error::Result;
use crate::volume::Grid;

/// Maps world points into attention units: relative to the grid center and
/// divided by the largest half extent. Channels without mass become zeros.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenFrame {
    pub center: crate::Vec3,
    pub scale: f64,
}

impl TokenFrame {
    pub fn for_grid(grid: &Grid) -> Self {
        Self {
            center: grid.center(),
            scale: grid.half_extent(),
        }
    }

    pub fn tokens(&self, clouds: &[PointCloud]) -> TokenSequence {
        let d = 3 * clouds.first().map_or(0, |c| c.len());
        let tokens = DMatrix::from_fn(clouds.len(), d, |t, c| {
            let cloud = &clouds[t];
            let k = c / 3;
            if cloud.is_valid(k) {
                (cloud.points[k][c % 3] - self.center[c % 3]) / self.scale
            } else {
                0.0
            }
        });
        TokenSequence::new(tokens)
    }
}

/// Refines every frame's cloud with the attention stack. Points move by the
/// token update rescaled to mm, so an update of exactly zero leaves the
/// clouds bitwise unchanged. Masses are kept.
pub fn refine_clouds(clouds: &[PointCloud], params: &AttentionParams, frame: TokenFrame) -> Result<Vec<PointCloud>> {
    let seq = frame.tokens(clouds);
    let z = attend(&seq, params)?;
    Ok(clouds
        .iter()
        .enumerate()
        .map(|(t, cloud)| {
            let points = cloud
                .points
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    let delta = crate::Vec3::new(
                        z.tokens[(t, 3 * k)] - seq.tokens[(t, 3 * k)],
                        z.tokens[(t, 3 * k + 1)] - seq.tokens[(t, 3 * k + 1)],
                        z.tokens[(t, 3 * k + 2)] - seq.tokens[(t, 3 * k + 2)],
                    );
                    p + delta * frame.scale
                })
                .collect();
            PointCloud::new(points, cloud.masses.clone())
        })
        .collect())
}
