//! Rigid motion tracking for temporal sequences of 3D volumes.
//!
//! Each frame is reduced to a small cloud of weighted points (centroids of
//! rotation-equivariant filter channels). Adjacent clouds are aligned in
//! closed form, optionally after a self-attention refinement over the whole
//! sequence, and remaining local distortion can be absorbed by a
//! diffeomorphic registration step.

pub mod diffeo;
pub mod eqfeatures;
pub mod error;
pub mod geometry;
pub mod io;
mod par;
pub mod procrustes;
pub mod simulator;
pub mod temporal;
pub mod tracker;
pub mod volume;

pub use eqfeatures::{ChannelKind, ChannelSpec, FilterBank, PointCloud};
pub use error::{Error, Result};
pub use geometry::{Mat3, RigidTransform, Vec3};
pub use procrustes::{estimate_rigid, AlignmentResult};
pub use simulator::SimConfig;
pub use temporal::{AttentionParams, TokenSequence, TrainConfig};
pub use tracker::{align, evaluate, track, MotionSequence, TrackOptions, TrackingReport};
pub use volume::{Grid, Volume};
