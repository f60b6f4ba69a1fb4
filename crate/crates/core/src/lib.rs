//! Self-ensemble label correction for training classifiers on noisy labels.
//!
//! Targets start at the observed one-hot labels and are pulled toward the
//! model's own predictions by an exponential moving average once training
//! passes the turning point, where the network would otherwise begin to
//! memorize the wrong labels. The turning point is estimated from the shape
//! of the per-sample training-loss distribution.

pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod format;
pub mod loss;
pub mod metrics;
pub mod mlp;
pub mod noise;
pub mod optim;
pub mod rng;
pub mod selc;
pub mod tensor;
pub mod train;
pub mod turning_point;

pub use error::{Result, SelcError};
pub use selc::{EnsembleState, PredictionSnapshot, TargetMode};
pub use tensor::Matrix2D;
