//! Losses, metrics, Adam, pruning/densification and the training loop.

pub mod adam;
pub mod config;
pub mod densify;
pub mod loss;
pub mod train;

pub use adam::{Adam, LearningRates};
pub use config::TrainConfig;
pub use densify::{densify, occlusion_footprint, prune, subdivide, IntervalStats};
pub use loss::{dssim, loss_total, psnr, ssim, LossTerms};
pub use train::{
    evaluate, render_view, train, train_step, Dataset, EvalRow, MetricsLog, MetricsRow, TrainState,
    View,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("image shapes differ: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("dataset has no training views")]
    DatasetEmpty,
    #[error(
        "loss non-finite for {} consecutive iterations (last at {iteration})",
        train::DIVERGENCE_PATIENCE
    )]
    Diverged { iteration: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Observer(String),
}
