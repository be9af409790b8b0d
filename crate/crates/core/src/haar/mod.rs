//! Boosted Haar-feature cascade: integral images, rectangle features,
//! AdaBoost stumps, stage training with hard-negative mining, and
//! multi-scale detection.

mod boost;
mod cascade;
mod detect;
mod feature;
mod integral;

use thiserror::Error;

pub use boost::{
    stage_threshold, train_stage, train_weak, vote_weight, Booster, FeatureMatrix, Round, StageFit, StageTargets, Stump,
};
pub use cascade::{
    pyramid_scales, train_cascade, Cascade, CascadeConfig, ScaledCascade, Stage, StageReport, WeakClassifier,
    WindowRef, WindowResult,
};
pub use detect::{detect, group, iou, scan, Detection, ScanConfig};
pub use feature::{enumerate_features, enumerate_kind, eval_feature, scaled_side, FeatureKind, HaarFeature, ScaledFeature};
pub use integral::{IntegralImage, Rect};

#[derive(Debug, Error)]
pub enum HaarError {
    #[error("image has no pixels")]
    EmptyImage,
    #[error("pixel buffer holds {actual} bytes, expected {expected}")]
    PixelCount { expected: usize, actual: usize },
    #[error("rectangle {rect:?} exceeds image size {size:?}")]
    OutOfBounds { rect: Rect, size: [usize; 2] },
    #[error("image {size:?} is smaller than the {window}px base window")]
    ImageTooSmall { size: [usize; 2], window: usize },
    #[error("no {0} to train on")]
    EmptySet(&'static str),
    #[error("{0}")]
    Config(String),
}
