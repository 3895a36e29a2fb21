//! Evaluation metrics. Everything except classifier inference runs in f64.

pub mod classifier;
pub mod features;
pub mod fid;
pub mod linalg;
pub mod report;
pub mod ssim;

pub use classifier::{train_condition_classifier, Accuracy, ClassifierConfig, ConditionClassifier};
pub use features::{FeatureExtractor, RandomConv, FEATURE_DIM};
pub use fid::{fid, FeatureStats};
pub use linalg::{matrix_sqrt_psd, symmetric_eigen, trace_sqrt_psd, Matrix};
pub use report::CellTable;
pub use ssim::{diversity_report, ms_ssim, ssim, DiversityReport, GrayImage, SsimParams};

use lphom_tensor::Tensor;

use crate::error::Result;

/// Feature statistics of a set of `(1, S, S)` images.
pub fn feature_stats(images: &[Tensor<f32>], extractor: &FeatureExtractor) -> Result<FeatureStats> {
    FeatureStats::from_features(&extractor.extract(images)?)
}

/// Convert a `(1, H, W)` tensor to an f64 image.
pub fn gray_image(t: &Tensor<f32>) -> Result<GrayImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(crate::error::Error::InvalidArgument(format!("expected a (1, H, W) image, got {s:?}")));
    }
    GrayImage::from_f32(s[2], s[1], t.data())
}
