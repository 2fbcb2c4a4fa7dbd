//! Training losses and detection metrics.

mod losses;
mod metrics;

pub use losses::{
    age2e, age2e_loss, am_softmax, bce, bce_loss, combined, combined_loss, focal, focal_loss, softmax_ce,
    AmSoftmaxConfig, FocalConfig, TrialBatchScores, TrialScore, PROB_CLAMP,
};
pub use metrics::{
    adcf_soft, adcf_soft_at, adcf_soft_value, dcf_beta, det_points, eer, min_dcf, operating_points,
    soft_dcf_grid, DcfConfig,
};
