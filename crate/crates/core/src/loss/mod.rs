//! Loss terms and the per-stage objectives built from them.

pub mod stage;
pub mod terms;

pub use stage::{
    stage1_loss, stage1_total, stage2_depth_total, stage2_loss, stage2_seg_total, AuxDecoder,
    AuxTarget, LossOptions, LossReport, ModelAux, Stage, StageLoss,
};
pub use terms::{
    cycle_consistency, gaussian_nll, kl_to_standard_normal, mmd, pixelwise_cross_entropy,
    recon_mse, MmdKernel,
};
