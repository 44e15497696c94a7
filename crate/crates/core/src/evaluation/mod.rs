//! Image quality metrics, hardware baselines, the color-inversion analysis,
//! trade-off sweeps and feature export.

mod baselines;
mod export;
mod iqa;
mod plane;
mod preliminary;
mod sweep;

pub use baselines::{defocus, defocus_tensor, low_resolution, low_resolution_tensor, Baseline};
pub use export::{export_features, read_features, FeatureRow};
pub use iqa::{iqa, masked_out_mean, masked_psnr, psnr_from_mse, IqaReport, MS_SSIM_WEIGHTS, PSNR_CAP};
pub use preliminary::{invert, preliminary_inversion_analysis, InversionReport, VERIFICATION_THRESHOLD};
pub use sweep::{
    dominates, mark_pareto, tradeoff_sweep, write_sweep_csv, write_sweep_svg, SweepPoint,
};
