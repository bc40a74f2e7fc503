//! Verification error rates and reconstruction quality.

mod quality;
mod verification;

pub use quality::{si_sdr, stoi_like, StoiConfig, SI_SDR_CAP_DB};
pub use verification::{det_curve, eer, min_dcf, DcfParams, DetCurvePoint, LabeledScore};
