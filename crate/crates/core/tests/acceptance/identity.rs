//! With tag amplitude 0 the tagged image equals the cine image, so the
//! translation is the identity and should be learned quickly.

use dcbv::dataset::DatasetConfig;
use dcbv::metrics::evaluate;
use dcbv::model::NetworkConfig;
use dcbv::objectives::Method;
use dcbv::phantom::TagPattern;
use dcbv::trainer::{fit, FitOptions, TrainConfig};

use crate::common::{desk_config, splits};
use crate::Verdict;

pub const STEPS: u64 = 1000;
pub const TARGET: f64 = 0.95;

pub fn run() -> Verdict {
    let data = splits(&DatasetConfig {
        tag: TagPattern {
            amplitude: 0.0,
            ..TagPattern::default()
        },
        ..DatasetConfig::default()
    });
    let identical = data.test.iter().all(|s| s.tagged == s.cine);
    let cfg = TrainConfig {
        method: Method::Proposed,
        steps: STEPS,
        ..desk_config()
    };
    let opts = FitOptions {
        skip_validation: true,
        ..FitOptions::default()
    };
    let state = fit::<f32>(&data.train, &[], &NetworkConfig::default(), &cfg, &opts)
        .expect("fit")
        .state;
    let report = evaluate(&state.model, &data.test, None).expect("evaluate").report;
    Verdict::new(
        identical && report.ssim_mean >= TARGET,
        format!(
            "tagged equals cine: {identical}; after {STEPS} steps test SSIM {:.4} (target {TARGET}), PSNR {:.2} dB",
            report.ssim_mean, report.psnr_mean
        ),
    )
}
