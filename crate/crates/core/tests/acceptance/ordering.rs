//! The four-method comparison on the default phantom dataset, repeated for
//! three training seeds. Both the ranking criterion and the organ-overlap
//! probe read the same runs.

use std::sync::OnceLock;

use dcbv::comparison::{compare_methods, ComparisonData};
use dcbv::model::NetworkConfig;
use dcbv::objectives::Method;
use dcbv::trainer::TrainConfig;
use dcbv::Image;

use crate::common::{default_dataset, desk_config};
use crate::Verdict;

pub const SEEDS: [u64; 3] = [0, 1, 2];
/// Training steps per method and seed.
pub const STEPS: u64 = 2000;

struct Scores {
    ssim: f64,
    psnr: f64,
    dice: f64,
}

struct SeedRun {
    seed: u64,
    /// In `Method::ALL` order.
    scores: Vec<(Method, Scores)>,
}

impl SeedRun {
    fn get(&self, m: Method) -> &Scores {
        &self.scores.iter().find(|(k, _)| *k == m).expect("every method ran").1
    }

    /// proposed > pix2pix > both VAE baselines on one metric.
    fn ranked(&self, metric: fn(&Scores) -> f64) -> bool {
        let v = |m| metric(self.get(m));
        v(Method::Proposed) > v(Method::Pix2Pix)
            && v(Method::Pix2Pix) > v(Method::VaeGan)
            && v(Method::Pix2Pix) > v(Method::VaeOnly)
    }
}

static RUNS: OnceLock<Result<Vec<SeedRun>, String>> = OnceLock::new();

fn runs() -> &'static Result<Vec<SeedRun>, String> {
    RUNS.get_or_init(|| {
        let data = default_dataset(0);
        let masks: Vec<Image> = data
            .test
            .iter()
            .map(|s| data.manifest.organ_mask(s.subject_id, s.frame_id).expect("mask"))
            .collect();
        let input = ComparisonData {
            train: &data.train,
            val: &data.val,
            test: &data.test,
            masks: Some(&masks),
        };
        let net = NetworkConfig::default();
        let mut out = Vec::new();
        for seed in SEEDS {
            let cfg = TrainConfig {
                seed,
                steps: STEPS,
                ..desk_config()
            };
            let mut scores = Vec::new();
            for (method, result) in compare_methods(&Method::ALL, input, &net, &cfg, None, None) {
                let r = result.map_err(|e| format!("seed {seed} {method}: {e}"))?;
                let dice = r.overlap.expect("masks given").0;
                scores.push((
                    method,
                    Scores {
                        ssim: r.report.ssim_mean,
                        psnr: r.report.psnr_mean,
                        dice,
                    },
                ));
            }
            out.push(SeedRun { seed, scores });
        }
        Ok(out)
    })
}

fn table(runs: &[SeedRun], metric: fn(&Scores) -> f64, digits: usize) -> String {
    runs.iter()
        .map(|r| {
            let cells: Vec<String> = r
                .scores
                .iter()
                .map(|(m, s)| format!("{m} {:.*}", digits, metric(s)))
                .collect();
            format!("seed {}: {}", r.seed, cells.join(", "))
        })
        .collect::<Vec<_>>()
        .join("; ")
}

pub fn run_ordering() -> Verdict {
    let runs = match runs() {
        Ok(r) => r,
        Err(e) => return Verdict::new(false, format!("comparison failed: {e}")),
    };
    let passing: Vec<u64> = runs
        .iter()
        .filter(|r| r.ranked(|s| s.ssim) && r.ranked(|s| s.psnr))
        .map(|r| r.seed)
        .collect();
    if std::env::var_os("DCBV_ACCEPTANCE_VERBOSE").is_some() {
        eprintln!("  ssim  {}", table(runs, |s| s.ssim, 4));
        eprintln!("  psnr  {}", table(runs, |s| s.psnr, 3));
    }
    Verdict::new(
        2 * passing.len() > runs.len(),
        format!(
            "{STEPS} steps per method, ranking holds on SSIM and PSNR for seeds {passing:?} of {SEEDS:?}; \
             SSIM {}; PSNR {}",
            table(runs, |s| s.ssim, 4),
            table(runs, |s| s.psnr, 2)
        ),
    )
}

pub fn run_structure() -> Verdict {
    let runs = match runs() {
        Ok(r) => r,
        Err(e) => return Verdict::new(false, format!("comparison failed: {e}")),
    };
    let passing: Vec<u64> = runs
        .iter()
        .filter(|r| r.get(Method::Proposed).dice > r.get(Method::VaeGan).dice)
        .map(|r| r.seed)
        .collect();
    let detail: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "seed {}: proposed {:.4} vs vae_gan {:.4}",
                r.seed,
                r.get(Method::Proposed).dice,
                r.get(Method::VaeGan).dice
            )
        })
        .collect();
    Verdict::new(
        2 * passing.len() > runs.len(),
        format!(
            "organ Dice higher for proposed on seeds {passing:?} of {SEEDS:?}; {}",
            detail.join("; ")
        ),
    )
}
