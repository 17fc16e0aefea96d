//! Metrics against direct-definition oracles written independently of the
//! library, plus the closed-form Inception Score cases.

use dcbv::image::Image;
use dcbv::metrics::{inception_score_from_probs, l1_table, psnr, ssim};
use dcbv::rng::{hash_str, rng_for};
use rand::Rng;

use crate::Verdict;

pub const TOLERANCE: f64 = 1e-6;
pub const PAIRS: usize = 100;
const SIDE: usize = 16;

fn oracle_l1(a: &Image, b: &Image) -> f64 {
    let mut total = 0.0;
    for y in 0..SIDE {
        for x in 0..SIDE {
            total += (255.0 * a.get(y, x) - 255.0 * b.get(y, x)).abs();
        }
    }
    total / (SIDE * SIDE) as f64
}

fn oracle_psnr(a: &Image, b: &Image) -> f64 {
    let mut se = 0.0;
    for y in 0..SIDE {
        for x in 0..SIDE {
            se += (a.get(y, x) - b.get(y, x)).powi(2);
        }
    }
    let mse = se / (SIDE * SIDE) as f64;
    10.0 * (1.0 / mse).log10()
}

/// Windowed SSIM with an explicit 11×11 Gaussian weight matrix, central
/// moments summed directly at every fully contained window position.
#[allow(clippy::needless_range_loop)]
fn oracle_ssim(a: &Image, b: &Image) -> f64 {
    const K: usize = 11;
    let sigma: f64 = 1.5;
    let mut w = [[0.0f64; K]; K];
    let mut norm = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            norm += *v;
        }
    }
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let positions = SIDE - K + 1;
    let mut total = 0.0;
    for oy in 0..positions {
        for ox in 0..positions {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..K {
                for j in 0..K {
                    ma += w[i][j] / norm * a.get(oy + i, ox + j);
                    mb += w[i][j] / norm * b.get(oy + i, ox + j);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..K {
                for j in 0..K {
                    let da = a.get(oy + i, ox + j) - ma;
                    let db = b.get(oy + i, ox + j) - mb;
                    va += w[i][j] / norm * da * da;
                    vb += w[i][j] / norm * db * db;
                    cov += w[i][j] / norm * da * db;
                }
            }
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    total / (positions * positions) as f64
}

/// Pair `i`: a random image and a copy degraded by noise whose strength
/// grows with `i`, so SSIM and PSNR span a wide range.
fn pair(i: usize) -> (Image, Image) {
    let mut rng = rng_for(7, &[hash_str("metric-pairs"), i as u64]);
    let mut a = Image::filled(SIDE, SIDE, 0.0);
    for v in a.data_mut() {
        *v = rng.gen_range(0.0..1.0);
    }
    let strength = (i + 1) as f64 / PAIRS as f64;
    let mut b = a.clone();
    for v in b.data_mut() {
        *v = (*v + strength * rng.gen_range(-1.0..1.0)).clamp(0.0, 1.0);
    }
    (a, b)
}

pub fn run() -> Verdict {
    let mut worst = [0.0f64; 3];
    for i in 0..PAIRS {
        let (a, b) = pair(i);
        let errs = [
            (l1_table(&a, &b).expect("dims") - oracle_l1(&a, &b)).abs(),
            (ssim(&a, &b).expect("dims") - oracle_ssim(&a, &b)).abs(),
            (psnr(&a, &b).expect("dims") - oracle_psnr(&a, &b)).abs(),
        ];
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(e);
        }
    }
    let constant: Vec<Vec<f64>> = (0..100)
        .map(|_| vec![0.05, 0.15, 0.3, 0.1, 0.05, 0.1, 0.05, 0.1, 0.05, 0.05])
        .collect();
    let is_constant = inception_score_from_probs(&constant, 10).expect("valid").mean;
    let confident: Vec<Vec<f64>> = (0..100)
        .map(|i| {
            let mut p = vec![0.0; 10];
            p[i % 10] = 1.0;
            p
        })
        .collect();
    let is_uniform = inception_score_from_probs(&confident, 10).expect("valid").mean;
    let metrics_ok = worst.iter().all(|&w| w <= TOLERANCE);
    let is_ok = (is_constant - 1.0).abs() <= 1e-9 && (is_uniform - 10.0).abs() <= 1e-6;
    Verdict::new(
        metrics_ok && is_ok,
        format!(
            "{PAIRS} pairs, max |err| l1 {:.1e} ssim {:.1e} psnr {:.1e} (tolerance {TOLERANCE:e}); \
             IS constant {is_constant:.12} uniform-confident {is_uniform:.9}",
            worst[0], worst[1], worst[2]
        ),
    )
}
