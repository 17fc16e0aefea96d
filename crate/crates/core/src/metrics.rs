//! Image quality metrics: mean L1 error on the 8-bit scale, SSIM, PSNR and
//! the Inception Score computed with the surrogate phantom classifier.

use serde::{Deserialize, Serialize};

use crate::classifier::SurrogateClassifier;
use crate::dataset::PairedSample;
use crate::error::{Error, Result};
use crate::format::sig9;
use crate::image::Image;
use crate::model::Model;
use crate::tensor::{Scalar, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Dynamic range of images in `[0, 1]`.
pub const DATA_RANGE: f64 = 1.0;
pub const DEFAULT_IS_SPLITS: usize = 10;

/// Mean absolute difference after scaling `[0, 1]` intensities to `[0, 255]`.
pub fn l1_table(a: &Image, b: &Image) -> Result<f64> {
    a.same_dims(b, "l1_table")?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x * 255.0 - y * 255.0).abs())
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over every window position that fits inside the image.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_dims(b, "ssim")?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let (x, y) = (a.data(), b.data());
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect() };
    let mu_a = filter_valid(x, h, w, &taps);
    let mu_b = filter_valid(y, h, w, &taps);
    let aa = filter_valid(&prod(&|p, _| p * p), h, w, &taps);
    let bb = filter_valid(&prod(&|_, q| q * q), h, w, &taps);
    let ab = filter_valid(&prod(&|p, q| p * q), h, w, &taps);
    let c1 = (SSIM_K1 * DATA_RANGE).powi(2);
    let c2 = (SSIM_K2 * DATA_RANGE).powi(2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Separable valid-mode filtering with a symmetric kernel.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let line = &img[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&line[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// `10·log10(L² / MSE)` in dB; identical images give `+inf`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.same_dims(b, "psnr")?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (DATA_RANGE * DATA_RANGE / mse).log10())
}

/// Mean and standard error of a score across splits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitScore {
    pub mean: f64,
    pub se: f64,
}

/// Inception Score from per-image class posteriors: `exp(mean KL(p(y|x) ‖ p(y)))`
/// per contiguous split, averaged over splits.
pub fn inception_score_from_probs(probs: &[Vec<f64>], n_splits: usize) -> Result<SplitScore> {
    if probs.is_empty() {
        return Err(Error::Empty("inception score of an empty image set"));
    }
    if n_splits == 0 || probs.len() < n_splits {
        return Err(Error::InvalidConfig(format!(
            "inception score needs at least n_splits = {n_splits} >= 1 images, got {}",
            probs.len()
        )));
    }
    let k = probs[0].len();
    if probs.iter().any(|p| p.len() != k) {
        return Err(Error::Shape("class posteriors differ in length".into()));
    }
    let n = probs.len();
    let scores: Vec<f64> = (0..n_splits)
        .map(|s| {
            let part = &probs[s * n / n_splits..(s + 1) * n / n_splits];
            let mut marginal = vec![0.0; k];
            for p in part {
                for (m, v) in marginal.iter_mut().zip(p) {
                    *m += v / part.len() as f64;
                }
            }
            let mean_kl = part
                .iter()
                .map(|p| {
                    p.iter()
                        .zip(&marginal)
                        .filter(|(&v, _)| v > 0.0)
                        .map(|(&v, &m)| v * (v / m).ln())
                        .sum::<f64>()
                })
                .sum::<f64>()
                / part.len() as f64;
            mean_kl.exp()
        })
        .collect();
    let (mean, se) = mean_se(&scores);
    Ok(SplitScore { mean, se })
}

pub fn inception_score(images: &[Image], classifier: &SurrogateClassifier, n_splits: usize) -> Result<SplitScore> {
    if images.is_empty() {
        return Err(Error::Empty("inception score of an empty image set"));
    }
    inception_score_from_probs(&classifier.probabilities(images)?, n_splits)
}

/// Sample mean and standard error (sample standard deviation over √n).
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Per-image metrics of one translated test pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub subject_id: usize,
    pub frame_id: usize,
    pub l1: f64,
    pub ssim: f64,
    pub psnr: f64,
}

impl SampleMetrics {
    pub fn compute(output: &Image, truth: &Image, subject_id: usize, frame_id: usize) -> Result<Self> {
        Ok(SampleMetrics {
            subject_id,
            frame_id,
            l1: l1_table(output, truth)?,
            ssim: ssim(output, truth)?,
            psnr: psnr(output, truth)?,
        })
    }

    pub const CSV_HEADER: &'static str = "subject,frame,l1,ssim,psnr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.subject_id,
            self.frame_id,
            sig9(self.l1),
            sig9(self.ssim),
            sig9(self.psnr)
        )
    }
}

/// Aggregated metrics in the column order L1, SSIM, PSNR, IS.
///
/// Infinite PSNR values (exact reconstructions) are left out of the PSNR
/// mean and counted in `psnr_inf_count`; if every value is infinite the
/// mean is `+inf`. Without a classifier the IS columns are NaN.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    pub l1_mean: f64,
    pub l1_se: f64,
    pub ssim_mean: f64,
    pub ssim_se: f64,
    pub psnr_mean: f64,
    pub psnr_se: f64,
    pub psnr_inf_count: usize,
    pub is_mean: f64,
    pub is_se: f64,
}

impl MetricsReport {
    pub const CSV_COLUMNS: [&'static str; 9] = [
        "n",
        "l1_mean",
        "l1_se",
        "ssim_mean",
        "ssim_se",
        "psnr_mean",
        "psnr_se",
        "is_mean",
        "is_se",
    ];

    pub fn from_samples(samples: &[SampleMetrics], is: Option<SplitScore>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("no samples to aggregate"));
        }
        let col = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).collect::<Vec<f64>>();
        let (l1_mean, l1_se) = mean_se(&col(|s| s.l1));
        let (ssim_mean, ssim_se) = mean_se(&col(|s| s.ssim));
        let finite: Vec<f64> = samples.iter().map(|s| s.psnr).filter(|p| p.is_finite()).collect();
        let psnr_inf_count = samples.len() - finite.len();
        let (psnr_mean, psnr_se) = if finite.is_empty() {
            (f64::INFINITY, 0.0)
        } else {
            mean_se(&finite)
        };
        let is = is.unwrap_or(SplitScore {
            mean: f64::NAN,
            se: f64::NAN,
        });
        Ok(MetricsReport {
            n_samples: samples.len(),
            l1_mean,
            l1_se,
            ssim_mean,
            ssim_se,
            psnr_mean,
            psnr_se,
            psnr_inf_count,
            is_mean: is.mean,
            is_se: is.se,
        })
    }

    /// `<label>,n,l1_mean,...,is_se` with the label as first column name.
    pub fn csv_header(label: &str) -> String {
        format!("{label},{}", Self::CSV_COLUMNS.join(","))
    }

    pub fn csv_row(&self, label: &str) -> String {
        let vals = [
            self.l1_mean,
            self.l1_se,
            self.ssim_mean,
            self.ssim_se,
            self.psnr_mean,
            self.psnr_se,
            self.is_mean,
            self.is_se,
        ];
        let cols: Vec<String> = vals.iter().map(|&v| sig9(v)).collect();
        format!("{label},{},{}", self.n_samples, cols.join(","))
    }
}

/// Translations of a test set with their per-sample and aggregate metrics.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub samples: Vec<SampleMetrics>,
    pub outputs: Vec<Image>,
}

/// Translates `images` in mean mode, `batch` images at a time.
pub fn translate_all<T: Scalar>(model: &Model<T>, images: &[&Image], batch: usize) -> Result<Vec<Image>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let x = Tensor::stack(&chunk.iter().map(|im| im.to_tensor::<T>()).collect::<Vec<_>>())?;
        let y = model.translate(&x, None)?;
        out.extend((0..y.batch()).map(|i| Image::from_tensor(&y, i)));
    }
    Ok(out)
}

/// Translates every tagged image of `test` in mean mode and scores it
/// against its cine counterpart.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    test: &[PairedSample],
    classifier: Option<&SurrogateClassifier>,
) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Empty("evaluation set is empty"));
    }
    let inputs: Vec<&Image> = test.iter().map(|s| &s.tagged).collect();
    let outputs = translate_all(model, &inputs, 16)?;
    score_outputs(test, outputs, classifier)
}

/// Scores precomputed translations of `test`.
pub fn score_outputs(
    test: &[PairedSample],
    outputs: Vec<Image>,
    classifier: Option<&SurrogateClassifier>,
) -> Result<Evaluation> {
    if outputs.len() != test.len() {
        return Err(Error::Shape(format!(
            "{} outputs for {} test pairs",
            outputs.len(),
            test.len()
        )));
    }
    let samples = test
        .iter()
        .zip(&outputs)
        .map(|(s, o)| SampleMetrics::compute(o, &s.cine, s.subject_id, s.frame_id))
        .collect::<Result<Vec<_>>>()?;
    let is = match classifier {
        Some(c) => Some(inception_score(&outputs, c, DEFAULT_IS_SPLITS.min(outputs.len()))?),
        None => None,
    };
    Ok(Evaluation {
        report: MetricsReport::from_samples(&samples, is)?,
        samples,
        outputs,
    })
}

/// Dice overlap of two binary masks (values > 0.5 count as inside).
pub fn dice(a: &Image, b: &Image) -> Result<f64> {
    a.same_dims(b, "dice")?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (p, q) = (*x > 0.5, *y > 0.5);
        inter += (p && q) as usize;
        total += p as usize + q as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Binary mask of pixels brighter than `threshold`.
pub fn threshold(img: &Image, threshold: f64) -> Image {
    let mut out = img.clone();
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = if *v > threshold { 1.0 } else { 0.0 });
    out
}
