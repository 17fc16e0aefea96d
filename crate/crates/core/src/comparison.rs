//! Side-by-side training and scoring of the four methods, with the
//! annotated table, the structural overlap probe and the image montage.

use std::fmt;
use std::path::Path;

use crate::classifier::SurrogateClassifier;
use crate::dataset::PairedSample;
use crate::error::{Error, Result};
use crate::format::sig9;
use crate::image::Image;
use crate::metrics::{dice, evaluate, mean_se, threshold, MetricsReport};
use crate::model::NetworkConfig;
use crate::objectives::Method;
use crate::trainer::{fit, FitOptions, TrainConfig, TrainState};

/// Intensity separating organ tissue from background in cine-like images.
pub const ORGAN_THRESHOLD: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mark {
    Best,
    Second,
    Plain,
}

impl fmt::Display for Mark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mark::Best => "best",
            Mark::Second => "second",
            Mark::Plain => "",
        })
    }
}

/// Best and second-best entries of `values`; NaN entries are never marked
/// and ties share a mark.
pub fn rank_marks(values: &[f64], higher_is_better: bool) -> Vec<Mark> {
    let key = |v: f64| if higher_is_better { v } else { -v };
    let mut distinct: Vec<f64> = values.iter().filter(|v| !v.is_nan()).map(|&v| key(v)).collect();
    distinct.sort_by(|a, b| b.total_cmp(a));
    distinct.dedup();
    values
        .iter()
        .map(|&v| {
            if v.is_nan() {
                Mark::Plain
            } else if Some(&key(v)) == distinct.first() {
                Mark::Best
            } else if Some(&key(v)) == distinct.get(1) {
                Mark::Second
            } else {
                Mark::Plain
            }
        })
        .collect()
}

/// Mean and standard error of the organ-mask Dice between thresholded
/// translations and ground-truth masks.
pub fn structural_overlap(outputs: &[Image], masks: &[Image]) -> Result<(f64, f64)> {
    if outputs.len() != masks.len() || outputs.is_empty() {
        return Err(Error::Shape(format!(
            "{} outputs for {} organ masks",
            outputs.len(),
            masks.len()
        )));
    }
    let d = outputs
        .iter()
        .zip(masks)
        .map(|(o, m)| dice(&threshold(o, ORGAN_THRESHOLD), m))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_se(&d))
}

#[derive(Clone, Debug)]
pub struct MethodResult {
    pub method: Method,
    pub report: MetricsReport,
    /// Organ-mask Dice mean and standard error, when masks were given.
    pub overlap: Option<(f64, f64)>,
    pub outputs: Vec<Image>,
    pub state: TrainState<f32>,
}

/// The data one comparison runs on.
#[derive(Clone, Copy, Debug)]
pub struct ComparisonData<'a> {
    pub train: &'a [PairedSample],
    pub val: &'a [PairedSample],
    pub test: &'a [PairedSample],
    /// Ground-truth organ masks aligned with `test`.
    pub masks: Option<&'a [Image]>,
}

/// Trains each method with `cfg` (only the method differs) and scores it
/// on the test split. A failing method does not stop the others.
pub fn compare_methods(
    methods: &[Method],
    data: ComparisonData,
    net: &NetworkConfig,
    cfg: &TrainConfig,
    classifier: Option<&SurrogateClassifier>,
    out_dir: Option<&Path>,
) -> Vec<(Method, Result<MethodResult>)> {
    methods
        .iter()
        .map(|&method| {
            let run = || -> Result<MethodResult> {
                let run_cfg = TrainConfig { method, ..cfg.clone() };
                let dir = out_dir.map(|d| d.join(method.as_str()));
                let opts = FitOptions {
                    out_dir: dir.as_deref(),
                    classifier: None,
                    skip_validation: false,
                };
                let state = fit::<f32>(data.train, data.val, net, &run_cfg, &opts)?.state;
                let ev = evaluate(&state.model, data.test, classifier)?;
                let overlap = match data.masks {
                    Some(m) => Some(structural_overlap(&ev.outputs, m)?),
                    None => None,
                };
                Ok(MethodResult {
                    method,
                    report: ev.report,
                    overlap,
                    outputs: ev.outputs,
                    state,
                })
            };
            (method, run())
        })
        .collect()
}

pub const COMPARISON_HEADER: &str =
    "method,n,l1_mean,l1_se,ssim_mean,ssim_se,psnr_mean,psnr_se,is_mean,is_se,l1_mark,ssim_mark,psnr_mark,is_mark";

/// Table of method rows in the order given, with best and second-best
/// marks per metric (lower L1 is better, higher is better otherwise).
pub fn comparison_csv(rows: &[(Method, MetricsReport)]) -> String {
    let col = |f: fn(&MetricsReport) -> f64| rows.iter().map(|(_, r)| f(r)).collect::<Vec<_>>();
    let marks = [
        rank_marks(&col(|r| r.l1_mean), false),
        rank_marks(&col(|r| r.ssim_mean), true),
        rank_marks(&col(|r| r.psnr_mean), true),
        rank_marks(&col(|r| r.is_mean), true),
    ];
    let mut out = format!("{COMPARISON_HEADER}\n");
    for (i, (m, r)) in rows.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.csv_row(m.as_str()),
            marks[0][i],
            marks[1][i],
            marks[2][i],
            marks[3][i]
        ));
    }
    out
}

pub const OVERLAP_HEADER: &str = "method,n,dice_mean,dice_se";

pub fn overlap_csv(rows: &[(Method, usize, (f64, f64))]) -> String {
    let mut out = format!("{OVERLAP_HEADER}\n");
    for (m, n, (mean, se)) in rows {
        out.push_str(&format!("{m},{n},{},{}\n", sig9(*mean), sig9(*se)));
    }
    out
}

/// Tiles equally sized images into a grid; `rows[r][c]` lands at row `r`,
/// column `c`.
pub fn montage(rows: &[Vec<&Image>]) -> Result<Image> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or(Error::Empty("montage needs at least one image"))?;
    let (h, w) = first.dims();
    let cols = rows[0].len();
    for r in rows {
        if r.len() != cols {
            return Err(Error::Shape("montage rows differ in length".into()));
        }
        for im in r {
            im.same_dims(first, "montage tile")?;
        }
    }
    Ok(Image::from_fn(h * rows.len(), w * cols, |y, x| {
        rows[y / h][x / w].get(y % h, x % w)
    }))
}

/// `count` indices spread evenly over `0..n`.
pub fn spread_indices(n: usize, count: usize) -> Vec<usize> {
    let count = count.min(n);
    (0..count).map(|i| i * n / count).collect()
}
