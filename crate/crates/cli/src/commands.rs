use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde_json::json;
use sha2::{Digest, Sha256};

use dcbv::classifier::{train_default_surrogate, SurrogateClassifier, SurrogateConfig};
use dcbv::comparison::{compare_methods, comparison_csv, montage, overlap_csv, spread_indices, ComparisonData};
use dcbv::dataset::{generate_dataset, Dataset, DatasetConfig, PairedSample, Split, MANIFEST_FILE};
use dcbv::metrics::{evaluate as evaluate_model, translate_all, MetricsReport, SampleMetrics};
use dcbv::trainer::{fit, grid_search as run_grid, load_checkpoint, FitOptions, GridRow};
use dcbv::{Error, Image, LossWeights, Method, NetworkConfig, TrainConfig, TrainState};

use crate::meta::write_run_meta;
use crate::{Command, CompareArgs, EvaluateArgs, GenDataArgs, GridSearchArgs, TrainArgs, TranslateArgs};

/// A flag value that parsed but cannot be used.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::InvalidConfig(_) | Error::UnknownMethod(_) => 2,
                Error::Parse { kind, .. } if kind.ends_with("config") => 2,
                Error::Io { .. } | Error::Parse { .. } => 3,
                Error::NonFinite { .. } => 4,
                Error::CorruptCheckpoint(_) | Error::VersionMismatch { .. } => 5,
                _ => 1,
            };
        }
    }
    1
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    Ok(match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    })
}

fn network_for(dataset: &Dataset) -> Result<NetworkConfig> {
    let net = NetworkConfig {
        image_size: dataset.manifest.image_size,
        ..NetworkConfig::default()
    };
    net.validate()?;
    Ok(net)
}

/// Loads the classifier from `path`, or trains one (saving it to `path`
/// when given).
fn resolve_classifier(path: Option<&Path>, image_size: usize) -> Result<SurrogateClassifier> {
    if let Some(p) = path.filter(|p| p.exists()) {
        let clf = SurrogateClassifier::load(p)?;
        if clf.image_size != image_size {
            bail!(UsageError(format!(
                "classifier {} expects {}px images, data has {}px",
                p.display(),
                clf.image_size,
                image_size
            )));
        }
        return Ok(clf);
    }
    let cfg = SurrogateConfig {
        image_size,
        ..SurrogateConfig::default()
    };
    eprintln!("training surrogate classifier ({} images)", cfg.train_count);
    let (clf, acc) = train_default_surrogate(&cfg)?;
    eprintln!("surrogate classifier held-out accuracy {acc:.3}");
    if let Some(p) = path {
        clf.save(p)?;
    }
    Ok(clf)
}

pub fn gen_data(args: &GenDataArgs, command: &Command) -> Result<()> {
    let mut cfg = DatasetConfig {
        seed: args.seed,
        n_subjects: args.subjects,
        frames_per_subject: args.frames,
        image_size: args.size,
        ..DatasetConfig::default()
    };
    if let Some(a) = args.tag_amplitude {
        cfg.tag.amplitude = a;
    }
    cfg.validate()?;
    let manifest = generate_dataset(&cfg, &args.out)?;
    let path = args.out.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    write_run_meta(
        &args.out,
        command,
        json!({ "dataset_config": cfg, "seeds": { "data": cfg.seed } }),
    )?;
    let s = &manifest.splits;
    println!(
        "subjects train/val/test: {}/{}/{}",
        s.train.len(),
        s.val.len(),
        s.test.len()
    );
    println!(
        "frames per subject: {}, image size: {}",
        manifest.frames_per_subject, manifest.image_size
    );
    println!("manifest sha256: {}", hex::encode(Sha256::digest(&bytes)));
    Ok(())
}

pub fn train(args: &TrainArgs, command: &Command) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(m) = &args.method {
        cfg.method = m.parse()?;
    }
    if let Some(s) = args.steps {
        cfg.steps = s;
    }
    cfg.validate()?;
    let dataset = Dataset::open(&args.data)?;
    let net = network_for(&dataset)?;
    let train = dataset.load_split(Split::Train)?;
    let val = dataset.load_split(Split::Val)?;
    write_run_meta(
        &args.out,
        command,
        json!({
            "train_config": cfg,
            "network": net,
            "manifest": dataset.manifest,
            "seeds": { "data": dataset.manifest.seed, "train": cfg.seed },
        }),
    )?;
    let opts = FitOptions {
        out_dir: Some(&args.out),
        ..FitOptions::default()
    };
    let res = fit::<f32>(&train, &val, &net, &cfg, &opts).context("training failed")?;
    println!("trained {} for {} steps", cfg.method, res.state.step);
    if let Some((step, l)) = res.log.train.last() {
        println!(
            "step {step}: total_gen_t={} total_gen_c={} dis_t={} dis_c={}",
            dcbv::format::sig9(l.total_gen_t),
            dcbv::format::sig9(l.total_gen_c),
            dcbv::format::sig9(l.dis_t),
            dcbv::format::sig9(l.dis_c)
        );
    }
    if let Some((step, r)) = res.log.val.last() {
        println!(
            "val at step {step}: l1={:.3} ssim={:.4} psnr={:.2}",
            r.l1_mean, r.ssim_mean, r.psnr_mean
        );
    }
    if let Some(p) = res.checkpoints.last() {
        println!("checkpoint: {}", p.display());
    }
    Ok(())
}

fn pgm_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let entries = fs::read_dir(input).map_err(|e| Error::io(input, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| Error::io(input, e))?.path();
        if p.extension().is_some_and(|e| e == "pgm") {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        bail!(UsageError(format!("no .pgm images in {}", input.display())));
    }
    Ok(files)
}

pub fn translate(args: &TranslateArgs, command: &Command) -> Result<()> {
    let state: TrainState<f32> = load_checkpoint(&args.ckpt)?;
    let files = pgm_inputs(&args.input)?;
    write_run_meta(
        &args.out,
        command,
        json!({ "checkpoint_step": state.step, "method": state.method, "network": state.model.config }),
    )?;
    let n = state.model.config.image_size;
    let mut total = 0.0;
    for f in &files {
        let img = Image::read_pgm(f)?;
        if img.dims() != (n, n) {
            bail!(UsageError(format!(
                "{} is {:?}, the checkpoint expects {n}x{n}",
                f.display(),
                img.dims()
            )));
        }
        let t = Instant::now();
        let out = translate_all(&state.model, &[&img], 1)?.remove(0);
        let ms = t.elapsed().as_secs_f64() * 1e3;
        total += ms;
        let name = f.file_name().expect("file path");
        out.write_pgm(args.out.join(name))?;
        println!("{}: {ms:.2} ms", name.to_string_lossy());
    }
    println!(
        "translated {} images, mean {:.2} ms per image",
        files.len(),
        total / files.len() as f64
    );
    Ok(())
}

fn check_size(samples: &[PairedSample], net: &NetworkConfig) -> Result<()> {
    if let Some(s) = samples.first() {
        if s.tagged.dims() != (net.image_size, net.image_size) {
            bail!(UsageError(format!(
                "data is {:?}, the checkpoint expects {}x{}",
                s.tagged.dims(),
                net.image_size,
                net.image_size
            )));
        }
    }
    Ok(())
}

pub fn evaluate(args: &EvaluateArgs, command: &Command) -> Result<()> {
    let split: Split = args.split.parse()?;
    let state: TrainState<f32> = load_checkpoint(&args.ckpt)?;
    let dataset = Dataset::open(&args.data)?;
    let samples = dataset.load_split(split)?;
    check_size(&samples, &state.model.config)?;
    write_run_meta(
        &args.out,
        command,
        json!({
            "checkpoint_step": state.step,
            "method": state.method,
            "network": state.model.config,
            "manifest": dataset.manifest,
            "seeds": { "data": dataset.manifest.seed, "classifier": SurrogateConfig::default().seed },
        }),
    )?;
    let clf = resolve_classifier(args.classifier.as_deref(), state.model.config.image_size)?;
    let ev = evaluate_model(&state.model, &samples, Some(&clf))?;
    let header = MetricsReport::csv_header("method");
    let row = ev.report.csv_row(state.method.as_str());
    write_text(&args.out.join("metrics_report.csv"), &format!("{header}\n{row}\n"))?;
    if args.per_sample {
        let mut text = format!("{}\n", SampleMetrics::CSV_HEADER);
        for s in &ev.samples {
            text.push_str(&s.csv_row());
            text.push('\n');
        }
        write_text(&args.out.join("per_sample.csv"), &text)?;
    }
    println!("{header}");
    println!("{row}");
    if ev.report.psnr_inf_count > 0 {
        println!("psnr excluded {} exact reconstructions", ev.report.psnr_inf_count);
    }
    Ok(())
}

pub fn compare(args: &CompareArgs, command: &Command) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let dataset = Dataset::open(&args.data)?;
    let net = network_for(&dataset)?;
    let train = dataset.load_split(Split::Train)?;
    let val = dataset.load_split(Split::Val)?;
    let test = dataset.load_split(Split::Test)?;
    let masks = test
        .iter()
        .map(|s| dataset.manifest.organ_mask(s.subject_id, s.frame_id))
        .collect::<dcbv::Result<Vec<_>>>()?;
    write_run_meta(
        &args.out,
        command,
        json!({
            "train_config": cfg,
            "methods": Method::ALL,
            "network": net,
            "manifest": dataset.manifest,
            "seeds": { "data": dataset.manifest.seed, "train": cfg.seed, "classifier": SurrogateConfig::default().seed },
        }),
    )?;
    let clf = resolve_classifier(args.classifier.as_deref(), net.image_size)?;
    let data = ComparisonData {
        train: &train,
        val: &val,
        test: &test,
        masks: Some(&masks),
    };
    let results = compare_methods(&Method::ALL, data, &net, &cfg, Some(&clf), Some(&args.out));

    let mut rows = Vec::new();
    let mut overlaps = Vec::new();
    let mut failures = Vec::new();
    for (m, r) in &results {
        match r {
            Ok(r) => {
                rows.push((*m, r.report));
                if let Some(o) = r.overlap {
                    overlaps.push((*m, r.report.n_samples, o));
                }
            }
            Err(e) => {
                eprintln!("{m} failed: {e}");
                failures.push(*m);
            }
        }
    }
    let table = comparison_csv(&rows);
    write_text(&args.out.join("comparison.csv"), &table)?;
    let mut report = format!("{}\n", MetricsReport::csv_header("method"));
    for (m, r) in &rows {
        report.push_str(&r.csv_row(m.as_str()));
        report.push('\n');
    }
    write_text(&args.out.join("metrics_report.csv"), &report)?;
    write_text(&args.out.join("structural_overlap.csv"), &overlap_csv(&overlaps))?;

    // columns: tagged input, one per method, ground-truth cine
    let blank = Image::filled(net.image_size, net.image_size, 0.0);
    let montage_rows: Vec<Vec<&Image>> = spread_indices(test.len(), args.montage_rows)
        .into_iter()
        .map(|i| {
            let mut row = vec![&test[i].tagged];
            for (_, r) in &results {
                row.push(r.as_ref().map_or(&blank, |r| &r.outputs[i]));
            }
            row.push(&test[i].cine);
            row
        })
        .collect();
    montage(&montage_rows)?.write_pgm(args.out.join("montage.pgm"))?;

    print!("{table}");
    for (m, _, (mean, _)) in &overlaps {
        println!("{m} organ dice {mean:.4}");
    }
    if let Some(first) = results.into_iter().find_map(|(_, r)| r.err()) {
        return Err(anyhow::Error::new(first).context(format!(
            "{} of {} methods failed",
            failures.len(),
            Method::ALL.len()
        )));
    }
    Ok(())
}

fn parse_grid(text: &str) -> Result<Vec<LossWeights>> {
    let mut grid = Vec::new();
    for point in text.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let vals: Vec<f64> = point
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| UsageError(format!("bad grid point `{point}`: {e}")))?;
        let [alpha, beta, lambda] = vals[..] else {
            bail!(UsageError(format!("grid point `{point}` needs alpha,beta,lambda")));
        };
        let w = LossWeights::new(alpha, beta, lambda);
        w.validate()?;
        grid.push(w);
    }
    if grid.is_empty() {
        bail!(UsageError("empty grid".into()));
    }
    Ok(grid)
}

pub fn grid_search(args: &GridSearchArgs, command: &Command) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let grid = parse_grid(&args.grid)?;
    let dataset = Dataset::open(&args.data)?;
    let net = network_for(&dataset)?;
    let train = dataset.load_split(Split::Train)?;
    let val = dataset.load_split(Split::Val)?;
    write_run_meta(
        &args.out,
        command,
        json!({
            "train_config": cfg,
            "grid": grid,
            "network": net,
            "manifest": dataset.manifest,
            "seeds": { "data": dataset.manifest.seed, "train": cfg.seed },
        }),
    )?;
    let (best, rows) = run_grid::<f32>(&grid, &train, &val, &net, &cfg, None)?;
    let mut text = format!("{}\n", GridRow::CSV_HEADER);
    for r in &rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    write_text(&args.out.join("grid_search.csv"), &text)?;
    let best_cfg = TrainConfig { weights: best, ..cfg };
    let mut json = serde_json::to_string_pretty(&best_cfg)?;
    json.push('\n');
    write_text(&args.out.join("best_config.json"), &json)?;
    print!("{text}");
    println!("best: alpha={} beta={} lambda={}", best.alpha, best.beta, best.lambda);
    Ok(())
}
