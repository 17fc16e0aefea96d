//! Repeat runs, checkpoint round trips and resumed training, compared by
//! SHA-256 of the checkpoint files.

use std::path::Path;

use dcbv::model::NetworkConfig;
use dcbv::objectives::Method;
use dcbv::optim::OptimizerKind;
use dcbv::trainer::{checkpoint_name, fit, fit_from, load_checkpoint, save_checkpoint, FitOptions, TrainConfig};
use sha2::{Digest, Sha256};

use crate::common::{default_dataset, Splits};
use crate::Verdict;

pub const STEPS: u64 = 40;

fn sha(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).expect("checkpoint readable")))
}

fn config(optimizer: OptimizerKind) -> TrainConfig {
    TrainConfig {
        method: Method::Proposed,
        optimizer,
        steps: STEPS,
        seed: 9,
        checkpoint_every: STEPS / 2,
        ..TrainConfig::default()
    }
}

fn full_run(data: &Splits, cfg: &TrainConfig, dir: &Path) -> String {
    let opts = FitOptions {
        out_dir: Some(dir),
        ..FitOptions::default()
    };
    fit::<f32>(&data.train, &data.val, &NetworkConfig::default(), cfg, &opts).expect("fit");
    sha(&dir.join(checkpoint_name(cfg.steps)))
}

/// Trains to the midpoint, reloads that checkpoint from disk and finishes.
fn resumed_run(data: &Splits, cfg: &TrainConfig, dir: &Path) -> String {
    let opts = FitOptions {
        out_dir: Some(dir),
        ..FitOptions::default()
    };
    let half = TrainConfig {
        steps: cfg.steps / 2,
        ..cfg.clone()
    };
    fit::<f32>(&data.train, &data.val, &NetworkConfig::default(), &half, &opts).expect("first half");
    let state = load_checkpoint::<f32>(dir.join(checkpoint_name(half.steps))).expect("load");
    fit_from(state, &data.train, &data.val, cfg, &opts).expect("second half");
    sha(&dir.join(checkpoint_name(cfg.steps)))
}

pub fn run() -> Verdict {
    let data = default_dataset(0);
    let tmp = tempfile::tempdir().expect("tempdir");
    let sub = |name: &str| {
        let p = tmp.path().join(name);
        std::fs::create_dir_all(&p).expect("mkdir");
        p
    };

    let cfg = config(OptimizerKind::Adam);
    let first = full_run(&data, &cfg, &sub("a"));
    let second = full_run(&data, &cfg, &sub("b"));
    let repeat_ok = first == second;

    let path = sub("a").join(checkpoint_name(STEPS));
    let state = load_checkpoint::<f32>(&path).expect("load");
    let again = sub("rt").join("again.dcbv");
    save_checkpoint(&state, &again).expect("save");
    let reloaded = load_checkpoint::<f32>(&again).expect("reload");
    let round_trip_ok = sha(&again) == first && reloaded == state;

    let sgd = config(OptimizerKind::SgdPlain);
    let sgd_full = full_run(&data, &sgd, &sub("sgd_full"));
    let sgd_resumed = resumed_run(&data, &sgd, &sub("sgd_resumed"));
    let adam_resumed = resumed_run(&data, &cfg, &sub("adam_resumed"));
    let resume_ok = sgd_full == sgd_resumed;

    Verdict::new(
        repeat_ok && round_trip_ok && resume_ok,
        format!(
            "proposed {STEPS} steps: repeat runs {} ({}..), save/load round trip {}, \
             sgd_plain resume at step {} {} ({}..), adam resume {}",
            if repeat_ok { "identical" } else { "differ" },
            &first[..12],
            if round_trip_ok { "bit-exact" } else { "differs" },
            STEPS / 2,
            if resume_ok { "identical" } else { "differs" },
            &sgd_full[..12],
            if adam_resumed == first { "identical" } else { "differs" },
        ),
    )
}
