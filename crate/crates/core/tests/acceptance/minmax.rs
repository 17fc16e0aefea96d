//! Signs of the finite-difference directional derivatives along the updates
//! plain SGD actually applied: the discriminator objective must not decrease
//! along the discriminator step and the generator objective must not
//! increase along the generator step.

use dcbv::dataset::{DatasetConfig, PairedBatch};
use dcbv::graph::Graph;
use dcbv::model::{is_discriminator_param, Model, ModelWeights, NetworkConfig, Subnet};
use dcbv::objectives::{build_baseline, dis_objective_graph, Method, ObjectiveConfig};
use dcbv::optim::{OptimizerKind, OptimizerState};
use dcbv::rng::{hash_str, rng_for};
use dcbv::trainer::{generator_objective, train_step, BatchSampler, DisInputs, StepNoise, TrainConfig, GEN_GROUP};
use rand::seq::index::sample;

use crate::common::splits;
use crate::Verdict;

pub const SAMPLED: usize = 50;
/// Length of the training run the sampled steps are drawn from.
pub const RUN: u64 = 150;
/// Finite-difference step as a fraction of the applied update.
const H: f64 = 1e-3;

fn net32() -> NetworkConfig {
    NetworkConfig {
        image_size: 32,
        base_channels: 8,
        latent_channels: 16,
        ..NetworkConfig::default()
    }
}

/// `base + t·(next − base)` on the parameters selected by `keep`.
fn along(base: &ModelWeights<f64>, next: &ModelWeights<f64>, keep: &dyn Fn(&str) -> bool, t: f64) -> ModelWeights<f64> {
    let mut out = base.clone();
    for (name, w) in out.iter_mut() {
        if keep(name) {
            let n = next.get(name).expect("same parameters");
            for (v, u) in w.data_mut().iter_mut().zip(n.data()) {
                *v += t * (u - *v);
            }
        }
    }
    out
}

fn dis_value(model: &Model<f64>, x: &DisInputs<f64>) -> f64 {
    let mut g = Graph::new();
    let real = g.constant(x.real.clone());
    let fake = g.constant(x.fake.clone());
    let cond = x.condition.clone().map(|c| g.constant(c));
    let v = dis_objective_graph(&mut g, model, real, fake, x.domain, cond).expect("dis objective");
    g.scalar(v)
}

struct Tally {
    checked: usize,
    violations: Vec<String>,
    /// Smallest discriminator and largest generator derivative seen.
    extreme: (f64, f64),
}

fn check_method(method: Method, tally: &mut Tally) {
    let net = net32();
    let data = splits(&DatasetConfig {
        image_size: net.image_size,
        ..DatasetConfig::default()
    });
    let cfg = TrainConfig {
        method,
        optimizer: OptimizerKind::SgdPlain,
        seed: 21,
        ..TrainConfig::default()
    };
    let objective: ObjectiveConfig = build_baseline(method, &net);
    let mut model = Model::<f64>::new(net.clone(), objective.layout.clone(), cfg.seed).expect("valid");
    let mut opt = OptimizerState::new(cfg.optimizer);
    let mut sampler = BatchSampler::new(cfg.seed, data.train.len(), cfg.batch_size).expect("data");
    let mut rng = rng_for(cfg.seed, &[hash_str("minmax-steps")]);
    let chosen: Vec<u64> = sample(&mut rng, RUN as usize, SAMPLED)
        .into_iter()
        .map(|s| s as u64)
        .collect();

    for step in 0..RUN {
        let idx = sampler.indices(step);
        let batch = PairedBatch::<f64>::from_samples(idx.iter().map(|&i| &data.train[i])).expect("batch");
        let noise = StepNoise::draw(cfg.seed, step, &net, &objective, batch.len());
        let before = model.weights.clone();
        let report = train_step(&mut model, &mut opt, &objective, &cfg, &batch, &noise, step).expect("finite step");
        if !chosen.contains(&step) {
            continue;
        }
        let after = model.weights.clone();
        let mut probe = model.clone();

        for x in &report.dis_inputs {
            let prefix = format!("{}.", Subnet::discriminator(x.domain).prefix());
            let keep = |n: &str| n.starts_with(&prefix);
            probe.weights = along(&before, &after, &keep, H);
            let up = dis_value(&probe, x);
            probe.weights = along(&before, &after, &keep, -H);
            let down = dis_value(&probe, x);
            let d = (up - down) / (2.0 * H);
            tally.extreme.0 = tally.extreme.0.min(d);
            tally.checked += 1;
            if d < 0.0 {
                tally.violations.push(format!("{method} step {step} {prefix}: {d:e}"));
            }
        }

        // the generator stepped against the already updated discriminators
        let gen_start = along(&before, &after, &|n| is_discriminator_param(n), 1.0);
        let gen = |n: &str| !is_discriminator_param(n);
        probe.weights = along(&gen_start, &after, &gen, H);
        let up = generator_objective(&probe, &objective, &cfg.weights, &batch, &noise).expect("objective");
        probe.weights = along(&gen_start, &after, &gen, -H);
        let down = generator_objective(&probe, &objective, &cfg.weights, &batch, &noise).expect("objective");
        let d = (up - down) / (2.0 * H);
        tally.extreme.1 = tally.extreme.1.max(d);
        tally.checked += 1;
        if d > 0.0 {
            tally
                .violations
                .push(format!("{method} step {step} {GEN_GROUP}: {d:e}"));
        }
    }
}

pub fn run() -> Verdict {
    let mut tally = Tally {
        checked: 0,
        violations: Vec::new(),
        extreme: (f64::INFINITY, f64::NEG_INFINITY),
    };
    for method in [Method::Proposed, Method::Pix2Pix, Method::VaeGan] {
        check_method(method, &mut tally);
    }
    Verdict::new(
        tally.violations.is_empty(),
        format!(
            "{SAMPLED} sampled steps of {RUN} per adversarial method, {} directional derivatives, \
             min along dis update {:.3e}, max along gen update {:.3e}, {} sign violations{}",
            tally.checked,
            tally.extreme.0,
            tally.extreme.1,
            tally.violations.len(),
            tally
                .violations
                .first()
                .map_or(String::new(), |v| format!(" (first: {v})"))
        ),
    )
}
