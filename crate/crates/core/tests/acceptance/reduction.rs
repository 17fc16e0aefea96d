//! The proposed objective with β = λ = 0 against the vae_only baseline,
//! step by step along a 100-step vae_only training run.
//!
//! At every step the vae_only weights are loaded into a full proposed model
//! and its tagged-branch objective is evaluated on the same batch and noise
//! the trainer used. The loss values must agree bit for bit.

use dcbv::dataset::PairedBatch;
use dcbv::model::{Branch, Model, NetworkConfig};
use dcbv::objectives::{build_baseline, total_gen_objective, LossWeights, Method};
use dcbv::optim::OptimizerState;
use dcbv::trainer::{fit, train_step, BatchSampler, FitOptions, StepNoise, TrainConfig};

use crate::common::default_dataset;
use crate::Verdict;

pub const STEPS: u64 = 100;

pub fn run() -> Verdict {
    let data = default_dataset(0);
    let net = NetworkConfig::default();
    let cfg = TrainConfig {
        method: Method::VaeOnly,
        steps: STEPS,
        seed: 5,
        ..TrainConfig::default()
    };
    let vae_cfg = build_baseline(Method::VaeOnly, &net);
    let prop_cfg = build_baseline(Method::Proposed, &net);
    let reduced = LossWeights::new(cfg.weights.alpha, 0.0, 0.0);

    let mut model = Model::<f32>::new(net.clone(), vae_cfg.layout.clone(), cfg.seed).expect("valid");
    let mut proposed = Model::<f32>::new(net.clone(), prop_cfg.layout.clone(), cfg.seed).expect("valid");
    let mut opt = OptimizerState::new(cfg.optimizer);
    let mut sampler = BatchSampler::new(cfg.seed, data.train.len(), cfg.batch_size).expect("data");
    let mut trajectory = Vec::new();
    let mut mismatches = Vec::new();
    for step in 0..STEPS {
        let idx = sampler.indices(step);
        let batch = PairedBatch::<f32>::from_samples(idx.iter().map(|&i| &data.train[i])).expect("batch");
        let noise = StepNoise::draw(cfg.seed, step, &net, &vae_cfg, batch.len());
        let prop_noise = StepNoise::<f32>::draw(cfg.seed, step, &net, &prop_cfg, batch.len());
        for (name, t) in model.weights.iter() {
            *proposed
                .weights
                .get_mut(name)
                .expect("proposed has every vae_only tensor") = t.clone();
        }
        let p = total_gen_objective(
            &batch,
            Branch::Tagged,
            &proposed,
            &prop_cfg,
            &reduced,
            prop_noise.get(Branch::Tagged),
        )
        .expect("objective");
        let r = train_step(&mut model, &mut opt, &vae_cfg, &cfg, &batch, &noise, step).expect("finite step");
        let pairs = [
            ("l1_trans", r.losses.l1_trans_t2c, p.l1_trans_t2c),
            ("kl", r.losses.kl_t, p.kl_t),
            ("total", r.losses.total_gen_t, p.total_gen_t),
        ];
        for (term, a, b) in pairs {
            if a.to_bits() != b.to_bits() {
                mismatches.push(format!("step {step} {term}: {a:e} vs {b:e}"));
            }
        }
        trajectory.push(r.losses.total_gen_t);
    }

    // the hand-driven loop above is the trainer's own loop
    let fitted = fit::<f32>(&data.train, &[], &net, &cfg, &FitOptions::default()).expect("fit");
    let same_as_fit = fitted
        .log
        .train
        .iter()
        .map(|(_, l)| l.total_gen_t.to_bits())
        .eq(trajectory.iter().map(|v| v.to_bits()));
    let moved = trajectory.first() != trajectory.last();

    Verdict::new(
        mismatches.is_empty() && same_as_fit && moved,
        format!(
            "{STEPS} steps, {} bit mismatches{}, trainer log identical: {same_as_fit}, total loss {:.4} -> {:.4}",
            mismatches.len(),
            mismatches.first().map_or(String::new(), |m| format!(" (first: {m})")),
            trajectory[0],
            trajectory[trajectory.len() - 1]
        ),
    )
}
