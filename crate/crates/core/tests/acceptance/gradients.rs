//! Every loss term's analytic parameter gradient against central finite
//! differences on a 16×16 network in f64.

use dcbv::graph::Graph;
use dcbv::model::{Branch, Model, NetworkConfig, Subnet};
use dcbv::objectives::{
    branch_forward, build_baseline, combine_graph, condition_for, dis_objective_graph, gen_adv_graph, BranchForward,
    LossWeights, Method, ObjectiveConfig,
};
use dcbv::rng::{hash_str, rng_for, standard_normal};
use dcbv::{Result, Tensor, Var};
use rand::Rng;

use crate::Verdict;

pub const EPS: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-5;
/// Denominator floor of the relative error, so gradients that vanish do
/// not turn round-off into large ratios.
pub const FLOOR: f64 = 1e-4;

/// Scale applied to the decoder layers ahead of an instance normalization.
pub const KERNEL_GAIN: f64 = 50.0;

pub fn net16() -> NetworkConfig {
    NetworkConfig {
        image_size: 16,
        base_channels: 4,
        n_down: 2,
        latent_channels: 4,
        shared_layers: 1,
        dis_patch_levels: 2,
        ..NetworkConfig::default()
    }
}

/// A model at its initialization scale (kernels N(0, 0.02)) with biases of
/// magnitude 1 to 2 and random sign. Every leaky-ReLU preactivation then
/// stays far from zero, on the positive side in some channels and the
/// negative side in others, so central differences never straddle a kink.
///
/// The decoder layers up to the last instance normalization are then scaled
/// by `KERNEL_GAIN`. Normalization cancels the scale, so the forward pass is
/// unchanged, but a perturbation of `EPS` becomes a much smaller fraction of
/// each weight and no longer swings the normalized activations across a kink.
fn model(method: Method, seed: u64) -> Model<f64> {
    let net = net16();
    let layout = build_baseline(method, &net).layout;
    let mut m = Model::<f64>::new(net.clone(), layout, seed).expect("valid config");
    let mut scaled: Vec<String> = Vec::new();
    for b in [Branch::Tagged, Branch::Cine] {
        let layers = net.layers(Subnet::decoder(b), 1);
        for (n, _) in &layers[..layers.len() - 1] {
            scaled.push(format!("{n}.kernel"));
        }
        scaled.push(format!("{}.bias", layers[0].0));
    }
    for (name, t) in m.weights.iter_mut() {
        if name.ends_with(".bias") {
            let mut rng = rng_for(seed, &[hash_str(name), 1]);
            t.data_mut().iter_mut().for_each(|v| {
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                *v = sign * rng.gen_range(1.0..2.0);
            });
        }
        if scaled.iter().any(|n| n == name) {
            t.data_mut().iter_mut().for_each(|v| *v *= KERNEL_GAIN);
        }
    }
    m
}

struct Inputs {
    tagged: Tensor<f64>,
    cine: Tensor<f64>,
    noise_t: Tensor<f64>,
    noise_c: Tensor<f64>,
}

/// Images whose pixels sit at least 0.2 away from `centre`, the output level
/// of the decoder that is compared against them, so L1 residuals keep their
/// sign under perturbation.
fn away_from(centre: &Tensor<f64>, rng: &mut impl Rng) -> Tensor<f64> {
    let mut out = centre.clone();
    for v in out.data_mut() {
        let below = *v - 0.2;
        let above = *v + 0.2;
        *v = if (below > 0.02 && rng.gen_bool(0.5)) || above >= 0.98 {
            rng.gen_range(0.0..below)
        } else {
            rng.gen_range(above..1.0)
        };
    }
    out
}

fn inputs(m: &Model<f64>, seed: u64) -> Inputs {
    let net = &m.config;
    let mut rng = rng_for(seed, &[hash_str("grad-inputs")]);
    let noise_t = standard_normal(net.latent_shape(2), &mut rng);
    let noise_c = standard_normal(net.latent_shape(2), &mut rng);
    // an absent decoder never meets these images in an L1 term
    let level = |b: Branch| {
        if !m.layout.has(Subnet::decoder(b)) {
            return Tensor::full(net.image_shape(2), 0.5);
        }
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(net.latent_shape(2)));
        let out = m.decode_graph(&mut g, z, b).expect("decode");
        g.value(out).clone()
    };
    Inputs {
        tagged: away_from(&level(Branch::Tagged), &mut rng),
        cine: away_from(&level(Branch::Cine), &mut rng),
        noise_t,
        noise_c,
    }
}

/// Smallest |output − target| over every L1 residual of `method`.
fn l1_margin(m: &Model<f64>, cfg: &ObjectiveConfig, x: &Inputs) -> f64 {
    let mut margin = f64::INFINITY;
    for &b in &cfg.branches {
        let mut g = Graph::new();
        let f = forward(m, &mut g, cfg, x, b).expect("forward");
        let tgt = g.value(f.target).clone();
        let src = g.value(f.source).clone();
        let tr = g.value(f.translation);
        for (o, t) in tr.data().iter().zip(tgt.data()) {
            margin = margin.min((o - t).abs());
        }
        if cfg.cycle {
            let noise = match b {
                Branch::Tagged => &x.noise_t,
                Branch::Cine => &x.noise_c,
            };
            let rec = m.reconstruct(&src, b, Some(noise)).expect("reconstruct");
            for (o, t) in rec.data().iter().zip(src.data()) {
                margin = margin.min((o - t).abs());
            }
        }
    }
    margin
}

type Build = Box<dyn Fn(&Model<f64>, &mut Graph<f64>) -> Result<Var>>;

fn forward(
    model: &Model<f64>,
    g: &mut Graph<f64>,
    cfg: &ObjectiveConfig,
    x: &Inputs,
    b: Branch,
) -> Result<BranchForward> {
    let xt = g.constant(x.tagged.clone());
    let xc = g.constant(x.cine.clone());
    let (src, tgt, noise) = match b {
        Branch::Tagged => (xt, xc, &x.noise_t),
        Branch::Cine => (xc, xt, &x.noise_c),
    };
    branch_forward(g, model, cfg, src, tgt, b, cfg.stochastic.then_some(noise))
}

/// Named scalar terms of `method`, each a function of the model weights.
fn terms(method: Method, seed: u64) -> (Model<f64>, Vec<(String, Build)>, f64) {
    let m = model(method, seed);
    let cfg = build_baseline(method, &m.config);
    let weights = LossWeights::new(1.0, 1.0, 0.5);
    let x = std::rc::Rc::new(inputs(&m, seed));
    let margin = l1_margin(&m, &cfg, &x);
    let mut out: Vec<(String, Build)> = Vec::new();
    for &b in &cfg.branches {
        let tag = b.tag();
        let (c, xx) = (cfg.clone(), x.clone());
        out.push((
            format!("{method}.l1_trans_{tag}"),
            Box::new(move |m, g| Ok(forward(m, g, &c, &xx, b)?.l1_trans)),
        ));
        if cfg.stochastic {
            let (c, xx) = (cfg.clone(), x.clone());
            out.push((
                format!("{method}.kl_{tag}"),
                Box::new(move |m, g| Ok(forward(m, g, &c, &xx, b)?.kl.expect("stochastic"))),
            ));
        }
        if cfg.cycle {
            let (c, xx) = (cfg.clone(), x.clone());
            out.push((
                format!("{method}.l1_rec_{tag}"),
                Box::new(move |m, g| Ok(forward(m, g, &c, &xx, b)?.l1_rec.expect("cycle"))),
            ));
        }
        if cfg.adversarial {
            let (c, xx) = (cfg.clone(), x.clone());
            out.push((
                format!("{method}.gen_adv_{tag}"),
                Box::new(move |m, g| {
                    let f = forward(m, g, &c, &xx, b)?;
                    gen_adv_graph(g, m, f.translation, b.other(), condition_for(&c, &f))
                }),
            ));
            // fakes enter the discriminator objective as constants
            let mut g0 = Graph::new();
            let f0 = forward(&m, &mut g0, &cfg, &x, b).expect("forward");
            let fake = g0.value(f0.translation).clone();
            let real = g0.value(f0.target).clone();
            let cond = condition_for(&cfg, &f0).map(|v| g0.value(v).clone());
            out.push((
                format!("{method}.dis_{}", b.other().tag()),
                Box::new(move |m, g| {
                    let r = g.constant(real.clone());
                    let f = g.constant(fake.clone());
                    let cv = cond.clone().map(|c| g.constant(c));
                    dis_objective_graph(g, m, r, f, b.other(), cv)
                }),
            ));
        }
        let (c, xx) = (cfg.clone(), x.clone());
        out.push((
            format!("{method}.total_gen_{tag}"),
            Box::new(move |m, g| {
                let f = forward(m, g, &c, &xx, b)?;
                let adv = if c.adversarial {
                    Some(gen_adv_graph(g, m, f.translation, b.other(), condition_for(&c, &f))?)
                } else {
                    None
                };
                combine_graph(g, &f, adv, &weights)
            }),
        ));
    }
    (m, out, margin)
}

pub struct TermReport {
    pub name: String,
    pub params: usize,
    pub worst: f64,
    pub worst_at: String,
}

fn eval(m: &Model<f64>, build: &Build) -> f64 {
    let mut g = Graph::new();
    let v = build(m, &mut g).expect("term builds");
    g.scalar(v)
}

pub fn check_term(model: &mut Model<f64>, name: &str, build: &Build) -> TermReport {
    let mut g = Graph::new();
    let v = build(model, &mut g).expect("term builds");
    let bound: Vec<String> = g.bound_params().map(str::to_string).collect();
    let grads = g.backward(v).into_param_grads();
    let (mut worst, mut worst_at, mut count) = (0.0f64, String::new(), 0);
    for p in &bound {
        let n = model.weights.get(p).expect("bound").len();
        for i in 0..n {
            let orig = model.weights.get(p).expect("bound").data()[i];
            model.weights.get_mut(p).expect("bound").data_mut()[i] = orig + EPS;
            let up = eval(model, build);
            model.weights.get_mut(p).expect("bound").data_mut()[i] = orig - EPS;
            let down = eval(model, build);
            model.weights.get_mut(p).expect("bound").data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * EPS);
            let an = grads.get(p).map_or(0.0, |t| t.data()[i]);
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(FLOOR);
            if err > worst {
                worst = err;
                worst_at = format!("{p}[{i}] fd {fd:.9e} analytic {an:.9e}");
            }
            count += 1;
        }
    }
    TermReport {
        name: name.to_string(),
        params: count,
        worst,
        worst_at,
    }
}

pub fn run() -> Verdict {
    let mut reports = Vec::new();
    let mut margin = f64::INFINITY;
    for method in Method::ALL {
        let (mut m, list, mg) = terms(method, 11);
        margin = margin.min(mg);
        for (name, build) in &list {
            reports.push(check_term(&mut m, name, build));
        }
    }
    let worst = reports
        .iter()
        .max_by(|a, b| a.worst.total_cmp(&b.worst))
        .expect("terms exist");
    let checked: usize = reports.iter().map(|r| r.params).sum();
    if std::env::var_os("DCBV_ACCEPTANCE_VERBOSE").is_some() {
        for r in &reports {
            eprintln!(
                "  {:28} {:6} params, max rel err {:.2e} at {}",
                r.name, r.params, r.worst, r.worst_at
            );
        }
    }
    Verdict::new(
        worst.worst <= TOLERANCE,
        format!(
            "{} terms, {checked} parameter derivatives, min L1 residual {margin:.3}, max rel err {:.2e} ({}; {}), tolerance {TOLERANCE:e}",
            reports.len(),
            worst.worst,
            worst.name,
            worst.worst_at
        ),
    )
}
