//! Loss terms for the translation, reconstruction and adversarial streams,
//! and the objective configurations of the compared methods.
//!
//! The graph-level functions (`*_graph`) build differentiable nodes on a
//! [`Graph`]; the plain functions evaluate the same expressions on tensors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::PairedBatch;
use crate::error::{Error, Result};
use crate::format::sig9;
use crate::graph::{Graph, Var};
use crate::model::{Branch, LatentDistribution, Layout, Model, NetworkConfig, Subnet};
use crate::tensor::{Scalar, Tensor};

/// Probabilities are clamped to this floor before taking logs.
pub const LOG_FLOOR: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            lambda: 0.5,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, lambda: f64) -> Self {
        LossWeights { alpha, beta, lambda }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Every loss term of one training step. Terms a method does not use are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1_trans_t2c: f64,
    pub l1_trans_c2t: f64,
    pub kl_t: f64,
    pub kl_c: f64,
    pub l1_rec_t: f64,
    pub l1_rec_c: f64,
    pub dis_t: f64,
    pub dis_c: f64,
    pub gen_adv_t: f64,
    pub gen_adv_c: f64,
    pub total_gen_t: f64,
    pub total_gen_c: f64,
}

impl LossBreakdown {
    pub const FIELDS: [&'static str; 12] = [
        "l1_trans_t2c",
        "l1_trans_c2t",
        "kl_t",
        "kl_c",
        "l1_rec_t",
        "l1_rec_c",
        "dis_t",
        "dis_c",
        "gen_adv_t",
        "gen_adv_c",
        "total_gen_t",
        "total_gen_c",
    ];

    pub fn values(&self) -> [f64; 12] {
        [
            self.l1_trans_t2c,
            self.l1_trans_c2t,
            self.kl_t,
            self.kl_c,
            self.l1_rec_t,
            self.l1_rec_c,
            self.dis_t,
            self.dis_c,
            self.gen_adv_t,
            self.gen_adv_c,
            self.total_gen_t,
            self.total_gen_c,
        ]
    }

    pub fn csv_header() -> String {
        format!("step,{}", Self::FIELDS.join(","))
    }

    pub fn csv_row(&self, step: u64) -> String {
        let cols: Vec<String> = self.values().iter().map(|&v| sig9(v)).collect();
        format!("{step},{}", cols.join(","))
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    /// Name of the first non-finite term.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        Self::FIELDS
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
    }

    /// Merges the terms of one branch into this breakdown.
    pub fn record(&mut self, branch: Branch, terms: &BranchValues) {
        match branch {
            Branch::Tagged => {
                self.l1_trans_t2c = terms.l1_trans;
                self.kl_t = terms.kl;
                self.l1_rec_t = terms.l1_rec;
                self.gen_adv_t = terms.gen_adv;
                self.total_gen_t = terms.total;
            }
            Branch::Cine => {
                self.l1_trans_c2t = terms.l1_trans;
                self.kl_c = terms.kl;
                self.l1_rec_c = terms.l1_rec;
                self.gen_adv_c = terms.gen_adv;
                self.total_gen_c = terms.total;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    VaeOnly,
    VaeGan,
    #[serde(rename = "pix2pix")]
    Pix2Pix,
    Proposed,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::VaeOnly, Method::VaeGan, Method::Pix2Pix, Method::Proposed];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::VaeOnly => "vae_only",
            Method::VaeGan => "vae_gan",
            Method::Pix2Pix => "pix2pix",
            Method::Proposed => "proposed",
        }
    }

    pub fn code(self) -> u64 {
        match self {
            Method::VaeOnly => 0,
            Method::VaeGan => 1,
            Method::Pix2Pix => 2,
            Method::Proposed => 3,
        }
    }

    pub fn from_code(code: u64) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.code() == code)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

/// What a method trains and which terms enter its generator objective.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub method: Method,
    pub layout: Layout,
    /// Source branches whose translation stream is trained.
    pub branches: Vec<Branch>,
    /// Sample `z` during training and add the KL term.
    pub stochastic: bool,
    /// Add the within-domain reconstruction term.
    pub cycle: bool,
    pub adversarial: bool,
    /// The discriminator sees `(tagged input, image)` pairs.
    pub conditional: bool,
}

impl ObjectiveConfig {
    pub fn discriminators(&self) -> Vec<Branch> {
        if !self.adversarial {
            return Vec::new();
        }
        // Dis_t judges c→t fakes, Dis_c judges t→c fakes; t is updated first
        let mut out: Vec<Branch> = self.branches.iter().map(|b| b.other()).collect();
        out.sort();
        out
    }
}

/// Objective configuration of a method on a given backbone.
pub fn build_baseline(kind: Method, net: &NetworkConfig) -> ObjectiveConfig {
    let ch = net.image_channels;
    let single = |subnets: Vec<Subnet>, dis_in_channels| Layout {
        subnets,
        dis_in_channels,
    };
    match kind {
        Method::VaeOnly => ObjectiveConfig {
            method: kind,
            layout: single(vec![Subnet::EncT, Subnet::DecC], ch),
            branches: vec![Branch::Tagged],
            stochastic: true,
            cycle: false,
            adversarial: false,
            conditional: false,
        },
        Method::VaeGan => ObjectiveConfig {
            method: kind,
            layout: single(vec![Subnet::EncT, Subnet::DecC, Subnet::DisC], ch),
            branches: vec![Branch::Tagged],
            stochastic: true,
            cycle: false,
            adversarial: true,
            conditional: false,
        },
        Method::Pix2Pix => ObjectiveConfig {
            method: kind,
            layout: single(vec![Subnet::EncT, Subnet::DecC, Subnet::DisC], 2 * ch),
            branches: vec![Branch::Tagged],
            stochastic: false,
            cycle: false,
            adversarial: true,
            conditional: true,
        },
        Method::Proposed => ObjectiveConfig {
            method: kind,
            layout: Layout::full(ch),
            branches: vec![Branch::Tagged, Branch::Cine],
            stochastic: true,
            cycle: true,
            adversarial: true,
            conditional: false,
        },
    }
}

pub fn build_baseline_named(kind: &str, net: &NetworkConfig) -> Result<ObjectiveConfig> {
    Ok(build_baseline(kind.parse()?, net))
}

/// Mean absolute difference over all pixels.
pub fn l1_graph<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    g.mean_abs_diff(a, b)
}

/// Mean over latent elements of `0.5·(μ² + exp(logvar) − 1 − logvar)`.
pub fn kl_graph<T: Scalar>(g: &mut Graph<T>, mu: Var, logvar: Var) -> Result<Var> {
    g.kl_std_normal(mu, logvar)
}

/// Generator-side nodes of one branch before the adversarial term.
#[derive(Clone, Copy, Debug)]
pub struct BranchForward {
    pub branch: Branch,
    pub source: Var,
    pub target: Var,
    /// The translation `Dec_other(z)`.
    pub translation: Var,
    pub l1_trans: Var,
    pub kl: Option<Var>,
    pub l1_rec: Option<Var>,
}

/// Scalar values of one branch's terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BranchValues {
    pub l1_trans: f64,
    pub kl: f64,
    pub l1_rec: f64,
    pub gen_adv: f64,
    pub total: f64,
}

/// Encodes the source of `branch`, translates and, if configured,
/// reconstructs it from the same latent sample.
pub fn branch_forward<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    cfg: &ObjectiveConfig,
    source: Var,
    target: Var,
    branch: Branch,
    noise: Option<&Tensor<T>>,
) -> Result<BranchForward> {
    let (mu, logvar) = model.encode_graph(g, source, branch)?;
    let (z, kl) = if cfg.stochastic {
        let z = model.reparameterize_graph(g, mu, logvar, noise)?;
        (z, Some(kl_graph(g, mu, logvar)?))
    } else {
        (mu, None)
    };
    let translation = model.decode_graph(g, z, branch.other())?;
    let l1_trans = l1_graph(g, translation, target)?;
    let l1_rec = if cfg.cycle {
        let rec = model.decode_graph(g, z, branch)?;
        Some(l1_graph(g, rec, source)?)
    } else {
        None
    };
    Ok(BranchForward {
        branch,
        source,
        target,
        translation,
        l1_trans,
        kl,
        l1_rec,
    })
}

/// Discriminator input: the image itself, or `(condition, image)` stacked
/// along channels.
pub fn dis_input<T: Scalar>(g: &mut Graph<T>, image: Var, condition: Option<Var>) -> Result<Var> {
    match condition {
        Some(c) => g.concat_channels(c, image),
        None => Ok(image),
    }
}

/// `mean ln D(real) + mean ln(1 − D(fake))`, to be maximized by the
/// discriminator. Means run over batch and patches.
pub fn dis_objective_graph<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    real: Var,
    fake: Var,
    domain: Branch,
    condition: Option<Var>,
) -> Result<Var> {
    let real_in = dis_input(g, real, condition)?;
    let fake_in = dis_input(g, fake, condition)?;
    let d_real = model.discriminate_graph(g, real_in, domain)?;
    let d_fake = model.discriminate_graph(g, fake_in, domain)?;
    let log_real = g.log_clamped(d_real, LOG_FLOOR);
    let not_fake = g.one_minus(d_fake);
    let log_fake = g.log_clamped(not_fake, LOG_FLOOR);
    let a = g.mean(log_real);
    let b = g.mean(log_fake);
    g.add(a, b)
}

/// Non-saturating generator term `−mean ln D(fake)`.
pub fn gen_adv_graph<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    fake: Var,
    domain: Branch,
    condition: Option<Var>,
) -> Result<Var> {
    let input = dis_input(g, fake, condition)?;
    let d = model.discriminate_graph(g, input, domain)?;
    let log_d = g.log_clamped(d, LOG_FLOOR);
    let m = g.mean(log_d);
    Ok(g.scale(m, -1.0))
}

/// `(l1_trans + α·kl) + β·l1_rec + λ·gen_adv`, summed in that order so
/// that zero weights leave the leading terms bit-identical.
pub fn combine_graph<T: Scalar>(
    g: &mut Graph<T>,
    fwd: &BranchForward,
    gen_adv: Option<Var>,
    weights: &LossWeights,
) -> Result<Var> {
    let mut total = fwd.l1_trans;
    if let Some(kl) = fwd.kl {
        let k = g.scale(kl, weights.alpha);
        total = g.add(total, k)?;
    }
    if let Some(rec) = fwd.l1_rec {
        let r = g.scale(rec, weights.beta);
        total = g.add(total, r)?;
    }
    if let Some(adv) = gen_adv {
        let a = g.scale(adv, weights.lambda);
        total = g.add(total, a)?;
    }
    Ok(total)
}

/// The graph condition for a discriminator of `domain` under `cfg`.
pub fn condition_for(cfg: &ObjectiveConfig, fwd: &BranchForward) -> Option<Var> {
    cfg.conditional.then_some(fwd.source)
}

/// Reads the scalar values of a branch's nodes.
pub fn branch_values<T: Scalar>(g: &Graph<T>, fwd: &BranchForward, gen_adv: Option<Var>, total: Var) -> BranchValues {
    let v = |x: Option<Var>| x.map_or(0.0, |x| g.scalar(x).f64());
    BranchValues {
        l1_trans: g.scalar(fwd.l1_trans).f64(),
        kl: v(fwd.kl),
        l1_rec: v(fwd.l1_rec),
        gen_adv: v(gen_adv),
        total: g.scalar(total).f64(),
    }
}

/// Mean absolute difference of two equally shaped tensors.
pub fn l1<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
    let v = l1_graph(&mut g, a, b)?;
    Ok(g.scalar(v).f64())
}

pub fn kl_std_normal<T: Scalar>(d: &LatentDistribution<T>) -> Result<f64> {
    let mut g = Graph::new();
    let (mu, lv) = (g.constant(d.mu.clone()), g.constant(d.logvar.clone()));
    let v = kl_graph(&mut g, mu, lv)?;
    Ok(g.scalar(v).f64())
}

/// `L1(Dec_other(z), x_tgt) + α·KL(Enc_branch(x_src) ‖ N(0, I))`.
pub fn vae_objective<T: Scalar>(
    x_src: &Tensor<T>,
    x_tgt: &Tensor<T>,
    branch: Branch,
    model: &Model<T>,
    weights: &LossWeights,
    noise: Option<&Tensor<T>>,
) -> Result<f64> {
    let mut g = Graph::new();
    let cfg = ObjectiveConfig {
        cycle: false,
        ..build_baseline(Method::VaeOnly, &model.config)
    };
    let (s, t) = (g.constant(x_src.clone()), g.constant(x_tgt.clone()));
    let fwd = branch_forward(&mut g, model, &cfg, s, t, branch, noise)?;
    let total = combine_graph(&mut g, &fwd, None, weights)?;
    Ok(g.scalar(total).f64())
}

/// `L1(reconstruct(x, domain), x)`.
pub fn recon_objective<T: Scalar>(
    x: &Tensor<T>,
    domain: Branch,
    model: &Model<T>,
    noise: Option<&Tensor<T>>,
) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let rec = model.reconstruct_graph(&mut g, xv, domain, noise)?;
    let v = l1_graph(&mut g, rec, xv)?;
    Ok(g.scalar(v).f64())
}

pub fn dis_objective<T: Scalar>(
    real: &Tensor<T>,
    fake: &Tensor<T>,
    domain: Branch,
    model: &Model<T>,
    condition: Option<&Tensor<T>>,
) -> Result<f64> {
    let mut g = Graph::new();
    let (r, f) = (g.constant(real.clone()), g.constant(fake.clone()));
    let c = condition.map(|c| g.constant(c.clone()));
    let v = dis_objective_graph(&mut g, model, r, f, domain, c)?;
    Ok(g.scalar(v).f64())
}

pub fn gen_adv_objective<T: Scalar>(
    fake: &Tensor<T>,
    domain: Branch,
    model: &Model<T>,
    condition: Option<&Tensor<T>>,
) -> Result<f64> {
    let mut g = Graph::new();
    let f = g.constant(fake.clone());
    let c = condition.map(|c| g.constant(c.clone()));
    let v = gen_adv_graph(&mut g, model, f, domain, c)?;
    Ok(g.scalar(v).f64())
}

/// All generator terms of one source branch on a paired batch, with the
/// discriminators as they currently are.
pub fn total_gen_objective<T: Scalar>(
    batch: &PairedBatch<T>,
    branch: Branch,
    model: &Model<T>,
    cfg: &ObjectiveConfig,
    weights: &LossWeights,
    noise: Option<&Tensor<T>>,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let (total, fwd, adv) = total_gen_graph(&mut g, batch, branch, model, cfg, weights, noise)?;
    let mut out = LossBreakdown::default();
    out.record(branch, &branch_values(&g, &fwd, adv, total));
    Ok(out)
}

/// Graph form of [`total_gen_objective`]; returns `(total, forward, gen_adv)`.
pub fn total_gen_graph<T: Scalar>(
    g: &mut Graph<T>,
    batch: &PairedBatch<T>,
    branch: Branch,
    model: &Model<T>,
    cfg: &ObjectiveConfig,
    weights: &LossWeights,
    noise: Option<&Tensor<T>>,
) -> Result<(Var, BranchForward, Option<Var>)> {
    let (src, tgt) = match branch {
        Branch::Tagged => (&batch.tagged, &batch.cine),
        Branch::Cine => (&batch.cine, &batch.tagged),
    };
    let (s, t) = (g.constant(src.clone()), g.constant(tgt.clone()));
    let fwd = branch_forward(g, model, cfg, s, t, branch, noise)?;
    let adv = if cfg.adversarial {
        let cond = condition_for(cfg, &fwd);
        Some(gen_adv_graph(g, model, fwd.translation, branch.other(), cond)?)
    } else {
        None
    };
    let total = combine_graph(g, &fwd, adv, weights)?;
    Ok((total, fwd, adv))
}
