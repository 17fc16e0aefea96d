//! The dual-branch encoder/decoder/discriminator networks.
//!
//! Two encoders (`enc_t`, `enc_c`), two decoders (`dec_t`, `dec_c`) and two
//! patch discriminators (`dis_t`, `dis_c`). The deepest `shared_layers`
//! encoder blocks, the latent heads, the decoder input projection and the
//! first `shared_layers` decoder blocks are stored once under `shared.*`
//! names and used by both branches, which ties the two domains to one
//! latent space.
//!
//! Encoder: `n_down` × [conv 4×4 stride 2 → leaky ReLU 0.2], then 1×1 heads
//! for μ and log σ² (clamped to `[-10, 10]`). Decoder: 1×1 projection, then
//! `n_down` × [transposed conv 4×4 stride 2], instance normalization and leaky
//! ReLU between blocks and a sigmoid at the end. Discriminator: `dis_patch_levels` × [conv 4×4 stride 2
//! → leaky ReLU], then a 3×3 conv to one channel and a sigmoid, giving one
//! probability per patch.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub type ModelWeights<T = f32> = ParamStore<T>;

pub const LEAKY_SLOPE: f64 = 0.2;
/// Variance floor of the instance normalization in hidden decoder blocks.
pub const NORM_EPS: f64 = 1e-5;
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;
pub const INIT_STD: f64 = 0.02;

/// Image domain of a branch: tagged (`t`) or cine (`c`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Tagged,
    Cine,
}

impl Branch {
    pub fn tag(self) -> &'static str {
        match self {
            Branch::Tagged => "t",
            Branch::Cine => "c",
        }
    }

    pub fn other(self) -> Branch {
        match self {
            Branch::Tagged => Branch::Cine,
            Branch::Cine => Branch::Tagged,
        }
    }
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t" | "tagged" => Ok(Branch::Tagged),
            "c" | "cine" => Ok(Branch::Cine),
            other => Err(Error::InvalidConfig(format!("unknown branch `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Subnet {
    EncT,
    EncC,
    DecT,
    DecC,
    DisT,
    DisC,
}

impl Subnet {
    pub const ALL: [Subnet; 6] = [
        Subnet::EncT,
        Subnet::EncC,
        Subnet::DecT,
        Subnet::DecC,
        Subnet::DisT,
        Subnet::DisC,
    ];

    pub fn encoder(b: Branch) -> Subnet {
        match b {
            Branch::Tagged => Subnet::EncT,
            Branch::Cine => Subnet::EncC,
        }
    }

    pub fn decoder(b: Branch) -> Subnet {
        match b {
            Branch::Tagged => Subnet::DecT,
            Branch::Cine => Subnet::DecC,
        }
    }

    pub fn discriminator(b: Branch) -> Subnet {
        match b {
            Branch::Tagged => Subnet::DisT,
            Branch::Cine => Subnet::DisC,
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            Subnet::EncT => "enc_t",
            Subnet::EncC => "enc_c",
            Subnet::DecT => "dec_t",
            Subnet::DecC => "dec_c",
            Subnet::DisT => "dis_t",
            Subnet::DisC => "dis_c",
        }
    }

    pub fn is_discriminator(self) -> bool {
        matches!(self, Subnet::DisT | Subnet::DisC)
    }
}

impl fmt::Display for Subnet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

pub const SHARED_ENC_PREFIX: &str = "shared.enc.";
pub const SHARED_DEC_PREFIX: &str = "shared.dec.";

/// True for tensors owned by a discriminator.
pub fn is_discriminator_param(name: &str) -> bool {
    name.starts_with("dis_")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub image_size: usize,
    pub image_channels: usize,
    pub base_channels: usize,
    pub n_down: usize,
    pub latent_channels: usize,
    pub shared_layers: usize,
    pub dis_patch_levels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            image_size: 64,
            image_channels: 1,
            base_channels: 16,
            n_down: 3,
            latent_channels: 64,
            shared_layers: 1,
            dis_patch_levels: 3,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("image_size", self.image_size),
            ("image_channels", self.image_channels),
            ("base_channels", self.base_channels),
            ("n_down", self.n_down),
            ("latent_channels", self.latent_channels),
            ("shared_layers", self.shared_layers),
            ("dis_patch_levels", self.dis_patch_levels),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
        }
        if self.n_down >= 16 || !self.image_size.is_multiple_of(1 << self.n_down) {
            return Err(Error::InvalidConfig(format!(
                "image_size {} not divisible by 2^{}",
                self.image_size, self.n_down
            )));
        }
        if self.dis_patch_levels >= 16 || !self.image_size.is_multiple_of(1 << self.dis_patch_levels) {
            return Err(Error::InvalidConfig(format!(
                "image_size {} not divisible by 2^{} discriminator levels",
                self.image_size, self.dis_patch_levels
            )));
        }
        if self.shared_layers >= self.n_down {
            return Err(Error::InvalidConfig(format!(
                "shared_layers {} must be below n_down {} so each branch keeps a private block",
                self.shared_layers, self.n_down
            )));
        }
        Ok(())
    }

    /// Channels after encoder block `i` (and before the mirrored decoder block).
    pub fn channels(&self, i: usize) -> usize {
        self.base_channels << i.min(3)
    }

    pub fn latent_size(&self) -> usize {
        self.image_size >> self.n_down
    }

    pub fn latent_shape(&self, batch: usize) -> [usize; 4] {
        let s = self.latent_size();
        [batch, self.latent_channels, s, s]
    }

    pub fn image_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.image_channels, self.image_size, self.image_size]
    }

    pub fn patch_size(&self) -> usize {
        self.image_size >> self.dis_patch_levels
    }

    fn enc_block(&self, b: Branch, i: usize) -> String {
        if i >= self.n_down - self.shared_layers {
            format!("{SHARED_ENC_PREFIX}block{i}")
        } else {
            format!("enc_{}.block{i}", b.tag())
        }
    }

    fn dec_block(&self, b: Branch, j: usize) -> String {
        if j < self.shared_layers {
            format!("{SHARED_DEC_PREFIX}block{j}")
        } else {
            format!("dec_{}.block{j}", b.tag())
        }
    }

    /// `(layer name, kernel shape, has bias)` for every layer of a subnet.
    pub fn layers(&self, subnet: Subnet, dis_in_channels: usize) -> Vec<(String, [usize; 4])> {
        let k = 4;
        let mut out = Vec::new();
        match subnet {
            Subnet::EncT | Subnet::EncC => {
                let b = if subnet == Subnet::EncT {
                    Branch::Tagged
                } else {
                    Branch::Cine
                };
                for i in 0..self.n_down {
                    let cin = if i == 0 {
                        self.image_channels
                    } else {
                        self.channels(i - 1)
                    };
                    out.push((self.enc_block(b, i), [self.channels(i), cin, k, k]));
                }
                let top = self.channels(self.n_down - 1);
                out.push((format!("{SHARED_ENC_PREFIX}mu"), [self.latent_channels, top, 1, 1]));
                out.push((format!("{SHARED_ENC_PREFIX}logvar"), [self.latent_channels, top, 1, 1]));
            }
            Subnet::DecT | Subnet::DecC => {
                let b = if subnet == Subnet::DecT {
                    Branch::Tagged
                } else {
                    Branch::Cine
                };
                let top = self.channels(self.n_down - 1);
                out.push((format!("{SHARED_DEC_PREFIX}proj"), [top, self.latent_channels, 1, 1]));
                for j in 0..self.n_down {
                    let cin = self.channels(self.n_down - 1 - j);
                    let cout = if j + 1 == self.n_down {
                        self.image_channels
                    } else {
                        self.channels(self.n_down - 2 - j)
                    };
                    // transposed convolution kernels are [in, out, k, k]
                    out.push((self.dec_block(b, j), [cin, cout, k, k]));
                }
            }
            Subnet::DisT | Subnet::DisC => {
                let p = subnet.prefix();
                for i in 0..self.dis_patch_levels {
                    let cin = if i == 0 { dis_in_channels } else { self.channels(i - 1) };
                    out.push((format!("{p}.block{i}"), [self.channels(i), cin, k, k]));
                }
                let top = self.channels(self.dis_patch_levels - 1);
                out.push((format!("{p}.out"), [1, top, 3, 3]));
            }
        }
        out
    }

    /// Every tensor name a subnet reads, including shared ones.
    pub fn subnet_tensors(&self, subnet: Subnet, dis_in_channels: usize) -> Vec<String> {
        self.layers(subnet, dis_in_channels)
            .into_iter()
            .flat_map(|(layer, _)| [format!("{layer}.kernel"), format!("{layer}.bias")])
            .collect()
    }
}

/// Which subnets a model instantiates and how wide its discriminator input is.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub subnets: Vec<Subnet>,
    pub dis_in_channels: usize,
}

impl Layout {
    pub fn full(image_channels: usize) -> Self {
        Layout {
            subnets: Subnet::ALL.to_vec(),
            dis_in_channels: image_channels,
        }
    }

    pub fn has(&self, s: Subnet) -> bool {
        self.subnets.contains(&s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentDistribution<T: Scalar> {
    pub mu: Tensor<T>,
    pub logvar: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<T: Scalar> {
    pub z: Tensor<T>,
}

/// Per-patch probabilities plus their per-image mean.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchScores<T: Scalar> {
    pub map: Tensor<T>,
    pub scalar: Vec<T>,
}

/// Weights plus the architecture that reads them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub config: NetworkConfig,
    pub layout: Layout,
    pub weights: ModelWeights<T>,
}

impl<T: Scalar> Model<T> {
    /// Initializes every kernel from N(0, 0.02²) and every bias at zero.
    /// Each tensor's draw depends only on `(seed, name)`.
    pub fn new(config: NetworkConfig, layout: Layout, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut weights = ModelWeights::new();
        for &s in &layout.subnets {
            for (layer, shape) in config.layers(s, layout.dis_in_channels) {
                let kernel = format!("{layer}.kernel");
                if weights.contains(&kernel) {
                    continue;
                }
                let bias_len = if matches!(s, Subnet::DecT | Subnet::DecC) && !layer.ends_with("proj") {
                    shape[1]
                } else {
                    shape[0]
                };
                weights.init_normal(seed, &kernel, shape, INIT_STD);
                weights.init_zeros(&format!("{layer}.bias"), [1, bias_len, 1, 1]);
            }
        }
        Ok(Model {
            config,
            layout,
            weights,
        })
    }

    /// Rebuilds a model around existing weights, checking names and shapes.
    pub fn from_weights(config: NetworkConfig, layout: Layout, weights: ModelWeights<T>) -> Result<Self> {
        let reference = Model::<T>::new(config.clone(), layout.clone(), 0)?;
        for (name, t) in reference.weights.iter() {
            let have = weights.get(name)?;
            have.ensure_shape(t.shape(), name)?;
        }
        if let Some(extra) = weights.names().find(|n| !reference.weights.contains(n)) {
            return Err(Error::UnknownParam(extra.to_string()));
        }
        Ok(Model {
            config,
            layout,
            weights,
        })
    }

    fn check_image(&self, x: &Tensor<T>, channels: usize) -> Result<()> {
        let [_, c, h, w] = x.shape();
        let n = self.config.image_size;
        if c != channels || h != n || w != n {
            return Err(Error::Shape(format!(
                "expected [_, {channels}, {n}, {n}] image, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    fn layer(&self, g: &mut Graph<T>, name: &str) -> Result<(Var, Var)> {
        let w = g.param(&self.weights, &format!("{name}.kernel"))?;
        let b = g.param(&self.weights, &format!("{name}.bias"))?;
        Ok((w, b))
    }

    /// Encoder pass; returns `(μ, clamped log σ²)`.
    pub fn encode_graph(&self, g: &mut Graph<T>, x: Var, branch: Branch) -> Result<(Var, Var)> {
        self.check_image(g.value(x), self.config.image_channels)?;
        let layers = self.config.layers(Subnet::encoder(branch), self.layout.dis_in_channels);
        let mut h = x;
        for (name, _) in &layers[..self.config.n_down] {
            let (w, b) = self.layer(g, name)?;
            let c = g.conv2d(h, w, Some(b), 2, 1)?;
            h = g.leaky_relu(c, LEAKY_SLOPE);
        }
        let (wm, bm) = self.layer(g, &layers[self.config.n_down].0)?;
        let mu = g.conv2d(h, wm, Some(bm), 1, 0)?;
        let (wl, bl) = self.layer(g, &layers[self.config.n_down + 1].0)?;
        let raw = g.conv2d(h, wl, Some(bl), 1, 0)?;
        let logvar = g.clamp(raw, LOGVAR_MIN, LOGVAR_MAX);
        Ok((mu, logvar))
    }

    /// `z = μ + exp(log σ² / 2) ⊙ noise`, or `z = μ` without noise.
    pub fn reparameterize_graph(
        &self,
        g: &mut Graph<T>,
        mu: Var,
        logvar: Var,
        noise: Option<&Tensor<T>>,
    ) -> Result<Var> {
        reparameterize_graph(g, mu, logvar, noise)
    }

    pub fn decode_graph(&self, g: &mut Graph<T>, z: Var, branch: Branch) -> Result<Var> {
        let expected = self.config.latent_shape(g.value(z).batch());
        g.value(z).ensure_shape(expected, "latent code")?;
        let layers = self.config.layers(Subnet::decoder(branch), self.layout.dis_in_channels);
        let (wp, bp) = self.layer(g, &layers[0].0)?;
        let p = g.conv2d(z, wp, Some(bp), 1, 0)?;
        let mut h = g.leaky_relu(p, LEAKY_SLOPE);
        let last = layers.len() - 1;
        for (j, (name, _)) in layers.iter().enumerate().skip(1) {
            let (w, b) = self.layer(g, name)?;
            let u = g.conv_transpose2d(h, w, Some(b), 2, 1)?;
            h = if j == last {
                g.sigmoid(u)
            } else {
                let u = g.instance_norm(u, NORM_EPS);
                g.leaky_relu(u, LEAKY_SLOPE)
            };
        }
        Ok(h)
    }

    /// Patch probability map `[N, 1, s, s]` of a discriminator.
    pub fn discriminate_graph(&self, g: &mut Graph<T>, x: Var, branch: Branch) -> Result<Var> {
        self.check_image(g.value(x), self.layout.dis_in_channels)?;
        let layers = self
            .config
            .layers(Subnet::discriminator(branch), self.layout.dis_in_channels);
        let mut h = x;
        for (name, _) in &layers[..layers.len() - 1] {
            let (w, b) = self.layer(g, name)?;
            let c = g.conv2d(h, w, Some(b), 2, 1)?;
            h = g.leaky_relu(c, LEAKY_SLOPE);
        }
        let (w, b) = self.layer(g, &layers[layers.len() - 1].0)?;
        let logits = g.conv2d(h, w, Some(b), 1, 1)?;
        Ok(g.sigmoid(logits))
    }

    /// `decode(reparameterize(encode(x, d)), d)`.
    pub fn reconstruct_graph(
        &self,
        g: &mut Graph<T>,
        x: Var,
        domain: Branch,
        noise: Option<&Tensor<T>>,
    ) -> Result<Var> {
        self.cross_graph(g, x, domain, domain, noise)
    }

    /// `Dec_to(z ~ Enc_from(x))`.
    pub fn cross_graph(
        &self,
        g: &mut Graph<T>,
        x: Var,
        from: Branch,
        to: Branch,
        noise: Option<&Tensor<T>>,
    ) -> Result<Var> {
        let (mu, logvar) = self.encode_graph(g, x, from)?;
        let z = reparameterize_graph(g, mu, logvar, noise)?;
        self.decode_graph(g, z, to)
    }

    pub fn encode(&self, x: &Tensor<T>, branch: Branch) -> Result<LatentDistribution<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (mu, logvar) = self.encode_graph(&mut g, xv, branch)?;
        Ok(LatentDistribution {
            mu: g.value(mu).clone(),
            logvar: g.value(logvar).clone(),
        })
    }

    pub fn decode(&self, z: &LatentCode<T>, branch: Branch) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let zv = g.constant(z.z.clone());
        let out = self.decode_graph(&mut g, zv, branch)?;
        Ok(g.value(out).clone())
    }

    pub fn discriminate(&self, x: &Tensor<T>, branch: Branch) -> Result<PatchScores<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.discriminate_graph(&mut g, xv, branch)?;
        let map = g.value(out).clone();
        let scalar = (0..map.batch())
            .map(|i| {
                let s = map.sample(i);
                T::c(s.iter().map(|v| v.f64()).sum::<f64>() / s.len() as f64)
            })
            .collect();
        Ok(PatchScores { map, scalar })
    }

    pub fn reconstruct(&self, x: &Tensor<T>, domain: Branch, noise: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        self.cross(x, domain, domain, noise)
    }

    /// `x̃^{t→c} = Dec_c(Enc_t(x^t))`; `noise = None` is the deterministic
    /// mean mode used at test time.
    pub fn translate(&self, x_t: &Tensor<T>, noise: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        self.cross(x_t, Branch::Tagged, Branch::Cine, noise)
    }

    /// `x̃^{c→t} = Dec_t(Enc_c(x^c))`.
    pub fn translate_inverse(&self, x_c: &Tensor<T>, noise: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        self.cross(x_c, Branch::Cine, Branch::Tagged, noise)
    }

    fn cross(&self, x: &Tensor<T>, from: Branch, to: Branch, noise: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.cross_graph(&mut g, xv, from, to, noise)?;
        Ok(g.value(out).clone())
    }

    /// Names of the tensors a forward pass through `subnets` may read.
    pub fn tensors_of(&self, subnets: &[Subnet]) -> Vec<String> {
        let mut names: Vec<String> = subnets
            .iter()
            .flat_map(|&s| self.config.subnet_tensors(s, self.layout.dis_in_channels))
            .collect();
        names.sort();
        names.dedup();
        names
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            weights: self.weights.cast(),
        }
    }
}

pub fn reparameterize_graph<T: Scalar>(
    g: &mut Graph<T>,
    mu: Var,
    logvar: Var,
    noise: Option<&Tensor<T>>,
) -> Result<Var> {
    let Some(noise) = noise else {
        return Ok(mu);
    };
    noise.ensure_shape(g.value(mu).shape(), "reparameterization noise")?;
    let half = g.scale(logvar, 0.5);
    let std = g.exp(half);
    let eps = g.constant(noise.clone());
    let scaled = g.mul(std, eps)?;
    g.add(mu, scaled)
}

/// Standalone reparameterization on stored tensors.
pub fn reparameterize<T: Scalar>(d: &LatentDistribution<T>, noise: Option<&Tensor<T>>) -> Result<LatentCode<T>> {
    if d.mu.shape() != d.logvar.shape() {
        return Err(Error::Shape(format!(
            "mu {:?} vs logvar {:?}",
            d.mu.shape(),
            d.logvar.shape()
        )));
    }
    let mut g = Graph::new();
    let mu = g.constant(d.mu.clone());
    let lv = g.constant(d.logvar.clone());
    let z = reparameterize_graph(&mut g, mu, lv, noise)?;
    Ok(LatentCode { z: g.value(z).clone() })
}
