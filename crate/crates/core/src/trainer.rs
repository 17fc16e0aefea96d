//! Round-based adversarial training: in every step each discriminator takes
//! one ascent step on detached fakes (Dis_t first, then Dis_c), then the
//! generator networks take one descent step against the updated
//! discriminators.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::classifier::SurrogateClassifier;
use crate::dataset::{PairedBatch, PairedSample};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{is_discriminator_param, Branch, Layout, Model, NetworkConfig, Subnet};
use crate::objectives::{
    branch_forward, branch_values, build_baseline, combine_graph, condition_for, dis_objective_graph, gen_adv_graph,
    total_gen_graph, LossBreakdown, LossWeights, Method, ObjectiveConfig,
};
use crate::optim::{GroupState, Hyper, OptimizerKind, OptimizerState};
use crate::params::ParamStore;
use crate::rng::{hash_str, rng_for, standard_normal};
use crate::tensor::{Scalar, Tensor};

pub const GEN_GROUP: &str = "gen";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const VAL_LOG: &str = "val_log.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub lr_gen: f64,
    pub lr_dis: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub method: Method,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            lr_gen: 1e-3,
            lr_dis: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_size: 4,
            steps: 2000,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            method: Method::Proposed,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        for (name, v) in [("lr_gen", self.lr_gen), ("lr_dis", self.lr_dis)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::InvalidConfig("checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Parse {
            kind: "train config",
            path: PathBuf::new(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::from_json(&text).map_err(|e| match e {
            Error::Parse { kind, reason, .. } => Error::Parse {
                kind,
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    fn gen_hyper(&self) -> Hyper {
        Hyper {
            lr: self.lr_gen,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
        }
    }

    fn dis_hyper(&self) -> Hyper {
        Hyper {
            lr: self.lr_dis,
            ..self.gen_hyper()
        }
    }
}

/// Reparameterization noise of one step, one tensor per source branch.
#[derive(Clone, Debug, PartialEq)]
pub struct StepNoise<T: Scalar> {
    pub tagged: Option<Tensor<T>>,
    pub cine: Option<Tensor<T>>,
}

impl<T: Scalar> StepNoise<T> {
    /// Draws from a stream keyed by `(seed, step, branch)`, so a branch sees
    /// the same noise whichever other branches a method trains.
    pub fn draw(seed: u64, step: u64, net: &NetworkConfig, objective: &ObjectiveConfig, batch: usize) -> Self {
        let draw = |b: Branch| {
            (objective.stochastic && objective.branches.contains(&b)).then(|| {
                let mut rng = rng_for(seed, &[hash_str("latent-noise"), step, b as u64]);
                standard_normal(net.latent_shape(batch), &mut rng)
            })
        };
        StepNoise {
            tagged: draw(Branch::Tagged),
            cine: draw(Branch::Cine),
        }
    }

    pub fn get(&self, b: Branch) -> Option<&Tensor<T>> {
        match b {
            Branch::Tagged => self.tagged.as_ref(),
            Branch::Cine => self.cine.as_ref(),
        }
    }
}

/// Seeded batch order: every epoch visits the training pairs in a fresh
/// permutation, and the batch of step `s` holds positions `s·B .. (s+1)·B`
/// of the concatenated epochs. Any step's batch is a pure function of
/// `(seed, step)`.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    seed: u64,
    n: usize,
    batch_size: usize,
    cached: Option<(u64, Vec<usize>)>,
}

impl BatchSampler {
    pub fn new(seed: u64, n: usize, batch_size: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("training set is empty"));
        }
        Ok(BatchSampler {
            seed,
            n,
            batch_size,
            cached: None,
        })
    }

    fn permutation(&mut self, epoch: u64) -> &[usize] {
        if self.cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut p: Vec<usize> = (0..self.n).collect();
            p.shuffle(&mut rng_for(self.seed, &[hash_str("batch-order"), epoch]));
            self.cached = Some((epoch, p));
        }
        &self.cached.as_ref().expect("cached").1
    }

    pub fn indices(&mut self, step: u64) -> Vec<usize> {
        let start = step * self.batch_size as u64;
        (0..self.batch_size as u64)
            .map(|j| {
                let pos = start + j;
                let n = self.n as u64;
                self.permutation(pos / n)[(pos % n) as usize]
            })
            .collect()
    }
}

/// The tensors one discriminator update saw.
#[derive(Clone, Debug, PartialEq)]
pub struct DisInputs<T: Scalar> {
    pub domain: Branch,
    pub real: Tensor<T>,
    pub fake: Tensor<T>,
    pub condition: Option<Tensor<T>>,
}

/// One applied parameter update, in application order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpdateRecord {
    pub group: String,
    pub params: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct StepReport<T: Scalar> {
    pub losses: LossBreakdown,
    pub updates: Vec<UpdateRecord>,
    pub dis_inputs: Vec<DisInputs<T>>,
}

fn dis_group(domain: Branch) -> String {
    Subnet::discriminator(domain).prefix().to_string()
}

fn non_finite(step: u64, what: &str, losses: &LossBreakdown) -> Error {
    Error::NonFinite {
        step,
        detail: format!(
            "{what}; loss terms: {}",
            LossBreakdown::csv_header()
                .split(',')
                .skip(1)
                .zip(losses.values())
                .map(|(n, v)| format!("{n}={v}"))
                .collect::<Vec<_>>()
                .join(" ")
        ),
    }
}

/// One training round. On a non-finite loss or gradient the step is
/// aborted and `model` and `opt` are restored to their state on entry.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut OptimizerState<T>,
    objective: &ObjectiveConfig,
    cfg: &TrainConfig,
    batch: &PairedBatch<T>,
    noise: &StepNoise<T>,
    step: u64,
) -> Result<StepReport<T>> {
    let saved = (model.weights.clone(), opt.clone());
    let out = train_step_inner(model, opt, objective, cfg, batch, noise, step);
    if out.is_err() {
        model.weights = saved.0;
        *opt = saved.1;
    }
    out
}

fn train_step_inner<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut OptimizerState<T>,
    objective: &ObjectiveConfig,
    cfg: &TrainConfig,
    batch: &PairedBatch<T>,
    noise: &StepNoise<T>,
    step: u64,
) -> Result<StepReport<T>> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch is empty"));
    }
    let mut losses = LossBreakdown::default();
    let mut updates = Vec::new();
    let mut dis_inputs = Vec::new();

    // generator forward pass, kept on the tape for the final update
    let mut g = Graph::new();
    let x_t = g.constant(batch.tagged.clone());
    let x_c = g.constant(batch.cine.clone());
    let forwards = objective
        .branches
        .iter()
        .map(|&b| {
            let (s, t) = if b == Branch::Tagged { (x_t, x_c) } else { (x_c, x_t) };
            branch_forward(&mut g, model, objective, s, t, b, noise.get(b))
        })
        .collect::<Result<Vec<_>>>()?;

    // discriminator ascent on detached fakes, Dis_t before Dis_c
    for domain in objective.discriminators() {
        let fwd = forwards
            .iter()
            .find(|f| f.branch.other() == domain)
            .expect("every discriminator has a translation stream");
        let inputs = DisInputs {
            domain,
            real: g.value(fwd.target).clone(),
            fake: g.value(fwd.translation).clone(),
            condition: condition_for(objective, fwd).map(|c| g.value(c).clone()),
        };
        let mut gd = Graph::new();
        let real = gd.constant(inputs.real.clone());
        let fake = gd.constant(inputs.fake.clone());
        let cond = inputs.condition.clone().map(|c| gd.constant(c));
        let l_dis = dis_objective_graph(&mut gd, model, real, fake, domain, cond)?;
        let value = gd.scalar(l_dis).f64();
        match domain {
            Branch::Tagged => losses.dis_t = value,
            Branch::Cine => losses.dis_c = value,
        }
        if !value.is_finite() {
            return Err(non_finite(step, "discriminator objective", &losses));
        }
        let ascent = gd.scale(l_dis, -1.0);
        let grads = gd.backward(ascent).into_param_grads();
        debug_assert!(grads.keys().all(|k| is_discriminator_param(k)));
        let group = dis_group(domain);
        opt.apply(&group, &mut model.weights, &grads, &cfg.dis_hyper())?;
        updates.push(UpdateRecord {
            group,
            params: grads.into_keys().collect(),
        });
        dis_inputs.push(inputs);
    }

    // generator descent against the updated discriminators
    let mut total = None;
    for fwd in &forwards {
        let adv = if objective.adversarial {
            let cond = condition_for(objective, fwd);
            Some(gen_adv_graph(&mut g, model, fwd.translation, fwd.branch.other(), cond)?)
        } else {
            None
        };
        let t = combine_graph(&mut g, fwd, adv, &cfg.weights)?;
        losses.record(fwd.branch, &branch_values(&g, fwd, adv, t));
        total = Some(match total {
            None => t,
            Some(acc) => g.add(acc, t)?,
        });
    }
    let total = total.expect("at least one branch");
    if !losses.all_finite() {
        let term = losses.first_non_finite().unwrap_or("loss");
        return Err(non_finite(step, &format!("generator term {term}"), &losses));
    }
    let grads: std::collections::BTreeMap<_, _> = g
        .backward(total)
        .into_param_grads()
        .into_iter()
        .filter(|(k, _)| !is_discriminator_param(k))
        .collect();
    opt.apply(GEN_GROUP, &mut model.weights, &grads, &cfg.gen_hyper())?;
    updates.push(UpdateRecord {
        group: GEN_GROUP.to_string(),
        params: grads.into_keys().collect(),
    });
    Ok(StepReport {
        losses,
        updates,
        dis_inputs,
    })
}

/// Sum of the per-branch generator objectives with the discriminators as
/// they are, evaluated on a fixed batch and noise.
pub fn generator_objective<T: Scalar>(
    model: &Model<T>,
    objective: &ObjectiveConfig,
    weights: &LossWeights,
    batch: &PairedBatch<T>,
    noise: &StepNoise<T>,
) -> Result<f64> {
    let mut g = Graph::new();
    let mut sum = 0.0;
    for &b in &objective.branches {
        let (t, _, _) = total_gen_graph(&mut g, batch, b, model, objective, weights, noise.get(b))?;
        sum += g.scalar(t).f64();
    }
    Ok(sum)
}

/// Model, optimizer state and step counter: everything a checkpoint holds.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T: Scalar> {
    pub method: Method,
    pub model: Model<T>,
    pub opt: OptimizerState<T>,
    pub step: u64,
}

const NET_KEYS: [&str; 7] = [
    "net.image_size",
    "net.image_channels",
    "net.base_channels",
    "net.n_down",
    "net.latent_channels",
    "net.shared_layers",
    "net.dis_patch_levels",
];

fn subnet_mask(layout: &Layout) -> u64 {
    Subnet::ALL
        .iter()
        .enumerate()
        .filter(|(_, s)| layout.has(**s))
        .map(|(i, _)| 1u64 << i)
        .sum()
}

impl<T: Scalar> TrainState<T> {
    pub fn new(net: &NetworkConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let objective = build_baseline(cfg.method, net);
        Ok(TrainState {
            method: cfg.method,
            model: Model::new(net.clone(), objective.layout, cfg.seed)?,
            opt: OptimizerState::new(cfg.optimizer),
            step: 0,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut c = Checkpoint::new(self.step);
        let n = &self.model.config;
        let vals = [
            n.image_size,
            n.image_channels,
            n.base_channels,
            n.n_down,
            n.latent_channels,
            n.shared_layers,
            n.dis_patch_levels,
        ];
        for (k, v) in NET_KEYS.iter().zip(vals) {
            c.scalars.insert(k.to_string(), v as u64);
        }
        c.scalars
            .insert("layout.subnets".into(), subnet_mask(&self.model.layout));
        c.scalars.insert(
            "layout.dis_in_channels".into(),
            self.model.layout.dis_in_channels as u64,
        );
        c.scalars.insert("method".into(), self.method.code());
        c.scalars.insert("opt.kind".into(), self.opt.kind.code());
        for (group, st) in &self.opt.groups {
            c.scalars.insert(format!("opt.{group}.step"), st.step);
            for (name, t) in st.m.iter() {
                c.tensors.insert(format!("opt.{group}.m/{name}"), t.clone());
            }
            for (name, t) in st.v.iter() {
                c.tensors.insert(format!("opt.{group}.v/{name}"), t.clone());
            }
        }
        for (name, t) in self.model.weights.iter() {
            c.tensors.insert(name, t.clone());
        }
        c
    }

    pub fn from_checkpoint(c: Checkpoint<T>) -> Result<Self> {
        let mut v = Vec::new();
        for k in NET_KEYS {
            v.push(c.scalar(k)? as usize);
        }
        let config = NetworkConfig {
            image_size: v[0],
            image_channels: v[1],
            base_channels: v[2],
            n_down: v[3],
            latent_channels: v[4],
            shared_layers: v[5],
            dis_patch_levels: v[6],
        };
        let mask = c.scalar("layout.subnets")?;
        let layout = Layout {
            subnets: Subnet::ALL
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, s)| *s)
                .collect(),
            dis_in_channels: c.scalar("layout.dis_in_channels")? as usize,
        };
        let method = Method::from_code(c.scalar("method")?)
            .ok_or_else(|| Error::CorruptCheckpoint("unknown method code".into()))?;
        let kind = OptimizerKind::from_code(c.scalar("opt.kind")?)
            .ok_or_else(|| Error::CorruptCheckpoint("unknown optimizer code".into()))?;
        let mut opt = OptimizerState::new(kind);
        let mut weights = ParamStore::new();
        for (name, t) in c.tensors.iter() {
            if let Some(rest) = name.strip_prefix("opt.") {
                let (head, param) = rest
                    .split_once('/')
                    .ok_or_else(|| Error::CorruptCheckpoint(format!("bad optimizer tensor `{name}`")))?;
                let (group, which) = head
                    .rsplit_once('.')
                    .ok_or_else(|| Error::CorruptCheckpoint(format!("bad optimizer tensor `{name}`")))?;
                let st = opt.groups.entry(group.to_string()).or_insert_with(GroupState::default);
                match which {
                    "m" => st.m.insert(param, t.clone()),
                    "v" => st.v.insert(param, t.clone()),
                    _ => return Err(Error::CorruptCheckpoint(format!("bad optimizer tensor `{name}`"))),
                }
            } else {
                weights.insert(name, t.clone());
            }
        }
        for (key, value) in &c.scalars {
            if let Some(group) = key.strip_prefix("opt.").and_then(|k| k.strip_suffix(".step")) {
                opt.groups.entry(group.to_string()).or_default().step = *value;
            }
        }
        let model = Model::from_weights(config, layout, weights).map_err(|e| match e {
            Error::Shape(m) => Error::CorruptCheckpoint(m),
            Error::UnknownParam(m) => Error::CorruptCheckpoint(format!("unexpected or missing tensor `{m}`")),
            other => other,
        })?;
        Ok(TrainState {
            method,
            model,
            opt,
            step: c.step,
        })
    }
}

pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, path: impl AsRef<Path>) -> Result<()> {
    state.to_checkpoint().save(path)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<TrainState<T>> {
    TrainState::from_checkpoint(Checkpoint::load(path)?)
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step}.dcbv")
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub train: Vec<(u64, LossBreakdown)>,
    pub val: Vec<(u64, MetricsReport)>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FitOptions<'a> {
    /// Where logs and checkpoints go; nothing is written without it.
    pub out_dir: Option<&'a Path>,
    /// Adds the IS columns to validation rows.
    pub classifier: Option<&'a SurrogateClassifier>,
    /// Skip validation entirely.
    pub skip_validation: bool,
}

#[derive(Clone, Debug)]
pub struct FitResult<T: Scalar> {
    pub state: TrainState<T>,
    pub log: TrainLog,
    pub checkpoints: Vec<PathBuf>,
}

struct LogFiles {
    train: BufWriter<File>,
    val: BufWriter<File>,
}

impl LogFiles {
    fn open(dir: &Path, append: bool) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str, header: String| -> Result<BufWriter<File>> {
            let path = dir.join(name);
            let exists = path.exists();
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(f);
            if !(append && exists) {
                writeln!(w, "{header}").map_err(|e| Error::io(&path, e))?;
            }
            Ok(w)
        };
        Ok(LogFiles {
            train: open(TRAIN_LOG, LossBreakdown::csv_header())?,
            val: open(VAL_LOG, MetricsReport::csv_header("step"))?,
        })
    }

    fn flush(&mut self, dir: &Path) -> Result<()> {
        self.train.flush().map_err(|e| Error::io(dir.join(TRAIN_LOG), e))?;
        self.val.flush().map_err(|e| Error::io(dir.join(VAL_LOG), e))
    }
}

/// Trains from freshly initialized weights for `cfg.steps` steps.
pub fn fit<T: Scalar>(
    train: &[PairedSample],
    val: &[PairedSample],
    net: &NetworkConfig,
    cfg: &TrainConfig,
    opts: &FitOptions,
) -> Result<FitResult<T>> {
    let state = TrainState::new(net, cfg)?;
    fit_from(state, train, val, cfg, opts)
}

/// Continues training `state` until `cfg.steps` steps have been taken in
/// total. Validation and checkpoints happen at multiples of
/// `cfg.checkpoint_every` and after the last step; a fresh run also writes
/// the initial checkpoint.
pub fn fit_from<T: Scalar>(
    mut state: TrainState<T>,
    train: &[PairedSample],
    val: &[PairedSample],
    cfg: &TrainConfig,
    opts: &FitOptions,
) -> Result<FitResult<T>> {
    cfg.validate()?;
    if state.method != cfg.method {
        return Err(Error::InvalidConfig(format!(
            "state was trained as {} but the config asks for {}",
            state.method, cfg.method
        )));
    }
    check_disjoint(train, val)?;
    let objective = build_baseline(cfg.method, &state.model.config);
    let mut sampler = BatchSampler::new(cfg.seed, train.len(), cfg.batch_size)?;
    let mut log = TrainLog::default();
    let mut checkpoints = Vec::new();
    let mut files = match opts.out_dir {
        Some(dir) => Some(LogFiles::open(dir, state.step > 0)?),
        None => None,
    };
    let mut last_good: Option<PathBuf> = None;
    let write_ckpt =
        |state: &TrainState<T>, checkpoints: &mut Vec<PathBuf>, last: &mut Option<PathBuf>| -> Result<()> {
            if let Some(dir) = opts.out_dir {
                let p = dir.join(checkpoint_name(state.step));
                save_checkpoint(state, &p)?;
                checkpoints.push(p.clone());
                *last = Some(p);
            }
            Ok(())
        };
    if state.step == 0 {
        write_ckpt(&state, &mut checkpoints, &mut last_good)?;
    }
    while state.step < cfg.steps {
        let step = state.step;
        let idx = sampler.indices(step);
        let batch = PairedBatch::from_samples(idx.iter().map(|&i| &train[i]))?;
        let noise = StepNoise::draw(cfg.seed, step, &state.model.config, &objective, batch.len());
        let report = match train_step(&mut state.model, &mut state.opt, &objective, cfg, &batch, &noise, step) {
            Ok(r) => r,
            Err(Error::NonFinite { step, detail }) => {
                if let (Some(f), Some(dir)) = (files.as_mut(), opts.out_dir) {
                    f.flush(dir)?;
                }
                let kept = last_good
                    .as_ref()
                    .map_or("none written".to_string(), |p| p.display().to_string());
                return Err(Error::NonFinite {
                    step,
                    detail: format!("{detail}; last good checkpoint: {kept}"),
                });
            }
            Err(e) => return Err(e),
        };
        state.step += 1;
        if let Some(f) = files.as_mut() {
            writeln!(f.train, "{}", report.losses.csv_row(step))
                .map_err(|e| Error::io(opts.out_dir.unwrap_or(Path::new("")).join(TRAIN_LOG), e))?;
        }
        log.train.push((step, report.losses));
        if state.step.is_multiple_of(cfg.checkpoint_every) || state.step == cfg.steps {
            if !opts.skip_validation && !val.is_empty() {
                let r = evaluate(&state.model, val, opts.classifier)?.report;
                if let Some(f) = files.as_mut() {
                    writeln!(f.val, "{}", r.csv_row(&state.step.to_string()))
                        .map_err(|e| Error::io(opts.out_dir.unwrap_or(Path::new("")).join(VAL_LOG), e))?;
                }
                log.val.push((state.step, r));
            }
            write_ckpt(&state, &mut checkpoints, &mut last_good)?;
            if let (Some(f), Some(dir)) = (files.as_mut(), opts.out_dir) {
                f.flush(dir)?;
            }
        }
    }
    if let (Some(f), Some(dir)) = (files.as_mut(), opts.out_dir) {
        f.flush(dir)?;
    }
    Ok(FitResult {
        state,
        log,
        checkpoints,
    })
}

fn check_disjoint(train: &[PairedSample], val: &[PairedSample]) -> Result<()> {
    let train_ids: std::collections::BTreeSet<usize> = train.iter().map(|s| s.subject_id).collect();
    if let Some(s) = val.iter().find(|s| train_ids.contains(&s.subject_id)) {
        return Err(Error::InvalidConfig(format!(
            "subject {} appears in both training and validation data",
            s.subject_id
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub weights: LossWeights,
    pub report: MetricsReport,
}

impl GridRow {
    pub const CSV_HEADER: &'static str =
        "alpha,beta,lambda,n,l1_mean,l1_se,ssim_mean,ssim_se,psnr_mean,psnr_se,is_mean,is_se";

    pub fn csv_row(&self) -> String {
        let w = &self.weights;
        let label = format!(
            "{},{},{}",
            crate::format::sig9(w.alpha),
            crate::format::sig9(w.beta),
            crate::format::sig9(w.lambda)
        );
        self.report.csv_row(&label)
    }
}

/// Index of the best row: highest SSIM, then highest PSNR, then the
/// lexicographically smallest `(α, β, λ)`.
pub fn select_best(rows: &[GridRow]) -> Option<usize> {
    (0..rows.len()).min_by(|&a, &b| {
        let (ra, rb) = (&rows[a], &rows[b]);
        rb.report
            .ssim_mean
            .total_cmp(&ra.report.ssim_mean)
            .then(rb.report.psnr_mean.total_cmp(&ra.report.psnr_mean))
            .then(ra.weights.alpha.total_cmp(&rb.weights.alpha))
            .then(ra.weights.beta.total_cmp(&rb.weights.beta))
            .then(ra.weights.lambda.total_cmp(&rb.weights.lambda))
    })
}

/// Trains one run per grid point and picks the one with the best
/// validation SSIM.
pub fn grid_search<T: Scalar>(
    grid: &[LossWeights],
    train: &[PairedSample],
    val: &[PairedSample],
    net: &NetworkConfig,
    cfg: &TrainConfig,
    classifier: Option<&SurrogateClassifier>,
) -> Result<(LossWeights, Vec<GridRow>)> {
    if grid.is_empty() {
        return Err(Error::Empty("grid search needs at least one grid point"));
    }
    if val.is_empty() {
        return Err(Error::Empty("grid search needs validation data"));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for w in grid {
        let run_cfg = TrainConfig {
            weights: *w,
            ..cfg.clone()
        };
        let opts = FitOptions {
            skip_validation: true,
            ..FitOptions::default()
        };
        let res = fit::<T>(train, val, net, &run_cfg, &opts)?;
        let report = evaluate(&res.state.model, val, classifier)?.report;
        rows.push(GridRow { weights: *w, report });
    }
    let best = select_best(&rows).expect("non-empty grid");
    Ok((rows[best].weights, rows))
}
