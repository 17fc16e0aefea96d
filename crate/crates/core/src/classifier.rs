//! Small convolutional classifier over phantom shape classes, used in
//! place of an ImageNet network when computing the Inception Score.
//!
//! Three stride-2 convolutions (1 → 8 → 16 → 32 channels, leaky ReLU) reduce
//! the image by 8; a final convolution covering the whole remaining grid
//! yields one logit per class.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{softmax_rows, Graph, Var};
use crate::image::Image;
use crate::optim::{Hyper, OptimizerKind, OptimizerState};
use crate::params::ParamStore;
use crate::phantom::{labeled_cine_set, DEFAULT_FRAMES, NUM_SHAPE_CLASSES};
use crate::rng::{hash_str, rng_for};
use crate::tensor::Tensor;

pub const REQUIRED_ACCURACY: f64 = 0.9;
const CHANNELS: [usize; 3] = [8, 16, 32];

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateClassifier {
    pub image_size: usize,
    pub classes: usize,
    pub weights: ParamStore<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateConfig {
    pub seed: u64,
    pub image_size: usize,
    pub classes: usize,
    pub train_count: usize,
    pub held_out_count: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            seed: 0,
            image_size: 64,
            classes: NUM_SHAPE_CLASSES,
            train_count: 3000,
            held_out_count: 500,
            epochs: 12,
            batch_size: 32,
            lr: 2e-3,
        }
    }
}

impl SurrogateClassifier {
    pub fn new(image_size: usize, classes: usize, seed: u64) -> Result<Self> {
        if classes == 0 || image_size < 8 || !image_size.is_multiple_of(8) {
            return Err(Error::InvalidConfig(format!(
                "classifier needs >= 1 class and an image size divisible by 8, got {classes} and {image_size}"
            )));
        }
        let mut weights = ParamStore::new();
        let mut cin = 1;
        for (i, &c) in CHANNELS.iter().enumerate() {
            weights.init_normal(seed, &format!("clf.conv{i}.kernel"), [c, cin, 4, 4], 0.1);
            weights.init_zeros(&format!("clf.conv{i}.bias"), [1, c, 1, 1]);
            cin = c;
        }
        let g = image_size / 8;
        weights.init_normal(seed, "clf.out.kernel", [classes, cin, g, g], 0.02);
        weights.init_zeros("clf.out.bias", [1, classes, 1, 1]);
        Ok(SurrogateClassifier {
            image_size,
            classes,
            weights,
        })
    }

    fn logits(&self, g: &mut Graph<f32>, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..CHANNELS.len() {
            let w = g.param(&self.weights, &format!("clf.conv{i}.kernel"))?;
            let b = g.param(&self.weights, &format!("clf.conv{i}.bias"))?;
            let c = g.conv2d(h, w, Some(b), 2, 1)?;
            h = g.leaky_relu(c, 0.2);
        }
        let w = g.param(&self.weights, "clf.out.kernel")?;
        let b = g.param(&self.weights, "clf.out.bias")?;
        g.conv2d(h, w, Some(b), 1, 0)
    }

    fn stack(&self, images: &[&Image]) -> Result<Tensor<f32>> {
        for im in images {
            if im.dims() != (self.image_size, self.image_size) {
                return Err(Error::Shape(format!(
                    "classifier expects {0}x{0} images, got {1:?}",
                    self.image_size,
                    im.dims()
                )));
            }
        }
        Tensor::stack(&images.iter().map(|im| im.to_tensor()).collect::<Vec<_>>())
    }

    /// Class posterior of every image; each row sums to 1.
    pub fn probabilities(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        let refs: Vec<&Image> = images.iter().collect();
        for chunk in refs.chunks(64) {
            let mut g = Graph::new();
            let x = g.constant(self.stack(chunk)?);
            let l = self.logits(&mut g, x)?;
            let logits: Vec<f64> = g.value(l).data().iter().map(|&v| v as f64).collect();
            let p = softmax_rows(&logits, self.classes);
            out.extend(p.chunks(self.classes).map(|r| r.to_vec()));
        }
        Ok(out)
    }

    pub fn predict(&self, images: &[Image]) -> Result<Vec<usize>> {
        Ok(self
            .probabilities(images)?
            .iter()
            .map(|p| {
                p.iter()
                    .enumerate()
                    .fold((0, f64::MIN), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, labeled: &[(Image, usize)]) -> Result<f64> {
        if labeled.is_empty() {
            return Err(Error::Empty("accuracy of an empty set"));
        }
        let images: Vec<Image> = labeled.iter().map(|(im, _)| im.clone()).collect();
        let pred = self.predict(&images)?;
        let hits = pred.iter().zip(labeled).filter(|(p, (_, l))| *p == l).count();
        Ok(hits as f64 / labeled.len() as f64)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut c = Checkpoint::new(0);
        c.scalars.insert("clf.image_size".into(), self.image_size as u64);
        c.scalars.insert("clf.classes".into(), self.classes as u64);
        c.tensors = self.weights.clone();
        c.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c = Checkpoint::<f32>::load(path)?;
        let image_size = c.scalar("clf.image_size")? as usize;
        let classes = c.scalar("clf.classes")? as usize;
        let reference = SurrogateClassifier::new(image_size, classes, 0)?;
        for (name, t) in reference.weights.iter() {
            c.tensors.get(name)?.ensure_shape(t.shape(), name)?;
        }
        Ok(SurrogateClassifier {
            image_size,
            classes,
            weights: c.tensors,
        })
    }
}

/// Trains on `train` with seeded minibatch order, then measures accuracy on
/// `held_out`. Falling short of [`REQUIRED_ACCURACY`] is an error.
pub fn train_surrogate(
    train: &[(Image, usize)],
    held_out: &[(Image, usize)],
    cfg: &SurrogateConfig,
) -> Result<(SurrogateClassifier, f64)> {
    if train.is_empty() || held_out.is_empty() {
        return Err(Error::Empty("classifier training needs labeled images"));
    }
    let mut clf = SurrogateClassifier::new(cfg.image_size, cfg.classes, cfg.seed)?;
    if cfg.classes > 1 {
        let mut opt = OptimizerState::new(OptimizerKind::Adam);
        let hyper = Hyper {
            lr: cfg.lr,
            beta1: 0.9,
            beta2: 0.999,
        };
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng_for(cfg.seed, &[hash_str("clf-epoch"), epoch as u64]));
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let images: Vec<&Image> = chunk.iter().map(|&i| &train[i].0).collect();
                let labels: Vec<usize> = chunk.iter().map(|&i| train[i].1).collect();
                let mut g = Graph::new();
                let x = g.constant(clf.stack(&images)?);
                let logits = clf.logits(&mut g, x)?;
                let loss = g.cross_entropy(logits, &labels)?;
                let grads = g.backward(loss).into_param_grads();
                opt.apply("clf", &mut clf.weights, &grads, &hyper)?;
            }
        }
    }
    let accuracy = clf.accuracy(held_out)?;
    if accuracy < REQUIRED_ACCURACY {
        return Err(Error::ClassifierAccuracy {
            accuracy,
            required: REQUIRED_ACCURACY,
        });
    }
    Ok((clf, accuracy))
}

/// Generates labeled phantom cine frames and trains the classifier on them.
/// Returns the classifier and its held-out accuracy.
pub fn train_default_surrogate(cfg: &SurrogateConfig) -> Result<(SurrogateClassifier, f64)> {
    if cfg.classes != NUM_SHAPE_CLASSES && cfg.classes != 1 {
        return Err(Error::InvalidConfig(format!(
            "phantom images carry {NUM_SHAPE_CLASSES} shape classes, not {}",
            cfg.classes
        )));
    }
    let relabel = |set: Vec<(Image, usize)>| -> Vec<(Image, usize)> {
        set.into_iter()
            .map(|(im, l)| (im, if cfg.classes == 1 { 0 } else { l }))
            .collect()
    };
    let train = relabel(labeled_cine_set(
        cfg.seed,
        cfg.train_count,
        cfg.image_size,
        DEFAULT_FRAMES,
    )?);
    let held_out = relabel(labeled_cine_set(
        cfg.seed ^ 0x005e_ed0f_4e1d,
        cfg.held_out_count,
        cfg.image_size,
        DEFAULT_FRAMES,
    )?);
    train_surrogate(&train, &held_out, cfg)
}
