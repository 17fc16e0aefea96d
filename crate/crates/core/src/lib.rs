//! Tagged-to-cine image translation with a dual-cycle constrained bijective
//! VAE-GAN, together with a paired phantom generator, the comparison
//! baselines, and the evaluation metrics.

pub mod checkpoint;
pub mod classifier;
pub mod comparison;
pub mod conv;
pub mod dataset;
pub mod error;
pub mod format;
pub mod graph;
pub mod image;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod phantom;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use image::Image;
pub use model::{Branch, Layout, Model, ModelWeights, NetworkConfig, Subnet};
pub use objectives::{LossBreakdown, LossWeights, Method};
pub use params::ParamStore;
pub use tensor::{Scalar, Shape, Tensor};
pub use trainer::{TrainConfig, TrainState};
