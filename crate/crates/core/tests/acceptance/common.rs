//! Datasets shared by several criteria.

use std::path::Path;

use dcbv::dataset::{render_split, DatasetConfig, DatasetManifest, PairedSample, Split};
use dcbv::trainer::TrainConfig;

pub struct Splits {
    pub manifest: DatasetManifest,
    pub train: Vec<PairedSample>,
    pub val: Vec<PairedSample>,
    pub test: Vec<PairedSample>,
}

pub fn splits(cfg: &DatasetConfig) -> Splits {
    let manifest = DatasetManifest::from_config(cfg).expect("valid dataset config");
    let render = |s| render_split(&manifest, s).expect("phantom renders");
    Splits {
        train: render(Split::Train),
        val: render(Split::Val),
        test: render(Split::Test),
        manifest,
    }
}

/// The default 20-subject, 64×64 phantom dataset with a given seed.
pub fn default_dataset(seed: u64) -> Splits {
    splits(&DatasetConfig {
        seed,
        ..DatasetConfig::default()
    })
}

/// The shared training config of the desk-scale runs, as shipped for the
/// command-line tool.
pub fn desk_config() -> TrainConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    TrainConfig::load(&path).expect("configs/desk.json parses")
}
