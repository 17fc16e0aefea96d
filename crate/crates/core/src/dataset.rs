//! Subject-disjoint paired datasets on disk.
//!
//! Layout under the output directory:
//!
//! ```text
//! manifest.json
//! <split>/s<subject>/f<frame>_tag.pgm
//! <split>/s<subject>/f<frame>_cine.pgm
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::phantom::{self, PhantomSpec, TagPattern, DEFAULT_FRAMES, DEFAULT_IMAGE_SIZE};
use crate::rng::{derive_seed, hash_str, rng_for};
use crate::tensor::{Scalar, Tensor};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!(
                "unknown split `{other}` (expected train, val or test)"
            ))),
        }
    }
}

/// One `(x^t, x^c)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub tagged: Image,
    pub cine: Image,
    pub subject_id: usize,
    pub frame_id: usize,
}

/// A stacked batch of pairs: `tagged[i]` and `cine[i]` show the same frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedBatch<T: Scalar> {
    pub tagged: Tensor<T>,
    pub cine: Tensor<T>,
}

impl<T: Scalar> PairedBatch<T> {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a PairedSample>) -> Result<Self> {
        let (mut t, mut c) = (Vec::new(), Vec::new());
        for s in samples {
            s.tagged.same_dims(&s.cine, "paired sample")?;
            t.push(s.tagged.to_tensor());
            c.push(s.cine.to_tensor());
        }
        if t.is_empty() {
            return Err(Error::Empty("batch has no samples"));
        }
        Ok(PairedBatch {
            tagged: Tensor::stack(&t)?,
            cine: Tensor::stack(&c)?,
        })
    }

    pub fn len(&self) -> usize {
        self.tagged.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cast<U: Scalar>(&self) -> PairedBatch<U> {
        PairedBatch {
            tagged: self.tagged.cast(),
            cine: self.cine.cast(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn is_disjoint(&self) -> bool {
        let mut seen = BTreeSet::new();
        Split::ALL
            .iter()
            .flat_map(|&s| self.get(s).iter())
            .all(|id| seen.insert(*id))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub image_size: usize,
    pub tag: TagPattern,
    pub splits: Splits,
    pub frames_per_subject: usize,
}

impl DatasetManifest {
    pub fn from_config(cfg: &DatasetConfig) -> Result<Self> {
        Ok(DatasetManifest {
            version: MANIFEST_VERSION,
            seed: cfg.seed,
            image_size: cfg.image_size,
            tag: cfg.tag.clone(),
            splits: cfg.assign_splits()?,
            frames_per_subject: cfg.frames_per_subject,
        })
    }

    pub fn subject_spec(&self, subject: usize) -> Result<PhantomSpec> {
        PhantomSpec::random(
            subject_seed(self.seed, subject),
            self.image_size,
            self.frames_per_subject,
        )
    }

    /// Ground-truth organ mask of a stored frame, regenerated from the seed.
    pub fn organ_mask(&self, subject: usize, frame: usize) -> Result<Image> {
        let spec = self.subject_spec(subject)?;
        let field = phantom::make_deformation(&spec, frame)?;
        phantom::organ_mask(&spec, &field)
    }

    pub fn split_of(&self, subject: usize) -> Option<Split> {
        Split::ALL.into_iter().find(|&s| self.splits.get(s).contains(&subject))
    }
}

pub fn subject_seed(global_seed: u64, subject: usize) -> u64 {
    derive_seed(global_seed, &[hash_str("subject"), subject as u64])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_subjects: usize,
    pub frames_per_subject: usize,
    pub split_ratios: [f64; 3],
    pub image_size: usize,
    pub tag: TagPattern,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            n_subjects: 20,
            frames_per_subject: DEFAULT_FRAMES,
            split_ratios: [0.5, 0.1, 0.4],
            image_size: DEFAULT_IMAGE_SIZE,
            tag: TagPattern::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 3 {
            return Err(Error::InvalidConfig(format!(
                "need at least 3 subjects for train/val/test, got {}",
                self.n_subjects
            )));
        }
        if self.frames_per_subject == 0 {
            return Err(Error::InvalidConfig("frames_per_subject must be >= 1".into()));
        }
        let sum: f64 = self.split_ratios.iter().sum();
        if self.split_ratios.iter().any(|r| r.is_nan() || *r <= 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "split ratios {:?} must be positive and sum to 1",
                self.split_ratios
            )));
        }
        if self.image_size < 16 || !self.image_size.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "image_size {} must be a power of two >= 16",
                self.image_size
            )));
        }
        self.tag.validate()
    }

    /// Subject counts per split: train and val rounded, test takes the rest,
    /// each split keeps at least one subject.
    pub fn split_counts(&self) -> Result<[usize; 3]> {
        self.validate()?;
        let n = self.n_subjects;
        let mut train = ((self.split_ratios[0] * n as f64).round() as usize).max(1);
        let mut val = ((self.split_ratios[1] * n as f64).round() as usize).max(1);
        while train + val > n - 1 {
            if train >= val {
                train -= 1;
            } else {
                val -= 1;
            }
        }
        Ok([train, val, n - train - val])
    }

    pub fn assign_splits(&self) -> Result<Splits> {
        let [n_train, n_val, _] = self.split_counts()?;
        let mut ids: Vec<usize> = (0..self.n_subjects).collect();
        ids.shuffle(&mut rng_for(self.seed, &[hash_str("splits")]));
        let take = |range: std::ops::Range<usize>| {
            let mut v = ids[range].to_vec();
            v.sort_unstable();
            v
        };
        Ok(Splits {
            train: take(0..n_train),
            val: take(n_train..n_train + n_val),
            test: take(n_train + n_val..self.n_subjects),
        })
    }
}

pub fn sample_paths(root: &Path, split: Split, subject: usize, frame: usize) -> (PathBuf, PathBuf) {
    let dir = root.join(split.as_str()).join(format!("s{subject}"));
    (
        dir.join(format!("f{frame}_tag.pgm")),
        dir.join(format!("f{frame}_cine.pgm")),
    )
}

/// Renders every subject and frame and writes the images plus
/// `manifest.json` under `out`.
pub fn generate_dataset(cfg: &DatasetConfig, out: &Path) -> Result<DatasetManifest> {
    let manifest = DatasetManifest::from_config(cfg)?;
    for split in Split::ALL {
        for &subject in manifest.splits.get(split) {
            let spec = manifest.subject_spec(subject)?;
            let dir = out.join(split.as_str()).join(format!("s{subject}"));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for frame in 0..cfg.frames_per_subject {
                let r = phantom::render_frame(&spec, &cfg.tag, frame)?;
                let (tag_path, cine_path) = sample_paths(out, split, subject, frame);
                r.tagged.write_pgm(tag_path)?;
                r.cine.write_pgm(cine_path)?;
            }
        }
    }
    let path = out.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Renders every pair of a split in memory, ordered by subject then frame.
/// Images are quantized to 8 bits, so they equal what [`Dataset::load_split`]
/// reads back from a generated directory.
pub fn render_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<PairedSample>> {
    let mut out = Vec::new();
    for &subject in manifest.splits.get(split) {
        let spec = manifest.subject_spec(subject)?;
        for frame in 0..manifest.frames_per_subject {
            let r = phantom::render_frame(&spec, &manifest.tag, frame)?;
            out.push(PairedSample {
                tagged: r.tagged.quantized(),
                cine: r.cine.quantized(),
                subject_id: subject,
                frame_id: frame,
            });
        }
    }
    Ok(out)
}

/// A dataset directory with a parsed manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            kind: "manifest",
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Parse {
                kind: "manifest",
                path,
                reason: format!("unsupported version {}", manifest.version),
            });
        }
        if !manifest.splits.is_disjoint() {
            return Err(Error::Parse {
                kind: "manifest",
                path,
                reason: "splits share subjects".into(),
            });
        }
        Ok(Dataset { root, manifest })
    }

    /// Every pair of a split, ordered by subject then frame.
    pub fn load_split(&self, split: Split) -> Result<Vec<PairedSample>> {
        let mut out = Vec::new();
        for &subject in self.manifest.splits.get(split) {
            for frame in 0..self.manifest.frames_per_subject {
                let (tp, cp) = sample_paths(&self.root, split, subject, frame);
                let tagged = Image::read_pgm(&tp)?;
                let cine = Image::read_pgm(&cp)?;
                let n = self.manifest.image_size;
                if tagged.dims() != (n, n) || cine.dims() != (n, n) {
                    return Err(Error::Parse {
                        kind: "PGM",
                        path: tp,
                        reason: format!("expected {n}x{n} images"),
                    });
                }
                out.push(PairedSample {
                    tagged,
                    cine,
                    subject_id: subject,
                    frame_id: frame,
                });
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize) -> DatasetConfig {
        DatasetConfig {
            n_subjects: n,
            frames_per_subject: 2,
            image_size: 16,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn twenty_subjects_split_ten_two_eight() {
        assert_eq!(cfg(20).split_counts().unwrap(), [10, 2, 8]);
    }

    #[test]
    fn tiny_cohorts_keep_every_split() {
        assert_eq!(cfg(3).split_counts().unwrap(), [1, 1, 1]);
        assert!(cfg(2).split_counts().is_err());
    }

    #[test]
    fn ratios_must_sum_to_one() {
        let mut c = cfg(10);
        c.split_ratios = [0.5, 0.5, 0.5];
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn assigned_splits_are_disjoint_and_complete() {
        for seed in 0..20 {
            let mut c = cfg(20);
            c.seed = seed;
            let s = c.assign_splits().unwrap();
            assert!(s.is_disjoint());
            let mut all: Vec<usize> = Split::ALL.iter().flat_map(|&x| s.get(x).to_vec()).collect();
            all.sort_unstable();
            assert_eq!(all, (0..20).collect::<Vec<_>>());
        }
    }

    #[test]
    fn split_names_parse() {
        for s in Split::ALL {
            assert_eq!(s.as_str().parse::<Split>().unwrap(), s);
        }
        assert!("holdout".parse::<Split>().is_err());
    }
}
