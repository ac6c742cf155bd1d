//! MNIST / FashionMNIST loading, normalization and batching.

pub mod idx;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use idx::{load_idx_images, load_idx_labels, IdxImages};

/// Environment variable naming the directory that holds `mnist/` and
/// `fashion/` subdirectories of IDX files.
pub const DATA_DIR_ENV: &str = "XSTAB_DATA_DIR";

pub const NUM_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Fashion,
}

impl DatasetKind {
    pub fn tag(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Fashion => "fashion",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

/// Data root from `XSTAB_DATA_DIR`, falling back to `fallback`.
pub fn data_root(fallback: impl AsRef<Path>) -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| fallback.as_ref().to_path_buf())
}

/// Pixel bytes scaled to `[0, 1]` by `/ 255`.
pub fn normalize(raw: &IdxImages) -> Vec<Tensor> {
    (0..raw.count)
        .map(|i| {
            let data = raw.image(i).iter().map(|&b| f64::from(b) / 255.0).collect();
            Tensor::from_parts(vec![1, raw.rows, raw.cols], data)
        })
        .collect()
}

/// Images in `[0, 1]` with their class labels.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub name: String,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(name: impl Into<String>, images: Vec<Tensor>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(i) = images
            .iter()
            .position(|im| im.data().iter().any(|v| !(0.0..=1.0).contains(v)))
        {
            return Err(Error::Data(format!("image {i} has pixels outside [0, 1]")));
        }
        if let Some(i) = labels.iter().position(|&l| l >= NUM_CLASSES) {
            return Err(Error::Data(format!("label {} at {i} out of range", labels[i])));
        }
        Ok(Self {
            name: name.into(),
            images,
            labels,
        })
    }

    pub fn from_idx(name: impl Into<String>, images: &IdxImages, labels: &[u8]) -> Result<Self> {
        if images.count != labels.len() {
            return Err(Error::Consistency(format!(
                "image file holds {} images, label file {} labels",
                images.count,
                labels.len()
            )));
        }
        Self::new(
            name,
            normalize(images),
            labels.iter().map(|&l| l as usize).collect(),
        )
    }

    /// Loads `{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]` from
    /// `root/<kind>/`.
    pub fn load(root: impl AsRef<Path>, kind: DatasetKind, split: Split) -> Result<Self> {
        let dir = root.as_ref().join(kind.tag());
        let images = load_idx_images(find_file(&dir, split, "images-idx3-ubyte")?)?;
        let labels = load_idx_labels(find_file(&dir, split, "labels-idx1-ubyte")?, NUM_CLASSES)?;
        Self::from_idx(format!("{}-{}", kind.tag(), split.prefix()), &images, &labels)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Deterministic class-stratified subset of `n` examples, kept in their
    /// original order.
    pub fn stratified_subset(&self, n: usize, seed: u64) -> Self {
        if n >= self.len() {
            return self.clone();
        }
        let mut counts = [0usize; NUM_CLASSES];
        for &l in &self.labels {
            counts[l] += 1;
        }
        let quota: Vec<usize> = counts.iter().map(|&c| (c * n).div_ceil(self.len())).collect();
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut taken = [0usize; NUM_CLASSES];
        let mut picked = Vec::with_capacity(n);
        for &i in &order {
            let l = self.labels[i];
            if taken[l] < quota[l] {
                taken[l] += 1;
                picked.push(i);
                if picked.len() == n {
                    break;
                }
            }
        }
        picked.sort_unstable();
        self.select(&picked)
    }
}

fn find_file(dir: &Path, split: Split, stem: &str) -> Result<PathBuf> {
    let base = dir.join(format!("{}-{stem}", split.prefix()));
    let gz = base.with_extension("gz");
    if gz.exists() {
        Ok(gz)
    } else if base.exists() {
        Ok(base)
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} (or .gz) not found", base.display()),
        )))
    }
}

/// Shuffled minibatch schedule; each epoch is a fresh permutation derived
/// from `(seed, epoch)`.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    batch_size: usize,
    seed: u64,
    epoch: u64,
}

impl BatchPlan {
    pub fn new(batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        Ok(Self {
            batch_size,
            seed,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Permutation of `0..n` for the current epoch, split into batches;
    /// advances the epoch counter.
    pub fn next_epoch(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        self.epoch += 1;
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}
