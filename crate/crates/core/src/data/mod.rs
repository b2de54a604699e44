// SPDX-License-Identifier: Apache-2.0

//! Datasets, weight bundles and file formats.

mod bundle;
mod cifar;
mod idx;

pub use bundle::{load_bundle, save_bundle, BUNDLE_FORMAT_VERSION, MANIFEST_FILE};
pub use cifar::{load_cifar10, CIFAR_RECORD_BYTES};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels};

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::net::FeatureShape;

/// Labeled images, HWC, pixel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub shape: FeatureShape,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(
        shape: FeatureShape,
        images: Vec<f32>,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        if images.len() != labels.len() * shape.len() {
            return Err(Error::shape(format!(
                "{} pixel values for {} images of {}x{}x{}",
                images.len(),
                labels.len(),
                shape.h,
                shape.w,
                shape.c
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::param(format!(
                "label {bad} outside {classes} classes"
            )));
        }
        if images.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::param("pixel values must lie in [0, 1]"));
        }
        Ok(Self {
            shape,
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.shape.len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Images `lo..hi`.
    pub fn range(&self, lo: usize, hi: usize) -> Self {
        let hi = hi.min(self.len());
        let lo = lo.min(hi);
        let n = self.shape.len();
        Self {
            shape: self.shape,
            images: self.images[lo * n..hi * n].to_vec(),
            labels: self.labels[lo..hi].to_vec(),
            classes: self.classes,
        }
    }

    /// The first `limit` images (all of them when `None`).
    pub fn take(&self, limit: Option<usize>) -> Self {
        match limit {
            Some(k) if k < self.len() => self.range(0, k),
            _ => self.clone(),
        }
    }
}

/// Official train and test splits of a task.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

/// Environment variable naming the dataset root.
pub const DATA_DIR_ENV: &str = "CTMSIM_DATA_DIR";

/// `$CTMSIM_DATA_DIR`, else `./data`.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Loads MNIST-layout IDX files from `dir` (`train-images-idx3-ubyte`, ...).
pub fn load_idx_dir(dir: &Path) -> Result<Splits> {
    let pair = |prefix: &str| {
        load_idx(
            dir.join(format!("{prefix}-images-idx3-ubyte")),
            dir.join(format!("{prefix}-labels-idx1-ubyte")),
        )
    };
    Ok(Splits {
        train: pair("train")?,
        test: pair("t10k")?,
    })
}

/// Loads the CIFAR-10 binary batches from `dir`.
pub fn load_cifar10_dir(dir: &Path) -> Result<Splits> {
    let train: Vec<PathBuf> = (1..=5)
        .map(|i| dir.join(format!("data_batch_{i}.bin")))
        .collect();
    Ok(Splits {
        train: load_cifar10(&train)?,
        test: load_cifar10(&[dir.join("test_batch.bin")])?,
    })
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
