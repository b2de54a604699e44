// SPDX-License-Identifier: Apache-2.0

//! Experiment configuration files.
//!
//! ```toml
//! task = "mnist"
//! seeds = [0, 1, 2, 3, 4]
//! limit = 2000
//! bundles = ["models/mnist-s0", "models/mnist-s1"]
//!
//! [device]
//! preset = "measured"
//!
//! [noise]
//! kind = "additive"
//! sigma = [0.0, 0.1, 0.2, 0.3]
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, Splits};
use crate::device::{CurrentRange, DecayParams, DeviceParams, NoiseKind};
use crate::error::{Error, Result};
use crate::net::{ActivationBound, FeatureShape, Topology};
use crate::rng::RngStream;
use crate::train::{OptimizerConfig, TrainConfig};
use crate::xbar::{Quantizer, ReadNoiseModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Mnist,
    Fmnist,
    Cifar10,
    /// Small synthetic 8×8 four-class set, no files needed.
    Toy,
}

impl Task {
    /// Directory below the data root holding this task's files.
    pub fn dir_name(self) -> &'static str {
        match self {
            Task::Mnist => "mnist",
            Task::Fmnist => "fashion-mnist",
            Task::Cifar10 => "cifar-10-batches-bin",
            Task::Toy => "",
        }
    }

    pub fn load(self, data_root: &Path) -> Result<Splits> {
        match self {
            Task::Mnist | Task::Fmnist => data::load_idx_dir(&data_root.join(self.dir_name())),
            Task::Cifar10 => data::load_cifar10_dir(&data_root.join(self.dir_name())),
            Task::Toy => Ok(Splits {
                train: toy_dataset(512, 1),
                test: toy_dataset(256, 2),
            }),
        }
    }
}

/// Four classes, each a bright quadrant on a noisy 8×8 background.
pub fn toy_dataset(n: usize, stream: u64) -> Dataset {
    let mut rng = RngStream::new(0x0074_6f79, stream);
    let mut images = Vec::with_capacity(n * 64);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 4;
        for y in 0..8 {
            for x in 0..8 {
                let q = (y / 4) * 2 + x / 4;
                let base = if q == label { 0.7 } else { 0.0 };
                images.push((base + 0.3 * rng.uniform()) as f32);
            }
        }
        labels.push(label);
    }
    Dataset::new(FeatureShape::new(8, 8, 1), images, labels, 4).expect("toy data is valid")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DevicePreset {
    Ideal,
    Measured,
    Cycled,
}

/// Either a preset or a device-parameter file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSection {
    pub preset: Option<DevicePreset>,
    pub file: Option<PathBuf>,
    /// Overrides the measured preset's spread after one day.
    pub sigma_one_day: Option<f64>,
}

impl DeviceSection {
    pub fn resolve(&self, base: &Path) -> Result<DeviceParams> {
        let range = CurrentRange::default();
        match (self.preset, &self.file) {
            (Some(_), Some(_)) => Err(Error::config("device: give either preset or file")),
            (_, Some(file)) => {
                if self.sigma_one_day.is_some() {
                    return Err(Error::config(
                        "device: sigma_one_day only applies to presets",
                    ));
                }
                DeviceParams::load(base.join(file))
            }
            (preset, None) => {
                let decay = match (preset.unwrap_or(DevicePreset::Ideal), self.sigma_one_day) {
                    (DevicePreset::Measured, Some(s)) => {
                        DecayParams::measured_with_one_day_spread(s)
                    }
                    (_, Some(_)) => {
                        return Err(Error::config(
                            "device: sigma_one_day only applies to the measured preset",
                        ))
                    }
                    (DevicePreset::Ideal, None) => DecayParams::ideal(),
                    (DevicePreset::Measured, None) => DecayParams::measured(),
                    (DevicePreset::Cycled, None) => DecayParams::cycled(range),
                };
                DeviceParams::new(range, decay)
            }
        }
    }
}

fn default_kind() -> NoiseKind {
    NoiseKind::Additive
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSweep {
    #[serde(default = "default_kind")]
    pub kind: NoiseKind,
    /// Read-noise levels as fractions of the current window.
    pub sigma: Vec<f64>,
}

/// Log-spaced times `from · 10^(i / per_decade)` up to `to`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub from_hours: f64,
    pub to_hours: f64,
    #[serde(default = "default_per_decade")]
    pub per_decade: u32,
}

fn default_per_decade() -> u32 {
    8
}

impl TimeGrid {
    pub fn points(&self) -> Result<Vec<f64>> {
        if !(self.from_hours > 0.0 && self.to_hours >= self.from_hours && self.per_decade > 0) {
            return Err(Error::config(format!(
                "time grid needs 0 < from ({}) <= to ({}) and per_decade > 0",
                self.from_hours, self.to_hours
            )));
        }
        let steps = ((self.to_hours / self.from_hours).log10() * self.per_decade as f64 + 1e-9)
            .floor() as u32;
        Ok((0..=steps)
            .map(|i| self.from_hours * 10f64.powf(i as f64 / self.per_decade as f64))
            .collect())
    }
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSweep {
    /// Explicit times in hours; combined with `grid` if both are given.
    #[serde(default)]
    pub times: Vec<f64>,
    pub grid: Option<TimeGrid>,
    /// Also evaluate the freshly programmed network (t = 0).
    #[serde(default = "yes")]
    pub include_zero: bool,
    #[serde(default = "default_kind")]
    pub noise_kind: NoiseKind,
    #[serde(default)]
    pub sigma_syn: f64,
}

impl DriftSweep {
    /// Sorted, de-duplicated evaluation times.
    pub fn times(&self) -> Result<Vec<f64>> {
        let mut t = self.times.clone();
        if let Some(g) = &self.grid {
            t.extend(g.points()?);
        }
        if self.include_zero {
            t.push(0.0);
        }
        if let Some(bad) = t.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::config(format!("time {bad} h must be >= 0")));
        }
        t.sort_by(f64::total_cmp);
        t.dedup();
        if t.is_empty() {
            return Err(Error::config("drift sweep has no time points"));
        }
        Ok(t)
    }
}

fn default_bits() -> Vec<u32> {
    (1..=10).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdcSweep {
    #[serde(default = "default_bits")]
    pub bits: Vec<u32>,
    /// Also evaluate without converters.
    #[serde(default = "yes")]
    pub full_precision: bool,
    #[serde(default = "default_kind")]
    pub noise_kind: NoiseKind,
    #[serde(default)]
    pub sigma_syn: f64,
}

impl AdcSweep {
    pub fn points(&self) -> Result<Vec<Option<u32>>> {
        let mut out = Vec::new();
        for &b in &self.bits {
            Quantizer::new(Some(b), 0.0, 1.0)?;
            out.push(Some(b));
        }
        if self.full_precision {
            out.push(None);
        }
        if out.is_empty() {
            return Err(Error::config("adc sweep has no bit widths"));
        }
        Ok(out)
    }
}

fn default_bins() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotSection {
    /// Weighted layer index (0 = first conv layer).
    pub layer: usize,
    pub time_hours: f64,
    #[serde(default = "default_bins")]
    pub bins: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferSection {
    #[serde(default)]
    pub time_hours: f64,
    #[serde(default = "default_kind")]
    pub noise_kind: NoiseKind,
    #[serde(default)]
    pub sigma_syn: f64,
}

fn default_batch() -> usize {
    128
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Output bundle directory.
    pub bundle: PathBuf,
    pub epochs: usize,
    pub activation_bound: ActivationBound,
    #[serde(default)]
    pub sigma_neu: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Train on the first `train_limit` training images only.
    pub train_limit: Option<usize>,
}

impl TrainSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            sigma_neu: self.sigma_neu,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            epochs: self.epochs,
            activation_bound: self.activation_bound,
            seed,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_calibration() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    /// Dataset root; `$CTMSIM_DATA_DIR` takes precedence.
    pub data_dir: Option<PathBuf>,
    /// Evaluate on the first `limit` test images.
    pub limit: Option<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub bundles: Vec<PathBuf>,
    #[serde(default)]
    pub device: DeviceSection,
    #[serde(default)]
    pub read_model: ReadNoiseModel,
    /// Training images used to calibrate converter ranges.
    #[serde(default = "default_calibration")]
    pub calibration_images: usize,
    /// Converter resolution for the noise and drift sweeps; none by default.
    pub converter_bits: Option<u32>,
    pub out: Option<PathBuf>,
    /// Network for `train`; the reference topology when absent.
    pub topology: Option<Topology>,
    pub noise: Option<NoiseSweep>,
    pub drift: Option<DriftSweep>,
    pub adc: Option<AdcSweep>,
    pub snapshot: Option<SnapshotSection>,
    pub infer: Option<InferSection>,
    pub train: Option<TrainSection>,
    /// Directory the file was loaded from.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        if cfg.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    /// `$CTMSIM_DATA_DIR`, else `data_dir`, else `./data`.
    pub fn data_root(&self) -> PathBuf {
        match (std::env::var_os(data::DATA_DIR_ENV), &self.data_dir) {
            (Some(env), _) => PathBuf::from(env),
            (None, Some(dir)) => self.resolve(dir),
            (None, None) => data::default_data_dir(),
        }
    }

    pub fn device_params(&self) -> Result<DeviceParams> {
        self.device.resolve(&self.base_dir)
    }

    pub fn bundle_paths(&self) -> Result<Vec<PathBuf>> {
        if self.bundles.is_empty() {
            return Err(Error::config("no model bundles listed"));
        }
        Ok(self.bundles.iter().map(|b| self.resolve(b)).collect())
    }

    pub fn topology_for(&self, data: &Dataset, bound: ActivationBound) -> Topology {
        self.topology
            .clone()
            .unwrap_or_else(|| Topology::reference(data.shape, data.classes, bound))
    }

    pub fn section<'a, T>(&self, s: &'a Option<T>, name: &str) -> Result<&'a T> {
        s.as_ref()
            .ok_or_else(|| Error::config(format!("missing [{name}] section")))
    }
}
