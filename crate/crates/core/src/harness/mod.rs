// SPDX-License-Identifier: Apache-2.0

//! Experiment runner: noise, drift and converter sweeps, current-distribution
//! snapshots, single-model inference and training.
//!
//! Every evaluation seed `s` owns the stream `RngStream::new(s, 0)`. Arrays
//! are programmed from it once per (model, seed), aged from that pristine
//! state at each time point, and read with `s / READ`. All points of a sweep
//! therefore share their random numbers, which keeps curves smooth and makes
//! every row a function of (config, seed) alone.

mod config;
mod report;

pub use config::{
    toy_dataset, AdcSweep, DevicePreset, DeviceSection, DriftSweep, ExperimentConfig, InferSection,
    NoiseSweep, SnapshotSection, Task, TimeGrid, TrainSection,
};
pub use report::{crossing_time, summarize, summary_path, write_rows, Stats, Table};

use serde::{Serialize, Serializer};

use crate::data::{self, Dataset};
use crate::device::{DeviceParams, NoiseKind, NoiseSpec};
use crate::error::{Error, Result};
use crate::net::{
    argmax, calibrate_ranges, Converters, NetworkSpec, ProgrammedNetwork, ReadConfig,
};
use crate::par::Execution;
use crate::rng::{tags, RngStream};
use crate::train::{self, EpochLog};
use crate::xbar::ReadNoiseModel;

/// A network and the name it is reported under.
#[derive(Clone, Debug)]
pub struct NamedModel {
    pub name: String,
    pub net: NetworkSpec,
}

/// Loads every bundle listed in `cfg`, named as written in the config.
pub fn load_models(cfg: &ExperimentConfig) -> Result<Vec<NamedModel>> {
    cfg.bundle_paths()?
        .into_iter()
        .zip(&cfg.bundles)
        .map(|(path, name)| {
            if !path.join(data::MANIFEST_FILE).is_file() {
                return Err(Error::config(format!(
                    "no model bundle at {}",
                    path.display()
                )));
            }
            Ok(NamedModel {
                name: name.display().to_string(),
                net: data::load_bundle(&path)?,
            })
        })
        .collect()
}

/// Everything a sweep evaluates against.
#[derive(Clone, Debug)]
pub struct Context {
    pub test: Dataset,
    /// Images for converter calibration.
    pub calibration: Dataset,
    pub device: DeviceParams,
    pub read_model: ReadNoiseModel,
    pub seeds: Vec<u64>,
    pub converter_bits: Option<u32>,
    pub exec: Execution,
}

impl Context {
    /// Loads the task data (test split cut to `cfg.limit`) and the device.
    pub fn from_config(cfg: &ExperimentConfig, exec: Execution) -> Result<Self> {
        let splits = cfg.task.load(&cfg.data_root())?;
        Ok(Self {
            test: splits.test.take(cfg.limit),
            calibration: splits.train.take(Some(cfg.calibration_images)),
            device: cfg.device_params()?,
            read_model: cfg.read_model,
            seeds: cfg.seeds.clone(),
            converter_bits: cfg.converter_bits,
            exec,
        })
    }

    fn read(&self, kind: NoiseKind, sigma: f64) -> Result<ReadConfig> {
        Ok(ReadConfig {
            noise: NoiseSpec::new(kind, sigma)?,
            model: self.read_model,
        })
    }

    /// Converters at `bits`: calibrated when `bits` is set, the model's own
    /// otherwise.
    fn converters(&self, net: &NetworkSpec, bits: Option<u32>) -> Result<Converters> {
        match bits {
            Some(b) => calibrate_ranges(net, &self.calibration.images, self.calibration.len())?
                .with_bits(Some(b)),
            None => Ok(net.converters.clone()),
        }
    }

    fn accuracy(
        &self,
        programmed: &ProgrammedNetwork,
        converters: &Converters,
        read: &ReadConfig,
        root: &RngStream,
    ) -> Result<f64> {
        programmed.engine(converters)?.accuracy(
            &self.test.images,
            &self.test.labels,
            read,
            &root.derive(tags::READ),
            self.exec,
        )
    }
}

fn seed_stream(seed: u64) -> RngStream {
    RngStream::new(seed, 0)
}

fn check_models(models: &[NamedModel]) -> Result<()> {
    if models.is_empty() {
        return Err(Error::config("no models to evaluate"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseRow {
    pub model: String,
    pub sigma_neu: f64,
    pub noise_kind: NoiseKind,
    /// Read-noise standard deviation as a fraction of the current window.
    pub sigma_syn_frac_of_range: f64,
    pub seed: u64,
    pub accuracy: f64,
}

/// Accuracy of every model and seed at every read-noise level.
pub fn sweep_noise(
    models: &[NamedModel],
    ctx: &Context,
    sweep: &NoiseSweep,
) -> Result<Table<NoiseRow>> {
    check_models(models)?;
    let mut rows = Vec::new();
    for m in models {
        let conv = ctx.converters(&m.net, ctx.converter_bits)?;
        for &seed in &ctx.seeds {
            let root = seed_stream(seed);
            let programmed = ProgrammedNetwork::build(&m.net, &ctx.device, &root)?;
            for &sigma in &sweep.sigma {
                let read = ctx.read(sweep.kind, sigma)?;
                rows.push(NoiseRow {
                    model: m.name.clone(),
                    sigma_neu: m.net.sigma_neu,
                    noise_kind: sweep.kind,
                    sigma_syn_frac_of_range: sigma,
                    seed,
                    accuracy: ctx.accuracy(&programmed, &conv, &read, &root)?,
                });
            }
        }
    }
    let summary = summarize(rows.iter().map(|r| {
        (
            vec![
                r.sigma_neu.to_string(),
                r.noise_kind.to_string(),
                r.sigma_syn_frac_of_range.to_string(),
            ],
            r.accuracy,
        )
    }));
    Ok(Table {
        rows,
        summary_keys: vec!["sigma_neu", "noise_kind", "sigma_syn_frac_of_range"],
        summary,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DriftRow {
    pub model: String,
    pub sigma_neu: f64,
    pub mode: String,
    pub t_hours: f64,
    pub seed: u64,
    pub sigma_syn_frac_of_range: f64,
    pub accuracy: f64,
}

/// Accuracy over time. At each time the arrays are aged from their freshly
/// programmed state, so every point is an independent age-`t` realization.
pub fn sweep_drift(
    models: &[NamedModel],
    ctx: &Context,
    sweep: &DriftSweep,
) -> Result<Table<DriftRow>> {
    check_models(models)?;
    let times = sweep.times()?;
    let read = ctx.read(sweep.noise_kind, sweep.sigma_syn)?;
    let mode = ctx.device.decay.mode.to_string();
    let mut rows = Vec::new();
    for m in models {
        let conv = ctx.converters(&m.net, ctx.converter_bits)?;
        for &seed in &ctx.seeds {
            let root = seed_stream(seed);
            let pristine = ProgrammedNetwork::build(&m.net, &ctx.device, &root)?;
            for &t in &times {
                let aged = pristine.aged(t, &root)?;
                rows.push(DriftRow {
                    model: m.name.clone(),
                    sigma_neu: m.net.sigma_neu,
                    mode: mode.clone(),
                    t_hours: t,
                    seed,
                    sigma_syn_frac_of_range: sweep.sigma_syn,
                    accuracy: ctx.accuracy(&aged, &conv, &read, &root)?,
                });
            }
        }
    }
    let summary = summarize(rows.iter().map(|r| {
        (
            vec![
                r.sigma_neu.to_string(),
                r.mode.clone(),
                r.t_hours.to_string(),
            ],
            r.accuracy,
        )
    }));
    Ok(Table {
        rows,
        summary_keys: vec!["sigma_neu", "mode", "t_hours"],
        summary,
    })
}

/// Mean accuracy against time for the models trained at `sigma_neu`.
pub fn drift_curve(table: &Table<DriftRow>, sigma_neu: f64) -> Vec<(f64, f64)> {
    let key = sigma_neu.to_string();
    table
        .summary
        .iter()
        .filter(|(k, _)| k[0] == key)
        .map(|(k, s)| (k[2].parse().expect("time keys are numbers"), s.mean))
        .collect()
}

fn bits_label<S: Serializer>(bits: &Option<u32>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match bits {
        Some(b) => s.serialize_str(&b.to_string()),
        None => s.serialize_str("none"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdcRow {
    pub model: String,
    pub sigma_neu: f64,
    pub bound_mode: String,
    /// Converter resolution; `none` is full precision.
    #[serde(serialize_with = "bits_label")]
    pub bits: Option<u32>,
    pub seed: u64,
    pub accuracy: f64,
}

/// Accuracy at each ADC/DAC resolution (both converters swept together)
/// with ranges from [`calibrate_ranges`].
pub fn sweep_adc(models: &[NamedModel], ctx: &Context, sweep: &AdcSweep) -> Result<Table<AdcRow>> {
    check_models(models)?;
    let points = sweep.points()?;
    let read = ctx.read(sweep.noise_kind, sweep.sigma_syn)?;
    let mut rows = Vec::new();
    for m in models {
        let calibrated = calibrate_ranges(&m.net, &ctx.calibration.images, ctx.calibration.len())?;
        for &seed in &ctx.seeds {
            let root = seed_stream(seed);
            let programmed = ProgrammedNetwork::build(&m.net, &ctx.device, &root)?;
            for &bits in &points {
                let conv = calibrated.with_bits(bits)?;
                rows.push(AdcRow {
                    model: m.name.clone(),
                    sigma_neu: m.net.sigma_neu,
                    bound_mode: m.net.activation_bound().to_string(),
                    bits,
                    seed,
                    accuracy: ctx.accuracy(&programmed, &conv, &read, &root)?,
                });
            }
        }
    }
    let summary = summarize(rows.iter().map(|r| {
        let bits = r.bits.map_or("none".to_string(), |b| b.to_string());
        (
            vec![r.bound_mode.clone(), r.sigma_neu.to_string(), bits],
            r.accuracy,
        )
    }));
    Ok(Table {
        rows,
        summary_keys: vec!["bound_mode", "sigma_neu", "bits"],
        summary,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramRow {
    pub layer: usize,
    pub t_hours: f64,
    pub seed: u64,
    pub bin: usize,
    pub current_lo: f64,
    pub current_hi: f64,
    pub count: u64,
}

/// Counts of `values` in `bins` equal-width bins over `[lo, hi]`. The top
/// edge belongs to the last bin; values outside the interval are counted in
/// the nearest end bin.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let b = ((v - lo) / width).floor();
        let b = if b < 0.0 {
            0
        } else {
            (b as usize).min(bins - 1)
        };
        counts[b] += 1;
    }
    counts
}

/// Histograms of one layer's device currents (both arrays of the pair)
/// right after programming and after `time_hours`.
pub fn snapshot_weight_distribution(
    models: &[NamedModel],
    ctx: &Context,
    section: &SnapshotSection,
) -> Result<Table<HistogramRow>> {
    check_models(models)?;
    let net = &models[0].net;
    let layers = net.weighted_layers();
    if section.layer >= layers {
        return Err(Error::config(format!(
            "layer {} does not exist; the network has {layers} weighted layers",
            section.layer
        )));
    }
    if section.bins == 0 {
        return Err(Error::config("histogram needs at least one bin"));
    }
    let range = ctx.device.range;
    let width = range.span() / section.bins as f64;
    let mut rows = Vec::new();
    for &seed in &ctx.seeds {
        let root = seed_stream(seed);
        let pristine = ProgrammedNetwork::build(net, &ctx.device, &root)?;
        let aged = pristine.aged(section.time_hours, &root)?;
        for (t, p) in [(0.0, &pristine), (section.time_hours, &aged)] {
            let arr = &p.arrays()[section.layer];
            let mut currents = arr.g_plus().into_data();
            currents.extend(arr.g_minus().into_data());
            let counts = histogram(&currents, range.min, range.max, section.bins);
            rows.extend(
                counts
                    .into_iter()
                    .enumerate()
                    .map(|(bin, count)| HistogramRow {
                        layer: section.layer,
                        t_hours: t,
                        seed,
                        bin,
                        current_lo: range.min + bin as f64 * width,
                        current_hi: range.min + (bin + 1) as f64 * width,
                        count,
                    }),
            );
        }
    }
    Ok(Table {
        rows,
        summary_keys: vec![],
        summary: vec![],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PredictionRow {
    pub index: usize,
    pub label: usize,
    pub predicted: usize,
}

/// Per-image predictions of the first model at the first seed.
pub fn infer(
    models: &[NamedModel],
    ctx: &Context,
    section: &InferSection,
) -> Result<Table<PredictionRow>> {
    check_models(models)?;
    let net = &models[0].net;
    let seed = ctx.seeds[0];
    let root = seed_stream(seed);
    let programmed =
        ProgrammedNetwork::build(net, &ctx.device, &root)?.aged(section.time_hours, &root)?;
    let conv = ctx.converters(net, ctx.converter_bits)?;
    let read = ctx.read(section.noise_kind, section.sigma_syn)?;
    let engine = programmed.engine(&conv)?;
    let scores = engine.logits(
        &ctx.test.images,
        &read,
        &root.derive(tags::READ),
        0,
        ctx.exec,
    )?;
    let rows: Vec<PredictionRow> = scores
        .chunks_exact(engine.classes())
        .zip(&ctx.test.labels)
        .enumerate()
        .map(|(index, (s, &label))| PredictionRow {
            index,
            label,
            predicted: argmax(s),
        })
        .collect();
    let hits = rows.iter().filter(|r| r.label == r.predicted).count();
    let acc = hits as f64 / rows.len().max(1) as f64;
    Ok(Table {
        rows,
        summary_keys: vec!["model", "seed", "t_hours"],
        summary: vec![(
            vec![
                models[0].name.clone(),
                seed.to_string(),
                section.time_hours.to_string(),
            ],
            Stats {
                mean: acc,
                std: 0.0,
                n: 1,
            },
        )],
    })
}

/// Trains the `[train]` section's network on the task data, writes the
/// bundle, and returns the network and its log.
pub fn run_training(
    cfg: &ExperimentConfig,
    seed: u64,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(NetworkSpec, Table<EpochLog>)> {
    let section = cfg.section(&cfg.train, "train")?;
    let splits = cfg.task.load(&cfg.data_root())?;
    let train_set = splits.train.take(section.train_limit);
    let test_set = splits.test.take(cfg.limit);
    let topology = cfg.topology_for(&train_set, section.activation_bound);
    let (net, log) = train::train::<f32>(
        &topology,
        &section.train_config(seed),
        &train_set,
        Some(&test_set),
        on_epoch,
    )?;
    data::save_bundle(cfg.resolve(&section.bundle), &net)?;
    Ok((
        net,
        Table {
            rows: log,
            summary_keys: vec![],
            summary: vec![],
        },
    ))
}
