// SPDX-License-Identifier: Apache-2.0

//! Minibatch training with noise injected on activation inputs.
//!
//! During a training pass, every ReLU or bounded-ReLU input `z` is replaced
//! by `z + sigma_neu * N(0, 1)` with fresh draws per element and batch. The
//! draws for activation `j` of batch `b` in epoch `e` come from the stream
//! `seed / TRAIN_NOISE / e / b / j`, so a run is reproducible from its seed.
//! The final (classifier) layer has no activation and gets no noise.
//! Evaluation passes are noiseless.

mod gradcheck;
mod model;
mod optim;

pub use gradcheck::{gradcheck, GradCheck};
pub use model::{cross_entropy, Model, NoiseInjection, Param, Tape};
pub use optim::{Optimizer, OptimizerConfig};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{ActivationBound, DigitalNetwork, NetworkSpec, Probe, Topology, CHUNK_IMAGES};
use crate::rng::{tags, RngStream};
use crate::tensor::Real;

fn default_batch() -> usize {
    128
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub sigma_neu: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub activation_bound: ActivationBound,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(epochs: usize, activation_bound: ActivationBound) -> Self {
        Self {
            sigma_neu: 0.0,
            batch_size: default_batch(),
            optimizer: OptimizerConfig::default(),
            epochs,
            activation_bound,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_neu.is_finite() && self.sigma_neu >= 0.0) {
            return Err(Error::param(format!(
                "sigma_neu = {} must be >= 0",
                self.sigma_neu
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::param("batch_size and epochs must be positive"));
        }
        self.optimizer.validate()
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

/// Neuron-noise scale equivalent to synaptic read noise:
/// `sigma_syn * (w_max - w_min) * sqrt(n) * gamma_act`.
pub fn sigma_neu_from_syn(
    sigma_syn: f64,
    w_max: f64,
    w_min: f64,
    n: usize,
    gamma_act: f64,
) -> Result<f64> {
    if n == 0 || !(w_max > w_min) || !(gamma_act >= 0.0) || !(sigma_syn >= 0.0) {
        return Err(Error::param(format!(
            "need n >= 1, w_max > w_min, gamma_act >= 0, sigma_syn >= 0 \
             (got n={n}, w=({w_min}, {w_max}), gamma={gamma_act}, sigma={sigma_syn})"
        )));
    }
    Ok(sigma_syn * (w_max - w_min) * (n as f64).sqrt() * gamma_act)
}

/// Per weighted layer: fan-in `n` and mean input activation `gamma_act`
/// over a calibration batch.
pub fn layer_activation_stats(net: &NetworkSpec, data: &Dataset) -> Result<Vec<(usize, f64)>> {
    if data.is_empty() {
        return Err(Error::param("activation statistics need a non-empty batch"));
    }
    let model = Model::<f64>::from_spec(net)?;
    let fan_in: Vec<usize> = model.params.iter().map(|p| p.rows).collect();
    let mut sums = vec![(0.0, 0usize); fan_in.len()];
    let digital = DigitalNetwork::new(net)?;
    let len = data.shape.len();
    for lo in (0..data.len()).step_by(CHUNK_IMAGES) {
        let hi = (lo + CHUNK_IMAGES).min(data.len());
        let x = data.images[lo * len..hi * len]
            .iter()
            .map(|&v| v as f64)
            .collect();
        digital.forward_observed(x, hi - lo, |k, probe, v| {
            if probe == Probe::Input {
                sums[k].0 += v.iter().sum::<f64>();
                sums[k].1 += v.len();
            }
        });
    }
    Ok(fan_in
        .into_iter()
        .zip(sums)
        .map(|(n, (s, c))| (n, s / c as f64))
        .collect())
}

fn batch_input<T: Real>(data: &Dataset, idx: &[usize]) -> (Vec<T>, Vec<usize>) {
    let mut x = Vec::with_capacity(idx.len() * data.shape.len());
    let mut y = Vec::with_capacity(idx.len());
    for &i in idx {
        x.extend(data.image(i).iter().map(|&v| T::from_f64(v as f64)));
        y.push(data.labels[i]);
    }
    (x, y)
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Noiseless accuracy of `model` on `data`.
pub fn evaluate<T: Real>(model: &Model<T>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::param("evaluation set is empty"));
    }
    let classes = model.classes();
    let mut hits = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, y) = batch_input::<T>(data, chunk);
        let scores = model.predict_scores(x, chunk.len());
        hits += scores
            .chunks_exact(classes)
            .zip(&y)
            .filter(|(s, &l)| argmax(s) == l)
            .count();
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Trains a fresh model of `topology` on `train`, reporting each epoch to
/// `on_epoch`. `test` (if any) is evaluated after every epoch.
pub fn train<T: Real>(
    topology: &Topology,
    cfg: &TrainConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(NetworkSpec, Vec<EpochLog>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::param("training set is empty"));
    }
    if topology.activation_bound() != cfg.activation_bound {
        return Err(Error::config(format!(
            "topology activations are {} but the configuration asks for {}",
            topology.activation_bound(),
            cfg.activation_bound
        )));
    }
    let root = RngStream::new(cfg.seed, 0);
    let mut model = Model::<T>::init(topology, &root)?;
    if train.shape.len() != model.input_len() {
        return Err(Error::shape(format!(
            "images have {} values, topology expects {}",
            train.shape.len(),
            model.input_len()
        )));
    }
    model::check_labels(&train.labels, model.classes())?;
    let mut opt = Optimizer::new(cfg.optimizer, &model.params)?;
    let classes = model.classes();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut root.derive_path(&[tags::SHUFFLE, epoch as u64]));
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = batch_input::<T>(train, idx);
            let noise = NoiseInjection {
                sigma: cfg.sigma_neu,
                stream: root.derive_path(&[tags::TRAIN_NOISE, epoch as u64, b as u64]),
            };
            let (loss, scores, mut grads) = model.loss_and_grads(x, &y, Some(&noise));
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: format!("loss became {loss} in batch {b}"),
                });
            }
            loss_sum += loss * idx.len() as f64;
            hits += scores
                .chunks_exact(classes)
                .zip(&y)
                .filter(|(s, &l)| argmax(s) == l)
                .count();
            opt.step(&mut model.params, &mut grads);
        }
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: hits as f64 / train.len() as f64,
            test_acc: test.map(|t| evaluate(&model, t)).transpose()?,
        };
        on_epoch(&entry);
        log.push(entry);
    }

    let mut net = model.to_spec()?;
    net.sigma_neu = cfg.sigma_neu;
    net.seed = cfg.seed;
    Ok((net, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{FeatureShape, LayerSpec};

    #[test]
    fn sigma_neu_examples() {
        assert!((sigma_neu_from_syn(0.1, 1.0, -1.0, 100, 0.5).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(sigma_neu_from_syn(0.0, 1.0, -1.0, 100, 0.5).unwrap(), 0.0);
        let a = sigma_neu_from_syn(0.3, 0.7, -0.2, 25, 0.4).unwrap();
        let b = sigma_neu_from_syn(0.3, 0.7, -0.2, 100, 0.4).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-15);
        assert!(sigma_neu_from_syn(0.1, 1.0, 1.0, 1, 0.5).is_err());
        assert!(sigma_neu_from_syn(0.1, 1.0, 0.0, 0, 0.5).is_err());
        assert!(sigma_neu_from_syn(0.1, 1.0, 0.0, 1, -0.5).is_err());
    }

    /// Two well-separated Gaussian blobs in the unit square.
    pub(crate) fn blobs(n: usize, seed: u64) -> Dataset {
        let mut r = RngStream::new(seed, 0);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let center = if c == 0 { 0.25 } else { 0.75 };
            for _ in 0..2 {
                images.push((center + 0.08 * r.normal()).clamp(0.0, 1.0) as f32);
            }
            labels.push(c);
        }
        Dataset::new(FeatureShape::flat(2), images, labels, 2).unwrap()
    }

    fn mlp(bound: ActivationBound) -> Topology {
        let act = match bound {
            ActivationBound::Bounded => LayerSpec::BoundedRelu,
            ActivationBound::Unbounded => LayerSpec::Relu,
        };
        Topology {
            input: FeatureShape::flat(2),
            layers: vec![
                LayerSpec::Dense {
                    units: 8,
                    bias: true,
                },
                act,
                LayerSpec::Dense {
                    units: 2,
                    bias: true,
                },
                LayerSpec::Softmax,
            ],
        }
    }

    #[test]
    fn separable_toy_set_is_learned() {
        let data = blobs(200, 1);
        let cfg = TrainConfig {
            batch_size: 16,
            optimizer: OptimizerConfig::rmsprop(0.01),
            ..TrainConfig::new(200, ActivationBound::Bounded)
        };
        let mut epochs_to_perfect = None;
        let (net, log) = train::<f64>(&mlp(ActivationBound::Bounded), &cfg, &data, None, |e| {
            if e.train_acc == 1.0 && epochs_to_perfect.is_none() {
                epochs_to_perfect = Some(e.epoch);
            }
        })
        .unwrap();
        assert_eq!(log.len(), 200);
        assert!(epochs_to_perfect.is_some());
        let model = Model::<f64>::from_spec(&net).unwrap();
        assert_eq!(evaluate(&model, &data).unwrap(), 1.0);
    }

    #[test]
    fn zero_noise_is_plain_training_and_reproducible() {
        let data = blobs(64, 2);
        let cfg = TrainConfig {
            batch_size: 8,
            ..TrainConfig::new(3, ActivationBound::Unbounded)
        };
        let topo = mlp(ActivationBound::Unbounded);
        let (a, _) = train::<f32>(&topo, &cfg, &data, None, |_| {}).unwrap();
        let (b, _) = train::<f32>(&topo, &cfg, &data, None, |_| {}).unwrap();
        assert_eq!(a, b);

        // A hand-rolled loop: same init, shuffles and updates, no noise.
        let root = RngStream::new(cfg.seed, 0);
        let mut model = Model::<f32>::init(&topo, &root).unwrap();
        let mut opt = Optimizer::new(cfg.optimizer, &model.params).unwrap();
        for epoch in 0..3u64 {
            let mut order: Vec<usize> = (0..64).collect();
            order.shuffle(&mut root.derive_path(&[tags::SHUFFLE, epoch]));
            for idx in order.chunks(8) {
                let (x, y) = batch_input::<f32>(&data, idx);
                let (_, _, mut g) = model.loss_and_grads(x, &y, None);
                opt.step(&mut model.params, &mut g);
            }
        }
        assert_eq!(model.to_spec().unwrap().params, a.params);

        let noisy = TrainConfig {
            sigma_neu: 0.4,
            ..cfg.clone()
        };
        let (c, _) = train::<f32>(&topo, &noisy, &data, None, |_| {}).unwrap();
        let (d, _) = train::<f32>(&topo, &noisy, &data, None, |_| {}).unwrap();
        assert_eq!(c, d);
        assert_ne!(c.params, a.params);
        assert_eq!(c.sigma_neu, 0.4);
    }

    #[test]
    fn divergence_names_the_epoch() {
        let data = blobs(32, 3);
        let cfg = TrainConfig {
            batch_size: 32,
            optimizer: OptimizerConfig::sgd(1e30),
            ..TrainConfig::new(5, ActivationBound::Unbounded)
        };
        match train::<f32>(&mlp(ActivationBound::Unbounded), &cfg, &data, None, |_| {}) {
            Err(Error::Training { epoch, .. }) => assert!(epoch < 5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_errors() {
        let data = blobs(8, 0);
        let cfg = TrainConfig::new(1, ActivationBound::Bounded);
        assert!(train::<f32>(&mlp(ActivationBound::Unbounded), &cfg, &data, None, |_| {}).is_err());
        let bad = TrainConfig {
            sigma_neu: -1.0,
            ..cfg
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn activation_stats() {
        let data = blobs(20, 4);
        let cfg = TrainConfig::new(1, ActivationBound::Bounded);
        let (net, _) =
            train::<f64>(&mlp(ActivationBound::Bounded), &cfg, &data, None, |_| {}).unwrap();
        let stats = layer_activation_stats(&net, &data).unwrap();
        assert_eq!(stats[0].0, 2);
        assert!((stats[0].1 - 0.5).abs() < 0.05);
        assert_eq!(stats[1].0, 8);
        assert!((0.0..=1.0).contains(&stats[1].1));
    }
}
