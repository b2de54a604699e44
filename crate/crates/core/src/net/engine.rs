// SPDX-License-Identifier: Apache-2.0

//! Device-aware inference.
//!
//! [`ProgrammedNetwork`] holds one differential array per weighted layer.
//! Aging returns a new network; arrays drift between inference batches, not
//! during them. [`InferenceEngine`] is a read-only snapshot prepared for
//! batched reads. Each image draws its read noise from its own stream,
//! derived from the batch stream and the image index, so scores do not
//! depend on chunking or worker count.

use serde::{Deserialize, Serialize};

use super::forward::{argmax, run, to_f64, WeightedOps};
use super::{Converters, NetworkSpec, Plan};
use crate::device::{DeviceParams, NoiseSpec};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::rng::{tags, RngStream};
use crate::xbar::{self, CompiledArray, DifferentialArray, ReadNoiseModel};

/// Images evaluated together per gemm.
pub const CHUNK_IMAGES: usize = 32;

/// Read noise applied during inference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReadConfig {
    pub noise: NoiseSpec,
    #[serde(default)]
    pub model: ReadNoiseModel,
}

impl ReadConfig {
    pub fn noiseless() -> Self {
        Self {
            noise: NoiseSpec::none(),
            model: ReadNoiseModel::default(),
        }
    }

    pub fn new(noise: NoiseSpec) -> Self {
        Self {
            noise,
            model: ReadNoiseModel::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProgrammedNetwork {
    plan: Plan,
    arrays: Vec<DifferentialArray>,
    biases: Vec<Option<Vec<f64>>>,
    device: DeviceParams,
}

impl ProgrammedNetwork {
    /// Programs every weighted layer onto its own array, each with its own
    /// clip range. Layer `k` uses the stream `rng / PROGRAM / k`.
    pub fn build(net: &NetworkSpec, device: &DeviceParams, rng: &RngStream) -> Result<Self> {
        net.validate()?;
        device.decay.validate()?;
        let arrays = (0..net.weighted_layers())
            .map(|k| {
                let mut r = rng.derive_path(&[tags::PROGRAM, k as u64]);
                xbar::program(
                    &net.weights_f64(k),
                    &net.clip,
                    device.range,
                    &device.decay,
                    &mut r,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            plan: net.topology.plan()?,
            arrays,
            biases: net
                .params
                .iter()
                .map(|p| p.bias.as_deref().map(to_f64))
                .collect(),
            device: *device,
        })
    }

    pub fn arrays(&self) -> &[DifferentialArray] {
        &self.arrays
    }

    pub fn device(&self) -> &DeviceParams {
        &self.device
    }

    /// Every array aged by `t_hours`; layer `k` uses `rng / AGE / k`.
    pub fn aged(&self, t_hours: f64, rng: &RngStream) -> Result<Self> {
        let arrays = self
            .arrays
            .iter()
            .enumerate()
            .map(|(k, a)| {
                let mut r = rng.derive_path(&[tags::AGE, k as u64]);
                xbar::age(a, t_hours, &self.device.decay, &mut r)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            arrays,
            ..self.clone()
        })
    }

    /// Applies `f` to every array.
    pub fn map_arrays(&self, f: impl Fn(&DifferentialArray) -> DifferentialArray) -> Self {
        Self {
            arrays: self.arrays.iter().map(f).collect(),
            ..self.clone()
        }
    }

    pub fn engine(&self, converters: &Converters) -> Result<InferenceEngine> {
        if converters.len() != self.arrays.len() || converters.dac.len() != self.arrays.len() {
            return Err(Error::shape(format!(
                "{} converter pairs for {} arrays",
                converters.len(),
                self.arrays.len()
            )));
        }
        Ok(InferenceEngine {
            plan: self.plan.clone(),
            layers: self.arrays.iter().map(CompiledArray::new).collect(),
            biases: self.biases.clone(),
            converters: converters.clone(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct InferenceEngine {
    plan: Plan,
    layers: Vec<CompiledArray>,
    biases: Vec<Option<Vec<f64>>>,
    converters: Converters,
}

struct AnalogOps<'a> {
    engine: &'a InferenceEngine,
    read: &'a ReadConfig,
    rngs: &'a mut [RngStream],
}

impl WeightedOps for AnalogOps<'_> {
    fn input(&mut self, widx: usize, x: &mut [f64]) {
        self.engine.converters.dac[widx].apply_slice(x);
    }

    fn product(&mut self, widx: usize, rows: &[f64], _rows_per_image: usize) -> Vec<f64> {
        self.engine.layers[widx].vmm_rows(rows, &self.read.noise, self.read.model, self.rngs)
    }

    fn output(&mut self, widx: usize, y: &mut [f64]) {
        self.engine.converters.adc[widx].apply_slice(y);
    }

    fn bias(&self, widx: usize) -> Option<&[f64]> {
        self.engine.biases[widx].as_deref()
    }
}

impl InferenceEngine {
    pub fn input_len(&self) -> usize {
        self.plan.input_len()
    }

    pub fn classes(&self) -> usize {
        self.plan.output_len()
    }

    pub fn layers(&self) -> &[CompiledArray] {
        &self.layers
    }

    fn run_chunk(&self, images: Vec<f64>, read: &ReadConfig, rngs: &mut [RngStream]) -> Vec<f64> {
        let n = rngs.len();
        let mut ops = AnalogOps {
            engine: self,
            read,
            rngs,
        };
        run(&self.plan, images, n, &mut ops)
    }

    /// One image; returns the predicted class and the pre-softmax scores.
    pub fn infer(
        &self,
        image: &[f64],
        read: &ReadConfig,
        rng: &mut RngStream,
    ) -> Result<(usize, Vec<f64>)> {
        if image.len() != self.input_len() {
            return Err(Error::shape(format!(
                "image of {} values, network expects {}",
                image.len(),
                self.input_len()
            )));
        }
        let mut rngs = [rng.clone()];
        let scores = self.run_chunk(image.to_vec(), read, &mut rngs);
        *rng = rngs[0].clone();
        Ok((argmax(&scores), scores))
    }

    /// Scores of `images` (`n` packed images). Image `i` reads with the stream
    /// `base / (first_index + i)`.
    pub fn logits(
        &self,
        images: &[f32],
        read: &ReadConfig,
        base: &RngStream,
        first_index: u64,
        exec: Execution,
    ) -> Result<Vec<f64>> {
        let len = self.input_len();
        if images.len() % len != 0 {
            return Err(Error::shape(format!(
                "{} input values is not a whole number of {len}-value images",
                images.len()
            )));
        }
        let n = images.len() / len;
        let parts = par::map_indexed(exec, n.div_ceil(CHUNK_IMAGES), |c| {
            let lo = c * CHUNK_IMAGES;
            let hi = (lo + CHUNK_IMAGES).min(n);
            let mut rngs: Vec<RngStream> = (lo..hi)
                .map(|i| base.derive(first_index + i as u64))
                .collect();
            self.run_chunk(to_f64(&images[lo * len..hi * len]), read, &mut rngs)
        });
        Ok(parts.concat())
    }

    /// Predicted class of each image.
    pub fn predict(
        &self,
        images: &[f32],
        read: &ReadConfig,
        base: &RngStream,
        exec: Execution,
    ) -> Result<Vec<usize>> {
        let scores = self.logits(images, read, base, 0, exec)?;
        Ok(scores.chunks_exact(self.classes()).map(argmax).collect())
    }

    /// Fraction of images classified as `labels`.
    pub fn accuracy(
        &self,
        images: &[f32],
        labels: &[usize],
        read: &ReadConfig,
        base: &RngStream,
        exec: Execution,
    ) -> Result<f64> {
        let predicted = self.predict(images, read, base, exec)?;
        if predicted.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} images but {} labels",
                predicted.len(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::param("accuracy of an empty set"));
        }
        let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}
