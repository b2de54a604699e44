// SPDX-License-Identifier: Apache-2.0

//! Network topology, weights, and device-aware inference.
//!
//! Images are HWC and flattened row-major, so `Flatten` is free. Weighted
//! layers store their weights as a 2-D matrix: a conv layer's filters are
//! `(kh·kw·C)×F` with rows in `(ky, kx, c)` order (the im2col patch layout),
//! a dense layer is `inputs×units`. These are exactly the matrices that get
//! programmed onto crossbar arrays.

mod calibrate;
mod engine;
mod forward;

pub use calibrate::{calibrate_ranges, TailPercentiles, CALIBRATION_PERCENTILES};
pub use engine::{InferenceEngine, ProgrammedNetwork, ReadConfig, CHUNK_IMAGES};
pub(crate) use forward::Probe;
pub use forward::{argmax, forward_digital, softmax, DigitalNetwork};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, PoolGeometry, Tensor};
use crate::xbar::{ClipSpec, Quantizer};

/// `min(max(0, x), 1)`.
#[inline]
pub fn bounded_relu_scalar(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

pub fn bounded_relu(x: &Tensor) -> Tensor {
    x.map(bounded_relu_scalar)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationBound {
    /// Hidden activations are `bounded_relu`.
    Bounded,
    /// Hidden activations are plain ReLU.
    Unbounded,
}

impl std::fmt::Display for ActivationBound {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ActivationBound::Bounded => "bounded",
            ActivationBound::Unbounded => "unbounded",
        })
    }
}

/// Height, width and channels of a feature map. Flat vectors are `1×1×n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct FeatureShape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl From<[usize; 3]> for FeatureShape {
    fn from([h, w, c]: [usize; 3]) -> Self {
        Self { h, w, c }
    }
}

impl From<FeatureShape> for [usize; 3] {
    fn from(s: FeatureShape) -> Self {
        [s.h, s.w, s.c]
    }
}

impl FeatureShape {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c }
    }

    pub fn flat(n: usize) -> Self {
        Self { h: 1, w: 1, c: n }
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_flat(&self) -> bool {
        self.h == 1 && self.w == 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv2d {
        filters: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        /// Zero padding on each side; `kernel / 2` when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pad: Option<usize>,
        #[serde(default)]
        bias: bool,
    },
    Dense {
        units: usize,
        #[serde(default)]
        bias: bool,
    },
    BoundedRelu,
    Relu,
    MaxPool {
        size: usize,
        /// Defaults to `size`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stride: Option<usize>,
    },
    Flatten,
    Softmax,
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn conv(filters: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec::Conv2d {
            filters,
            kernel,
            stride,
            pad: None,
            bias: false,
        }
    }

    pub fn dense(units: usize) -> Self {
        LayerSpec::Dense { units, bias: false }
    }

    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }

    pub fn has_bias(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv2d { bias: true, .. } | LayerSpec::Dense { bias: true, .. }
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::BoundedRelu => "bounded-relu",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "max-pool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Softmax => "softmax",
        }
    }

    /// Output shape for `input`, or a shape error.
    pub fn output_shape(&self, input: FeatureShape) -> Result<FeatureShape> {
        Ok(match self.step(input, 0)? {
            Step::Conv { geom, filters, .. } => {
                FeatureShape::new(geom.out_h(), geom.out_w(), filters)
            }
            Step::Dense { units, .. } => FeatureShape::flat(units),
            Step::Pool(g) => FeatureShape::new(g.out_h(), g.out_w(), g.channels),
            Step::Flatten => FeatureShape::flat(input.len()),
            Step::BoundedRelu | Step::Relu | Step::Softmax => input,
        })
    }

    fn step(&self, input: FeatureShape, widx: usize) -> Result<Step> {
        let dims = (input.h, input.w, input.c);
        Ok(match *self {
            LayerSpec::Conv2d {
                filters,
                kernel,
                stride,
                pad,
                bias,
            } => {
                if filters == 0 {
                    return Err(Error::param("conv layer needs at least one filter"));
                }
                let pad = pad.unwrap_or(kernel / 2);
                let geom = ConvGeometry::new(dims, (kernel, kernel), (stride, stride), (pad, pad))?;
                Step::Conv {
                    geom,
                    filters,
                    widx,
                    bias,
                }
            }
            LayerSpec::Dense { units, bias } => {
                if !input.is_flat() {
                    return Err(Error::shape(format!(
                        "dense layer needs a flat input, got {}x{}x{} (add a flatten layer)",
                        input.h, input.w, input.c
                    )));
                }
                if units == 0 {
                    return Err(Error::param("dense layer needs at least one unit"));
                }
                Step::Dense {
                    inputs: input.c,
                    units,
                    widx,
                    bias,
                }
            }
            LayerSpec::MaxPool { size, stride } => {
                let s = stride.unwrap_or(size);
                Step::Pool(PoolGeometry::new(dims, (size, size), (s, s))?)
            }
            LayerSpec::Flatten => Step::Flatten,
            LayerSpec::BoundedRelu => Step::BoundedRelu,
            LayerSpec::Relu => Step::Relu,
            LayerSpec::Softmax => Step::Softmax,
        })
    }
}

/// A layer resolved against its input shape.
#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Step {
    Conv {
        geom: ConvGeometry,
        filters: usize,
        widx: usize,
        bias: bool,
    },
    Dense {
        inputs: usize,
        units: usize,
        widx: usize,
        bias: bool,
    },
    Pool(PoolGeometry),
    Flatten,
    BoundedRelu,
    Relu,
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub input: FeatureShape,
    pub layers: Vec<LayerSpec>,
}

/// A validated topology: each layer's resolved step and the shapes between.
#[derive(Clone, Debug)]
pub(crate) struct Plan {
    pub steps: Vec<Step>,
    /// `shapes[i]` is the input of step `i`; the last entry is the output.
    pub shapes: Vec<FeatureShape>,
}

impl Plan {
    pub fn input_len(&self) -> usize {
        self.shapes[0].len()
    }

    pub fn output_len(&self) -> usize {
        self.shapes.last().expect("non-empty").len()
    }
}

impl Topology {
    /// Four 3×3 conv layers (16, 16 stride 2, 32, 32 stride 2), a 300-unit
    /// dense layer and a dense classifier, with "same" padding and no biases.
    pub fn reference(input: FeatureShape, classes: usize, bound: ActivationBound) -> Self {
        let act = match bound {
            ActivationBound::Bounded => LayerSpec::BoundedRelu,
            ActivationBound::Unbounded => LayerSpec::Relu,
        };
        let layers = vec![
            LayerSpec::conv(16, 3, 1),
            act.clone(),
            LayerSpec::conv(16, 3, 2),
            act.clone(),
            LayerSpec::conv(32, 3, 1),
            act.clone(),
            LayerSpec::conv(32, 3, 2),
            act.clone(),
            LayerSpec::Flatten,
            LayerSpec::dense(300),
            act,
            LayerSpec::dense(classes),
            LayerSpec::Softmax,
        ];
        Self { input, layers }
    }

    /// The reference topology for 28×28 grayscale, 10 classes.
    pub fn reference_mnist(bound: ActivationBound) -> Self {
        Self::reference(FeatureShape::new(28, 28, 1), 10, bound)
    }

    pub(crate) fn plan(&self) -> Result<Plan> {
        if self.input.is_empty() {
            return Err(Error::shape("topology input shape is empty"));
        }
        let mut shapes = vec![self.input];
        let mut steps = Vec::with_capacity(self.layers.len());
        let mut widx = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            if matches!(layer, LayerSpec::Softmax) && i + 1 != self.layers.len() {
                return Err(Error::param("softmax may only be the last layer"));
            }
            let input = *shapes.last().expect("non-empty");
            let step = layer
                .step(input, widx)
                .map_err(|e| Error::shape(format!("layer {i} ({}): {e}", layer.name())))?;
            shapes.push(layer.output_shape(input)?);
            if layer.is_weighted() {
                widx += 1;
            }
            steps.push(step);
        }
        if widx == 0 {
            return Err(Error::param("topology has no conv or dense layer"));
        }
        let out = *shapes.last().expect("non-empty");
        if !out.is_flat() {
            return Err(Error::shape("topology output must be flat (class scores)"));
        }
        Ok(Plan { steps, shapes })
    }

    pub fn validate(&self) -> Result<()> {
        self.plan().map(|_| ())
    }

    /// Shapes between layers: input first, output last.
    pub fn shapes(&self) -> Result<Vec<FeatureShape>> {
        Ok(self.plan()?.shapes)
    }

    pub fn classes(&self) -> Result<usize> {
        Ok(self.plan()?.output_len())
    }

    /// `(rows, cols)` of each weighted layer's matrix, in order.
    pub fn weight_shapes(&self) -> Result<Vec<(usize, usize)>> {
        Ok(self
            .plan()?
            .steps
            .iter()
            .filter_map(|s| match s {
                Step::Conv { geom, filters, .. } => Some((geom.patch_len(), *filters)),
                Step::Dense { inputs, units, .. } => Some((*inputs, *units)),
                _ => None,
            })
            .collect())
    }

    /// Index into `layers` of each weighted layer.
    pub fn weighted_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_weighted())
            .map(|(i, _)| i)
            .collect()
    }

    /// Trainable parameters (weights plus enabled biases).
    pub fn param_count(&self) -> Result<usize> {
        let shapes = self.weight_shapes()?;
        let biases: usize = self
            .weighted_layer_indices()
            .iter()
            .zip(&shapes)
            .filter(|(&i, _)| self.layers[i].has_bias())
            .map(|(_, &(_, cols))| cols)
            .sum();
        Ok(shapes.iter().map(|(r, c)| r * c).sum::<usize>() + biases)
    }

    /// Bounded if any activation is a bounded ReLU.
    pub fn activation_bound(&self) -> ActivationBound {
        if self
            .layers
            .iter()
            .any(|l| matches!(l, LayerSpec::BoundedRelu))
        {
            ActivationBound::Bounded
        } else {
            ActivationBound::Unbounded
        }
    }
}

/// Parameters of one weighted layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor<f32>,
    pub bias: Option<Vec<f32>>,
}

/// Per-weighted-layer converters: the DAC on the layer input and the ADC on
/// the (differential) column outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Converters {
    pub dac: Vec<Quantizer>,
    pub adc: Vec<Quantizer>,
}

impl Converters {
    /// Full precision everywhere, ranges `(0, 1)`.
    pub fn disabled(layers: usize) -> Self {
        Self {
            dac: vec![Quantizer::disabled(); layers],
            adc: vec![Quantizer::disabled(); layers],
        }
    }

    /// Same ranges with every converter set to `bits`.
    pub fn with_bits(&self, bits: Option<u32>) -> Result<Self> {
        let set = |qs: &[Quantizer]| {
            qs.iter()
                .map(|q| q.with_bits(bits))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            dac: set(&self.dac)?,
            adc: set(&self.adc)?,
        })
    }

    pub fn len(&self) -> usize {
        self.adc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adc.is_empty()
    }
}

/// A trained network: topology, weights, and how to map it onto hardware.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub topology: Topology,
    pub params: Vec<LayerParams>,
    pub converters: Converters,
    pub clip: ClipSpec,
    /// Neuron noise the network was trained with (metadata).
    pub sigma_neu: f64,
    /// Training seed (metadata).
    pub seed: u64,
}

impl NetworkSpec {
    pub fn new(topology: Topology, params: Vec<LayerParams>) -> Result<Self> {
        let n = params.len();
        let spec = Self {
            topology,
            params,
            converters: Converters::disabled(n),
            clip: ClipSpec::default(),
            sigma_neu: 0.0,
            seed: 0,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks that every weighted layer has parameters of the right shape.
    pub fn validate(&self) -> Result<()> {
        let shapes = self.topology.weight_shapes()?;
        if shapes.len() != self.params.len() {
            return Err(Error::shape(format!(
                "topology has {} weighted layers but {} parameter sets were given",
                shapes.len(),
                self.params.len()
            )));
        }
        if self.converters.adc.len() != shapes.len() || self.converters.dac.len() != shapes.len() {
            return Err(Error::shape(
                "one ADC and one DAC per weighted layer required",
            ));
        }
        let indices = self.topology.weighted_layer_indices();
        for (k, ((&(r, c), p), &li)) in shapes.iter().zip(&self.params).zip(&indices).enumerate() {
            if p.weight.shape() != [r, c] {
                return Err(Error::shape(format!(
                    "weighted layer {k}: weight shape {:?}, expected [{r}, {c}]",
                    p.weight.shape()
                )));
            }
            match (&p.bias, self.topology.layers[li].has_bias()) {
                (Some(b), true) if b.len() == c => {}
                (None, false) => {}
                _ => {
                    return Err(Error::shape(format!(
                        "weighted layer {k}: bias does not match the topology"
                    )))
                }
            }
        }
        self.clip.validate()
    }

    pub fn weighted_layers(&self) -> usize {
        self.params.len()
    }

    pub fn activation_bound(&self) -> ActivationBound {
        self.topology.activation_bound()
    }

    pub fn input_shape(&self) -> FeatureShape {
        self.topology.input
    }

    pub fn weights_f64(&self, k: usize) -> Tensor {
        self.params[k].weight.cast()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounded_relu_examples() {
        let x = Tensor::vector(vec![-0.5, 0.3, 1.7]);
        assert_eq!(bounded_relu(&x).data(), &[0.0, 0.3, 1.0]);
    }

    #[test]
    fn reference_parameter_count() {
        let t = Topology::reference_mnist(ActivationBound::Bounded);
        // 144 + 2304 + 4608 + 9216 + 7*7*32*300 + 300*10
        assert_eq!(t.param_count().unwrap(), 489_672);
        let n = t.param_count().unwrap() as f64;
        assert!((n - 500_000.0).abs() <= 0.2 * 500_000.0);
        assert_eq!(t.classes().unwrap(), 10);
    }

    #[test]
    fn reference_shapes() {
        let t = Topology::reference_mnist(ActivationBound::Unbounded);
        let shapes = t.shapes().unwrap();
        assert_eq!(shapes[1], FeatureShape::new(28, 28, 16));
        assert_eq!(shapes[3], FeatureShape::new(14, 14, 16));
        assert_eq!(shapes[7], FeatureShape::new(7, 7, 32));
        assert_eq!(shapes[9], FeatureShape::flat(1568));
        assert_eq!(
            t.weight_shapes().unwrap(),
            vec![
                (9, 16),
                (144, 16),
                (144, 32),
                (288, 32),
                (1568, 300),
                (300, 10)
            ]
        );
        assert_eq!(t.activation_bound(), ActivationBound::Unbounded);
    }

    #[test]
    fn invalid_topologies() {
        let dense_on_image = Topology {
            input: FeatureShape::new(4, 4, 1),
            layers: vec![LayerSpec::dense(3)],
        };
        assert!(matches!(dense_on_image.validate(), Err(Error::Shape(_))));
        let no_weights = Topology {
            input: FeatureShape::flat(4),
            layers: vec![LayerSpec::Relu],
        };
        assert!(no_weights.validate().is_err());
        let early_softmax = Topology {
            input: FeatureShape::flat(4),
            layers: vec![LayerSpec::Softmax, LayerSpec::dense(2)],
        };
        assert!(early_softmax.validate().is_err());
        let big_kernel = Topology {
            input: FeatureShape::new(2, 2, 1),
            layers: vec![
                LayerSpec::Conv2d {
                    filters: 1,
                    kernel: 5,
                    stride: 1,
                    pad: Some(0),
                    bias: false,
                },
                LayerSpec::Flatten,
            ],
        };
        assert!(big_kernel.validate().is_err());
    }

    #[test]
    fn pool_and_bias_shapes() {
        let t = Topology {
            input: FeatureShape::new(6, 6, 2),
            layers: vec![
                LayerSpec::Conv2d {
                    filters: 4,
                    kernel: 3,
                    stride: 1,
                    pad: Some(0),
                    bias: true,
                },
                LayerSpec::MaxPool {
                    size: 2,
                    stride: None,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    units: 3,
                    bias: true,
                },
            ],
        };
        let shapes = t.shapes().unwrap();
        assert_eq!(shapes[1], FeatureShape::new(4, 4, 4));
        assert_eq!(shapes[2], FeatureShape::new(2, 2, 4));
        assert_eq!(t.param_count().unwrap(), 18 * 4 + 4 + 16 * 3 + 3);
    }

    #[test]
    fn topology_toml_roundtrip() {
        let t = Topology::reference_mnist(ActivationBound::Bounded);
        let text = toml::to_string(&t).unwrap();
        assert!(text.contains("kind = \"conv2d\""));
        let back: Topology = toml::from_str(&text).unwrap();
        assert_eq!(back, t);
        let parsed: Topology = toml::from_str(
            "input = [4, 4, 1]\n[[layers]]\nkind = \"conv2d\"\nfilters = 2\nkernel = 3\n\
             [[layers]]\nkind = \"flatten\"\n[[layers]]\nkind = \"dense\"\nunits = 2\n",
        )
        .unwrap();
        assert_eq!(parsed.layers[0], LayerSpec::conv(2, 3, 1));
    }

    #[test]
    fn spec_validation() {
        let t = Topology {
            input: FeatureShape::flat(3),
            layers: vec![LayerSpec::dense(2)],
        };
        let ok = LayerParams {
            weight: Tensor::zeros(vec![3, 2]),
            bias: None,
        };
        assert!(NetworkSpec::new(t.clone(), vec![ok]).is_ok());
        let wrong = LayerParams {
            weight: Tensor::zeros(vec![2, 3]),
            bias: None,
        };
        assert!(NetworkSpec::new(t.clone(), vec![wrong]).is_err());
        let stray_bias = LayerParams {
            weight: Tensor::zeros(vec![3, 2]),
            bias: Some(vec![0.0; 2]),
        };
        assert!(NetworkSpec::new(t, vec![stray_bias]).is_err());
    }
}
