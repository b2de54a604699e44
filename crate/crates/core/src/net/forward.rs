// SPDX-License-Identifier: Apache-2.0

//! Layer traversal shared by the digital reference forward pass, the analog
//! engine and range calibration. Only the weighted product differs.

use super::{NetworkSpec, Plan, Step};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::tensor::{gemm, Op};

/// Hooks around each weighted layer.
pub(crate) trait WeightedOps {
    /// Layer input, before lowering.
    fn input(&mut self, _widx: usize, _x: &mut [f64]) {}

    /// `rows` holds `n * rows_per_image` input vectors; returns one output
    /// vector per row.
    fn product(&mut self, widx: usize, rows: &[f64], rows_per_image: usize) -> Vec<f64>;

    /// Column outputs, before the bias is added.
    fn output(&mut self, _widx: usize, _y: &mut [f64]) {}

    fn bias(&self, widx: usize) -> Option<&[f64]>;
}

/// Runs `n` images through `plan`; returns `n × classes` pre-softmax scores.
pub(crate) fn run(plan: &Plan, mut x: Vec<f64>, n: usize, ops: &mut impl WeightedOps) -> Vec<f64> {
    debug_assert_eq!(x.len(), n * plan.input_len());
    for step in &plan.steps {
        x = match step {
            Step::Conv {
                geom,
                filters,
                widx,
                ..
            } => {
                ops.input(*widx, &mut x);
                let mut cols = vec![0.0; n * geom.patches() * geom.patch_len()];
                geom.im2col_into(&x, n, &mut cols);
                let mut y = ops.product(*widx, &cols, geom.patches());
                ops.output(*widx, &mut y);
                add_bias(ops.bias(*widx), &mut y, *filters);
                y
            }
            Step::Dense { units, widx, .. } => {
                ops.input(*widx, &mut x);
                let mut y = ops.product(*widx, &x, 1);
                ops.output(*widx, &mut y);
                add_bias(ops.bias(*widx), &mut y, *units);
                y
            }
            Step::Pool(g) => g.forward(&x, n).0,
            Step::BoundedRelu => {
                x.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
                x
            }
            Step::Relu => {
                x.iter_mut().for_each(|v| *v = v.max(0.0));
                x
            }
            Step::Flatten | Step::Softmax => x,
        };
    }
    x
}

fn add_bias(bias: Option<&[f64]>, y: &mut [f64], width: usize) {
    if let Some(b) = bias {
        for row in y.chunks_exact_mut(width) {
            row.iter_mut().zip(b).for_each(|(v, b)| *v += b);
        }
    }
}

/// Numerically stable softmax of one score vector.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Index of the largest score; the first one on ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

/// Plain 64-bit forward pass of a [`NetworkSpec`], without converters or
/// device effects.
#[derive(Clone, Debug)]
pub struct DigitalNetwork {
    pub(crate) plan: Plan,
    weights: Vec<(usize, Vec<f64>)>,
    biases: Vec<Option<Vec<f64>>>,
}

struct DigitalOps<'a, F> {
    net: &'a DigitalNetwork,
    observe: F,
}

/// What a calibration observer is shown.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Probe {
    Input,
    Output,
}

impl<F: FnMut(usize, Probe, &[f64])> WeightedOps for DigitalOps<'_, F> {
    fn input(&mut self, widx: usize, x: &mut [f64]) {
        (self.observe)(widx, Probe::Input, x);
    }

    fn product(&mut self, widx: usize, rows: &[f64], _rows_per_image: usize) -> Vec<f64> {
        let (k, w) = &self.net.weights[widx];
        let cols = w.len() / k;
        let m = rows.len() / k;
        let mut y = vec![0.0; m * cols];
        gemm(Op::N, Op::N, m, *k, cols, 1.0, rows, w, 0.0, &mut y);
        y
    }

    fn output(&mut self, widx: usize, y: &mut [f64]) {
        (self.observe)(widx, Probe::Output, y);
    }

    fn bias(&self, widx: usize) -> Option<&[f64]> {
        self.net.biases[widx].as_deref()
    }
}

impl DigitalNetwork {
    pub fn new(net: &NetworkSpec) -> Result<Self> {
        net.validate()?;
        Ok(Self {
            plan: net.topology.plan()?,
            weights: net
                .params
                .iter()
                .map(|p| (p.weight.shape()[0], to_f64(p.weight.data())))
                .collect(),
            biases: net
                .params
                .iter()
                .map(|p| p.bias.as_deref().map(to_f64))
                .collect(),
        })
    }

    pub fn input_len(&self) -> usize {
        self.plan.input_len()
    }

    pub fn classes(&self) -> usize {
        self.plan.output_len()
    }

    fn check(&self, len: usize, n: usize) -> Result<()> {
        if len != n * self.input_len() {
            return Err(Error::shape(format!(
                "{len} input values for {n} images of {} values",
                self.input_len()
            )));
        }
        Ok(())
    }

    /// Scores for `n` images packed in `images`.
    pub fn forward(&self, images: &[f64], n: usize) -> Result<Vec<f64>> {
        self.check(images.len(), n)?;
        Ok(self.forward_observed(images.to_vec(), n, |_, _, _| {}))
    }

    pub(crate) fn forward_observed(
        &self,
        images: Vec<f64>,
        n: usize,
        observe: impl FnMut(usize, Probe, &[f64]),
    ) -> Vec<f64> {
        let mut ops = DigitalOps { net: self, observe };
        run(&self.plan, images, n, &mut ops)
    }

    /// Scores for a 32-bit image batch, evaluated in chunks.
    pub fn logits(&self, images: &[f32], n: usize, exec: Execution) -> Result<Vec<f64>> {
        self.check(images.len(), n)?;
        let len = self.input_len();
        let chunk = super::CHUNK_IMAGES;
        let parts = par::map_indexed(exec, n.div_ceil(chunk), |c| {
            let lo = c * chunk;
            let hi = (lo + chunk).min(n);
            self.forward_observed(to_f64(&images[lo * len..hi * len]), hi - lo, |_, _, _| {})
        });
        Ok(parts.concat())
    }
}

/// Digital scores of `n` images (convenience wrapper).
pub fn forward_digital(net: &NetworkSpec, images: &[f64], n: usize) -> Result<Vec<f64>> {
    DigitalNetwork::new(net)?.forward(images, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{FeatureShape, LayerParams, LayerSpec, Topology};
    use crate::tensor::Tensor;

    #[test]
    fn softmax_and_argmax() {
        let p = softmax(&[1.0, 2.0, 3.0]);
        let e = [1.0f64.exp(), 2.0f64.exp(), 3.0f64.exp()];
        let z: f64 = e.iter().sum();
        for (a, b) in p.iter().zip(e.iter().map(|v| v / z)) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(softmax(&[1000.0, 1000.0]), vec![0.5, 0.5]);
        assert_eq!(argmax(&[0.1, 0.7, 0.7, 0.2]), 1);
    }

    #[test]
    fn hand_computed_dense_net() {
        let t = Topology {
            input: FeatureShape::flat(2),
            layers: vec![
                LayerSpec::dense(2),
                LayerSpec::Relu,
                LayerSpec::Dense {
                    units: 1,
                    bias: true,
                },
            ],
        };
        let net = NetworkSpec::new(
            t,
            vec![
                LayerParams {
                    weight: Tensor::matrix(2, 2, vec![1.0, -1.0, 2.0, 0.5]).unwrap(),
                    bias: None,
                },
                LayerParams {
                    weight: Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap(),
                    bias: Some(vec![0.25]),
                },
            ],
        )
        .unwrap();
        // x = (1, 1): hidden (3, -0.5) -> relu (3, 0) -> 3 + 0.25.
        let y = forward_digital(&net, &[1.0, 1.0, 0.0, 2.0], 2).unwrap();
        // x = (0, 2): hidden (4, 1) -> 4 + 3 + 0.25.
        assert_eq!(y, vec![3.25, 7.25]);
        assert!(forward_digital(&net, &[1.0], 1).is_err());
    }

    #[test]
    fn conv_net_matches_direct_evaluation() {
        let t = Topology {
            input: FeatureShape::new(3, 3, 1),
            layers: vec![
                LayerSpec::Conv2d {
                    filters: 1,
                    kernel: 2,
                    stride: 1,
                    pad: Some(0),
                    bias: false,
                },
                LayerSpec::MaxPool {
                    size: 2,
                    stride: None,
                },
                LayerSpec::Flatten,
                LayerSpec::dense(1),
            ],
        };
        let net = NetworkSpec::new(
            t,
            vec![
                LayerParams {
                    weight: Tensor::matrix(4, 1, vec![1.0, 0.0, 0.0, -1.0]).unwrap(),
                    bias: None,
                },
                LayerParams {
                    weight: Tensor::matrix(1, 1, vec![2.0]).unwrap(),
                    bias: None,
                },
            ],
        )
        .unwrap();
        let img = [1.0, 2.0, 3.0, 4.0, 9.0, 6.0, 7.0, 8.0, 5.0];
        // Windows: 1-9, 2-6, 4-8, 9-5 -> max 4, doubled.
        assert_eq!(forward_digital(&net, &img, 1).unwrap(), vec![8.0]);
    }
}
