// SPDX-License-Identifier: Apache-2.0

//! Trainable network with explicit forward tape and backward pass.

use crate::error::{Error, Result};
use crate::net::{LayerParams, NetworkSpec, Plan, Step, Topology};
use crate::rng::{tags, RngStream};
use crate::tensor::{gemm, Op, Real, Tensor};

/// Weights (row-major `rows×cols`) and optional biases of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    plan: Plan,
    topology: Topology,
    pub params: Vec<Param<T>>,
}

/// Gaussian noise added to activation inputs during a training pass.
#[derive(Clone, Debug)]
pub struct NoiseInjection {
    pub sigma: f64,
    /// Activation `j` of the pass draws from `stream.derive(j)`.
    pub stream: RngStream,
}

enum Saved<T> {
    /// Lowered input of a conv layer.
    Conv(Vec<T>),
    /// Input of a dense layer.
    Dense(Vec<T>),
    Pool {
        arg: Vec<usize>,
        in_len: usize,
    },
    /// Activation input (after noise).
    Activation(Vec<T>),
    Nothing,
}

/// Everything the backward pass needs from one forward pass.
pub struct Tape<T> {
    n: usize,
    saved: Vec<Saved<T>>,
}

impl<T: Real> Model<T> {
    /// Glorot-uniform weights, zero biases. Layer `k` draws from
    /// `rng / INIT / k`. Conv fan-in and fan-out are `k·k·C` and `k·k·F`.
    pub fn init(topology: &Topology, rng: &RngStream) -> Result<Self> {
        let plan = topology.plan()?;
        let mut params = Vec::new();
        for step in &plan.steps {
            let (rows, cols, fan_in, fan_out, bias) = match step {
                Step::Conv {
                    geom,
                    filters,
                    bias,
                    ..
                } => {
                    let area = geom.kernel.0 * geom.kernel.1;
                    (
                        geom.patch_len(),
                        *filters,
                        geom.patch_len(),
                        area * filters,
                        *bias,
                    )
                }
                Step::Dense {
                    inputs,
                    units,
                    bias,
                    ..
                } => (*inputs, *units, *inputs, *units, *bias),
                _ => continue,
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut r = rng.derive_path(&[tags::INIT, params.len() as u64]);
            let weight = (0..rows * cols)
                .map(|_| T::from_f64(limit * (2.0 * r.uniform() - 1.0)))
                .collect();
            params.push(Param {
                rows,
                cols,
                weight,
                bias: bias.then(|| vec![T::zero(); cols]),
            });
        }
        Ok(Self {
            plan,
            topology: topology.clone(),
            params,
        })
    }

    pub fn from_spec(net: &NetworkSpec) -> Result<Self> {
        net.validate()?;
        Ok(Self {
            plan: net.topology.plan()?,
            topology: net.topology.clone(),
            params: net
                .params
                .iter()
                .map(|p| Param {
                    rows: p.weight.shape()[0],
                    cols: p.weight.shape()[1],
                    weight: p
                        .weight
                        .data()
                        .iter()
                        .map(|&v| T::from_f64(v as f64))
                        .collect(),
                    bias: p
                        .bias
                        .as_ref()
                        .map(|b| b.iter().map(|&v| T::from_f64(v as f64)).collect()),
                })
                .collect(),
        })
    }

    /// Parameters as a [`NetworkSpec`] with default clip and converters.
    pub fn to_spec(&self) -> Result<NetworkSpec> {
        let params = self
            .params
            .iter()
            .map(|p| {
                Ok(LayerParams {
                    weight: Tensor::new(
                        vec![p.rows, p.cols],
                        p.weight.iter().map(|v| Real::to_f64(*v) as f32).collect(),
                    )?,
                    bias: p
                        .bias
                        .as_ref()
                        .map(|b| b.iter().map(|v| Real::to_f64(*v) as f32).collect()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        NetworkSpec::new(self.topology.clone(), params)
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn input_len(&self) -> usize {
        self.plan.input_len()
    }

    pub fn classes(&self) -> usize {
        self.plan.output_len()
    }

    /// Forward pass over `n` images. With `noise`, each activation input
    /// `z` becomes `z + sigma * N(0, 1)`.
    pub fn forward(
        &self,
        mut x: Vec<T>,
        n: usize,
        noise: Option<&NoiseInjection>,
        record: bool,
    ) -> (Vec<T>, Tape<T>) {
        assert_eq!(x.len(), n * self.input_len(), "input size");
        let mut saved = Vec::with_capacity(self.plan.steps.len());
        let mut activation = 0u64;
        for step in &self.plan.steps {
            let (next, keep) = match step {
                Step::Conv { geom, widx, .. } => {
                    let p = &self.params[*widx];
                    let m = n * geom.patches();
                    let mut cols = vec![T::zero(); m * p.rows];
                    geom.im2col_into(&x, n, &mut cols);
                    let mut y = vec![T::zero(); m * p.cols];
                    gemm(
                        Op::N,
                        Op::N,
                        m,
                        p.rows,
                        p.cols,
                        T::one(),
                        &cols,
                        &p.weight,
                        T::zero(),
                        &mut y,
                    );
                    add_bias(p, &mut y);
                    (y, Saved::Conv(cols))
                }
                Step::Dense { widx, .. } => {
                    let p = &self.params[*widx];
                    let mut y = vec![T::zero(); n * p.cols];
                    gemm(
                        Op::N,
                        Op::N,
                        n,
                        p.rows,
                        p.cols,
                        T::one(),
                        &x,
                        &p.weight,
                        T::zero(),
                        &mut y,
                    );
                    add_bias(p, &mut y);
                    (y, Saved::Dense(x))
                }
                Step::Pool(g) => {
                    let (y, arg) = g.forward(&x, n);
                    (
                        y,
                        Saved::Pool {
                            arg,
                            in_len: x.len(),
                        },
                    )
                }
                Step::BoundedRelu | Step::Relu => {
                    if let Some(inj) = noise.filter(|i| i.sigma > 0.0) {
                        let mut r = inj.stream.derive(activation);
                        for v in x.iter_mut() {
                            *v = *v + T::from_f64(inj.sigma * r.normal());
                        }
                    }
                    activation += 1;
                    let bounded = matches!(step, Step::BoundedRelu);
                    let y = x
                        .iter()
                        .map(|&z| {
                            let z = z.max(T::zero());
                            if bounded {
                                z.min(T::one())
                            } else {
                                z
                            }
                        })
                        .collect();
                    (y, Saved::Activation(x))
                }
                Step::Flatten | Step::Softmax => (x, Saved::Nothing),
            };
            x = next;
            saved.push(if record { keep } else { Saved::Nothing });
        }
        (x, Tape { n, saved })
    }

    /// Scores without noise or tape.
    pub fn predict_scores(&self, x: Vec<T>, n: usize) -> Vec<T> {
        self.forward(x, n, None, false).0
    }

    /// Gradients of the loss with respect to every parameter, given the
    /// gradient `g` with respect to the scores.
    pub fn backward(&self, tape: Tape<T>, mut g: Vec<T>) -> Vec<Param<T>> {
        let n = tape.n;
        let mut grads: Vec<Param<T>> = self
            .params
            .iter()
            .map(|p| Param {
                rows: p.rows,
                cols: p.cols,
                weight: Vec::new(),
                bias: None,
            })
            .collect();
        let first_weighted = self
            .plan
            .steps
            .iter()
            .position(|s| matches!(s, Step::Conv { .. } | Step::Dense { .. }))
            .expect("validated topology has a weighted layer");
        for (i, (step, saved)) in self.plan.steps.iter().zip(tape.saved).enumerate().rev() {
            g = match (step, saved) {
                (Step::Conv { geom, widx, .. }, Saved::Conv(cols)) => {
                    let p = &self.params[*widx];
                    let m = n * geom.patches();
                    grads[*widx] = weight_grads(p, &cols, &g, m);
                    if i <= first_weighted {
                        break;
                    }
                    let mut dcols = vec![T::zero(); m * p.rows];
                    gemm(
                        Op::N,
                        Op::T,
                        m,
                        p.cols,
                        p.rows,
                        T::one(),
                        &g,
                        &p.weight,
                        T::zero(),
                        &mut dcols,
                    );
                    let mut dx = vec![T::zero(); n * geom.in_len()];
                    geom.col2im_into(&dcols, n, &mut dx);
                    dx
                }
                (Step::Dense { widx, .. }, Saved::Dense(x)) => {
                    let p = &self.params[*widx];
                    grads[*widx] = weight_grads(p, &x, &g, n);
                    if i <= first_weighted {
                        break;
                    }
                    let mut dx = vec![T::zero(); n * p.rows];
                    gemm(
                        Op::N,
                        Op::T,
                        n,
                        p.cols,
                        p.rows,
                        T::one(),
                        &g,
                        &p.weight,
                        T::zero(),
                        &mut dx,
                    );
                    dx
                }
                (Step::Pool(_), Saved::Pool { arg, in_len }) => {
                    let mut dx = vec![T::zero(); in_len];
                    for (gi, &a) in g.iter().zip(&arg) {
                        dx[a] = dx[a] + *gi;
                    }
                    dx
                }
                (Step::BoundedRelu, Saved::Activation(z)) => {
                    for (gi, &zi) in g.iter_mut().zip(&z) {
                        if !(zi > T::zero() && zi < T::one()) {
                            *gi = T::zero();
                        }
                    }
                    g
                }
                (Step::Relu, Saved::Activation(z)) => {
                    for (gi, &zi) in g.iter_mut().zip(&z) {
                        if !(zi > T::zero()) {
                            *gi = T::zero();
                        }
                    }
                    g
                }
                (Step::Flatten | Step::Softmax, _) => g,
                _ => panic!("backward needs a recorded tape"),
            };
        }
        grads
    }

    /// Mean softmax cross-entropy over the batch, with its gradient.
    pub fn loss_and_grads(
        &self,
        x: Vec<T>,
        labels: &[usize],
        noise: Option<&NoiseInjection>,
    ) -> (f64, Vec<T>, Vec<Param<T>>) {
        let n = labels.len();
        let (scores, tape) = self.forward(x, n, noise, true);
        let (loss, dscores) = cross_entropy(&scores, labels, self.classes());
        let grads = self.backward(tape, dscores);
        (loss, scores, grads)
    }

    /// Mean loss only.
    pub fn loss(&self, x: Vec<T>, labels: &[usize]) -> f64 {
        let scores = self.predict_scores(x, labels.len());
        cross_entropy(&scores, labels, self.classes()).0
    }
}

fn add_bias<T: Real>(p: &Param<T>, y: &mut [T]) {
    if let Some(b) = &p.bias {
        for row in y.chunks_exact_mut(p.cols) {
            row.iter_mut().zip(b).for_each(|(v, &b)| *v = *v + b);
        }
    }
}

fn weight_grads<T: Real>(p: &Param<T>, input: &[T], g: &[T], m: usize) -> Param<T> {
    let mut dw = vec![T::zero(); p.rows * p.cols];
    gemm(
        Op::T,
        Op::N,
        p.rows,
        m,
        p.cols,
        T::one(),
        input,
        g,
        T::zero(),
        &mut dw,
    );
    let bias = p.bias.as_ref().map(|_| {
        let mut db = vec![T::zero(); p.cols];
        for row in g.chunks_exact(p.cols) {
            db.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
        }
        db
    });
    Param {
        rows: p.rows,
        cols: p.cols,
        weight: dw,
        bias,
    }
}

/// Mean of `-log softmax(scores)[label]` and its gradient `(p - onehot) / n`.
pub fn cross_entropy<T: Real>(scores: &[T], labels: &[usize], classes: usize) -> (f64, Vec<T>) {
    let n = labels.len();
    let inv_n = 1.0 / n as f64;
    let mut grad = vec![T::zero(); scores.len()];
    let mut total = 0.0;
    for ((row, g), &y) in scores
        .chunks_exact(classes)
        .zip(grad.chunks_exact_mut(classes))
        .zip(labels)
    {
        let m = row
            .iter()
            .fold(f64::NEG_INFINITY, |a, v| a.max(Real::to_f64(*v)));
        let exps: Vec<f64> = row.iter().map(|v| (Real::to_f64(*v) - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        total += z.ln() + m - Real::to_f64(row[y]);
        for (k, (gk, e)) in g.iter_mut().zip(&exps).enumerate() {
            let p = e / z;
            let t = if k == y { 1.0 } else { 0.0 };
            *gk = T::from_f64((p - t) * inv_n);
        }
    }
    (total * inv_n, grad)
}

/// Checks `labels` against the model's class count.
pub(crate) fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(l) => Err(Error::param(format!("label {l} outside {classes} classes"))),
        None => Ok(()),
    }
}
