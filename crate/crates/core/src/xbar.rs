// SPDX-License-Identifier: Apache-2.0

//! Differential crossbar arrays.
//!
//! A real weight matrix is stored on two arrays of devices. Each weight is
//! the scaled difference of a "plus" and a "minus" device current; the
//! inactive device of a pair rests at the bottom of the current window and
//! the active one carries the magnitude (one-sided programming). Before
//! mapping, the weights of a layer are clipped to a central percentile band
//! so that the tails do not waste dynamic range, and the mapping scale is set
//! by the larger magnitude of the two band edges so that it is odd-symmetric.
//!
//! A common-mode shift that moves every device by the same amount is tracked
//! separately from the per-device state, as `common_mode`. Column currents are
//! subtracted before digitization, so the common mode cancels exactly and
//! only shrinks the usable window (it is not clipped).

use serde::{Deserialize, Serialize};

use crate::device::{
    decay_mean, drift_increment_sigma, sample_programmed_current, CurrentRange, DecayMode,
    DecayParams, NoiseKind, NoiseSpec,
};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{gemm, Op, Tensor};

/// Central percentile band of a layer's weights mapped onto the devices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub lower_percentile: f64,
    pub upper_percentile: f64,
}

impl Default for ClipSpec {
    fn default() -> Self {
        Self {
            lower_percentile: 10.0,
            upper_percentile: 90.0,
        }
    }
}

impl ClipSpec {
    pub fn new(lower_percentile: f64, upper_percentile: f64) -> Result<Self> {
        let spec = Self {
            lower_percentile,
            upper_percentile,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Map the full weight range (nothing clipped).
    pub fn full() -> Self {
        Self {
            lower_percentile: 0.0,
            upper_percentile: 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = (self.lower_percentile, self.upper_percentile);
        if !((0.0..50.0).contains(&lo) && hi > 50.0 && hi <= 100.0) {
            return Err(Error::param(format!(
                "clip percentiles ({lo}, {hi}) must lie in [0, 50) and (50, 100]"
            )));
        }
        Ok(())
    }
}

/// `p`-th percentile of ascending `sorted` by linear interpolation between
/// order statistics (rank `p/100 * (n-1)`).
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = (p / 100.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Widens a zero-width interval `(w, w)` to `(w - eps, w + eps)` with
/// `eps = max(|w|, 1) * 1e-9`.
pub fn widen_degenerate(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        return (lo, hi);
    }
    let w = 0.5 * (lo + hi);
    let eps = w.abs().max(1.0) * 1e-9;
    (w - eps, w + eps)
}

/// Weight interval `(w_lo, w_hi)` that a layer's devices will encode.
pub fn clip_range(weights: &Tensor, spec: &ClipSpec) -> Result<(f64, f64)> {
    spec.validate()?;
    if weights.is_empty() {
        return Err(Error::param(
            "cannot compute a clip range of an empty tensor",
        ));
    }
    if weights.data().iter().any(|w| !w.is_finite()) {
        return Err(Error::param("weights contain non-finite values"));
    }
    let mut sorted = weights.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile(&sorted, spec.lower_percentile);
    let hi = percentile(&sorted, spec.upper_percentile);
    Ok(widen_degenerate(lo, hi))
}

/// A weight matrix programmed onto a pair of device arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct DifferentialArray {
    g_plus: Tensor,
    g_minus: Tensor,
    common_mode: f64,
    range: CurrentRange,
    w_lo: f64,
    w_hi: f64,
    scale: f64,
}

impl DifferentialArray {
    /// Assembles an array from explicit device currents (no common mode).
    pub fn from_currents(
        g_plus: Tensor,
        g_minus: Tensor,
        range: CurrentRange,
        (w_lo, w_hi): (f64, f64),
        scale: f64,
    ) -> Result<Self> {
        if g_plus.shape() != g_minus.shape() || g_plus.rank() != 2 {
            return Err(Error::shape(format!(
                "device arrays must be matching matrices, got {:?} and {:?}",
                g_plus.shape(),
                g_minus.shape()
            )));
        }
        if !(scale > 0.0) {
            return Err(Error::param(format!("scale {scale} must be positive")));
        }
        Ok(Self {
            g_plus,
            g_minus,
            common_mode: 0.0,
            range,
            w_lo,
            w_hi,
            scale,
        })
    }

    pub fn rows(&self) -> usize {
        self.g_plus.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.g_plus.shape()[1]
    }

    pub fn range(&self) -> CurrentRange {
        self.range
    }

    /// Weight interval this array encodes.
    pub fn weight_range(&self) -> (f64, f64) {
        (self.w_lo, self.w_hi)
    }

    /// Weight units per unit of current difference.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn common_mode(&self) -> f64 {
        self.common_mode
    }

    /// Physical currents of the plus array (per-device state plus common mode).
    pub fn g_plus(&self) -> Tensor {
        self.g_plus.map(|g| g + self.common_mode)
    }

    pub fn g_minus(&self) -> Tensor {
        self.g_minus.map(|g| g + self.common_mode)
    }

    /// Shifts every device of both arrays by `delta`.
    pub fn shift_common_mode(&self, delta: f64) -> Self {
        Self {
            common_mode: self.common_mode + delta,
            ..self.clone()
        }
    }
}

/// Maps `weights[rows×cols]` onto a differential array.
///
/// 1. `(w_lo, w_hi) = clip_range(weights)`; each weight is clipped into it.
/// 2. `scale = max(|w_lo|, |w_hi|) / span`.
/// 3. `w >= 0` drives the plus device to `min + w/scale` and leaves the minus
///    device at `min`; negative weights mirror this.
/// 4. Every device then receives its programming error.
pub fn program(
    weights: &Tensor,
    clip: &ClipSpec,
    range: CurrentRange,
    decay: &DecayParams,
    rng: &mut RngStream,
) -> Result<DifferentialArray> {
    let (rows, cols) = weights.dims2()?;
    let (w_lo, w_hi) = clip_range(weights, clip)?;
    let m = w_lo.abs().max(w_hi.abs());
    let span = range.span();
    let scale = m / span;

    let mut g_plus = Tensor::full(vec![rows, cols], range.min);
    let mut g_minus = Tensor::full(vec![rows, cols], range.min);
    for ((w, gp), gm) in weights
        .data()
        .iter()
        .zip(g_plus.data_mut())
        .zip(g_minus.data_mut())
    {
        let w = w.clamp(w_lo, w_hi);
        let g = (range.min + span * (w.abs() / m)).min(range.max);
        if w >= 0.0 {
            *gp = g;
        } else {
            *gm = g;
        }
    }
    if decay.sigma_i0 > 0.0 {
        for g in g_plus.data_mut().iter_mut().chain(g_minus.data_mut()) {
            *g = sample_programmed_current(*g, decay, range, rng);
        }
    }
    DifferentialArray::from_currents(g_plus, g_minus, range, (w_lo, w_hi), scale)
}

/// Weights currently represented by the array: `scale * (G+ - G-)`.
pub fn decode(arr: &DifferentialArray) -> Tensor {
    arr.g_plus
        .zip_map(&arr.g_minus, |p, m| arr.scale * (p - m))
        .expect("plus and minus arrays share a shape")
}

/// Ages every device by `t_hours` from the array's current state.
///
/// Each device moves to its mean retention curve and receives an
/// independent drift increment; the result is clipped to the window. In
/// `UniformMeasured` mode the mean movement is the same for every device and
/// is recorded as a common-mode shift.
pub fn age(
    arr: &DifferentialArray,
    t_hours: f64,
    decay: &DecayParams,
    rng: &mut RngStream,
) -> Result<DifferentialArray> {
    decay.validate()?;
    let f = decay.progress(t_hours)?;
    let sigma = drift_increment_sigma(t_hours, decay)? * arr.range.span();
    // Per-device state is stored relative to the common mode, so clipping it
    // to `range` clips to the shifted window.
    let window = arr.range;
    let mut out = arr.clone();

    match decay.mode {
        DecayMode::UniformMeasured => {
            out.common_mode += decay.uniform_drift_delta_inf * f;
            if sigma > 0.0 {
                for g in out
                    .g_plus
                    .data_mut()
                    .iter_mut()
                    .chain(out.g_minus.data_mut())
                {
                    *g = window.clip(*g + sigma * rng.normal());
                }
            }
        }
        DecayMode::NonUniformCycled => {
            let c = out.common_mode;
            for g in out
                .g_plus
                .data_mut()
                .iter_mut()
                .chain(out.g_minus.data_mut())
            {
                let physical = decay_mean(*g + c, t_hours, decay)? + sigma * rng.normal();
                *g = arr.range.clip(physical) - c;
            }
        }
    }
    Ok(out)
}

/// One analog vector-matrix multiplication, `y = scale * (G+^T x - G-^T x)`,
/// with fresh read noise drawn independently on every device of both arrays.
pub fn analog_vmm(
    arr: &DifferentialArray,
    x: &[f64],
    noise: &NoiseSpec,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let (rows, cols) = (arr.rows(), arr.cols());
    if x.len() != rows {
        return Err(Error::shape(format!(
            "input of length {} for an array with {rows} rows",
            x.len()
        )));
    }
    let mut y = vec![0.0; cols];
    let diff = decode(arr);
    gemm(
        Op::N,
        Op::N,
        1,
        rows,
        cols,
        1.0,
        x,
        diff.data(),
        0.0,
        &mut y,
    );
    if noise.is_noiseless() {
        return Ok(y);
    }
    let deviations = |g: &Tensor, rng: &mut RngStream| -> Vec<f64> {
        let mut acc = vec![0.0; cols];
        for (i, &xi) in x.iter().enumerate() {
            for (j, a) in acc.iter_mut().enumerate() {
                let current = g.data()[i * cols + j] + arr.common_mode;
                let sigma = device_sigma(noise, current, arr.range);
                *a += xi * sigma * rng.normal();
            }
        }
        acc
    };
    let plus = deviations(&arr.g_plus, rng);
    let minus = deviations(&arr.g_minus, rng);
    for ((yj, p), m) in y.iter_mut().zip(plus).zip(minus) {
        *yj += arr.scale * (p - m);
    }
    Ok(y)
}

#[inline]
fn device_sigma(noise: &NoiseSpec, current: f64, range: CurrentRange) -> f64 {
    match noise.kind {
        NoiseKind::Additive => noise.sigma_syn * range.span(),
        NoiseKind::Proportional => noise.sigma_syn * current.abs(),
    }
}

/// How read noise is realized when many vectors go through an array.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReadNoiseModel {
    /// Draw a perturbation for every device on every VMM, as `analog_vmm`.
    PerDevice,
    /// Draw the column-output perturbation directly. A sum of independent
    /// Gaussians is Gaussian, so `sum_i x_i n_ij` with `n_ij ~ N(0, s_ij^2)`
    /// equals `N(0, sum_i x_i^2 s_ij^2)` in distribution; this is exact and
    /// costs one extra matrix product instead of one draw per device.
    #[default]
    Aggregated,
}

/// A differential array prepared for batched reads: the decoded weight
/// matrix and, for proportional noise, the per-device variance weights.
#[derive(Clone, Debug)]
pub struct CompiledArray {
    rows: usize,
    cols: usize,
    scale: f64,
    span: f64,
    decoded: Vec<f64>,
    /// `(G+)^2 + (G-)^2` of the physical currents.
    square_sum: Vec<f64>,
    plus: Vec<f64>,
    minus: Vec<f64>,
}

impl CompiledArray {
    pub fn new(arr: &DifferentialArray) -> Self {
        let plus = arr.g_plus().into_data();
        let minus = arr.g_minus().into_data();
        let square_sum = plus
            .iter()
            .zip(&minus)
            .map(|(p, m)| p * p + m * m)
            .collect();
        Self {
            rows: arr.rows(),
            cols: arr.cols(),
            scale: arr.scale,
            span: arr.range.span(),
            decoded: decode(arr).into_data(),
            square_sum,
            plus,
            minus,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn decoded(&self) -> &[f64] {
        &self.decoded
    }

    /// Reads `x` (`n × rows`, one input vector per row) through the array.
    /// Rows are split into `rngs.len()` equal contiguous groups and each
    /// group draws its read noise from its own stream, in row order.
    pub fn vmm_rows(
        &self,
        x: &[f64],
        noise: &NoiseSpec,
        model: ReadNoiseModel,
        rngs: &mut [RngStream],
    ) -> Vec<f64> {
        let n = x.len() / self.rows;
        assert_eq!(
            n * self.rows,
            x.len(),
            "input is not a whole number of rows"
        );
        let mut y = vec![0.0; n * self.cols];
        gemm(
            Op::N,
            Op::N,
            n,
            self.rows,
            self.cols,
            1.0,
            x,
            &self.decoded,
            0.0,
            &mut y,
        );
        if noise.is_noiseless() || n == 0 {
            return y;
        }
        assert!(
            !rngs.is_empty() && n % rngs.len() == 0,
            "rows must split evenly over streams"
        );
        let per_group = n / rngs.len();
        match model {
            ReadNoiseModel::Aggregated => self.add_aggregated(x, &mut y, noise, rngs, per_group),
            ReadNoiseModel::PerDevice => self.add_per_device(x, &mut y, noise, rngs, per_group),
        }
        y
    }

    fn add_aggregated(
        &self,
        x: &[f64],
        y: &mut [f64],
        noise: &NoiseSpec,
        rngs: &mut [RngStream],
        per_group: usize,
    ) {
        let n = y.len() / self.cols;
        let (rows, cols) = (self.rows, self.cols);
        let s = noise.sigma_syn * self.scale;
        let std: Vec<f64> = match noise.kind {
            NoiseKind::Additive => {
                // Both devices contribute sigma*span: total variance 2 (s span)^2 |x|^2.
                let k = s * self.span * std::f64::consts::SQRT_2;
                x.chunks_exact(rows)
                    .flat_map(|row| {
                        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        std::iter::repeat(k * norm).take(cols)
                    })
                    .collect()
            }
            NoiseKind::Proportional => {
                let sq: Vec<f64> = x.iter().map(|v| v * v).collect();
                let mut var = vec![0.0; n * cols];
                gemm(
                    Op::N,
                    Op::N,
                    n,
                    rows,
                    cols,
                    1.0,
                    &sq,
                    &self.square_sum,
                    0.0,
                    &mut var,
                );
                var.into_iter().map(|v| s * v.max(0.0).sqrt()).collect()
            }
        };
        for (g, rng) in rngs.iter_mut().enumerate() {
            let span = g * per_group * cols..(g + 1) * per_group * cols;
            for (yj, sd) in y[span.clone()].iter_mut().zip(&std[span]) {
                *yj += sd * rng.normal();
            }
        }
    }

    fn add_per_device(
        &self,
        x: &[f64],
        y: &mut [f64],
        noise: &NoiseSpec,
        rngs: &mut [RngStream],
        per_group: usize,
    ) {
        let (rows, cols) = (self.rows, self.cols);
        let range = CurrentRange {
            min: 0.0,
            max: self.span,
        };
        let mut acc = vec![0.0; cols];
        for (g, rng) in rngs.iter_mut().enumerate() {
            for r in g * per_group..(g + 1) * per_group {
                let xr = &x[r * rows..(r + 1) * rows];
                for devices in [&self.plus, &self.minus] {
                    acc.fill(0.0);
                    for (i, &xi) in xr.iter().enumerate() {
                        for (j, a) in acc.iter_mut().enumerate() {
                            let sigma = device_sigma(noise, devices[i * cols + j], range);
                            *a += xi * sigma * rng.normal();
                        }
                    }
                    let sign = if std::ptr::eq(devices, &self.plus) {
                        1.0
                    } else {
                        -1.0
                    };
                    for (yj, a) in y[r * cols..(r + 1) * cols].iter_mut().zip(&acc) {
                        *yj += sign * self.scale * a;
                    }
                }
            }
        }
    }
}

/// Uniform converter (ADC or DAC) with `2^bits` levels spanning `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantizer {
    pub bits: Option<u32>,
    pub lo: f64,
    pub hi: f64,
}

impl Quantizer {
    pub const MAX_BITS: u32 = 32;

    pub fn new(bits: Option<u32>, lo: f64, hi: f64) -> Result<Self> {
        if let Some(b) = bits {
            if !(1..=Self::MAX_BITS).contains(&b) {
                return Err(Error::param(format!(
                    "converter resolution {b} bits outside 1..={}",
                    Self::MAX_BITS
                )));
            }
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::param(format!(
                "converter range ({lo}, {hi}) needs lo < hi"
            )));
        }
        Ok(Self { bits, lo, hi })
    }

    /// Full-precision pass-through over `[0, 1]`.
    pub fn disabled() -> Self {
        Self {
            bits: None,
            lo: 0.0,
            hi: 1.0,
        }
    }

    pub fn with_bits(self, bits: Option<u32>) -> Result<Self> {
        Self::new(bits, self.lo, self.hi)
    }

    pub fn is_enabled(&self) -> bool {
        self.bits.is_some()
    }

    fn steps(&self) -> Option<f64> {
        self.bits.map(|b| ((1u64 << b) - 1) as f64)
    }

    /// The `2^bits` representable values, ascending.
    pub fn levels(&self) -> Vec<f64> {
        match self.steps() {
            None => Vec::new(),
            Some(n) => (0..=n as u64).map(|k| self.level(k as f64, n)).collect(),
        }
    }

    #[inline]
    fn level(&self, k: f64, n: f64) -> f64 {
        if k >= n {
            self.hi
        } else {
            self.lo + (self.hi - self.lo) * (k / n)
        }
    }

    /// Clips into `[lo, hi]` and snaps to the nearest level; ties round
    /// toward `hi`. Identity when disabled.
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match self.steps() {
            None => x,
            Some(n) => {
                let u = (x.clamp(self.lo, self.hi) - self.lo) / (self.hi - self.lo);
                let k = (u * n + 0.5).floor().clamp(0.0, n);
                self.level(k, n)
            }
        }
    }

    pub fn apply_slice(&self, xs: &mut [f64]) {
        if self.is_enabled() {
            for x in xs {
                *x = self.apply(*x);
            }
        }
    }
}

pub fn quantize(x: &Tensor, q: &Quantizer) -> Tensor {
    x.map(|v| q.apply(v))
}
