// SPDX-License-Identifier: Apache-2.0

//! Converter range calibration.

use super::forward::{to_f64, DigitalNetwork, Probe};
use super::{ActivationBound, Converters, NetworkSpec, Step, CHUNK_IMAGES};
use crate::error::{Error, Result};
use crate::xbar::{widen_degenerate, Quantizer};

/// Percentiles of observed values that bound a calibrated converter range.
pub const CALIBRATION_PERCENTILES: (f64, f64) = (0.1, 99.9);

/// Exact low and high percentiles of a stream of `total` values, keeping
/// only the tails in memory.
#[derive(Clone, Debug)]
pub struct TailPercentiles {
    total: usize,
    seen: usize,
    rank_lo: f64,
    rank_hi: f64,
    keep_lo: usize,
    keep_hi: usize,
    low: Vec<f64>,
    high: Vec<f64>,
}

impl TailPercentiles {
    pub fn new(total: usize, lower: f64, upper: f64) -> Self {
        let last = total.saturating_sub(1) as f64;
        let rank_lo = lower / 100.0 * last;
        let rank_hi = upper / 100.0 * last;
        Self {
            total,
            seen: 0,
            rank_lo,
            rank_hi,
            keep_lo: (rank_lo.ceil() as usize + 1).min(total),
            keep_hi: (total - (rank_hi.floor() as usize).min(total)).min(total),
            low: Vec::new(),
            high: Vec::new(),
        }
    }

    pub fn push(&mut self, values: &[f64]) {
        self.seen += values.len();
        self.low.extend_from_slice(values);
        self.high.extend_from_slice(values);
        Self::compact(&mut self.low, self.keep_lo, |a, b| a.total_cmp(b));
        Self::compact(&mut self.high, self.keep_hi, |a, b| b.total_cmp(a));
    }

    fn compact(buf: &mut Vec<f64>, keep: usize, cmp: impl Fn(&f64, &f64) -> std::cmp::Ordering) {
        if buf.len() > 2 * keep + 4096 {
            if keep == 0 {
                buf.clear();
            } else {
                buf.select_nth_unstable_by(keep - 1, &cmp);
                buf.truncate(keep);
            }
        }
    }

    /// `(lower, upper)` percentiles by linear interpolation of order
    /// statistics.
    pub fn finish(mut self) -> Result<(f64, f64)> {
        if self.seen != self.total || self.total == 0 {
            return Err(Error::param(format!(
                "percentiles need {} values, saw {}",
                self.total, self.seen
            )));
        }
        self.low.sort_by(f64::total_cmp);
        self.high.sort_by(|a, b| b.total_cmp(a));
        let last = self.total - 1;
        let low = &self.low;
        let high = &self.high;
        let at = |rank: f64, pick: &dyn Fn(usize) -> f64| {
            let (f, c) = (rank.floor() as usize, rank.ceil() as usize);
            pick(f) + (pick(c) - pick(f)) * (rank - f as f64)
        };
        let lo = at(self.rank_lo, &|i| low[i]);
        let hi = at(self.rank_hi, &|i| high[last - i]);
        Ok((lo, hi))
    }
}

/// Converter ranges for `net` from `n` calibration images.
///
/// Bounded networks keep every hidden DAC and ADC at `(0, 1)`; only the
/// final ADC range is taken from the observed class scores. Unbounded
/// networks take every DAC range from the observed layer inputs and every
/// ADC range from the observed column outputs. Observed ranges span the
/// [`CALIBRATION_PERCENTILES`]. All converters come back disabled
/// (`bits = None`).
pub fn calibrate_ranges(net: &NetworkSpec, images: &[f32], n: usize) -> Result<Converters> {
    if n == 0 {
        return Err(Error::param("calibration batch is empty"));
    }
    let digital = DigitalNetwork::new(net)?;
    let len = digital.input_len();
    if images.len() != n * len {
        return Err(Error::shape(format!(
            "{} calibration values for {n} images of {len}",
            images.len()
        )));
    }
    let layers = net.weighted_layers();
    let bounded = net.activation_bound() == ActivationBound::Bounded;
    let (p_lo, p_hi) = CALIBRATION_PERCENTILES;

    // Values per image entering and leaving each weighted layer.
    let mut sizes = vec![(0, 0); layers];
    for (i, step) in digital.plan.steps.iter().enumerate() {
        let input = digital.plan.shapes[i].len();
        match step {
            Step::Conv {
                geom,
                filters,
                widx,
                ..
            } => sizes[*widx] = (input, geom.patches() * filters),
            Step::Dense { units, widx, .. } => sizes[*widx] = (input, *units),
            _ => {}
        }
    }
    let observed = |k: usize| !bounded || k + 1 == layers;
    let mut inputs: Vec<Option<TailPercentiles>> = (0..layers)
        .map(|k| (!bounded).then(|| TailPercentiles::new(n * sizes[k].0, p_lo, p_hi)))
        .collect();
    let mut outputs: Vec<Option<TailPercentiles>> = (0..layers)
        .map(|k| observed(k).then(|| TailPercentiles::new(n * sizes[k].1, p_lo, p_hi)))
        .collect();

    for lo in (0..n).step_by(CHUNK_IMAGES) {
        let hi = (lo + CHUNK_IMAGES).min(n);
        digital.forward_observed(
            to_f64(&images[lo * len..hi * len]),
            hi - lo,
            |k, probe, v| {
                let slot = match probe {
                    Probe::Input => &mut inputs[k],
                    Probe::Output => &mut outputs[k],
                };
                if let Some(t) = slot {
                    t.push(v);
                }
            },
        );
    }

    let to_quantizer = |t: Option<TailPercentiles>| -> Result<Quantizer> {
        match t {
            None => Ok(Quantizer::disabled()),
            Some(t) => {
                let (lo, hi) = t.finish()?;
                let (lo, hi) = widen_degenerate(lo, hi);
                Quantizer::new(None, lo, hi)
            }
        }
    };
    Ok(Converters {
        dac: inputs
            .into_iter()
            .map(to_quantizer)
            .collect::<Result<_>>()?,
        adc: outputs
            .into_iter()
            .map(to_quantizer)
            .collect::<Result<_>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{FeatureShape, LayerParams, LayerSpec, Topology};
    use crate::rng::RngStream;
    use crate::tensor::Tensor;
    use crate::xbar::percentile;

    #[test]
    fn tail_percentiles_match_full_sort() {
        let mut rng = RngStream::new(3, 3);
        for total in [1usize, 2, 7, 1000, 50_000] {
            let xs: Vec<f64> = (0..total).map(|_| rng.normal()).collect();
            let mut t = TailPercentiles::new(total, 0.1, 99.9);
            for c in xs.chunks(333) {
                t.push(c);
            }
            let mut sorted = xs.clone();
            sorted.sort_by(f64::total_cmp);
            let want = (percentile(&sorted, 0.1), percentile(&sorted, 99.9));
            assert_eq!(t.finish().unwrap(), want, "total {total}");
        }
        let t = TailPercentiles::new(5, 0.1, 99.9);
        assert!(t.finish().is_err());
    }

    fn net(act: LayerSpec) -> NetworkSpec {
        let t = Topology {
            input: FeatureShape::flat(2),
            layers: vec![LayerSpec::dense(2), act, LayerSpec::dense(1)],
        };
        NetworkSpec::new(
            t,
            vec![
                LayerParams {
                    weight: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
                    bias: None,
                },
                LayerParams {
                    weight: Tensor::matrix(2, 1, vec![2.0, 5.0]).unwrap(),
                    bias: None,
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn bounded_hidden_ranges_are_fixed() {
        let x: Vec<f32> = (0..200).map(|i| (i % 100) as f32 / 20.0).collect();
        let c = calibrate_ranges(&net(LayerSpec::BoundedRelu), &x, 100).unwrap();
        for q in c.dac.iter().chain(&c.adc[..1]) {
            assert_eq!((q.lo, q.hi), (0.0, 1.0));
        }
        // Final scores are 2 * min(x0, 1) with x0 = i/20 for even i.
        assert!(c.adc[1].lo.abs() < 0.01 && (c.adc[1].hi - 2.0).abs() < 1e-12);
        assert!(c.adc.iter().all(|q| q.bits.is_none()));
    }

    #[test]
    fn unbounded_ranges_follow_data_and_widen() {
        let x: Vec<f32> = (0..200).map(|i| (i % 100) as f32 / 20.0).collect();
        let c = calibrate_ranges(&net(LayerSpec::Relu), &x, 100).unwrap();
        assert!(c.dac[0].hi > 4.9);
        let h = &c.adc[0];
        assert!(h.hi > h.lo);
        assert!(calibrate_ranges(&net(LayerSpec::Relu), &[], 0).is_err());
    }

    #[test]
    fn constant_layer_output_widens() {
        let x = vec![0.0f32; 20];
        let c = calibrate_ranges(&net(LayerSpec::Relu), &x, 10).unwrap();
        for q in c.adc.iter().chain(&c.dac) {
            assert_eq!((q.lo, q.hi), (-1e-9, 1e-9));
        }
    }
}
