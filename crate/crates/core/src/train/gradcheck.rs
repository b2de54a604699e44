// SPDX-License-Identifier: Apache-2.0

use super::model::Model;

/// Worst disagreement between analytic and finite-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Weighted layer, flat index and whether it is a bias of the worst entry.
    pub layer: usize,
    pub index: usize,
    pub is_bias: bool,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn entry(m: &mut Model<f64>, k: usize, is_bias: bool, i: usize) -> &mut f64 {
    let p = &mut m.params[k];
    if is_bias {
        &mut p.bias.as_mut().expect("bias present")[i]
    } else {
        &mut p.weight[i]
    }
}

/// Smallest denominator of the relative error. Central differences with a
/// 1e-5 step in 64-bit carry an absolute error near 1e-10, so gradients
/// below this magnitude are compared in absolute terms against it.
pub const GRADCHECK_FLOOR: f64 = 1e-4;

/// Compares the backward pass of `model` with central differences of the
/// mean cross-entropy on `(x, labels)`; `|a - n| / max(|a|, |n|, floor)`.
pub fn gradcheck(model: &Model<f64>, x: &[f64], labels: &[usize], step: f64) -> GradCheck {
    let (_, _, grads) = model.loss_and_grads(x.to_vec(), labels, None);
    let mut probe = model.clone();
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        layer: 0,
        index: 0,
        is_bias: false,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (k, g) in grads.iter().enumerate() {
        let empty = Vec::new();
        let parts = [
            (false, &g.weight),
            (true, g.bias.as_ref().unwrap_or(&empty)),
        ];
        for (is_bias, analytic) in parts {
            for (i, &a) in analytic.iter().enumerate() {
                let original = *entry(&mut probe, k, is_bias, i);
                *entry(&mut probe, k, is_bias, i) = original + step;
                let up = probe.loss(x.to_vec(), labels);
                *entry(&mut probe, k, is_bias, i) = original - step;
                let down = probe.loss(x.to_vec(), labels);
                *entry(&mut probe, k, is_bias, i) = original;
                let n = (up - down) / (2.0 * step);
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(GRADCHECK_FLOOR);
                worst.checked += 1;
                if rel > worst.max_rel_error {
                    worst = GradCheck {
                        max_rel_error: rel,
                        layer: k,
                        index: i,
                        is_bias,
                        analytic: a,
                        numeric: n,
                        checked: worst.checked,
                    };
                }
            }
        }
    }
    worst
}
