// SPDX-License-Identifier: Apache-2.0

//! Convolution lowering (im2col / col2im) and max-pooling on HWC images.
//!
//! A patch row is laid out as `(ky, kx, c)` with `c` fastest, which matches a
//! `kh×kw×C×F` filter tensor reshaped to `(kh·kw·C)×F`. One conv layer is one
//! matrix with one column per filter.

use super::{gemm, Op, Real, Tensor};
use crate::error::{Error, Result};

/// Static geometry of a 2-D convolution over an `H×W×C` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl ConvGeometry {
    pub fn new(
        (in_h, in_w, channels): (usize, usize, usize),
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Self> {
        if kernel.0 == 0 || kernel.1 == 0 {
            return Err(Error::param(format!("kernel {kernel:?} must be positive")));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::param(format!("stride {stride:?} must be positive")));
        }
        if kernel.0 > in_h + 2 * pad.0 || kernel.1 > in_w + 2 * pad.1 {
            return Err(Error::param(format!(
                "kernel {kernel:?} larger than padded input {}x{}",
                in_h + 2 * pad.0,
                in_w + 2 * pad.1
            )));
        }
        Ok(Self {
            in_h,
            in_w,
            channels,
            kernel,
            stride,
            pad,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad.0 - self.kernel.0) / self.stride.0 + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad.1 - self.kernel.1) / self.stride.1 + 1
    }

    /// Number of receptive fields (rows of the lowered matrix).
    pub fn patches(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Length of one flattened receptive field.
    pub fn patch_len(&self) -> usize {
        self.kernel.0 * self.kernel.1 * self.channels
    }

    pub fn in_len(&self) -> usize {
        self.in_h * self.in_w * self.channels
    }

    /// Lowers `images` consecutive HWC images into `out`, which must hold
    /// `images · patches · patch_len` values.
    pub fn im2col_into<T: Real>(&self, input: &[T], images: usize, out: &mut [T]) {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.pad;
        let c = self.channels;
        let (oh, ow) = (self.out_h(), self.out_w());
        let row_len = self.patch_len();
        assert_eq!(input.len(), images * self.in_len());
        assert_eq!(out.len(), images * oh * ow * row_len);

        for (img, image) in input.chunks_exact(self.in_len()).enumerate() {
            let base = img * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = &mut out[(base + oy * ow + ox) * row_len..][..row_len];
                    for ky in 0..kh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        let dst = &mut row[ky * kw * c..(ky + 1) * kw * c];
                        if iy < 0 || iy >= self.in_h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            let cell = &mut dst[kx * c..(kx + 1) * c];
                            if ix < 0 || ix >= self.in_w as isize {
                                cell.fill(T::zero());
                            } else {
                                let src = (iy as usize * self.in_w + ix as usize) * c;
                                cell.copy_from_slice(&image[src..src + c]);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col_into`](Self::im2col_into): scatters-adds patch
    /// gradients back onto `images` HWC gradient buffers (overwritten).
    pub fn col2im_into<T: Real>(&self, cols: &[T], images: usize, out: &mut [T]) {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.pad;
        let c = self.channels;
        let (oh, ow) = (self.out_h(), self.out_w());
        let row_len = self.patch_len();
        assert_eq!(out.len(), images * self.in_len());
        assert_eq!(cols.len(), images * oh * ow * row_len);
        out.fill(T::zero());

        for (img, image) in out.chunks_exact_mut(self.in_len()).enumerate() {
            let base = img * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = &cols[(base + oy * ow + ox) * row_len..][..row_len];
                    for ky in 0..kh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix < 0 || ix >= self.in_w as isize {
                                continue;
                            }
                            let dst = (iy as usize * self.in_w + ix as usize) * c;
                            let src = (ky * kw + kx) * c;
                            for ch in 0..c {
                                image[dst + ch] = image[dst + ch] + row[src + ch];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn hwc(input: &Tensor<impl Real>) -> Result<(usize, usize, usize)> {
    match input.shape()[..] {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::shape(format!(
            "expected an H×W×C image, got shape {:?}",
            input.shape()
        ))),
    }
}

/// Unrolls every receptive field of an `H×W×C` image into one row of a
/// `(H'·W') × (kh·kw·C)` matrix, with zero padding.
pub fn im2col<T: Real>(
    input: &Tensor<T>,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Tensor<T>> {
    let geom = ConvGeometry::new(hwc(input)?, kernel, stride, pad)?;
    let mut out = vec![T::zero(); geom.patches() * geom.patch_len()];
    geom.im2col_into(input.data(), 1, &mut out);
    Tensor::new(vec![geom.patches(), geom.patch_len()], out)
}

/// Folds a lowered `(H'·W') × (kh·kw·C)` gradient back onto an image.
pub fn col2im<T: Real>(cols: &Tensor<T>, geom: &ConvGeometry) -> Result<Tensor<T>> {
    if cols.shape() != [geom.patches(), geom.patch_len()] {
        return Err(Error::shape(format!(
            "col2im expects {:?}, got {:?}",
            [geom.patches(), geom.patch_len()],
            cols.shape()
        )));
    }
    let mut out = vec![T::zero(); geom.in_len()];
    geom.col2im_into(cols.data(), 1, &mut out);
    Tensor::new(vec![geom.in_h, geom.in_w, geom.channels], out)
}

/// Convolution of an `H×W×C` image with `kh×kw×C×F` filters, computed as
/// `im2col(input) · reshape(filters, (kh·kw·C)×F)`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    filters: &Tensor<T>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Tensor<T>> {
    let (kh, kw, c, f) = match filters.shape()[..] {
        [kh, kw, c, f] => (kh, kw, c, f),
        _ => {
            return Err(Error::shape(format!(
                "filters must be kh×kw×C×F, got {:?}",
                filters.shape()
            )))
        }
    };
    let (h, w, ci) = hwc(input)?;
    if ci != c {
        return Err(Error::shape(format!(
            "input has {ci} channels, filters expect {c}"
        )));
    }
    let geom = ConvGeometry::new((h, w, c), (kh, kw), stride, pad)?;
    let cols = im2col(input, (kh, kw), stride, pad)?;
    let mut out = vec![T::zero(); geom.patches() * f];
    gemm(
        Op::N,
        Op::N,
        geom.patches(),
        geom.patch_len(),
        f,
        T::one(),
        cols.data(),
        filters.data(),
        T::zero(),
        &mut out,
    );
    Tensor::new(vec![geom.out_h(), geom.out_w(), f], out)
}

/// Max-pooling window over HWC images (no padding).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub size: (usize, usize),
    pub stride: (usize, usize),
}

impl PoolGeometry {
    pub fn new(
        (in_h, in_w, channels): (usize, usize, usize),
        size: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Self> {
        if size.0 == 0 || size.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::param("pool size and stride must be positive"));
        }
        if size.0 > in_h || size.1 > in_w {
            return Err(Error::param(format!(
                "pool window {size:?} larger than input {in_h}x{in_w}"
            )));
        }
        Ok(Self {
            in_h,
            in_w,
            channels,
            size,
            stride,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.in_h - self.size.0) / self.stride.0 + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w - self.size.1) / self.stride.1 + 1
    }

    pub fn in_len(&self) -> usize {
        self.in_h * self.in_w * self.channels
    }

    pub fn out_len(&self) -> usize {
        self.out_h() * self.out_w() * self.channels
    }

    /// Pools `images` HWC images; returns the pooled values and, for each
    /// output, the flat input offset that won the max.
    pub fn forward<T: Real>(&self, input: &[T], images: usize) -> (Vec<T>, Vec<usize>) {
        assert_eq!(input.len(), images * self.in_len());
        let (oh, ow, c) = (self.out_h(), self.out_w(), self.channels);
        let mut out = Vec::with_capacity(images * self.out_len());
        let mut arg = Vec::with_capacity(images * self.out_len());
        for img in 0..images {
            let base = img * self.in_len();
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = T::neg_infinity();
                        let mut best_at = base;
                        for ky in 0..self.size.0 {
                            for kx in 0..self.size.1 {
                                let iy = oy * self.stride.0 + ky;
                                let ix = ox * self.stride.1 + kx;
                                let at = base + (iy * self.in_w + ix) * c + ch;
                                if input[at] > best {
                                    best = input[at];
                                    best_at = at;
                                }
                            }
                        }
                        out.push(best);
                        arg.push(best_at);
                    }
                }
            }
        }
        (out, arg)
    }
}

/// Max-pooling of an `H×W×C` image.
pub fn maxpool2d<T: Real>(
    input: &Tensor<T>,
    size: (usize, usize),
    stride: (usize, usize),
) -> Result<Tensor<T>> {
    let geom = PoolGeometry::new(hwc(input)?, size, stride)?;
    let (out, _) = geom.forward(input.data(), 1);
    Tensor::new(vec![geom.out_h(), geom.out_w(), geom.channels], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute-force nested-loop convolution; shares no code with im2col.
    fn direct_conv(
        input: &Tensor,
        filters: &Tensor,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Tensor {
        let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (kh, kw, f) = (filters.shape()[0], filters.shape()[1], filters.shape()[3]);
        let oh = (h + 2 * pad.0 - kh) / stride.0 + 1;
        let ow = (w + 2 * pad.1 - kw) / stride.1 + 1;
        let mut out = Tensor::zeros(vec![oh, ow, f]);
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..f {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride.0 + ky) as i64 - pad.0 as i64;
                            let ix = (ox * stride.1 + kx) as i64 - pad.1 as i64;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                continue;
                            }
                            for ch in 0..c {
                                acc += input.get(&[iy as usize, ix as usize, ch]).unwrap()
                                    * filters.get(&[ky, kx, ch, o]).unwrap();
                            }
                        }
                    }
                    let at = out.offset(&[oy, ox, o]).unwrap();
                    out.data_mut()[at] = acc;
                }
            }
        }
        out
    }

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn three_by_three_patches_by_hand() {
        let input = Tensor::new(vec![3, 3, 1], (1..=9).map(f64::from).collect()).unwrap();
        let cols = im2col(&input, (2, 2), (1, 1), (0, 0)).unwrap();
        assert_eq!(cols.shape(), &[4, 4]);
        assert_eq!(
            cols.data(),
            &[
                1.0, 2.0, 4.0, 5.0, //
                2.0, 3.0, 5.0, 6.0, //
                4.0, 5.0, 7.0, 8.0, //
                5.0, 6.0, 8.0, 9.0,
            ]
        );
    }

    #[test]
    fn kernel_covering_input_is_one_flat_row() {
        let input = Tensor::from_fn(vec![3, 4, 2], |i| i as f64);
        let cols = im2col(&input, (3, 4), (1, 1), (0, 0)).unwrap();
        assert_eq!(cols.shape(), &[1, 24]);
        assert_eq!(cols.data(), input.data());
    }

    #[test]
    fn bad_kernel_and_stride_rejected() {
        let input = Tensor::<f64>::zeros(vec![4, 4, 1]);
        assert!(matches!(
            im2col(&input, (0, 2), (1, 1), (0, 0)),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            im2col(&input, (2, 2), (0, 1), (0, 0)),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            im2col(&input, (7, 2), (1, 1), (1, 0)),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn unit_filter_is_identity() {
        let input = Tensor::from_fn(vec![4, 5, 1], |i| i as f64 * 0.5 - 3.0);
        let out = conv2d(&input, &Tensor::full(vec![1, 1, 1, 1], 1.0), (1, 1), (0, 0)).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn ones_filter_sums_window() {
        let input = Tensor::full(vec![4, 4, 1], 1.0);
        let out = conv2d(&input, &Tensor::full(vec![2, 2, 1, 1], 1.0), (1, 1), (0, 0)).unwrap();
        assert_eq!(out.shape(), &[3, 3, 1]);
        assert!(out.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let input = Tensor::<f64>::zeros(vec![4, 4, 2]);
        let filters = Tensor::<f64>::zeros(vec![3, 3, 1, 4]);
        assert!(matches!(
            conv2d(&input, &filters, (1, 1), (1, 1)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn random_five_by_five_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = random(vec![5, 5, 2], &mut rng);
        let filters = random(vec![3, 3, 2, 4], &mut rng);
        for (stride, pad) in [((1, 1), (0, 0)), ((1, 1), (1, 1)), ((2, 2), (1, 1))] {
            let fast = conv2d(&input, &filters, stride, pad).unwrap();
            let slow = direct_conv(&input, &filters, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for all x, y.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let geom = ConvGeometry::new((6, 5, 3), (3, 2), (2, 1), (1, 1)).unwrap();
        let x = random(vec![6, 5, 3], &mut rng);
        let y = random(vec![geom.patches(), geom.patch_len()], &mut rng);
        let lhs: f64 = im2col(&x, geom.kernel, geom.stride, geom.pad)
            .unwrap()
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(col2im(&y, &geom).unwrap().data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn maxpool_picks_window_max() {
        let input = Tensor::new(vec![2, 2, 1], vec![1.0, 5.0, -2.0, 3.0]).unwrap();
        let out = maxpool2d(&input, (2, 2), (2, 2)).unwrap();
        assert_eq!(out.data(), &[5.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn conv_matches_direct(
                h in 1usize..=8, w in 1usize..=8, c in 1usize..=3, f in 1usize..=4,
                kh in 1usize..=3, kw in 1usize..=3, sh in 1usize..=3, sw in 1usize..=3,
                ph in 0usize..=2, pw in 0usize..=2, seed in any::<u64>(),
            ) {
                prop_assume!(kh <= h + 2 * ph && kw <= w + 2 * pw);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let input = random(vec![h, w, c], &mut rng);
                let filters = random(vec![kh, kw, c, f], &mut rng);
                let fast = conv2d(&input, &filters, (sh, sw), (ph, pw)).unwrap();
                let slow = direct_conv(&input, &filters, (sh, sw), (ph, pw));
                prop_assert_eq!(fast.shape(), slow.shape());
                for (a, b) in fast.data().iter().zip(slow.data()) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
            }

            #[test]
            fn im2col_row_count(
                h in 1usize..=12, w in 1usize..=12, kh in 1usize..=4, kw in 1usize..=4,
                sh in 1usize..=4, sw in 1usize..=4, ph in 0usize..=2, pw in 0usize..=2,
            ) {
                prop_assume!(kh <= h + 2 * ph && kw <= w + 2 * pw);
                let input = Tensor::<f64>::zeros(vec![h, w, 2]);
                let cols = im2col(&input, (kh, kw), (sh, sw), (ph, pw)).unwrap();
                let oh = (h + 2 * ph - kh) / sh + 1;
                let ow = (w + 2 * pw - kw) / sw + 1;
                prop_assert_eq!(cols.shape(), &[oh * ow, kh * kw * 2][..]);
            }
        }
    }
}
