//! Convolution kernels via im2col + GEMM.

use super::{Element, MatView, Tensor};
use crate::error::{Error, Result};

/// Zero-padding margins, applied identically to both spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Padding {
    pub begin: usize,
    pub end: usize,
}

impl Padding {
    pub const NONE: Padding = Padding { begin: 0, end: 0 };

    pub fn new(begin: usize, end: usize) -> Self {
        Padding { begin, end }
    }

    pub fn symmetric(pad: usize) -> Self {
        Padding {
            begin: pad,
            end: pad,
        }
    }

    /// Margins that make a stride-`stride` layer scale extents by exactly `stride`.
    pub fn same_scale(kernel: usize, stride: usize) -> Self {
        let total = kernel.saturating_sub(stride);
        Padding {
            begin: total.div_ceil(2),
            end: total / 2,
        }
    }

    pub fn total(&self) -> usize {
        self.begin + self.end
    }
}

/// Geometry of a cross-correlation from a "large" c×h×w image to an
/// out_h×out_w grid. Transposed convolutions reuse it with the roles swapped.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: Padding,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn conv(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: Padding,
    ) -> Result<Self> {
        let padded_h = height + pad.total();
        let padded_w = width + pad.total();
        if padded_h < kernel || padded_w < kernel {
            return Err(Error::rejected(format!(
                "kernel {kernel} larger than padded input {padded_h}x{padded_w}"
            )));
        }
        Ok(Geometry {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (padded_h - kernel) / stride + 1,
            out_w: (padded_w - kernel) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Source index along one axis for output position `o` and kernel tap `t`.
    #[inline]
    fn source(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + t).checked_sub(self.pad.begin)?;
        (pos < extent).then_some(pos)
    }

    fn im2col<T: Element>(&self, src: &[T], cols: &mut [T]) {
        let k = self.kernel;
        let plane = self.height * self.width;
        let ncols = self.col_cols();
        for c in 0..self.channels {
            let src_c = &src[c * plane..(c + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * ncols;
                    let dst = &mut cols[row..row + ncols];
                    for oy in 0..self.out_h {
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        match self.source(oy, ky, self.height) {
                            None => line.fill(T::zero()),
                            Some(iy) => {
                                let src_row = &src_c[iy * self.width..(iy + 1) * self.width];
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match self.source(ox, kx, self.width) {
                                        Some(ix) => src_row[ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add columns back onto the image (adjoint of `im2col`).
    fn col2im<T: Element>(&self, cols: &[T], dst: &mut [T]) {
        let k = self.kernel;
        let plane = self.height * self.width;
        let ncols = self.col_cols();
        for c in 0..self.channels {
            let dst_c = &mut dst[c * plane..(c + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * ncols;
                    let src = &cols[row..row + ncols];
                    for oy in 0..self.out_h {
                        let Some(iy) = self.source(oy, ky, self.height) else {
                            continue;
                        };
                        let line = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        let dst_row = &mut dst_c[iy * self.width..(iy + 1) * self.width];
                        for (ox, &v) in line.iter().enumerate() {
                            if let Some(ix) = self.source(ox, kx, self.width) {
                                dst_row[ix] = dst_row[ix] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn kernel_dims<T: Element>(kernel: &Tensor<T>, op: &'static str) -> Result<[usize; 4]> {
    let dims = kernel.dims4().map_err(|_| {
        Error::rejected(format!("{op}: kernel must be 4-D, got {:?}", kernel.shape()))
    })?;
    if dims[2] != dims[3] || dims[2] == 0 {
        return Err(Error::rejected(format!(
            "{op}: kernel must be square and non-empty, got {:?}",
            kernel.shape()
        )));
    }
    Ok(dims)
}

fn check_stride(stride: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::rejected("stride must be positive"));
    }
    Ok(())
}

fn channel_mismatch<T: Element>(op: &'static str, input: &Tensor<T>, kernel: &Tensor<T>) -> Error {
    Error::ShapeMismatch {
        op,
        left: input.shape().to_vec(),
        right: kernel.shape().to_vec(),
    }
}

/// Geometry of conv2d(input, kernel) together with output extents.
fn conv_plan<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: Padding,
) -> Result<(Geometry, [usize; 4])> {
    check_stride(stride)?;
    let [n, c, h, w] = input.dims4()?;
    let [cout, cin, k, _] = kernel_dims(kernel, "conv2d")?;
    if cin != c {
        return Err(channel_mismatch("conv2d", input, kernel));
    }
    let g = Geometry::conv(c, h, w, k, stride, pad)?;
    Ok((g, [n, cout, g.out_h, g.out_w]))
}

/// Geometry of conv_transpose2d(input, kernel): the conv from output to input.
fn transpose_plan<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: Padding,
) -> Result<(Geometry, [usize; 4])> {
    check_stride(stride)?;
    let [n, c, h, w] = input.dims4()?;
    let [cin, cout, k, _] = kernel_dims(kernel, "conv_transpose2d")?;
    if cin != c {
        return Err(channel_mismatch("conv_transpose2d", input, kernel));
    }
    let out = |extent: usize| -> Result<usize> {
        (stride * (extent.max(1) - 1) + k)
            .checked_sub(pad.total())
            .filter(|&o| o > 0 && extent > 0)
            .ok_or_else(|| {
                Error::rejected(format!(
                    "conv_transpose2d: padding {pad:?} consumes the whole output"
                ))
            })
    };
    let (oh, ow) = (out(h)?, out(w)?);
    let g = Geometry::conv(cout, oh, ow, k, stride, pad)?;
    debug_assert_eq!((g.out_h, g.out_w), (h, w));
    Ok((g, [n, cout, oh, ow]))
}

pub(crate) fn conv2d_raw<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: Padding,
) -> Result<Tensor<T>> {
    let (g, out_shape) = conv_plan(input, kernel, stride, pad)?;
    let [n, cout, _, _] = out_shape;
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut out = Tensor::zeros(out_shape.to_vec());
    let mut cols = vec![T::zero(); rows * ncols];
    let w = MatView::row_major(kernel.data(), cout, rows);
    for b in 0..n {
        let src = &input.data()[b * g.image_len()..(b + 1) * g.image_len()];
        g.im2col(src, &mut cols);
        let dst = &mut out.data_mut()[b * cout * ncols..(b + 1) * cout * ncols];
        T::gemm(w, MatView::row_major(&cols, rows, ncols), T::zero(), dst);
    }
    Ok(out)
}

pub(crate) fn conv2d_grad_input<T: Element>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: Padding,
) -> Result<Tensor<T>> {
    let (g, [n, cout, _, _]) = conv_plan(input, kernel, stride, pad)?;
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut dx = Tensor::zeros(input.shape().to_vec());
    let mut cols = vec![T::zero(); rows * ncols];
    let wt = MatView::row_major(kernel.data(), cout, rows).t();
    for b in 0..n {
        let go = &grad_out.data()[b * cout * ncols..(b + 1) * cout * ncols];
        T::gemm(wt, MatView::row_major(go, cout, ncols), T::zero(), &mut cols);
        let dst = &mut dx.data_mut()[b * g.image_len()..(b + 1) * g.image_len()];
        g.col2im(&cols, dst);
    }
    Ok(dx)
}

pub(crate) fn conv2d_grad_kernel<T: Element>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: Padding,
) -> Result<Tensor<T>> {
    let (g, [n, cout, _, _]) = conv_plan(input, kernel, stride, pad)?;
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut dw = Tensor::zeros(kernel.shape().to_vec());
    let mut cols = vec![T::zero(); rows * ncols];
    for b in 0..n {
        let src = &input.data()[b * g.image_len()..(b + 1) * g.image_len()];
        g.im2col(src, &mut cols);
        let go = &grad_out.data()[b * cout * ncols..(b + 1) * cout * ncols];
        T::gemm(
            MatView::row_major(go, cout, ncols),
            MatView::row_major(&cols, rows, ncols).t(),
            T::one(),
            dw.data_mut(),
        );
    }
    Ok(dw)
}

pub(crate) fn conv_transpose2d_raw<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: Padding,
) -> Result<Tensor<T>> {
    let (g, out_shape) = transpose_plan(input, kernel, stride, pad)?;
    let [n, _, _, _] = out_shape;
    let cin = input.shape()[1];
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut out = Tensor::zeros(out_shape.to_vec());
    let mut cols = vec![T::zero(); rows * ncols];
    let wt = MatView::row_major(kernel.data(), cin, rows).t();
    for b in 0..n {
        let src = &input.data()[b * cin * ncols..(b + 1) * cin * ncols];
        T::gemm(wt, MatView::row_major(src, cin, ncols), T::zero(), &mut cols);
        let dst = &mut out.data_mut()[b * g.image_len()..(b + 1) * g.image_len()];
        g.col2im(&cols, dst);
    }
    Ok(out)
}

pub(crate) fn conv_transpose2d_grad_input<T: Element>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: Padding,
) -> Result<Tensor<T>> {
    let (g, [n, _, _, _]) = transpose_plan(input, kernel, stride, pad)?;
    let cin = input.shape()[1];
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut dx = Tensor::zeros(input.shape().to_vec());
    let mut cols = vec![T::zero(); rows * ncols];
    let w = MatView::row_major(kernel.data(), cin, rows);
    for b in 0..n {
        let go = &grad_out.data()[b * g.image_len()..(b + 1) * g.image_len()];
        g.im2col(go, &mut cols);
        let dst = &mut dx.data_mut()[b * cin * ncols..(b + 1) * cin * ncols];
        T::gemm(w, MatView::row_major(&cols, rows, ncols), T::zero(), dst);
    }
    Ok(dx)
}

pub(crate) fn conv_transpose2d_grad_kernel<T: Element>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: Padding,
) -> Result<Tensor<T>> {
    let (g, [n, _, _, _]) = transpose_plan(input, kernel, stride, pad)?;
    let cin = input.shape()[1];
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut dw = Tensor::zeros(kernel.shape().to_vec());
    let mut cols = vec![T::zero(); rows * ncols];
    for b in 0..n {
        let go = &grad_out.data()[b * g.image_len()..(b + 1) * g.image_len()];
        g.im2col(go, &mut cols);
        let src = &input.data()[b * cin * ncols..(b + 1) * cin * ncols];
        T::gemm(
            MatView::row_major(src, cin, ncols),
            MatView::row_major(&cols, rows, ncols).t(),
            T::one(),
            dw.data_mut(),
        );
    }
    Ok(dw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    /// Six nested loops straight from the definition of cross-correlation.
    fn conv_reference(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: Padding) -> Tensor<f64> {
        let [n, cin, h, wd] = x.dims4().unwrap();
        let [cout, _, k, _] = w.dims4().unwrap();
        let oh = (h + pad.total() - k) / stride + 1;
        let ow = (wd + pad.total() - k) / stride + 1;
        let mut out = Tensor::zeros(vec![n, cout, oh, ow]);
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad.begin as isize;
                                    let ix = (ox * stride + kx) as isize - pad.begin as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xi = ((b * cin + ci) * h + iy as usize) * wd + ix as usize;
                                    let wi = ((co * cin + ci) * k + ky) * k + kx;
                                    acc += x.data()[xi] * w.data()[wi];
                                }
                            }
                        }
                        out.data_mut()[((b * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    /// Transposed convolution as zero insertion followed by a stride-1
    /// correlation with the spatially flipped, channel-swapped kernel.
    fn conv_transpose_reference(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        stride: usize,
        pad: Padding,
    ) -> Tensor<f64> {
        let [n, cin, h, wd] = x.dims4().unwrap();
        let [_, cout, k, _] = w.dims4().unwrap();
        let (zh, zw) = (stride * (h - 1) + 1, stride * (wd - 1) + 1);
        let mut z = Tensor::zeros(vec![n, cin, zh, zw]);
        for b in 0..n {
            for c in 0..cin {
                for y in 0..h {
                    for xx in 0..wd {
                        z.data_mut()[((b * cin + c) * zh + y * stride) * zw + xx * stride] =
                            x.data()[((b * cin + c) * h + y) * wd + xx];
                    }
                }
            }
        }
        let mut flipped = Tensor::zeros(vec![cout, cin, k, k]);
        for ci in 0..cin {
            for co in 0..cout {
                for ky in 0..k {
                    for kx in 0..k {
                        flipped.data_mut()[((co * cin + ci) * k + ky) * k + kx] =
                            w.data()[((ci * cout + co) * k + (k - 1 - ky)) * k + (k - 1 - kx)];
                    }
                }
            }
        }
        conv_reference(&z, &flipped, 1, Padding::new(k - 1 - pad.begin, k - 1 - pad.end))
    }

    fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
        }
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 1, 5, 4], &mut rng);
        let w = Tensor::full(vec![1, 1, 1, 1], 1.0);
        assert_eq!(conv2d_raw(&x, &w, 1, Padding::NONE).unwrap(), x);
        assert_eq!(conv_transpose2d_raw(&x, &w, 1, Padding::NONE).unwrap(), x);
    }

    #[test]
    fn all_ones_kernel_sums() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::full(vec![1, 1, 2, 2], 1.0);
        let y = conv2d_raw(&x, &w, 2, Padding::NONE).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 10.0);
    }

    #[test]
    fn stride_two_unit_transpose_inserts_zeros() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::full(vec![1, 1, 1, 1], 1.0);
        let y = conv_transpose2d_raw(&x, &w, 2, Padding::NONE).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(
            y.data(),
            &[1.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0, 0.0, 4.0]
        );
    }

    #[test]
    fn conv_matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[1, 3, 8, 8], &mut rng);
        let w = random(&[4, 3, 5, 5], &mut rng);
        let got = conv2d_raw(&x, &w, 2, Padding::symmetric(2)).unwrap();
        let want = conv_reference(&x, &w, 2, Padding::symmetric(2));
        assert_eq!(got.shape(), &[1, 4, 4, 4]);
        assert_close(&got, &want, 1e-6);
    }

    #[test]
    fn conv_matches_reference_asymmetric_padding_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&[2, 3, 9, 7], &mut rng);
        let w = random(&[5, 3, 3, 3], &mut rng);
        let got = conv2d_raw(&x.cast::<f32>(), &w.cast::<f32>(), 2, Padding::new(1, 0)).unwrap();
        let want = conv_reference(&x, &w, 2, Padding::new(1, 0));
        assert_close(&got.cast(), &want, 1e-5);
    }

    #[test]
    fn transpose_matches_zero_insertion_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (stride, pad) in [(2, Padding::new(2, 1)), (1, Padding::symmetric(1)), (2, Padding::NONE)] {
            let x = random(&[2, 4, 5, 6], &mut rng);
            let w = random(&[4, 3, 5, 5], &mut rng);
            let got = conv_transpose2d_raw(&x, &w, stride, pad).unwrap();
            let want = conv_transpose_reference(&x, &w, stride, pad);
            assert_close(&got, &want, 1e-6);
        }
    }

    #[test]
    fn same_scale_padding_scales_exactly() {
        let pad = Padding::same_scale(5, 2);
        assert_eq!(pad, Padding::new(2, 1));
        let x = Tensor::<f64>::zeros(vec![1, 1, 16, 8]);
        let w = Tensor::<f64>::zeros(vec![1, 1, 5, 5]);
        let down = conv2d_raw(&x, &w, 2, pad).unwrap();
        assert_eq!(down.shape(), &[1, 1, 8, 4]);
        let up = conv_transpose2d_raw(&down, &w, 2, pad).unwrap();
        assert_eq!(up.shape(), &[1, 1, 16, 8]);
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let x = Tensor::<f32>::zeros(vec![1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros(vec![1, 3, 3, 3]);
        match conv2d_raw(&x, &w, 1, Padding::NONE) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![1, 2, 4, 4]);
                assert_eq!(right, vec![1, 3, 3, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(conv_transpose2d_raw(&x, &w, 1, Padding::NONE).is_err());
        assert!(conv2d_raw(&x, &Tensor::zeros(vec![1, 2, 3, 3]), 0, Padding::NONE).is_err());
    }
}
