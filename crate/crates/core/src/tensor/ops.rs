//! Forward kernels and their backward counterparts.
//!
//! These are plain tensor-in/tensor-out functions with no tape involvement;
//! [`super::Tape`](crate::tensor::Tape) calls them when recording and again
//! (via the saved state) when differentiating, and the model's inference path
//! calls them directly. Keeping one implementation per op is what makes
//! traced and untraced forward passes bit-identical.
//!
//! Convolution is im2col followed by a gemm, the standard reduction of
//! cross-correlation to matrix multiplication.

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

/// `C = alpha * A·B + beta * C` over row-major slices, with either operand
/// optionally transposed in place via strides.
pub(crate) fn gemm_into<T: Elem>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    T::gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

/// Static geometry of one conv2d application.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv2dDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2dDims {
    /// Rows of the im2col matrix: one per kernel tap.
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Columns of the im2col matrix: one per output pixel.
    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Validates conv2d operand shapes and computes the output extents
/// `out = floor((in + 2*padding - kernel) / stride) + 1`.
pub(crate) fn conv2d_dims(
    input: &[usize],
    kernel: &[usize],
    bias: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Conv2dDims> {
    let err = |detail: String| Err(Error::shape("conv2d", detail));
    let [n, c, h, w] = *input else {
        return err(format!("input must be rank 4 [N,C,H,W], got {input:?}"));
    };
    let [f, kc, kh, kw] = *kernel else {
        return err(format!("kernel must be rank 4 [F,C,kH,kW], got {kernel:?}"));
    };
    if bias.len() != 1 {
        return err(format!("bias must be rank 1 [F], got {bias:?}"));
    }
    if kc != c {
        return err(format!("kernel expects {kc} input channels, input has {c}"));
    }
    if bias[0] != f {
        return err(format!("bias has {} entries for {f} filters", bias[0]));
    }
    if stride == 0 {
        return err("stride must be positive".into());
    }
    if kh > h + 2 * padding {
        return err(format!(
            "kernel height {kh} exceeds padded input height {}",
            h + 2 * padding
        ));
    }
    if kw > w + 2 * padding {
        return err(format!(
            "kernel width {kw} exceeds padded input width {}",
            w + 2 * padding
        ));
    }
    Ok(Conv2dDims {
        n,
        c,
        h,
        w,
        f,
        kh,
        kw,
        stride,
        padding,
        out_h: (h + 2 * padding - kh) / stride + 1,
        out_w: (w + 2 * padding - kw) / stride + 1,
    })
}

/// Unfolds one batch element into `cols` (kernel taps × output pixels).
/// `cols` must be zeroed; taps that fall into the zero padding stay zero.
fn im2col<T: Elem>(input: &[T], d: &Conv2dDims, n: usize, cols: &mut [T]) {
    let ohw = d.col_cols();
    let in_base = n * d.c * d.h * d.w;
    for c in 0..d.c {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row_base = ((c * d.kh + ki) * d.kw + kj) * ohw;
                for oh in 0..d.out_h {
                    let ih = (oh * d.stride + ki) as isize - d.padding as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    let in_row = in_base + (c * d.h + ih as usize) * d.w;
                    for ow in 0..d.out_w {
                        let iw = (ow * d.stride + kj) as isize - d.padding as isize;
                        if iw < 0 || iw >= d.w as isize {
                            continue;
                        }
                        cols[row_base + oh * d.out_w + ow] = input[in_row + iw as usize];
                    }
                }
            }
        }
    }
}

/// Scatter-adds one batch element's column gradients back to input layout;
/// the transpose of [`im2col`].
fn col2im_add<T: Elem>(dcols: &[T], d: &Conv2dDims, n: usize, dinput: &mut [T]) {
    let ohw = d.col_cols();
    let in_base = n * d.c * d.h * d.w;
    for c in 0..d.c {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row_base = ((c * d.kh + ki) * d.kw + kj) * ohw;
                for oh in 0..d.out_h {
                    let ih = (oh * d.stride + ki) as isize - d.padding as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    let in_row = in_base + (c * d.h + ih as usize) * d.w;
                    for ow in 0..d.out_w {
                        let iw = (ow * d.stride + kj) as isize - d.padding as isize;
                        if iw < 0 || iw >= d.w as isize {
                            continue;
                        }
                        dinput[in_row + iw as usize] += dcols[row_base + oh * d.out_w + ow];
                    }
                }
            }
        }
    }
}

/// Cross-correlation (no kernel flip) with zero padding. Returns the output,
/// the im2col buffer (reused by the backward pass), and the geometry.
pub(crate) fn conv2d_forward<T: Elem>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>, Conv2dDims)> {
    let d = conv2d_dims(input.shape(), kernel.shape(), bias.shape(), stride, padding)?;
    let (ckk, ohw) = (d.col_rows(), d.col_cols());
    let mut cols = vec![T::zero(); d.n * ckk * ohw];
    let mut out = vec![T::zero(); d.n * d.f * ohw];
    for n in 0..d.n {
        let col_n = &mut cols[n * ckk * ohw..(n + 1) * ckk * ohw];
        im2col(input.data(), &d, n, col_n);
        let out_n = &mut out[n * d.f * ohw..(n + 1) * d.f * ohw];
        gemm_into(d.f, ckk, ohw, T::one(), kernel.data(), false, col_n, false, T::zero(), out_n);
        for f in 0..d.f {
            let bv = bias.data()[f];
            for v in &mut out_n[f * ohw..(f + 1) * ohw] {
                *v += bv;
            }
        }
    }
    Ok((
        Tensor::new(vec![d.n, d.f, d.out_h, d.out_w], out)?,
        Tensor::new(vec![d.n, ckk, ohw], cols)?,
        d,
    ))
}

pub(crate) struct Conv2dGrads<T> {
    pub dinput: Option<Tensor<T>>,
    pub dkernel: Option<Tensor<T>>,
    pub dbias: Option<Tensor<T>>,
}

/// Backward pass of [`conv2d_forward`]; each gradient is computed only when
/// the corresponding operand participates in differentiation.
pub(crate) fn conv2d_backward<T: Elem>(
    dout: &Tensor<T>,
    cols: &Tensor<T>,
    kernel: &Tensor<T>,
    d: &Conv2dDims,
    need_dinput: bool,
    need_dkernel: bool,
    need_dbias: bool,
) -> Conv2dGrads<T> {
    let (ckk, ohw) = (d.col_rows(), d.col_cols());
    let mut dkernel = need_dkernel.then(|| vec![T::zero(); d.f * ckk]);
    let mut dbias = need_dbias.then(|| vec![T::zero(); d.f]);
    let mut dinput = need_dinput.then(|| vec![T::zero(); d.n * d.c * d.h * d.w]);
    let mut dcols = vec![T::zero(); if need_dinput { ckk * ohw } else { 0 }];
    for n in 0..d.n {
        let dout_n = &dout.data()[n * d.f * ohw..(n + 1) * d.f * ohw];
        let cols_n = &cols.data()[n * ckk * ohw..(n + 1) * ckk * ohw];
        if let Some(dk) = dkernel.as_mut() {
            // dK(F×ckk) += dOut(F×ohw) · colsᵀ(ohw×ckk), accumulated over the batch.
            gemm_into(d.f, ohw, ckk, T::one(), dout_n, false, cols_n, true, T::one(), dk);
        }
        if let Some(db) = dbias.as_mut() {
            for f in 0..d.f {
                for &g in &dout_n[f * ohw..(f + 1) * ohw] {
                    db[f] += g;
                }
            }
        }
        if let Some(di) = dinput.as_mut() {
            // dCols(ckk×ohw) = Kᵀ(ckk×F) · dOut(F×ohw), then fold back to pixels.
            gemm_into(ckk, d.f, ohw, T::one(), kernel.data(), true, dout_n, false, T::zero(), &mut dcols);
            col2im_add(&dcols, d, n, di);
        }
    }
    Conv2dGrads {
        dinput: dinput
            .map(|v| Tensor::new(vec![d.n, d.c, d.h, d.w], v).expect("conv dinput shape")),
        dkernel: dkernel
            .map(|v| Tensor::new(vec![d.f, d.c, d.kh, d.kw], v).expect("conv dkernel shape")),
        dbias: dbias.map(|v| Tensor::new(vec![d.f], v).expect("conv dbias shape")),
    }
}

/// Elementwise `max(0, v)`.
pub(crate) fn relu_forward<T: Elem>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Per-window maximum plus, for backward, the flat input index of each
/// window's maximum. Ties keep the first maximum in row-major scan order.
pub(crate) fn max_pool2d_forward<T: Elem>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<u32>)> {
    let err = |detail: String| Err(Error::shape("max_pool2d", detail));
    let [n, c, h, w] = *input.shape() else {
        return err(format!("input must be rank 4 [N,C,H,W], got {:?}", input.shape()));
    };
    if window == 0 || stride == 0 {
        return err("window and stride must be positive".into());
    }
    if window > h {
        return err(format!("window {window} larger than input height {h}"));
    }
    if window > w {
        return err(format!("window {window} larger than input width {w}"));
    }
    assert!(input.len() <= u32::MAX as usize, "pool argmax index overflow");
    let out_h = (h - window) / stride + 1;
    let out_w = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    let mut argmax = Vec::with_capacity(out.capacity());
    let data = input.data();
    for ni in 0..n {
        for ci in 0..c {
            let plane = (ni * c + ci) * h * w;
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let mut best_idx = plane + oh * stride * w + ow * stride;
                    let mut best = data[best_idx];
                    for ki in 0..window {
                        let row = plane + (oh * stride + ki) * w + ow * stride;
                        for kj in 0..window {
                            let v = data[row + kj];
                            if v > best {
                                best = v;
                                best_idx = row + kj;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx as u32);
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, c, out_h, out_w], out)?, argmax))
}

/// Scatters output gradients to each window's recorded maximum.
pub(crate) fn max_pool2d_backward<T: Elem>(
    dout: &Tensor<T>,
    argmax: &[u32],
    input_shape: &[usize],
) -> Tensor<T> {
    let mut dinput = Tensor::zeros(input_shape.to_vec());
    let di = dinput.data_mut();
    for (&idx, &g) in argmax.iter().zip(dout.data()) {
        di[idx as usize] += g;
    }
    dinput
}

/// Mean over the spatial dimensions: `[N,C,H,W] -> [N,C]`.
pub(crate) fn global_avg_pool_forward<T: Elem>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = *input.shape() else {
        return Err(Error::shape(
            "global_avg_pool",
            format!("input must be rank 4 [N,C,H,W], got {:?}", input.shape()),
        ));
    };
    let inv = T::one() / T::from_f64((h * w) as f64);
    let data = input.data();
    let mut out = Vec::with_capacity(n * c);
    for plane in 0..n * c {
        let mut acc = T::zero();
        for &v in &data[plane * h * w..(plane + 1) * h * w] {
            acc += v;
        }
        out.push(acc * inv);
    }
    Ok(Tensor::new(vec![n, c], out)?)
}

/// Spreads each channel's gradient uniformly over its spatial plane.
pub(crate) fn global_avg_pool_backward<T: Elem>(
    dout: &Tensor<T>,
    input_shape: &[usize],
) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let inv = T::one() / T::from_f64((h * w) as f64);
    let mut dinput = Tensor::zeros(input_shape.to_vec());
    let di = dinput.data_mut();
    for (plane, &g) in dout.data().iter().enumerate() {
        let gv = g * inv;
        for v in &mut di[plane * h * w..(plane + 1) * h * w] {
            *v = gv;
        }
    }
    dinput
}

/// Affine map `input·weights + bias` for rank-2 input.
pub(crate) fn dense_forward<T: Elem>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let err = |detail: String| Err(Error::shape("dense", detail));
    let [n, din] = *input.shape() else {
        return err(format!("input must be rank 2 [N,D], got {:?}", input.shape()));
    };
    let [dw, k] = *weights.shape() else {
        return err(format!("weights must be rank 2 [D,K], got {:?}", weights.shape()));
    };
    if din != dw {
        return err(format!("input features {din} do not match weight rows {dw}"));
    }
    if bias.shape() != [k] {
        return err(format!("bias shape {:?} does not match {k} outputs", bias.shape()));
    }
    let mut out = vec![T::zero(); n * k];
    gemm_into(n, din, k, T::one(), input.data(), false, weights.data(), false, T::zero(), &mut out);
    for row in out.chunks_mut(k) {
        for (v, &bv) in row.iter_mut().zip(bias.data()) {
            *v += bv;
        }
    }
    Ok(Tensor::new(vec![n, k], out)?)
}

pub(crate) struct DenseGrads<T> {
    pub dinput: Option<Tensor<T>>,
    pub dweights: Option<Tensor<T>>,
    pub dbias: Option<Tensor<T>>,
}

/// Backward pass of [`dense_forward`].
pub(crate) fn dense_backward<T: Elem>(
    dout: &Tensor<T>,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    need_dinput: bool,
    need_dweights: bool,
    need_dbias: bool,
) -> DenseGrads<T> {
    let (n, din) = (input.shape()[0], input.shape()[1]);
    let k = weights.shape()[1];
    let dinput = need_dinput.then(|| {
        let mut v = vec![T::zero(); n * din];
        // dX(N×D) = dY(N×K) · Wᵀ(K×D)
        gemm_into(n, k, din, T::one(), dout.data(), false, weights.data(), true, T::zero(), &mut v);
        Tensor::new(vec![n, din], v).expect("dense dinput shape")
    });
    let dweights = need_dweights.then(|| {
        let mut v = vec![T::zero(); din * k];
        // dW(D×K) = Xᵀ(D×N) · dY(N×K)
        gemm_into(din, n, k, T::one(), input.data(), true, dout.data(), false, T::zero(), &mut v);
        Tensor::new(vec![din, k], v).expect("dense dweights shape")
    });
    let dbias = need_dbias.then(|| {
        let mut v = vec![T::zero(); k];
        for row in dout.data().chunks(k) {
            for (acc, &g) in v.iter_mut().zip(row) {
                *acc += g;
            }
        }
        Tensor::new(vec![k], v).expect("dense dbias shape")
    });
    DenseGrads {
        dinput,
        dweights,
        dbias,
    }
}

/// Row-wise softmax with max-subtraction for overflow safety.
pub(crate) fn softmax_rows<T: Elem>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, k] = *logits.shape() else {
        return Err(Error::shape(
            "softmax",
            format!("logits must be rank 2 [N,K], got {:?}", logits.shape()),
        ));
    };
    let mut out = Vec::with_capacity(n * k);
    for row in logits.data().chunks(k) {
        let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let sum = exps.iter().fold(T::zero(), |a, &v| a + v);
        out.extend(exps.iter().map(|&e| e / sum));
    }
    Ok(Tensor::new(vec![n, k], out)?)
}

/// Mean negative log-likelihood of `labels` under row-wise softmax. Returns
/// the scalar loss and the softmax matrix saved for backward.
pub(crate) fn softmax_cross_entropy_forward<T: Elem>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(Tensor<T>, Tensor<T>)> {
    let err = |detail: String| Err(Error::shape("softmax_cross_entropy", detail));
    let [n, k] = *logits.shape() else {
        return err(format!("logits must be rank 2 [N,K], got {:?}", logits.shape()));
    };
    if labels.len() != n {
        return err(format!("{} labels for {n} logit rows", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return err(format!("label {bad} out of range for {k} classes"));
    }
    let softmax = softmax_rows(logits)?;
    let mut total = T::zero();
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let sum = row.iter().fold(T::zero(), |a, &v| a + (v - m).exp());
        // -log softmax[label] written in its numerically stable form.
        total += m + sum.ln() - row[label];
    }
    let loss = total / T::from_f64(n as f64);
    Ok((Tensor::scalar(loss), softmax))
}

/// `(softmax - one_hot) / N`, scaled by the upstream scalar gradient.
pub(crate) fn softmax_cross_entropy_backward<T: Elem>(
    softmax: &Tensor<T>,
    labels: &[usize],
    upstream: T,
) -> Tensor<T> {
    let (n, k) = (softmax.shape()[0], softmax.shape()[1]);
    let scale = upstream / T::from_f64(n as f64);
    let mut grad = softmax.clone();
    for (i, row) in grad.data_mut().chunks_mut(k).enumerate() {
        row[labels[i]] -= T::one();
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_gradient;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f32, hi: f32) -> Tensor<f32> {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Direct six-nested-loop cross-correlation in f64, the conv oracle.
    fn conv2d_reference(
        input: &Tensor<f32>,
        kernel: &Tensor<f32>,
        bias: &Tensor<f32>,
        stride: usize,
        padding: usize,
    ) -> Vec<f64> {
        let d = conv2d_dims(input.shape(), kernel.shape(), bias.shape(), stride, padding).unwrap();
        let mut out = vec![0.0f64; d.n * d.f * d.out_h * d.out_w];
        let mut pos = 0;
        for n in 0..d.n {
            for f in 0..d.f {
                for oh in 0..d.out_h {
                    for ow in 0..d.out_w {
                        let mut acc = bias.data()[f] as f64;
                        for c in 0..d.c {
                            for ki in 0..d.kh {
                                for kj in 0..d.kw {
                                    let ih = (oh * d.stride + ki) as isize - d.padding as isize;
                                    let iw = (ow * d.stride + kj) as isize - d.padding as isize;
                                    if ih < 0 || ih >= d.h as isize || iw < 0 || iw >= d.w as isize
                                    {
                                        continue;
                                    }
                                    let x = input.data()
                                        [((n * d.c + c) * d.h + ih as usize) * d.w + iw as usize];
                                    let k = kernel.data()
                                        [((f * d.c + c) * d.kh + ki) * d.kw + kj];
                                    acc += x as f64 * k as f64;
                                }
                            }
                        }
                        out[pos] = acc;
                        pos += 1;
                    }
                }
            }
        }
        out
    }

    /// Relative comparison against the oracle's overall scale, so entries
    /// that nearly cancel don't inflate the ratio.
    fn assert_close_rel(actual: &[f32], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        let scale = expected.iter().fold(1e-12f64, |m, &e| m.max(e.abs()));
        for (&a, &e) in actual.iter().zip(expected) {
            let denom = (a as f64).abs().max(e.abs()).max(scale);
            assert!(
                ((a as f64) - e).abs() / denom <= tol,
                "got {a}, expected {e}"
            );
        }
    }

    #[test]
    fn conv2d_all_ones_sums_window() {
        let input = Tensor::full(vec![1, 1, 3, 3], 1.0f32);
        let kernel = Tensor::full(vec![1, 1, 2, 2], 1.0f32);
        let bias = Tensor::zeros(vec![1]);
        let (out, _, _) = conv2d_forward(&input, &kernel, &bias, 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[4.0; 4]);
    }

    #[test]
    fn conv2d_zero_kernel_yields_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = rand_tensor(&mut rng, vec![2, 3, 5, 5], 0.0, 1.0);
        let kernel = Tensor::zeros(vec![4, 3, 3, 3]);
        let bias = Tensor::new(vec![4], vec![0.5f32, -1.0, 2.0, 0.0]).unwrap();
        let (out, _, _) = conv2d_forward(&input, &kernel, &bias, 1, 1).unwrap();
        for n in 0..2 {
            for f in 0..4 {
                let plane = &out.data()[(n * 4 + f) * 25..(n * 4 + f + 1) * 25];
                assert!(plane.iter().all(|&v| v == bias.data()[f]));
            }
        }
    }

    #[test]
    fn conv2d_matches_nested_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = rand_tensor(&mut rng, vec![1, 2, 5, 5], 0.0, 1.0);
        let kernel = rand_tensor(&mut rng, vec![3, 2, 3, 3], -1.0, 1.0);
        let bias = rand_tensor(&mut rng, vec![3], -0.5, 0.5);
        for (stride, padding) in [(1, 0), (1, 1), (2, 1)] {
            let (out, _, _) = conv2d_forward(&input, &kernel, &bias, stride, padding).unwrap();
            let expected = conv2d_reference(&input, &kernel, &bias, stride, padding);
            assert_close_rel(out.data(), &expected, 1e-6);
        }
    }

    #[test]
    fn conv2d_rejects_bad_shapes() {
        let input = Tensor::<f32>::zeros(vec![1, 2, 4, 4]);
        let kernel = Tensor::<f32>::zeros(vec![3, 3, 3, 3]);
        let bias = Tensor::<f32>::zeros(vec![3]);
        let e = conv2d_forward(&input, &kernel, &bias, 1, 0).unwrap_err();
        assert!(e.to_string().contains("channels"), "{e}");

        let kernel = Tensor::<f32>::zeros(vec![3, 2, 5, 3]);
        let e = conv2d_forward(&input, &kernel, &bias, 1, 0).unwrap_err();
        assert!(e.to_string().contains("height"), "{e}");

        let kernel = Tensor::<f32>::zeros(vec![3, 2, 3, 3]);
        let e = conv2d_forward(&input, &kernel, &bias, 0, 0).unwrap_err();
        assert!(e.to_string().contains("stride"), "{e}");
    }

    #[test]
    fn conv2d_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let input = rand_tensor(&mut rng, vec![1, 2, 4, 4], 0.0, 1.0).cast::<f64>();
        let kernel = rand_tensor(&mut rng, vec![2, 2, 3, 3], -0.7, 0.7).cast::<f64>();
        let bias = rand_tensor(&mut rng, vec![2], -0.2, 0.2).cast::<f64>();

        let (out, cols, d) = conv2d_forward(&input, &kernel, &bias, 1, 1).unwrap();
        // Loss = sum(out); upstream gradient is all ones.
        let dout = Tensor::full(out.shape().to_vec(), 1.0f64);
        let grads = conv2d_backward(&dout, &cols, &kernel, &d, true, true, true);

        let loss = |x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>| {
            let (o, _, _) = conv2d_forward(x, k, b, 1, 1).unwrap();
            o.data().iter().sum::<f64>()
        };
        let fd_input =
            finite_difference_gradient(|x| Ok(loss(x, &kernel, &bias)), &input, 1e-5).unwrap();
        let fd_kernel =
            finite_difference_gradient(|k| Ok(loss(&input, k, &bias)), &kernel, 1e-5).unwrap();
        let fd_bias =
            finite_difference_gradient(|b| Ok(loss(&input, &kernel, b)), &bias, 1e-5).unwrap();

        for (got, want) in [
            (grads.dinput.unwrap(), fd_input),
            (grads.dkernel.unwrap(), fd_kernel),
            (grads.dbias.unwrap(), fd_bias),
        ] {
            for (&g, &w) in got.data().iter().zip(want.data()) {
                assert!((g - w).abs() <= 1e-7 * g.abs().max(w.abs()).max(1.0), "{g} vs {w}");
            }
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let t = Tensor::new(vec![3], vec![-1.5f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&t).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::new(vec![4], vec![-3.0f32, -0.1, -7.0, -0.0]).unwrap();
        assert!(relu_forward(&neg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn max_pool_takes_window_maximum() {
        let t = Tensor::new(vec![1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let (out, argmax) = max_pool2d_forward(&t, 2, 2).unwrap();
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(argmax, vec![3]);

        let constant = Tensor::full(vec![1, 2, 4, 4], 0.25f32);
        let (out, _) = max_pool2d_forward(&constant, 2, 2).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn max_pool_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let t = rand_tensor(&mut rng, vec![1, 1, 6, 6], -1.0, 1.0);
        let (out, _) = max_pool2d_forward(&t, 2, 2).unwrap();
        let mut expected = Vec::new();
        for oh in 0..3 {
            for ow in 0..3 {
                let mut m = f32::NEG_INFINITY;
                for ki in 0..2 {
                    for kj in 0..2 {
                        m = m.max(t.data()[(oh * 2 + ki) * 6 + ow * 2 + kj]);
                    }
                }
                expected.push(m);
            }
        }
        assert_eq!(out.data(), expected.as_slice());
    }

    #[test]
    fn max_pool_ties_route_to_first_in_row_major_order() {
        let t = Tensor::full(vec![1, 1, 2, 2], 5.0f32);
        let (_, argmax) = max_pool2d_forward(&t, 2, 2).unwrap();
        assert_eq!(argmax, vec![0]);
        let dout = Tensor::new(vec![1, 1, 1, 1], vec![1.0f32]).unwrap();
        let dinput = max_pool2d_backward(&dout, &argmax, t.shape());
        assert_eq!(dinput.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_rejects_oversized_window() {
        let t = Tensor::<f32>::zeros(vec![1, 1, 2, 3]);
        let e = max_pool2d_forward(&t, 3, 1).unwrap_err();
        assert!(e.to_string().contains("larger than input height"), "{e}");
    }

    #[test]
    fn global_avg_pool_means_each_plane() {
        let t = Tensor::new(vec![1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool_forward(&t).unwrap().data(), &[2.5]);

        // 0.5 sums exactly in binary floating point, so equality is exact.
        let constant = Tensor::full(vec![2, 3, 4, 4], 0.5f32);
        let out = global_avg_pool_forward(&constant).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn global_avg_pool_matches_separate_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let t = rand_tensor(&mut rng, vec![2, 3, 5, 7], -2.0, 2.0);
        let out = global_avg_pool_forward(&t).unwrap();
        for (plane, &got) in out.data().iter().enumerate() {
            let sum: f64 = t.data()[plane * 35..(plane + 1) * 35]
                .iter()
                .map(|&v| v as f64)
                .sum();
            let expected = sum / 35.0;
            assert!(((got as f64) - expected).abs() <= 1e-6 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn dense_identity_and_zero_weights() {
        let x = Tensor::new(vec![2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut eye = Tensor::zeros(vec![3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let zero_bias = Tensor::zeros(vec![3]);
        let out = dense_forward(&x, &eye, &zero_bias).unwrap();
        assert_eq!(out.data(), x.data());

        let zeros = Tensor::zeros(vec![3, 3]);
        let bias = Tensor::new(vec![3], vec![0.5f32, -1.0, 2.0]).unwrap();
        let out = dense_forward(&x, &zeros, &bias).unwrap();
        assert_eq!(&out.data()[..3], bias.data());
        assert_eq!(&out.data()[3..], bias.data());
    }

    #[test]
    fn dense_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let x = rand_tensor(&mut rng, vec![2, 3], -1.0, 1.0);
        let w = rand_tensor(&mut rng, vec![3, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, vec![4], -0.5, 0.5);
        let out = dense_forward(&x, &w, &b).unwrap();
        let mut expected = vec![0.0f64; 8];
        for i in 0..2 {
            for j in 0..4 {
                let mut acc = b.data()[j] as f64;
                for l in 0..3 {
                    acc += x.data()[i * 3 + l] as f64 * w.data()[l * 4 + j] as f64;
                }
                expected[i * 4 + j] = acc;
            }
        }
        assert_close_rel(out.data(), &expected, 1e-6);
    }

    #[test]
    fn dense_rejects_dimension_mismatch() {
        let x = Tensor::<f32>::zeros(vec![2, 3]);
        let w = Tensor::<f32>::zeros(vec![4, 5]);
        let b = Tensor::<f32>::zeros(vec![5]);
        let e = dense_forward(&x, &w, &b).unwrap_err();
        assert!(e.to_string().contains("features"), "{e}");
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_k() {
        let logits = Tensor::new(vec![1, 2], vec![0.0f32, 0.0]).unwrap();
        let (loss, _) = softmax_cross_entropy_forward(&logits, &[0]).unwrap();
        assert!((loss.item().unwrap() as f64 - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_is_stable_for_huge_logits() {
        let logits = Tensor::new(vec![1, 2], vec![1000.0f32, 0.0]).unwrap();
        let (loss, softmax) = softmax_cross_entropy_forward(&logits, &[0]).unwrap();
        let l = loss.item().unwrap();
        assert!(l.is_finite());
        assert!(l.abs() < 1e-6);
        assert!(softmax.all_finite());
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let logits = Tensor::<f32>::zeros(vec![2, 3]);
        let e = softmax_cross_entropy_forward(&logits, &[0, 3]).unwrap_err();
        assert!(e.to_string().contains("label 3 out of range"), "{e}");
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let logits = rand_tensor(&mut rng, vec![3, 5], -2.0, 2.0).cast::<f64>();
        let labels = [1usize, 4, 0];
        let (_, softmax) = softmax_cross_entropy_forward(&logits, &labels).unwrap();
        let grad = softmax_cross_entropy_backward(&softmax, &labels, 1.0);
        let fd = finite_difference_gradient(
            |l| softmax_cross_entropy_forward(l, &labels).and_then(|(loss, _)| loss.item()),
            &logits,
            1e-3,
        )
        .unwrap();
        for (&g, &w) in grad.data().iter().zip(fd.data()) {
            let denom = g.abs().max(w.abs()).max(1e-8);
            assert!((g - w).abs() / denom < 1e-4, "{g} vs {w}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let logits = rand_tensor(&mut rng, vec![4, 6], -3.0, 3.0);
        let p = softmax_rows(&logits).unwrap();
        for row in p.data().chunks(6) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
