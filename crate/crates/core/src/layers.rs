//! Neural-net primitives and their exact gradients.
//!
//! All operators work on a single sample (no batch axis): feature maps are
//! `[C, H, W]`, vectors are `[N]`. Convolutions are valid (no padding)
//! cross-correlations lowered to matrix products via `im2col`, so one GEMM
//! per layer does the heavy lifting in both training and the dense
//! sliding-window scan.
//!
//! Each `*_backward` takes the same inputs as its forward plus the upstream
//! gradient, returns the input gradient, and accumulates parameter
//! gradients into the `grad` buffers of the weight/bias tensors. Buffers
//! are accumulated, never overwritten, so gradients sum naturally across a
//! minibatch; call [`Tensor::zero_grad`] between steps.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Output spatial size of a valid convolution/pool: floor((extent - k) / stride) + 1.
///
/// Errors when the kernel overhangs the input or stride is zero.
pub fn out_extent(extent: usize, k: usize, stride: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Contract("stride must be positive".into()));
    }
    if k == 0 || k > extent {
        return Err(Error::Dimension(format!(
            "kernel extent {k} does not fit input extent {extent}"
        )));
    }
    Ok((extent - k) / stride + 1)
}

fn expect_rank(t: &Tensor<impl Scalar>, rank: usize, what: &str) -> Result<()> {
    if t.shape().len() != rank {
        return Err(Error::Dimension(format!(
            "{what} must have rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Lowers `[C, H, W]` patches to a `[C*kh*kw, Ho*Wo]` column matrix.
///
/// Row index is `(c*kh + ki)*kw + kj`, matching the row-major flattening of
/// a `[O, C, kh, kw]` weight tensor, so `weight_matrix * cols` is exactly
/// the valid cross-correlation.
fn im2col<T: Scalar>(
    input: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let patch = c * kh * kw;
    let cells = ho * wo;
    let mut cols = vec![T::zero(); patch * cells];
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * cells..(row + 1) * cells];
                for oy in 0..ho {
                    let src_row = &plane[(oy * stride + ki) * w..];
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        *d = src_row[ox * stride + kj];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a `[C*kh*kw, Ho*Wo]` column-gradient back onto the input grid.
fn col2im<T: Scalar>(
    dcols: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    (ho, wo): (usize, usize),
    dinput: &mut [T],
) {
    let cells = ho * wo;
    for ci in 0..c {
        let plane = &mut dinput[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &dcols[row * cells..(row + 1) * cells];
                for oy in 0..ho {
                    let base = (oy * stride + ki) * w + kj;
                    for ox in 0..wo {
                        plane[base + ox * stride] =
                            plane[base + ox * stride] + src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

fn check_conv_shapes<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    expect_rank(input, 3, "conv input")?;
    expect_rank(weight, 4, "conv weight")?;
    expect_rank(bias, 1, "conv bias")?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (o, wc, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if wc != c {
        return Err(Error::Dimension(format!(
            "conv weight expects {wc} input channels, input has {c}"
        )));
    }
    if bias.shape()[0] != o {
        return Err(Error::Dimension(format!(
            "conv bias has {} entries for {o} output channels",
            bias.shape()[0]
        )));
    }
    let ho = out_extent(h, kh, stride)?;
    let wo = out_extent(w, kw, stride)?;
    Ok((c, h, w, o, kh, kw, ho, wo))
}

/// Valid cross-correlation of `[C, H, W]` with `[O, C, kh, kw]` kernels.
///
/// Returns `[O, Ho, Wo]` with `Ho = (H - kh)/stride + 1` (floor) and the
/// bias added per output channel.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let (c, h, w, o, kh, kw, ho, wo) = check_conv_shapes(input, weight, bias, stride)?;
    let patch = c * kh * kw;
    let cells = ho * wo;
    let cols = im2col(input.data(), (c, h, w), (kh, kw), stride, (ho, wo));
    let mut out = vec![T::zero(); o * cells];
    T::gemm(
        o,
        patch,
        cells,
        T::one(),
        weight.data(),
        (patch as isize, 1),
        &cols,
        (cells as isize, 1),
        &mut out,
    );
    for (oc, b) in bias.data().iter().enumerate() {
        for v in &mut out[oc * cells..(oc + 1) * cells] {
            *v = *v + *b;
        }
    }
    Tensor::from_vec(&[o, ho, wo], out)
}

/// Gradient of [`conv2d`]: returns d(input), accumulates d(weight), d(bias).
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &mut Tensor<T>,
    bias: &mut Tensor<T>,
    stride: usize,
    dout: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (c, h, w, o, kh, kw, ho, wo) = check_conv_shapes(input, weight, bias, stride)?;
    if dout.shape() != [o, ho, wo] {
        return Err(Error::Dimension(format!(
            "conv upstream gradient shape {:?}, expected {:?}",
            dout.shape(),
            [o, ho, wo]
        )));
    }
    let patch = c * kh * kw;
    let cells = ho * wo;
    let cols = im2col(input.data(), (c, h, w), (kh, kw), stride, (ho, wo));

    bias.ensure_grad();
    for (oc, g) in bias.grad_mut().iter_mut().enumerate() {
        let mut s = T::zero();
        for v in &dout.data()[oc * cells..(oc + 1) * cells] {
            s = s + *v;
        }
        *g = *g + s;
    }

    weight.ensure_grad();
    T::gemm(
        o,
        cells,
        patch,
        T::one(),
        dout.data(),
        (cells as isize, 1),
        &cols,
        (1, cells as isize),
        weight.grad_mut(),
    );

    let mut dcols = vec![T::zero(); patch * cells];
    T::gemm(
        patch,
        o,
        cells,
        T::one(),
        weight.data(),
        (1, patch as isize),
        dout.data(),
        (cells as isize, 1),
        &mut dcols,
    );
    let mut dinput = vec![T::zero(); c * h * w];
    col2im(&dcols, (c, h, w), (kh, kw), stride, (ho, wo), &mut dinput);
    Tensor::from_vec(&[c, h, w], dinput)
}

/// Max pooling over `size`×`size` windows. Returns the pooled map and the
/// flat input index of each window's maximum (first occurrence wins ties),
/// which [`max_pool_backward`] uses to route gradients.
pub fn max_pool<T: Scalar>(
    input: &Tensor<T>,
    size: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    expect_rank(input, 3, "pool input")?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let ho = out_extent(h, size, stride)?;
    let wo = out_extent(w, size, stride)?;
    let mut out = vec![T::zero(); c * ho * wo];
    let mut argmax = vec![0usize; c * ho * wo];
    let data = input.data();
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_idx = 0usize;
                for ky in 0..size {
                    let row = (ci * h + oy * stride + ky) * w + ox * stride;
                    for kx in 0..size {
                        let v = data[row + kx];
                        if v > best {
                            best = v;
                            best_idx = row + kx;
                        }
                    }
                }
                let cell = (ci * ho + oy) * wo + ox;
                out[cell] = best;
                argmax[cell] = best_idx;
            }
        }
    }
    Ok((Tensor::from_vec(&[c, ho, wo], out)?, argmax))
}

/// Routes each pooled-cell gradient to the input element that won the max.
pub fn max_pool_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    dout: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != dout.numel() {
        return Err(Error::Dimension(format!(
            "pool argmax has {} entries, upstream gradient {}",
            argmax.len(),
            dout.numel()
        )));
    }
    let mut dinput = Tensor::zeros(input_shape);
    let d = dinput.data_mut();
    for (cell, &idx) in argmax.iter().enumerate() {
        d[idx] = d[idx] + dout.data()[cell];
    }
    Ok(dinput)
}

fn prelu_channels<T: Scalar>(input: &Tensor<T>, slope: &Tensor<T>) -> Result<(usize, usize)> {
    expect_rank(slope, 1, "prelu slope")?;
    if input.shape().is_empty() {
        return Err(Error::Dimension("prelu input must not be rank 0".into()));
    }
    let channels = input.shape()[0];
    if slope.shape()[0] != channels {
        return Err(Error::Dimension(format!(
            "prelu has {} slopes for {channels} channels",
            slope.shape()[0]
        )));
    }
    Ok((channels, input.numel() / channels))
}

/// Parametric ReLU with one learned slope per leading-axis channel:
/// `y = x` for `x >= 0`, `y = a_c * x` otherwise. For a `[N]` vector every
/// element is its own channel.
pub fn prelu<T: Scalar>(input: &Tensor<T>, slope: &Tensor<T>) -> Result<Tensor<T>> {
    let (channels, extent) = prelu_channels(input, slope)?;
    let mut out = input.data().to_vec();
    for ci in 0..channels {
        let a = slope.data()[ci];
        for v in &mut out[ci * extent..(ci + 1) * extent] {
            if *v < T::zero() {
                *v = a * *v;
            }
        }
    }
    Tensor::from_vec(input.shape(), out)
}

/// Gradient of [`prelu`]: returns d(input), accumulates d(slope).
pub fn prelu_backward<T: Scalar>(
    input: &Tensor<T>,
    slope: &mut Tensor<T>,
    dout: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (channels, extent) = prelu_channels(input, slope)?;
    if dout.shape() != input.shape() {
        return Err(Error::Dimension(format!(
            "prelu upstream gradient shape {:?}, input {:?}",
            dout.shape(),
            input.shape()
        )));
    }
    slope.ensure_grad();
    let mut dinput = vec![T::zero(); input.numel()];
    for ci in 0..channels {
        let a = slope.data()[ci];
        let mut da = T::zero();
        for i in ci * extent..(ci + 1) * extent {
            let x = input.data()[i];
            let g = dout.data()[i];
            if x >= T::zero() {
                dinput[i] = g;
            } else {
                dinput[i] = a * g;
                da = da + x * g;
            }
        }
        slope.grad_mut()[ci] = slope.grad_mut()[ci] + da;
    }
    Tensor::from_vec(input.shape(), dinput)
}

fn check_linear_shapes<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize)> {
    expect_rank(weight, 2, "linear weight")?;
    expect_rank(bias, 1, "linear bias")?;
    let (n_out, n_in) = (weight.shape()[0], weight.shape()[1]);
    if input.numel() != n_in {
        return Err(Error::Dimension(format!(
            "linear expects {n_in} inputs, got {} (shape {:?})",
            input.numel(),
            input.shape()
        )));
    }
    if bias.shape()[0] != n_out {
        return Err(Error::Dimension(format!(
            "linear bias has {} entries for {n_out} outputs",
            bias.shape()[0]
        )));
    }
    Ok((n_out, n_in))
}

/// Fully-connected layer `y = W x + b`; the input is read in row-major
/// flattened order, so a `[C, H, W]` map feeds weights of width `C*H*W`.
pub fn linear<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n_out, n_in) = check_linear_shapes(input, weight, bias)?;
    let x = input.data();
    let mut out = bias.data().to_vec();
    for (o, y) in out.iter_mut().enumerate() {
        let row = &weight.data()[o * n_in..(o + 1) * n_in];
        let mut s = T::zero();
        for (wv, xv) in row.iter().zip(x) {
            s = s + *wv * *xv;
        }
        *y = *y + s;
    }
    Tensor::from_vec(&[n_out], out)
}

/// Gradient of [`linear`]: returns d(input) shaped like the input,
/// accumulates d(weight), d(bias).
pub fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &mut Tensor<T>,
    bias: &mut Tensor<T>,
    dout: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n_out, n_in) = check_linear_shapes(input, weight, bias)?;
    if dout.numel() != n_out {
        return Err(Error::Dimension(format!(
            "linear upstream gradient has {} entries for {n_out} outputs",
            dout.numel()
        )));
    }
    bias.ensure_grad();
    for (g, d) in bias.grad_mut().iter_mut().zip(dout.data()) {
        *g = *g + *d;
    }
    weight.ensure_grad();
    {
        let wg = weight.grad_mut();
        for (o, d) in dout.data().iter().enumerate() {
            let row = &mut wg[o * n_in..(o + 1) * n_in];
            for (gw, xv) in row.iter_mut().zip(input.data()) {
                *gw = *gw + *d * *xv;
            }
        }
    }
    let mut dinput = vec![T::zero(); n_in];
    for (o, d) in dout.data().iter().enumerate() {
        let row = &weight.data()[o * n_in..(o + 1) * n_in];
        for (gi, wv) in dinput.iter_mut().zip(row) {
            *gi = *gi + *d * *wv;
        }
    }
    Tensor::from_vec(input.shape(), dinput)
}

/// Two-way softmax with max subtraction, safe for logits of any magnitude.
pub fn softmax2<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.numel() != 2 {
        return Err(Error::Dimension(format!(
            "softmax2 expects 2 logits, got {}",
            logits.numel()
        )));
    }
    let (z0, z1) = (logits.data()[0], logits.data()[1]);
    let m = if z0 > z1 { z0 } else { z1 };
    let e0 = (z0 - m).exp();
    let e1 = (z1 - m).exp();
    let s = e0 + e1;
    Tensor::from_vec(logits.shape(), vec![e0 / s, e1 / s])
}

/// Gradient of [`softmax2`] through its Jacobian:
/// `dz_i = p_i * (dp_i - sum_j dp_j * p_j)`.
pub fn softmax2_backward<T: Scalar>(probs: &Tensor<T>, dprobs: &Tensor<T>) -> Result<Tensor<T>> {
    if probs.numel() != 2 || dprobs.numel() != 2 {
        return Err(Error::Dimension(
            "softmax2 gradient expects 2 probabilities and 2 upstream entries".into(),
        ));
    }
    let p = probs.data();
    let g = dprobs.data();
    let dot = g[0] * p[0] + g[1] * p[1];
    Tensor::from_vec(
        probs.shape(),
        vec![p[0] * (g[0] - dot), p[1] * (g[1] - dot)],
    )
}
