//! 2-D convolution and transpose convolution over `[N,H,W,C]` tensors.
//!
//! Both are lowered onto one GEMM via im2col / col2im. Convolution weights are
//! `[kh, kw, C_in, C_out]`. Transpose convolution weights are `[kh, kw, C_out, C_in]`,
//! i.e. the weights of the convolution whose input-gradient it computes.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

use super::{NetError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    /// `floor((in + 2p - k) / s) + 1` per axis.
    pub fn conv_output(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let axis = |n: usize, k: usize, s: usize, p: usize| {
            if s == 0 || n + 2 * p < k {
                None
            } else {
                Some((n + 2 * p - k) / s + 1)
            }
        };
        Some((
            axis(h, self.kernel.0, self.stride.0, self.padding.0)?,
            axis(w, self.kernel.1, self.stride.1, self.padding.1)?,
        ))
    }

    /// `(in - 1) * s - 2p + k` per axis.
    pub fn transpose_output(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let axis = |n: usize, k: usize, s: usize, p: usize| {
            if n == 0 || s == 0 {
                return None;
            }
            ((n - 1) * s + k).checked_sub(2 * p).filter(|&v| v > 0)
        };
        Some((
            axis(h, self.kernel.0, self.stride.0, self.padding.0)?,
            axis(w, self.kernel.1, self.stride.1, self.padding.1)?,
        ))
    }

    fn patch_len(&self, channels: usize) -> usize {
        self.kernel.0 * self.kernel.1 * channels
    }
}

/// Spatial extents shared by im2col and col2im: a convolution from an
/// `h x w x c` image to an `ho x wo` grid of patches.
#[derive(Debug, Clone, Copy)]
struct Lowering {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    ho: usize,
    wo: usize,
    geom: ConvGeometry,
}

impl Lowering {
    fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    fn cols(&self) -> usize {
        self.geom.patch_len(self.c)
    }

    /// Source pixel for kernel tap `(i, j)` of output `(oy, ox)`, if inside the image.
    #[inline]
    fn source(&self, oy: usize, ox: usize, i: usize, j: usize) -> Option<(usize, usize)> {
        let (sh, sw) = self.geom.stride;
        let (ph, pw) = self.geom.padding;
        let iy = (oy * sh + i).checked_sub(ph)?;
        let ix = (ox * sw + j).checked_sub(pw)?;
        (iy < self.h && ix < self.w).then_some((iy, ix))
    }

    fn im2col<T: Scalar>(&self, image: &[T]) -> Vec<T> {
        let (kh, kw) = self.geom.kernel;
        let c = self.c;
        let mut out = vec![T::zero(); self.rows() * self.cols()];
        let mut row = 0;
        for b in 0..self.n {
            let img = &image[b * self.h * self.w * c..(b + 1) * self.h * self.w * c];
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let dst = &mut out[row * self.cols()..(row + 1) * self.cols()];
                    for i in 0..kh {
                        for j in 0..kw {
                            if let Some((iy, ix)) = self.source(oy, ox, i, j) {
                                let s = (iy * self.w + ix) * c;
                                let d = (i * kw + j) * c;
                                dst[d..d + c].copy_from_slice(&img[s..s + c]);
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        out
    }

    fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let (kh, kw) = self.geom.kernel;
        let c = self.c;
        let mut image = vec![T::zero(); self.n * self.h * self.w * c];
        let mut row = 0;
        for b in 0..self.n {
            let img = &mut image[b * self.h * self.w * c..(b + 1) * self.h * self.w * c];
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let src = &cols[row * self.cols()..(row + 1) * self.cols()];
                    for i in 0..kh {
                        for j in 0..kw {
                            if let Some((iy, ix)) = self.source(oy, ox, i, j) {
                                let d = (iy * self.w + ix) * c;
                                let s = (i * kw + j) * c;
                                for (acc, &v) in img[d..d + c].iter_mut().zip(&src[s..s + c]) {
                                    *acc += v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        image
    }
}

/// Accepts `[H,W,C]` (treated as a batch of one) or `[N,H,W,C]`.
fn as_batch<T: Scalar>(input: &Tensor<T>) -> Result<(usize, usize, usize, usize), NetError> {
    match input.shape() {
        &[h, w, c] => Ok((1, h, w, c)),
        &[n, h, w, c] => Ok((n, h, w, c)),
        s => Err(NetError::ShapeMismatch(format!(
            "expected [H,W,C] or [N,H,W,C], got {s:?}"
        ))),
    }
}

fn with_rank<T: Scalar>(rank3: bool, n: usize, h: usize, w: usize, c: usize, data: Vec<T>) -> Result<Tensor<T>, NetError> {
    if rank3 {
        Tensor::new(vec![h, w, c], data)
    } else {
        Tensor::new(vec![n, h, w, c], data)
    }
}

fn check_kernel<T: Scalar>(
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    geom: &ConvGeometry,
    input_channels: usize,
) -> Result<usize, NetError> {
    let (kh, kw, ci, co) = match weights.shape() {
        &[a, b, c, d] => (a, b, c, d),
        s => return Err(NetError::ShapeMismatch(format!("kernel must be rank 4, got {s:?}"))),
    };
    if (kh, kw) != geom.kernel {
        return Err(NetError::ShapeMismatch(format!(
            "kernel extent {:?} does not match geometry {:?}",
            (kh, kw),
            geom.kernel
        )));
    }
    if ci != input_channels {
        return Err(NetError::ShapeMismatch(format!(
            "kernel expects {ci} input channels, input has {input_channels}"
        )));
    }
    if bias.shape() != [co] {
        return Err(NetError::ShapeMismatch(format!(
            "bias shape {:?} does not match {co} output channels",
            bias.shape()
        )));
    }
    Ok(co)
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T]) {
    for px in out.chunks_exact_mut(bias.len()) {
        for (v, &b) in px.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn bias_grad<T: Scalar>(grad_out: &[T], channels: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for px in grad_out.chunks_exact(channels) {
        for (acc, &g) in db.iter_mut().zip(px) {
            *acc += g;
        }
    }
    db
}

/// Gradients of one parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Cross-correlation with zero padding. Returns the output and the im2col
/// buffer, which [`conv2d_backward`] reuses.
pub fn conv2d_forward_cached<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    geom: &ConvGeometry,
) -> Result<(Tensor<T>, Vec<T>), NetError> {
    let rank3 = input.shape().len() == 3;
    let (n, h, w, c) = as_batch(input)?;
    let f = check_kernel(weights, bias, geom, c)?;
    let (ho, wo) = geom
        .conv_output(h, w)
        .ok_or_else(|| NetError::ShapeMismatch(format!("{geom:?} does not fit a {h}x{w} input")))?;
    let low = Lowering {
        n,
        h,
        w,
        c,
        ho,
        wo,
        geom: *geom,
    };
    let cols = low.im2col(input.data());
    let (m, k) = (low.rows(), low.cols());
    let mut out = vec![T::zero(); m * f];
    T::gemm(m, k, f, T::one(), &cols, k, 1, weights.data(), f, 1, T::zero(), &mut out, f, 1);
    add_bias(&mut out, bias.data());
    Ok((with_rank(rank3, n, ho, wo, f, out)?, cols))
}

pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    geom: &ConvGeometry,
) -> Result<Tensor<T>, NetError> {
    conv2d_forward_cached(input, weights, bias, geom).map(|(out, _)| out)
}

/// Backward pass of [`conv2d_forward_cached`] given `dL/d(output)`.
pub fn conv2d_backward<T: Scalar>(
    input_shape: &[usize],
    cols: &[T],
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: &ConvGeometry,
    want_input: bool,
) -> Result<LayerGrads<T>, NetError> {
    let (n, h, w, c) = match *input_shape {
        [h, w, c] => (1, h, w, c),
        [n, h, w, c] => (n, h, w, c),
        _ => return Err(NetError::ShapeMismatch(format!("bad input shape {input_shape:?}"))),
    };
    let f = weights.shape()[3];
    let (ho, wo) = geom
        .conv_output(h, w)
        .ok_or_else(|| NetError::ShapeMismatch("geometry does not fit input".into()))?;
    let low = Lowering {
        n,
        h,
        w,
        c,
        ho,
        wo,
        geom: *geom,
    };
    let (m, k) = (low.rows(), low.cols());
    if grad_out.len() != m * f || cols.len() != m * k {
        return Err(NetError::ShapeMismatch(format!(
            "output gradient {:?} does not match a {n}x{ho}x{wo}x{f} output",
            grad_out.shape()
        )));
    }
    let mut dw = vec![T::zero(); k * f];
    T::gemm(k, m, f, T::one(), cols, 1, k, grad_out.data(), f, 1, T::zero(), &mut dw, f, 1);
    let db = bias_grad(grad_out.data(), f);
    let input = if want_input {
        let mut dcols = vec![T::zero(); m * k];
        T::gemm(m, f, k, T::one(), grad_out.data(), f, 1, weights.data(), 1, f, T::zero(), &mut dcols, k, 1);
        Some(Tensor::new(input_shape.to_vec(), low.col2im(&dcols))?)
    } else {
        None
    };
    Ok(LayerGrads {
        input,
        weights: Tensor::new(weights.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![f], db)?,
    })
}

/// Transpose convolution (the input-gradient of a convolution), plus bias.
/// Weights are `[kh, kw, C_out, C_in]`.
pub fn transpose_conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    geom: &ConvGeometry,
) -> Result<Tensor<T>, NetError> {
    let rank3 = input.shape().len() == 3;
    let (n, h, w, cin) = as_batch(input)?;
    let (kh, kw, cout, wc) = match weights.shape() {
        &[a, b, c, d] => (a, b, c, d),
        s => return Err(NetError::ShapeMismatch(format!("kernel must be rank 4, got {s:?}"))),
    };
    if (kh, kw) != geom.kernel || wc != cin || bias.shape() != [cout] {
        return Err(NetError::ShapeMismatch(format!(
            "transpose kernel {:?} / bias {:?} incompatible with {cin} input channels and {geom:?}",
            weights.shape(),
            bias.shape()
        )));
    }
    let (ho, wo) = geom
        .transpose_output(h, w)
        .ok_or_else(|| NetError::ShapeMismatch(format!("{geom:?} does not fit a {h}x{w} input")))?;
    let low = Lowering {
        n,
        h: ho,
        w: wo,
        c: cout,
        ho: h,
        wo: w,
        geom: *geom,
    };
    let (m, k) = (low.rows(), low.cols());
    let mut cols = vec![T::zero(); m * k];
    T::gemm(m, cin, k, T::one(), input.data(), cin, 1, weights.data(), 1, cin, T::zero(), &mut cols, k, 1);
    let mut out = low.col2im(&cols);
    add_bias(&mut out, bias.data());
    with_rank(rank3, n, ho, wo, cout, out)
}

/// Backward pass of [`transpose_conv2d_forward`].
pub fn transpose_conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: &ConvGeometry,
    want_input: bool,
) -> Result<LayerGrads<T>, NetError> {
    let (n, h, w, cin) = as_batch(input)?;
    let cout = weights.shape()[2];
    let (ho, wo) = geom
        .transpose_output(h, w)
        .ok_or_else(|| NetError::ShapeMismatch("geometry does not fit input".into()))?;
    if grad_out.len() != n * ho * wo * cout {
        return Err(NetError::ShapeMismatch(format!(
            "output gradient {:?} does not match a {n}x{ho}x{wo}x{cout} output",
            grad_out.shape()
        )));
    }
    let low = Lowering {
        n,
        h: ho,
        w: wo,
        c: cout,
        ho: h,
        wo: w,
        geom: *geom,
    };
    let (m, k) = (low.rows(), low.cols());
    let dcols = low.im2col(grad_out.data());
    let mut dw = vec![T::zero(); k * cin];
    T::gemm(k, m, cin, T::one(), &dcols, 1, k, input.data(), cin, 1, T::zero(), &mut dw, cin, 1);
    let db = bias_grad(grad_out.data(), cout);
    let dx = if want_input {
        let mut dx = vec![T::zero(); m * cin];
        T::gemm(m, k, cin, T::one(), &dcols, k, 1, weights.data(), cin, 1, T::zero(), &mut dx, cin, 1);
        Some(Tensor::new(input.shape().to_vec(), dx)?)
    } else {
        None
    };
    Ok(LayerGrads {
        input: dx,
        weights: Tensor::new(weights.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![cout], db)?,
    })
}
