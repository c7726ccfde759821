use super::scalar::lane_sum;
use super::{as_batched, like_input, Differentiable, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvDims {
    pub fn new(batch: usize, c_in: usize, h: usize, w: usize, c_out: usize, kh: usize, kw: usize) -> Self {
        ConvDims {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            ho: h - kh + 1,
            wo: w - kw + 1,
        }
    }

    pub fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn direct(&self) -> bool {
        self.kh == 1 && self.kw == 1
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.c_out * self.positions()
    }
}

fn conv_dims<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>) -> Result<ConvDims> {
    let [batch, c_in, h, w] = as_batched(input.shape(), "conv2d input")?;
    let [c_out, kc, kh, kw] = match *kernels.shape() {
        [a, b, c, d] => [a, b, c, d],
        ref s => {
            return Err(Error::shape(format!(
                "conv2d kernels must be [C_out,C_in,kH,kW], got {s:?}"
            )))
        }
    };
    if kc != c_in {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: input has {c_in} channels, kernels expect {kc}"
        )));
    }
    if kh == 0 || kw == 0 || h < kh || w < kw {
        return Err(Error::shape(format!(
            "conv2d kernel {kh}x{kw} does not fit input {h}x{w}"
        )));
    }
    Ok(ConvDims::new(batch, c_in, h, w, c_out, kh, kw))
}

/// Lays out every receptive field of one sample as a column: `[C_in*kH*kW, Ho*Wo]`.
fn im2col<T: Scalar>(sample: &[T], d: &ConvDims, col: &mut [T]) {
    let n = d.positions();
    let mut row = 0;
    for ci in 0..d.c_in {
        let plane = &sample[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let dst = &mut col[row * n..(row + 1) * n];
                for y in 0..d.ho {
                    let src = &plane[(y + ky) * d.w + kx..(y + ky) * d.w + kx + d.wo];
                    dst[y * d.wo..(y + 1) * d.wo].copy_from_slice(src);
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds columns back onto one sample's input gradient.
fn col2im<T: Scalar>(col: &[T], d: &ConvDims, sample_grad: &mut [T]) {
    let n = d.positions();
    let mut row = 0;
    for ci in 0..d.c_in {
        let plane = &mut sample_grad[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let src = &col[row * n..(row + 1) * n];
                for y in 0..d.ho {
                    let dst = &mut plane[(y + ky) * d.w + kx..(y + ky) * d.w + kx + d.wo];
                    for (g, &c) in dst.iter_mut().zip(&src[y * d.wo..(y + 1) * d.wo]) {
                        *g = *g + c;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Grows `buf` to at least `len` without touching existing contents.
fn ensure_len<T: Scalar>(buf: &mut Vec<T>, len: usize) {
    if buf.len() < len {
        buf.resize(len, T::zero());
    }
}

/// Forward pass for one sample: `x` is `[C_in, H, W]`, `out` (`[C_out, Ho, Wo]`) is overwritten.
pub(crate) fn conv_forward_sample<T: Scalar>(x: &[T], d: &ConvDims, kernels: &[T], bias: &[T], out: &mut [T], col: &mut Vec<T>) {
    let (k, n) = (d.k(), d.positions());
    for (co, chunk) in out.chunks_exact_mut(n).enumerate() {
        chunk.fill(bias[co]);
    }
    let cols: &[T] = if d.direct() {
        x
    } else {
        ensure_len(col, k * n);
        im2col(x, d, col);
        &col[..k * n]
    };
    T::gemm(d.c_out, k, n, T::one(), kernels, (k, 1), cols, (n, 1), T::one(), out, (n, 1));
}

/// Backward pass for one sample. Kernel and bias gradients are added to
/// `g_kernels` / `g_bias`; `g_input`, when given, is overwritten.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward_sample<T: Scalar>(
    x: &[T],
    d: &ConvDims,
    kernels: &[T],
    grad_out: &[T],
    g_kernels: &mut [T],
    g_bias: &mut [T],
    g_input: Option<&mut [T]>,
    col: &mut Vec<T>,
    g_col: &mut Vec<T>,
) {
    let (k, n) = (d.k(), d.positions());
    for (co, chunk) in grad_out.chunks_exact(n).enumerate() {
        g_bias[co] = g_bias[co] + lane_sum(chunk);
    }
    let cols: &[T] = if d.direct() {
        x
    } else {
        ensure_len(col, k * n);
        im2col(x, d, col);
        &col[..k * n]
    };
    // dW^T[k, co] += sum_n col[k, n] * gout[co, n], written straight into dW's layout
    T::gemm(k, n, d.c_out, T::one(), cols, (n, 1), grad_out, (1, n), T::one(), g_kernels, (1, k));

    if let Some(gin) = g_input {
        if d.direct() {
            T::gemm(k, d.c_out, n, T::one(), kernels, (1, k), grad_out, (n, 1), T::zero(), gin, (n, 1));
        } else {
            ensure_len(g_col, k * n);
            T::gemm(k, d.c_out, n, T::one(), kernels, (1, k), grad_out, (n, 1), T::zero(), &mut g_col[..k * n], (n, 1));
            gin.fill(T::zero());
            col2im(&g_col[..k * n], d, gin);
        }
    }
}

/// Valid (unpadded, stride 1) cross-correlation.
///
/// Accepts `[C_in,H,W]` or `[B,C_in,H,W]` input and returns an output of the
/// same rank with spatial size `(H-kH+1, W-kW+1)`.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let d = conv_dims(input, kernels)?;
    if bias.shape() != [d.c_out] {
        return Err(Error::shape(format!(
            "conv2d bias must be [{}], got {:?}",
            d.c_out,
            bias.shape()
        )));
    }
    let mut out = vec![T::zero(); d.output_len()];
    let mut col = Vec::new();
    let (sample_in, sample_out) = (d.c_in * d.h * d.w, d.c_out * d.positions());
    for (x, o) in input.data().chunks_exact(sample_in).zip(out.chunks_exact_mut(sample_out)) {
        conv_forward_sample(x, &d, kernels.data(), bias.data(), o, &mut col);
    }
    Tensor::new(&like_input(input.ndim(), [d.batch, d.c_out, d.ho, d.wo]), out)
}

/// Gradients of a convolution with respect to its three arguments.
#[derive(Debug, Clone)]
pub struct Conv2dGrads<T> {
    /// `None` when not requested (first layer of a network).
    pub input: Option<Tensor<T>>,
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_output: &Tensor<T>,
    need_input_grad: bool,
) -> Result<Conv2dGrads<T>> {
    let d = conv_dims(input, kernels)?;
    let expected = like_input(input.ndim(), [d.batch, d.c_out, d.ho, d.wo]);
    if grad_output.shape() != expected.as_slice() {
        return Err(Error::shape(format!(
            "conv2d grad_output must be {:?}, got {:?}",
            expected,
            grad_output.shape()
        )));
    }
    let mut g_kernels = vec![T::zero(); d.c_out * d.k()];
    let mut g_bias = vec![T::zero(); d.c_out];
    let mut g_input = need_input_grad.then(|| vec![T::zero(); input.len()]);
    let (mut col, mut g_col) = (Vec::new(), Vec::new());
    let (sample_in, sample_out) = (d.c_in * d.h * d.w, d.c_out * d.positions());
    for b in 0..d.batch {
        conv_backward_sample(
            &input.data()[b * sample_in..(b + 1) * sample_in],
            &d,
            kernels.data(),
            &grad_output.data()[b * sample_out..(b + 1) * sample_out],
            &mut g_kernels,
            &mut g_bias,
            g_input.as_mut().map(|g| &mut g[b * sample_in..(b + 1) * sample_in]),
            &mut col,
            &mut g_col,
        );
    }
    Ok(Conv2dGrads {
        input: match g_input {
            Some(g) => Some(Tensor::new(input.shape(), g)?),
            None => None,
        },
        kernels: Tensor::new(kernels.shape(), g_kernels)?,
        bias: Tensor::new(&[d.c_out], g_bias)?,
    })
}

/// Convolution layer with learnable kernels and bias.
#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar> {
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
    /// When false, backward skips the input gradient and returns zeros.
    pub input_grad: bool,
    cached_input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(kernels: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if kernels.ndim() != 4 || bias.shape() != [kernels.shape()[0]] {
            return Err(Error::shape(format!(
                "conv layer needs [C_out,C_in,kH,kW] kernels and [C_out] bias, got {:?} / {:?}",
                kernels.shape(),
                bias.shape()
            )));
        }
        Ok(Conv2d {
            kernels,
            bias,
            input_grad: true,
            cached_input: None,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernels.shape()[2], self.kernels.shape()[3])
    }

    pub fn clear_cache(&mut self) {
        self.cached_input = None;
    }
}

impl<T: Scalar> Differentiable<T> for Conv2d<T> {
    fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let out = conv2d(input, &self.kernels, &self.bias)?;
        self.cached_input = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
        let input = self
            .cached_input
            .as_ref()
            .ok_or_else(|| Error::invalid("conv2d backward called before forward"))?;
        let grads = conv2d_backward(input, &self.kernels, grad_output, self.input_grad)?;
        accumulate(&mut self.kernels, &grads.kernels);
        accumulate(&mut self.bias, &grads.bias);
        Ok(grads
            .input
            .unwrap_or_else(|| Tensor::zeros(input.shape())))
    }

    fn parameters(&self) -> Vec<&Tensor<T>> {
        vec![&self.kernels, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.kernels, &mut self.bias]
    }
}

pub(crate) fn accumulate<T: Scalar>(param: &mut Tensor<T>, grad: &Tensor<T>) {
    for (g, &d) in param.grad_mut().iter_mut().zip(grad.data()) {
        *g = *g + d;
    }
}
