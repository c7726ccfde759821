use super::conv::accumulate;
use super::{check_finite, Differentiable, Scalar, Tensor};
use crate::error::{Error, Result};

/// Probabilities are clamped to this before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    input.check_finite("relu input")?;
    Ok(input.map(|v| if v > T::zero() { v } else { T::zero() }))
}

/// Gradient of relu given its *input*.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_output.shape() {
        return Err(Error::shape(format!(
            "relu grad_output {:?} does not match input {:?}",
            grad_output.shape(),
            input.shape()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_output.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape(), data)
}

fn linear_dims<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (rows, n) = match *input.shape() {
        [n] => (1, n),
        [b, n] => (b, n),
        ref s => return Err(Error::shape(format!("linear expects [n] or [B,n] input, got {s:?}"))),
    };
    match *weight.shape() {
        [m, wn] if wn == n => Ok((rows, n, m)),
        ref s => Err(Error::shape(format!(
            "linear weight must be [m,{n}], got {s:?}"
        ))),
    }
}

/// Affine map `x W^T + b` for `[n]` or `[B,n]` input.
pub fn linear<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, n, m) = linear_dims(input, weight)?;
    if bias.shape() != [m] {
        return Err(Error::shape(format!("linear bias must be [{m}], got {:?}", bias.shape())));
    }
    input.check_finite("linear input")?;
    let mut out: Vec<T> = (0..rows).flat_map(|_| bias.data().iter().copied()).collect();
    T::gemm(rows, n, m, T::one(), input.data(), (n, 1), weight.data(), (1, n), T::one(), &mut out, (m, 1));
    let shape: Vec<usize> = if input.ndim() == 1 { vec![m] } else { vec![rows, m] };
    Tensor::new(&shape, out)
}

#[derive(Debug, Clone)]
pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, grad_output: &Tensor<T>) -> Result<LinearGrads<T>> {
    let (rows, n, m) = linear_dims(input, weight)?;
    if grad_output.len() != rows * m {
        return Err(Error::shape(format!(
            "linear grad_output has {} elements, expected {}",
            grad_output.len(),
            rows * m
        )));
    }
    let go = grad_output.data();
    let mut gw = vec![T::zero(); m * n];
    T::gemm(m, rows, n, T::one(), go, (1, m), input.data(), (n, 1), T::zero(), &mut gw, (n, 1));
    let mut gx = vec![T::zero(); rows * n];
    T::gemm(rows, m, n, T::one(), go, (m, 1), weight.data(), (n, 1), T::zero(), &mut gx, (n, 1));
    let mut gb = vec![T::zero(); m];
    for row in go.chunks_exact(m) {
        for (b, &g) in gb.iter_mut().zip(row) {
            *b = *b + g;
        }
    }
    Ok(LinearGrads {
        input: Tensor::new(input.shape(), gx)?,
        weight: Tensor::new(weight.shape(), gw)?,
        bias: Tensor::new(&[m], gb)?,
    })
}

/// Row-wise softmax over the last axis, computed after subtracting the row max.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    logits.check_finite("softmax logits")?;
    let width = *logits
        .shape()
        .last()
        .ok_or_else(|| Error::shape("softmax of a scalar"))?;
    if width == 0 {
        return Err(Error::shape("softmax over an empty axis"));
    }
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(width) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Tensor::new(logits.shape(), out)
}

fn check_labels<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<(usize, usize)> {
    let (rows, classes) = match *probs.shape() {
        [r, c] => (r, c),
        ref s => return Err(Error::shape(format!("expected [B,classes] probabilities, got {s:?}"))),
    };
    if rows != labels.len() {
        return Err(Error::shape(format!("{rows} probability rows but {} labels", labels.len())));
    }
    if rows == 0 {
        return Err(Error::Empty("cross entropy over an empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
    }
    Ok((rows, classes))
}

/// Mean over the batch of `-ln p[label]`, with `p` floored at [`PROB_FLOOR`].
pub fn cross_entropy<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let (rows, classes) = check_labels(probs, labels)?;
    check_finite(probs.data(), "cross entropy probabilities")?;
    let floor = T::from_f64(PROB_FLOOR);
    let total = probs
        .data()
        .chunks_exact(classes)
        .zip(labels)
        .map(|(row, &l)| -(row[l].max(floor)).ln())
        .sum::<T>();
    Ok(total / T::from_f64(rows as f64))
}

/// d(mean cross entropy)/d(logits) for a softmax head: `(p - onehot) / B`.
pub fn softmax_cross_entropy_grad<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let (rows, classes) = check_labels(probs, labels)?;
    let scale = T::one() / T::from_f64(rows as f64);
    let mut grad = probs.data().to_vec();
    for (row, &l) in grad.chunks_exact_mut(classes).zip(labels) {
        row[l] = row[l] - T::one();
        for v in row.iter_mut() {
            *v = *v * scale;
        }
    }
    Tensor::new(probs.shape(), grad)
}

#[derive(Debug, Clone, Default)]
pub struct Relu<T: Scalar> {
    cached_input: Option<Tensor<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Relu { cached_input: None }
    }

    pub fn clear_cache(&mut self) {
        self.cached_input = None;
    }
}

impl<T: Scalar> Differentiable<T> for Relu<T> {
    fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let out = relu(input)?;
        self.cached_input = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
        let input = self
            .cached_input
            .as_ref()
            .ok_or_else(|| Error::invalid("relu backward called before forward"))?;
        relu_backward(input, grad_output)
    }
}

/// Fully connected layer, `weight: [out, in]`.
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    cached_input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        match (weight.shape(), bias.shape()) {
            ([m, _], [bm]) if m == bm => Ok(Linear {
                weight,
                bias,
                cached_input: None,
            }),
            (w, b) => Err(Error::shape(format!("linear layer needs [m,n] weight and [m] bias, got {w:?} / {b:?}"))),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn clear_cache(&mut self) {
        self.cached_input = None;
    }
}

impl<T: Scalar> Differentiable<T> for Linear<T> {
    fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let out = linear(input, &self.weight, &self.bias)?;
        self.cached_input = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
        let input = self
            .cached_input
            .as_ref()
            .ok_or_else(|| Error::invalid("linear backward called before forward"))?;
        let grads = linear_backward(input, &self.weight, grad_output)?;
        accumulate(&mut self.weight, &grads.weight);
        accumulate(&mut self.bias, &grads.bias);
        Ok(grads.input)
    }

    fn parameters(&self) -> Vec<&Tensor<T>> {
        vec![&self.weight, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}
