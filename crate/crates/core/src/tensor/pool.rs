use super::{as_batched, like_input, Differentiable, Scalar, Tensor};
use crate::error::{Error, Result};

/// Flat input index of the winning element for every pooled output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<u32>,
}

/// Non-overlapping max pooling; stride equals the window and any trailing
/// rows/columns that do not fill a window are dropped.
///
/// Ties resolve to the first element in row-major order within the window.
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>, window: (usize, usize)) -> Result<(Tensor<T>, PoolIndices)> {
    let [b, c, h, w] = as_batched(input.shape(), "maxpool2d input")?;
    let (kh, kw) = window;
    if kh == 0 || kw == 0 || kh > h || kw > w {
        return Err(Error::shape(format!(
            "maxpool window {kh}x{kw} larger than input {h}x{w}"
        )));
    }
    if input.len() > u32::MAX as usize {
        return Err(Error::shape("maxpool input too large for u32 indices"));
    }
    let (ho, wo) = (h / kh, w / kw);
    let data = input.data();
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut argmax = Vec::with_capacity(b * c * ho * wo);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = base + oy * kh * w + ox * kw;
                let mut best = data[best_idx];
                for dy in 0..kh {
                    let row = base + (oy * kh + dy) * w + ox * kw;
                    for (dx, &v) in data[row..row + kw].iter().enumerate() {
                        if v > best {
                            best = v;
                            best_idx = row + dx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx as u32);
            }
        }
    }
    let out = Tensor::new(&like_input(input.ndim(), [b, c, ho, wo]), out)?;
    Ok((
        out,
        PoolIndices {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

/// Routes each output gradient to its argmax position.
pub fn maxpool2d_backward<T: Scalar>(grad_output: &Tensor<T>, indices: &PoolIndices) -> Result<Tensor<T>> {
    if grad_output.len() != indices.argmax.len() {
        return Err(Error::shape(format!(
            "maxpool grad_output has {} elements, expected {}",
            grad_output.len(),
            indices.argmax.len()
        )));
    }
    let mut grad = Tensor::zeros(&indices.input_shape);
    let g = grad.data_mut();
    for (&idx, &go) in indices.argmax.iter().zip(grad_output.data()) {
        g[idx as usize] = g[idx as usize] + go;
    }
    Ok(grad)
}

#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub window: (usize, usize),
    cache: Option<PoolIndices>,
}

impl MaxPool2d {
    pub fn new(window: (usize, usize)) -> Self {
        MaxPool2d { window, cache: None }
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

impl<T: Scalar> Differentiable<T> for MaxPool2d {
    fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (out, idx) = maxpool2d(input, self.window)?;
        self.cache = Some(idx);
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
        let idx = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::invalid("maxpool backward called before forward"))?;
        maxpool2d_backward(grad_output, idx)
    }
}
