use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Differentiable, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor: errors are `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many coordinates per tensor (evenly spread); `None` checks all.
    pub max_coords: Option<usize>,
    /// Seed of the random projection that turns the output into a scalar.
    pub seed: u64,
    /// Also check gradients of the layer's parameters.
    pub parameters: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            floor: 1e-6,
            max_coords: None,
            seed: 0x5eed,
            parameters: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_input_error: f64,
    pub max_param_error: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.max_input_error.max(self.max_param_error)
    }
}

pub(crate) fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub(crate) fn coordinates(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => (0..m).map(|i| i * len / m).collect(),
        _ => (0..len).collect(),
    }
}

fn objective(out: &Tensor<f64>, projection: &[f64]) -> f64 {
    out.data().iter().zip(projection).map(|(a, b)| a * b).sum()
}

/// Compares reverse-mode gradients of `layer` against central finite
/// differences of the scalar objective `sum(forward(x) * r)` for a fixed
/// random `r`.
pub fn gradient_check<L: Differentiable<f64>>(
    layer: &mut L,
    input: &Tensor<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let out = layer.forward(input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let projection: Vec<f64> = (0..out.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grad_out = Tensor::new(out.shape(), projection.clone())?;

    for p in layer.parameters_mut() {
        p.zero_grad();
    }
    let grad_in = layer.backward(&grad_out)?;
    if grad_in.shape() != input.shape() {
        return Err(Error::shape("backward returned a gradient of the wrong shape"));
    }
    let param_grads: Vec<Vec<f64>> = layer
        .parameters()
        .iter()
        .map(|p| p.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    let h = opts.step;
    let mut checked = 0;
    let mut max_input_error: f64 = 0.0;
    let mut probe = input.clone();
    for i in coordinates(input.len(), opts.max_coords) {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = objective(&layer.forward(&probe)?, &projection);
        probe.data_mut()[i] = orig - h;
        let minus = objective(&layer.forward(&probe)?, &projection);
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        max_input_error = max_input_error.max(relative_error(grad_in.data()[i], numeric, opts.floor));
        checked += 1;
    }

    let mut max_param_error: f64 = 0.0;
    if opts.parameters {
        for (pi, analytic) in param_grads.iter().enumerate() {
            for i in coordinates(analytic.len(), opts.max_coords) {
                let orig = layer.parameters()[pi].data()[i];
                layer.parameters_mut()[pi].data_mut()[i] = orig + h;
                let plus = objective(&layer.forward(input)?, &projection);
                layer.parameters_mut()[pi].data_mut()[i] = orig - h;
                let minus = objective(&layer.forward(input)?, &projection);
                layer.parameters_mut()[pi].data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                max_param_error = max_param_error.max(relative_error(analytic[i], numeric, opts.floor));
                checked += 1;
            }
        }
    }

    Ok(GradCheckReport {
        max_input_error,
        max_param_error,
        checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{BatchNorm2d, Conv2d, Linear, MaxPool2d, Relu};

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = rand_tensor(&mut rng, &[1, 6, 6]);
        let mut conv = Conv2d::new(rand_tensor(&mut rng, &[3, 1, 3, 3]), rand_tensor(&mut rng, &[3])).unwrap();
        let report = gradient_check(&mut conv, &input, &GradCheckOptions::default()).unwrap();
        assert!(report.max_error() < 1e-4, "{report:?}");
    }

    #[test]
    fn batchnorm_train_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = rand_tensor(&mut rng, &[4, 2, 3, 3]);
        let mut bn = BatchNorm2d::<f64>::new(2);
        bn.gamma = rand_tensor(&mut rng, &[2]);
        bn.beta = rand_tensor(&mut rng, &[2]);
        let report = gradient_check(&mut bn, &input, &GradCheckOptions::default()).unwrap();
        assert!(report.max_error() < 1e-4, "{report:?}");
    }

    #[test]
    fn relu_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = Tensor::from_fn(&[2, 3, 4], |_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) { v } else { -v }
        });
        let report = gradient_check(&mut Relu::new(), &input, &GradCheckOptions::default()).unwrap();
        assert!(report.max_error() < 1e-6, "{report:?}");
    }

    #[test]
    fn maxpool_and_linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = rand_tensor(&mut rng, &[2, 6, 7]);
        let report = gradient_check(&mut MaxPool2d::new((3, 3)), &input, &GradCheckOptions::default()).unwrap();
        assert!(report.max_error() < 1e-4, "{report:?}");

        let x = rand_tensor(&mut rng, &[3, 5]);
        let mut fc = Linear::new(rand_tensor(&mut rng, &[2, 5]), rand_tensor(&mut rng, &[2])).unwrap();
        let report = gradient_check(&mut fc, &x, &GradCheckOptions::default()).unwrap();
        assert!(report.max_error() < 1e-4, "{report:?}");
    }
}
