//! The two decoding networks (movement intent and reaction time), their
//! optimiser, training loop and checkpoint format.
//!
//! Both networks share one block structure:
//!
//! ```text
//! [B, 1, 128, 125]
//!   -> { conv (valid) -> ReLU -> BatchNorm -> MaxPool (stride = window) } x blocks
//!   -> flatten -> fully connected -> softmax over 2 classes
//! ```
//!
//! ReLU comes *before* batch normalisation.

mod adam;
mod block;
mod checkpoint;
mod train;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use checkpoint::{load_checkpoint, load_checkpoint_as, save_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{train, TrainConfig, TrainHistory};

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use block::{block_backward, block_forward, BlockState, Scratch};

use crate::error::{Error, Result};
use crate::tensor::gradcheck::{coordinates, relative_error};
use crate::tensor::{
    batchnorm2d, conv2d, cross_entropy, linear, linear_backward, maxpool2d, softmax,
    softmax_cross_entropy_grad, BnMode, Conv2d, GradCheckOptions, GradCheckReport, Linear, RunningStats, Scalar,
    Tensor,
};
use crate::tensor::BatchNorm2d;

/// EEG channels per trial.
pub const INPUT_CHANNELS: usize = 128;
/// Samples per trial after downsampling (0.5 s at 250 Hz).
pub const INPUT_SAMPLES: usize = 125;
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Three 5x5 blocks (32/64/128 channels, 3x3 pooling).
    Intent,
    /// Four 3x5 blocks (32/64/128/256 channels, 2x2 pooling).
    Rt,
}

impl Architecture {
    pub fn id(self) -> u32 {
        match self {
            Architecture::Intent => 1,
            Architecture::Rt => 2,
        }
    }

    pub fn from_id(id: u32) -> Option<Self> {
        match id {
            1 => Some(Architecture::Intent),
            2 => Some(Architecture::Rt),
            _ => None,
        }
    }

    pub fn kernel(self) -> (usize, usize) {
        match self {
            Architecture::Intent => (5, 5),
            Architecture::Rt => (3, 5),
        }
    }

    pub fn pool(self) -> (usize, usize) {
        match self {
            Architecture::Intent => (3, 3),
            Architecture::Rt => (2, 2),
        }
    }

    pub fn channels(self) -> &'static [usize] {
        match self {
            Architecture::Intent => &[32, 64, 128],
            Architecture::Rt => &[32, 64, 128, 256],
        }
    }

    /// Shape `[C, H, W]` after the last pooling stage.
    pub fn feature_shape(self) -> [usize; 3] {
        let (kh, kw) = self.kernel();
        let (ph, pw) = self.pool();
        let (mut h, mut w) = (INPUT_CHANNELS, INPUT_SAMPLES);
        for _ in self.channels() {
            h = (h - kh + 1) / ph;
            w = (w - kw + 1) / pw;
        }
        [*self.channels().last().unwrap(), h, w]
    }

    pub fn fc_inputs(self) -> usize {
        self.feature_shape().iter().product()
    }

    /// Trainable parameter count (running statistics excluded).
    pub fn parameter_count(self) -> usize {
        let (kh, kw) = self.kernel();
        let mut c_in = 1;
        let mut total = 0;
        for &c in self.channels() {
            total += c * c_in * kh * kw + c; // kernels + bias
            total += 2 * c; // gamma + beta
            c_in = c;
        }
        total + NUM_CLASSES * self.fc_inputs() + NUM_CLASSES
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Intent => "intent",
            Architecture::Rt => "rt",
        })
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intent" => Ok(Architecture::Intent),
            "rt" => Ok(Architecture::Rt),
            other => Err(Error::invalid(format!("unknown architecture `{other}` (expected intent or rt)"))),
        }
    }
}

/// One row of an architecture table: layer label and per-sample output shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRow {
    pub layer: String,
    pub output: Vec<usize>,
}

impl LayerRow {
    /// Shape rendered as `32 x 124 x 121`.
    pub fn shape_string(&self) -> String {
        self.output.iter().map(usize::to_string).collect::<Vec<_>>().join(" x ")
    }
}

/// conv -> ReLU -> BatchNorm -> MaxPool.
#[derive(Debug, Clone)]
pub struct ConvBlock<T: Scalar> {
    pub conv: Conv2d<T>,
    pub norm: BatchNorm2d<T>,
    pub pool: (usize, usize),
}

/// Reusable activation buffers for eval-mode passes.
#[derive(Debug, Default)]
pub(crate) struct EvalWorkspace<T> {
    states: Vec<BlockState<T>>,
    scratch: Scratch<T>,
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Hyperparameters recorded alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkMeta {
    pub init: String,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

/// Per-trial prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probabilities: [f64; NUM_CLASSES],
}

/// A convolutional classifier with parameters and batch-norm state.
#[derive(Debug, Clone)]
pub struct Network<T: Scalar> {
    pub arch: Architecture,
    pub seed: u64,
    pub meta: NetworkMeta,
    pub blocks: Vec<ConvBlock<T>>,
    pub fc: Linear<T>,
    states: Vec<BlockState<T>>,
    scratch: Scratch<T>,
    input_buf: Vec<T>,
    spare: Vec<T>,
    fc_input: Option<Tensor<T>>,
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..bound)))
}

pub const INIT_SCHEME: &str = "uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), weights and biases";

impl<T: Scalar> Network<T> {
    /// Builds an architecture with seeded fan-in scaled uniform initialisation.
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (kh, kw) = arch.kernel();
        let mut c_in = 1;
        let mut blocks = Vec::new();
        for &c in arch.channels() {
            let bound = 1.0 / ((c_in * kh * kw) as f64).sqrt();
            let kernels = uniform(&mut rng, &[c, c_in, kh, kw], bound);
            let bias = uniform(&mut rng, &[c], bound);
            let mut conv = Conv2d::new(kernels, bias).expect("block shapes are consistent");
            conv.input_grad = !blocks.is_empty();
            blocks.push(ConvBlock {
                conv,
                norm: BatchNorm2d::new(c),
                pool: arch.pool(),
            });
            c_in = c;
        }
        let fan_in = arch.fc_inputs();
        let bound = 1.0 / (fan_in as f64).sqrt();
        let fc = Linear::new(
            uniform(&mut rng, &[NUM_CLASSES, fan_in], bound),
            uniform(&mut rng, &[NUM_CLASSES], bound),
        )
        .expect("fc shapes are consistent");
        let meta = NetworkMeta {
            init: INIT_SCHEME.to_string(),
            bn_epsilon: blocks[0].norm.eps,
            bn_momentum: blocks[0].norm.momentum,
            train: None,
        };
        Network {
            arch,
            seed,
            meta,
            blocks,
            fc,
            states: Vec::new(),
            scratch: Scratch::default(),
            input_buf: Vec::new(),
            spare: Vec::new(),
            fc_input: None,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    /// Trainable tensors in a fixed order: per block kernels, bias, gamma,
    /// beta; then fc weight and bias.
    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([&b.conv.kernels, &b.conv.bias, &b.norm.gamma, &b.norm.beta]);
        }
        out.extend([&self.fc.weight, &self.fc.bias]);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.conv.kernels);
            out.push(&mut b.conv.bias);
            out.push(&mut b.norm.gamma);
            out.push(&mut b.norm.beta);
        }
        out.push(&mut self.fc.weight);
        out.push(&mut self.fc.bias);
        out
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 1..=self.blocks.len() {
            for p in ["kernels", "bias", "gamma", "beta"] {
                out.push(format!("block{i}.{p}"));
            }
        }
        out.extend(["fc.weight".to_string(), "fc.bias".to_string()]);
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    pub fn running_stats(&self) -> Vec<&RunningStats<T>> {
        self.blocks.iter().map(|b| &b.norm.stats).collect()
    }

    fn check_input(input: &Tensor<T>) -> Result<usize> {
        match *input.shape() {
            [b, 1, INPUT_CHANNELS, INPUT_SAMPLES] if b > 0 => Ok(b),
            ref s => Err(Error::shape(format!(
                "network input must be [B,1,{INPUT_CHANNELS},{INPUT_SAMPLES}] with B >= 1, got {s:?}"
            ))),
        }
    }

    /// Training-mode forward pass; caches activations for [`Network::backward`].
    pub fn forward_train(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = Self::check_input(input)?;
        self.fc_input = None;
        self.input_buf.clear();
        self.input_buf.extend_from_slice(input.data());
        self.states.resize_with(self.blocks.len(), Default::default);
        let mut shape = [batch, 1, INPUT_CHANNELS, INPUT_SAMPLES];
        for i in 0..self.blocks.len() {
            let (prev, rest) = self.states.split_at_mut(i);
            let x: &[T] = if i == 0 { &self.input_buf } else { &prev[i - 1].pooled };
            let block = &mut self.blocks[i];
            let mut running = block.norm.stats.clone();
            block_forward(block, &mut running, BnMode::Train, x, shape, &mut rest[0], &mut self.scratch)?;
            block.norm.stats = running;
            let (hp, wp) = rest[0].pooled_hw;
            shape = [batch, block.conv.out_channels(), hp, wp];
        }
        let last = &self.states[self.blocks.len() - 1].pooled;
        let flat = Tensor::new(&[batch, self.arch.fc_inputs()], last.clone())?;
        let logits = linear(&flat, &self.fc.weight, &self.fc.bias)?;
        self.fc_input = Some(flat);
        Ok(logits)
    }

    /// Backpropagates d(loss)/d(logits) and accumulates parameter gradients.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<()> {
        let flat = self
            .fc_input
            .take()
            .ok_or_else(|| Error::invalid("backward called without a preceding forward_train"))?;
        let fc = linear_backward(&flat, &self.fc.weight, grad_logits)?;
        add_into(self.fc.weight.grad_mut(), fc.weight.data());
        add_into(self.fc.bias.grad_mut(), fc.bias.data());
        let mut grad = fc.input.into_data();
        let mut spare = std::mem::take(&mut self.spare);
        for i in (0..self.blocks.len()).rev() {
            let (prev, rest) = self.states.split_at_mut(i);
            let x: &[T] = if i == 0 { &self.input_buf } else { &prev[i - 1].pooled };
            let g_input = if i > 0 {
                spare.resize(prev[i - 1].pooled.len(), T::zero());
                Some(&mut spare[..])
            } else {
                None
            };
            block_backward(&mut self.blocks[i], x, &mut rest[0], &grad, g_input, &mut self.scratch)?;
            if i > 0 {
                std::mem::swap(&mut grad, &mut spare);
            }
        }
        self.spare = spare;
        Ok(())
    }

    /// Inference-mode logits using running statistics. Does not mutate the network.
    pub fn forward_eval(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_eval_with(input, &mut EvalWorkspace::default())
    }

    pub(crate) fn forward_eval_with(&self, input: &Tensor<T>, ws: &mut EvalWorkspace<T>) -> Result<Tensor<T>> {
        let batch = Self::check_input(input)?;
        ws.states.resize_with(self.blocks.len(), Default::default);
        let mut shape = [batch, 1, INPUT_CHANNELS, INPUT_SAMPLES];
        for (i, block) in self.blocks.iter().enumerate() {
            let (prev, rest) = ws.states.split_at_mut(i);
            let x: &[T] = if i == 0 { input.data() } else { &prev[i - 1].pooled };
            let mut running = block.norm.stats.clone();
            block_forward(block, &mut running, BnMode::Eval, x, shape, &mut rest[0], &mut ws.scratch)?;
            let (hp, wp) = rest[0].pooled_hw;
            shape = [batch, block.conv.out_channels(), hp, wp];
        }
        let last = &ws.states[self.blocks.len() - 1].pooled;
        let flat = Tensor::new(&[batch, self.arch.fc_inputs()], last.clone())?;
        linear(&flat, &self.fc.weight, &self.fc.bias)
    }

    /// Layer-by-layer eval pass built from the standalone tensor ops.
    fn forward_eval_traced(&self, input: &Tensor<T>, mut trace: Option<&mut Vec<LayerRow>>) -> Result<Tensor<T>> {
        let batch = Self::check_input(input)?;
        let (kh, kw) = self.arch.kernel();
        let (ph, pw) = self.arch.pool();
        let mut x = input.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            let mut stats = block.norm.stats.clone();
            let mut z = conv2d(&x, &block.conv.kernels, &block.conv.bias)?;
            let row = |name: String, t: &Tensor<T>| LayerRow {
                layer: name,
                output: t.shape()[1..].to_vec(),
            };
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(row(format!("Conv{} ({kh}x{kw})", i + 1), &z));
            }
            for v in z.data_mut() {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
            let (normed, _) = batchnorm2d(&z, &block.norm.gamma, &block.norm.beta, &mut stats, BnMode::Eval, block.norm.eps, block.norm.momentum)?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(row("ReLU + BatchNorm".into(), &normed));
            }
            let (pooled, _) = maxpool2d(&normed, block.pool)?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(row(format!("MaxPool ({ph}x{pw})"), &pooled));
            }
            x = pooled;
        }
        let flat = x.reshape(&[batch, self.arch.fc_inputs()])?;
        let logits = linear(&flat, &self.fc.weight, &self.fc.bias)?;
        if let Some(tr) = trace {
            tr.push(LayerRow {
                layer: "Fully Connected".into(),
                output: vec![1, NUM_CLASSES],
            });
            let probs = softmax(&logits)?;
            tr.push(LayerRow {
                layer: "Softmax".into(),
                output: vec![1, probs.shape()[1]],
            });
        }
        Ok(logits)
    }

    /// Runs one sample through the network and records every layer's output shape.
    pub fn layer_table(&self, sample: &Tensor<T>) -> Result<Vec<LayerRow>> {
        let mut rows = Vec::new();
        self.forward_eval_traced(sample, Some(&mut rows))?;
        Ok(rows)
    }

    /// Class probabilities in eval mode.
    pub fn predict_batch(&self, input: &Tensor<T>) -> Result<Vec<Prediction>> {
        self.predict_with(input, &mut EvalWorkspace::default())
    }

    fn predict_with(&self, input: &Tensor<T>, ws: &mut EvalWorkspace<T>) -> Result<Vec<Prediction>> {
        let probs = softmax(&self.forward_eval_with(input, ws)?)?;
        Ok(probs
            .data()
            .chunks_exact(NUM_CLASSES)
            .map(|row| {
                let p = [row[0].as_f64(), row[1].as_f64()];
                Prediction {
                    class: if p[1] > p[0] { 1 } else { 0 },
                    probabilities: p,
                }
            })
            .collect())
    }

    /// Predicts a list of `128 x 125` trials, `batch` at a time.
    pub fn predict(&self, trials: &[&[f32]], batch: usize) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(trials.len());
        let mut ws = EvalWorkspace::default();
        for chunk in trials.chunks(batch.max(1)) {
            out.extend(self.predict_with(&stack_trials(chunk)?, &mut ws)?);
        }
        Ok(out)
    }

    /// Training-mode loss for a batch (updates batch-norm running statistics).
    pub fn loss(&mut self, input: &Tensor<T>, labels: &[usize]) -> Result<T> {
        let logits = self.forward_train(input)?;
        self.fc_input = None;
        cross_entropy(&softmax(&logits)?, labels)
    }

    /// Forward, loss and backward for one minibatch; returns the batch loss.
    pub fn loss_and_backward(&mut self, input: &Tensor<T>, labels: &[usize]) -> Result<T> {
        let logits = self.forward_train(input)?;
        let probs = softmax(&logits)?;
        let loss = cross_entropy(&probs, labels)?;
        let grad = softmax_cross_entropy_grad(&probs, labels)?;
        self.backward(&grad)?;
        Ok(loss)
    }

    pub(crate) fn drop_caches(&mut self) {
        self.states = Vec::new();
        self.scratch = Scratch::default();
        self.input_buf = Vec::new();
        self.spare = Vec::new();
        self.fc_input = None;
    }

    /// Converts all parameters and running statistics to another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let mut net = Network::<U>::new(self.arch, self.seed);
        net.meta = self.meta.clone();
        for (dst, src) in net.parameters_mut().into_iter().zip(self.parameters()) {
            *dst = src.cast();
        }
        for (dst, src) in net.blocks.iter_mut().zip(&self.blocks) {
            dst.norm.stats = RunningStats {
                mean: src.norm.stats.mean.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                var: src.norm.stats.var.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                initialized: src.norm.stats.initialized,
            };
        }
        net
    }
}

/// Stacks `128 x 125` trials into a `[B,1,128,125]` tensor.
pub fn stack_trials<T: Scalar>(trials: &[&[f32]]) -> Result<Tensor<T>> {
    let per = INPUT_CHANNELS * INPUT_SAMPLES;
    let mut data = Vec::with_capacity(trials.len() * per);
    for (i, t) in trials.iter().enumerate() {
        if t.len() != per {
            return Err(Error::shape(format!(
                "trial {i} has {} values, expected {INPUT_CHANNELS} x {INPUT_SAMPLES}",
                t.len()
            )));
        }
        data.extend(t.iter().map(|&v| T::from_f64(v as f64)));
    }
    Tensor::new(&[trials.len(), 1, INPUT_CHANNELS, INPUT_SAMPLES], data)
}

/// Finite-difference check of the training loss gradient with respect to
/// the network parameters, sampling `opts.max_coords` entries per tensor.
pub fn loss_gradient_check(
    net: &mut Network<f64>,
    input: &Tensor<f64>,
    labels: &[usize],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    net.zero_grad();
    net.loss_and_backward(input, labels)?;
    let analytic: Vec<Vec<f64>> = net
        .parameters()
        .iter()
        .map(|p| p.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    let h = opts.step;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (pi, grads) in analytic.iter().enumerate() {
        for i in coordinates(grads.len(), opts.max_coords) {
            let orig = net.parameters()[pi].data()[i];
            net.parameters_mut()[pi].data_mut()[i] = orig + h;
            let plus = net.loss(input, labels)?;
            net.parameters_mut()[pi].data_mut()[i] = orig - h;
            let minus = net.loss(input, labels)?;
            net.parameters_mut()[pi].data_mut()[i] = orig;
            worst = worst.max(relative_error(grads[i], (plus - minus) / (2.0 * h), opts.floor));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_input_error: 0.0,
        max_param_error: worst,
        checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_parameter_counts() {
        // conv 832 + 51,264 + 204,928; batchnorm 448; fc 1,026
        assert_eq!(Architecture::Intent.parameter_count(), 258_498);
        assert_eq!(Network::<f32>::new(Architecture::Intent, 0).parameter_count(), 258_498);
        // conv 512 + 30,784 + 123,008 + 491,776; batchnorm 960; fc 12,290
        assert_eq!(Architecture::Rt.parameter_count(), 659_330);
        assert_eq!(Network::<f32>::new(Architecture::Rt, 0).parameter_count(), 659_330);
    }

    #[test]
    fn feature_shapes() {
        assert_eq!(Architecture::Intent.feature_shape(), [128, 2, 2]);
        assert_eq!(Architecture::Intent.fc_inputs(), 512);
        assert_eq!(Architecture::Rt.feature_shape(), [256, 6, 4]);
        assert_eq!(Architecture::Rt.fc_inputs(), 6144);
    }

    #[test]
    fn intent_forward_gives_two_logits() {
        let net = Network::<f32>::new(Architecture::Intent, 1);
        let x = Tensor::<f32>::zeros(&[1, 1, 128, 125]);
        assert_eq!(net.forward_eval(&x).unwrap().shape(), &[1, 2]);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let net = Network::<f32>::new(Architecture::Intent, 1);
        assert!(net.forward_eval(&Tensor::zeros(&[1, 1, 128, 124])).is_err());
        assert!(stack_trials::<f32>(&[&[0.0; 10]]).is_err());
    }

    #[test]
    fn initialisation_is_seeded() {
        let a = Network::<f32>::new(Architecture::Rt, 9);
        let b = Network::<f32>::new(Architecture::Rt, 9);
        let c = Network::<f32>::new(Architecture::Rt, 10);
        assert_eq!(a.fc.weight, b.fc.weight);
        assert_ne!(a.fc.weight, c.fc.weight);
    }

    #[test]
    fn logits_to_probability() {
        let logits = Tensor::<f64>::new(&[1, 2], vec![2.0, -1.0]).unwrap();
        let p = softmax(&logits).unwrap();
        let want = 1.0 / (1.0 + (-3.0f64).exp());
        assert!((p.data()[0] - want).abs() < 1e-12);
        assert!((want - 0.9526).abs() < 1e-4);
    }

    fn normalise(label: &str) -> String {
        label.chars().filter(|c| !c.is_whitespace()).collect()
    }

    fn check_table(arch: Architecture, expected: &[(&str, &[usize])]) {
        let net = Network::<f32>::new(arch, 0);
        let rows = net.layer_table(&Tensor::zeros(&[1, 1, 128, 125])).unwrap();
        assert_eq!(rows.len(), expected.len());
        for (row, (label, shape)) in rows.iter().zip(expected) {
            assert_eq!(normalise(&row.layer), normalise(label));
            assert_eq!(row.output, *shape, "{}", row.layer);
        }
    }

    #[test]
    fn intent_layer_table() {
        check_table(
            Architecture::Intent,
            &[
                ("Conv1 (5x5)", &[32, 124, 121]),
                ("ReLU + BatchNorm", &[32, 124, 121]),
                ("MaxPool (3x3)", &[32, 41, 40]),
                ("Conv2 (5x5)", &[64, 37, 36]),
                ("ReLU + BatchNorm", &[64, 37, 36]),
                ("MaxPool (3x3)", &[64, 12, 12]),
                ("Conv3 (5x5)", &[128, 8, 8]),
                ("ReLU + BatchNorm", &[128, 8, 8]),
                ("MaxPool (3x3)", &[128, 2, 2]),
                ("Fully Connected", &[1, 2]),
                ("Softmax", &[1, 2]),
            ],
        );
    }

    #[test]
    fn rt_layer_table() {
        check_table(
            Architecture::Rt,
            &[
                ("Conv1 (3x5)", &[32, 126, 121]),
                ("ReLU + BatchNorm", &[32, 126, 121]),
                ("MaxPool (2x2)", &[32, 63, 60]),
                ("Conv2 (3x5)", &[64, 61, 56]),
                ("ReLU + BatchNorm", &[64, 61, 56]),
                ("MaxPool (2x2)", &[64, 30, 28]),
                ("Conv3 (3x5)", &[128, 28, 24]),
                ("ReLU + BatchNorm", &[128, 28, 24]),
                ("MaxPool (2x2)", &[128, 14, 12]),
                ("Conv4 (3x5)", &[256, 12, 8]),
                ("ReLU + BatchNorm", &[256, 12, 8]),
                ("MaxPool (2x2)", &[256, 6, 4]),
                ("Fully Connected", &[1, 2]),
                ("Softmax", &[1, 2]),
            ],
        );
    }

    #[test]
    fn fused_eval_matches_layer_by_layer_eval() {
        let mut net = Network::<f64>::new(Architecture::Rt, 3);
        for (i, b) in net.blocks.iter_mut().enumerate() {
            let c = b.norm.channels();
            b.norm.gamma = Tensor::from_fn(&[c], |j| if (i + j) % 4 == 0 { -0.5 } else { 1.0 + j as f64 * 0.01 });
            b.norm.stats.mean = (0..c).map(|j| 0.1 * j as f64 / c as f64).collect();
        }
        let x = Tensor::from_fn(&[2, 1, 128, 125], |j| ((j * 37 % 101) as f64 / 50.0) - 1.0);
        let fused = net.forward_eval(&x).unwrap();
        let mut reference = Vec::new();
        for s in 0..2 {
            let one = Tensor::new(&[1, 1, 128, 125], x.data()[s * 16000..(s + 1) * 16000].to_vec()).unwrap();
            reference.extend_from_slice(net.forward_eval_traced(&one, None).unwrap().data());
        }
        for (a, b) in fused.data().iter().zip(&reference) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    fn random_trials(n: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..INPUT_CHANNELS * INPUT_SAMPLES).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn full_network_loss_gradient() {
        let mut net = Network::<f64>::new(Architecture::Intent, 5);
        let trials = random_trials(2, 6);
        let refs: Vec<&[f32]> = trials.iter().map(Vec::as_slice).collect();
        let x = stack_trials::<f64>(&refs).unwrap();
        let opts = GradCheckOptions {
            max_coords: Some(6),
            step: 1e-6,
            ..Default::default()
        };
        let report = loss_gradient_check(&mut net, &x, &[0, 1], &opts).unwrap();
        assert!(report.max_error() < 1e-3, "{report:?}");
        assert!(report.checked >= 6 * 13);
    }

    /// Inputs whose class is carried by the sign of a broad offset.
    fn separable_set(n: usize, seed: u64) -> (Vec<Vec<f32>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let offset = if y == 1 { 0.8 } else { -0.8 };
            xs.push(
                (0..INPUT_CHANNELS * INPUT_SAMPLES)
                    .map(|j| {
                        let in_band = (40..80).contains(&(j / INPUT_SAMPLES));
                        rng.random_range(-1.0..1.0) + if in_band { offset } else { 0.0 }
                    })
                    .collect(),
            );
            ys.push(y);
        }
        (xs, ys)
    }

    fn accuracy(preds: &[Prediction], labels: &[usize]) -> f64 {
        preds.iter().zip(labels).filter(|(p, &y)| p.class == y).count() as f64 / labels.len() as f64
    }

    #[test]
    fn learns_a_separable_set() {
        let (xs, ys) = separable_set(128, 1);
        let refs: Vec<&[f32]> = xs.iter().map(Vec::as_slice).collect();
        let mut net = Network::<f32>::new(Architecture::Intent, 2);
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 32,
            validation_fraction: 0.0,
            ..Default::default()
        };
        let history = train(&mut net, &refs, &ys, &cfg).unwrap();
        let acc = accuracy(&net.predict(&refs, 64).unwrap(), &ys);
        assert!(acc >= 0.95, "train accuracy {acc}, losses {:?}", history.train_loss);
        let losses = &history.train_loss;
        assert!(losses.last().unwrap() < &losses[0]);
        // non-increasing up to small transient upticks
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] * 1.05 + 1e-3, "{losses:?}");
        }
    }

    #[test]
    fn untrained_network_is_at_chance() {
        let xs = random_trials(200, 3);
        let ys: Vec<usize> = (0..200).map(|i| i % 2).collect();
        let refs: Vec<&[f32]> = xs.iter().map(Vec::as_slice).collect();
        let mut hits = 0.0;
        for seed in 0..5 {
            let net = Network::<f32>::new(Architecture::Intent, seed);
            hits += accuracy(&net.predict(&refs, 100).unwrap(), &ys);
        }
        let acc = hits / 5.0;
        assert!((acc - 0.5).abs() <= 0.1, "accuracy {acc}");
    }

    #[test]
    fn training_is_deterministic() {
        let (xs, ys) = separable_set(40, 4);
        let refs: Vec<&[f32]> = xs.iter().map(Vec::as_slice).collect();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            seed: 9,
            ..Default::default()
        };
        let mut a = Network::<f32>::new(Architecture::Intent, 1);
        let mut b = Network::<f32>::new(Architecture::Intent, 1);
        let ha = train(&mut a, &refs, &ys, &cfg).unwrap();
        let hb = train(&mut b, &refs, &ys, &cfg).unwrap();
        assert_eq!(ha, hb);
        let bits = |h: &TrainHistory| h.train_loss.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&ha), bits(&hb));
        for (pa, pb) in a.parameters().iter().zip(b.parameters()) {
            assert_eq!(pa.data(), pb.data());
        }
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let (xs, ys) = separable_set(24, 5);
        let refs: Vec<&[f32]> = xs.iter().map(Vec::as_slice).collect();
        let mut net = Network::<f32>::new(Architecture::Intent, 1);
        let before: Vec<Tensor<f32>> = net.parameters().into_iter().cloned().collect();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            batch_size: 24,
            validation_fraction: 0.0,
            ..Default::default()
        };
        let history = train(&mut net, &refs, &ys, &cfg).unwrap();
        for (p, q) in net.parameters().iter().zip(&before) {
            assert_eq!(p.data(), q.data());
        }
        assert_ne!(net.blocks[0].norm.stats.mean, vec![0.0; 32]);
        let spread = history.train_loss.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - history.train_loss.iter().cloned().fold(f64::INFINITY, f64::min);
        // full batches: epochs differ only in summation order
        assert!(spread < 1e-4, "{:?}", history.train_loss);
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let mut net = Network::<f32>::new(Architecture::Intent, 1);
        let err = train(&mut net, &[], &[], &TrainConfig::default()).unwrap_err();
        assert_eq!(err.kind(), "empty");
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let (xs, ys) = separable_set(16, 6);
        let refs: Vec<&[f32]> = xs.iter().map(Vec::as_slice).collect();
        let mut net = Network::<f32>::new(Architecture::Intent, 4);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            validation_fraction: 0.0,
            ..Default::default()
        };
        train(&mut net, &refs, &ys, &cfg).unwrap();
        save_checkpoint(&net, &path).unwrap();
        let loaded: Network<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.meta, net.meta);
        for (a, b) in loaded.parameters().iter().zip(net.parameters()) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(loaded.running_stats(), net.running_stats());
        let before = net.predict(&refs, 8).unwrap();
        let after = loaded.predict(&refs, 8).unwrap();
        for (p, q) in before.iter().zip(&after) {
            assert_eq!(p.probabilities[0].to_bits(), q.probabilities[0].to_bits());
        }
        let first = std::fs::read(&path).unwrap();
        save_checkpoint(&loaded, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn truncated_checkpoint_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&Network::<f32>::new(Architecture::Intent, 0), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err();
        assert_eq!(err.kind(), "checksum");
    }

    #[test]
    fn architecture_mismatch_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&Network::<f32>::new(Architecture::Intent, 0), &path).unwrap();
        let err = load_checkpoint_as::<f32>(&path, Architecture::Rt).unwrap_err();
        assert_eq!(err.kind(), "architecture_mismatch");
        assert!(err.to_string().contains("intent"), "{err}");
    }
}
