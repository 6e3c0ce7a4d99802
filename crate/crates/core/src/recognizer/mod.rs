//! Convolutional-recurrent CTC line recognizer.
//!
//! A VGG-style stack of conv blocks reduces a `[N, C, H, W]` line image to a
//! `[T, N, F]` feature sequence with `T = W / width_factor`. Parallel
//! bidirectional LSTM branches run on the sequence resampled to different
//! time scales; their outputs are brought back to `T` frames and summed, fed
//! to a final BiLSTM, and mapped to class log-probabilities by a 1-D conv.

mod checkpoint;

pub use checkpoint::{Checkpoint, CheckpointError, FORMAT_VERSION, MAGIC};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctc::{best_path_decode, ctc_loss_grad, Alphabet, CtcError, LabelSequence};
use crate::numerics::{NumericsError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum RecognizerError {
    #[error("invalid recognizer config: {0}")]
    Config(String),

    #[error("input width {width} is not a multiple of {multiple}; pad lines to a multiple of {multiple}")]
    Padding { width: usize, multiple: usize },

    #[error("bad input: {0}")]
    Input(String),

    #[error(transparent)]
    Numerics(#[from] NumericsError),

    #[error(transparent)]
    Ctc(#[from] CtcError),
}

pub type Result<T, E = RecognizerError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub channels: usize,
    pub layers: usize,
    /// Max-pool window and stride as (height, width), applied after the
    /// block's conv layers.
    pub pool: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecognizerConfig {
    pub input_channels: usize,
    pub input_height: usize,
    pub conv_blocks: Vec<ConvBlock>,
    /// Square kernel of every conv layer except the last one.
    pub conv_kernel: usize,
    /// Kernel height of the last conv layer; must equal the feature height
    /// reaching it so the output height is 1.
    pub collapse_kernel_height: usize,
    pub recurrent_hidden: usize,
    pub branch_scales: Vec<f64>,
    pub final_conv_kernel: usize,
    pub alphabet: Alphabet,
}

impl RecognizerConfig {
    /// Full-size network: four blocks of 64/128/256/512 channels.
    pub fn paper() -> Self {
        let block = |channels, pool| ConvBlock { channels, layers: 2, pool };
        RecognizerConfig {
            input_channels: 1,
            input_height: 40,
            conv_blocks: vec![block(64, Some((2, 2))), block(128, Some((2, 2))), block(256, Some((2, 1))), block(512, None)],
            conv_kernel: 3,
            collapse_kernel_height: 5,
            recurrent_hidden: 256,
            branch_scales: vec![1.0, 0.5, 0.25],
            final_conv_kernel: 3,
            alphabet: Alphabet::latin(),
        }
    }

    /// Small network trainable on a single CPU core.
    pub fn desk() -> Self {
        RecognizerConfig {
            input_channels: 1,
            input_height: 40,
            conv_blocks: vec![
                ConvBlock { channels: 16, layers: 1, pool: Some((2, 2)) },
                ConvBlock { channels: 32, layers: 1, pool: Some((1, 2)) },
            ],
            conv_kernel: 3,
            collapse_kernel_height: 20,
            recurrent_hidden: 48,
            branch_scales: vec![1.0, 0.5],
            final_conv_kernel: 3,
            alphabet: Alphabet::latin(),
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(RecognizerError::Config(m));
        if self.input_channels == 0 || self.input_height == 0 {
            return err("input channels and height must be positive".into());
        }
        if self.conv_blocks.is_empty() {
            return err("at least one conv block is required".into());
        }
        if self.conv_kernel % 2 == 0 || self.final_conv_kernel % 2 == 0 {
            return err("conv kernels must be odd for same-padding".into());
        }
        if self.recurrent_hidden == 0 {
            return err("recurrent_hidden must be positive".into());
        }
        let mut h = self.input_height;
        let last = self.conv_blocks.len() - 1;
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.channels == 0 || b.layers == 0 {
                return err(format!("block {i} needs positive channels and layers"));
            }
            if i == last {
                if h != self.collapse_kernel_height {
                    return err(format!(
                        "height math: pooled height reaching the last conv is {h}, but collapse_kernel_height is {}",
                        self.collapse_kernel_height
                    ));
                }
                h = 1;
            }
            if let Some((ph, pw)) = b.pool {
                if ph == 0 || pw == 0 {
                    return err(format!("block {i} pool must be positive"));
                }
                if h % ph != 0 {
                    return err(format!("height math: block {i} pool height {ph} does not divide height {h}"));
                }
                h /= ph;
            }
        }
        if self.branch_scales.is_empty() {
            return err("at least one branch scale is required".into());
        }
        for (i, &s) in self.branch_scales.iter().enumerate() {
            if ![1.0, 0.5, 0.25].contains(&s) {
                return err(format!("branch scale {s} not in {{1, 0.5, 0.25}}"));
            }
            if self.branch_scales[..i].contains(&s) {
                return err(format!("duplicate branch scale {s}"));
            }
        }
        Ok(())
    }

    /// Product of the width pool strides.
    pub fn width_factor(&self) -> usize {
        self.conv_blocks.iter().filter_map(|b| b.pool).map(|(_, pw)| pw).product()
    }

    /// Input widths must be multiples of this.
    pub fn width_multiple(&self) -> usize {
        let denom = self.branch_scales.iter().map(|&s| (1.0 / s).round() as usize).max().unwrap_or(1);
        self.width_factor() * denom
    }

    pub fn output_len(&self, width: usize) -> usize {
        width / self.width_factor()
    }

    pub fn class_count(&self) -> usize {
        self.alphabet.class_count()
    }

    /// Heights entering each block, then the final height (always 1).
    pub fn height_path(&self) -> Vec<usize> {
        let mut path = vec![self.input_height];
        let mut h = self.input_height;
        let last = self.conv_blocks.len() - 1;
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if i == last {
                h = 1;
            }
            if let Some((ph, _)) = b.pool {
                h /= ph;
            }
            path.push(h);
        }
        path
    }

    /// Names, shapes and initializers of every parameter, in canonical order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let k = self.conv_kernel;
        let mut c_in = self.input_channels;
        let last_block = self.conv_blocks.len() - 1;
        for (bi, b) in self.conv_blocks.iter().enumerate() {
            for li in 0..b.layers {
                let kh = if bi == last_block && li == b.layers - 1 { self.collapse_kernel_height } else { k };
                let fan = kh * k;
                specs.push(ParamSpec {
                    name: format!("cnn.{bi}.{li}.weight"),
                    shape: vec![b.channels, c_in, kh, k],
                    init: Init::Uniform { fan_in: c_in * fan, fan_out: b.channels * fan },
                });
                specs.push(ParamSpec { name: format!("cnn.{bi}.{li}.bias"), shape: vec![b.channels], init: Init::Zeros });
                c_in = b.channels;
            }
        }
        let h = self.recurrent_hidden;
        for si in 0..self.branch_scales.len() {
            lstm_specs(&mut specs, &format!("branch.{si}.0"), c_in, h);
            lstm_specs(&mut specs, &format!("branch.{si}.1"), 2 * h, h);
        }
        lstm_specs(&mut specs, "final", 2 * h, h);
        let kc = self.class_count();
        let kw = self.final_conv_kernel;
        specs.push(ParamSpec {
            name: "output.weight".into(),
            shape: vec![kc, 2 * h, 1, kw],
            init: Init::Uniform { fan_in: 2 * h * kw, fan_out: kc * kw },
        });
        specs.push(ParamSpec { name: "output.bias".into(), shape: vec![kc], init: Init::Zeros });
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }
}

fn lstm_specs(specs: &mut Vec<ParamSpec>, prefix: &str, input: usize, h: usize) {
    for dir in ["fwd", "bwd"] {
        specs.push(ParamSpec {
            name: format!("{prefix}.{dir}.w_ih"),
            shape: vec![4 * h, input],
            init: Init::Uniform { fan_in: input, fan_out: 4 * h },
        });
        specs.push(ParamSpec {
            name: format!("{prefix}.{dir}.w_hh"),
            shape: vec![4 * h, h],
            init: Init::Uniform { fan_in: h, fan_out: 4 * h },
        });
        specs.push(ParamSpec { name: format!("{prefix}.{dir}.bias"), shape: vec![4 * h], init: Init::ForgetBias });
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    Uniform { fan_in: usize, fan_out: usize },
    Zeros,
    /// Zero except the forget-gate quarter, which is 1.
    ForgetBias,
}

impl ParamSpec {
    fn initialize(&self, rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = self.shape.iter().product();
        let data = match self.init {
            Init::Uniform { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-a..=a)).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::ForgetBias => {
                let h = n / 4;
                (0..n).map(|i| if (h..2 * h).contains(&i) { 1.0 } else { 0.0 }).collect()
            }
        };
        Tensor::new(self.shape.clone(), data).expect("spec shapes are positive")
    }
}

/// Records the network on `tape`. `params` follow
/// [`RecognizerConfig::param_specs`] order; `images` is `[N, C, H, W]`.
/// Returns `[T, N, K]` log-probabilities.
pub fn forward_tape(config: &RecognizerConfig, tape: &mut Tape, params: &[Var], images: Var) -> Result<Var> {
    check_input(config, tape.value(images).shape())?;
    let mut next = params.iter().copied();
    let mut take = || next.next().ok_or_else(|| RecognizerError::Config("too few parameters".into()));

    // Lines are ink on white paper; the network sees `1 - x` so paper is zero.
    let shape = tape.value(images).shape().to_vec();
    let neg = tape.scale(images, -1.0);
    let ones = tape.constant(Tensor::full(&shape, 1.0));
    let mut x = tape.add(neg, ones)?;
    let pad = config.conv_kernel / 2;
    let last_block = config.conv_blocks.len() - 1;
    for (bi, b) in config.conv_blocks.iter().enumerate() {
        for li in 0..b.layers {
            let collapse = bi == last_block && li == b.layers - 1;
            let (w, bias) = (take()?, take()?);
            x = tape.conv2d(x, w, (1, 1), (if collapse { 0 } else { pad }, pad))?;
            x = tape.add_bias(x, bias, 1)?;
            x = tape.relu(x);
        }
        if let Some(p) = b.pool {
            x = tape.maxpool2d(x, p, p)?;
        }
    }
    let s = tape.value(x).shape().to_vec();
    let (n, c, t) = (s[0], s[1], s[3]);
    x = tape.reshape(x, &[n, c, t])?;
    let seq = tape.permute(x, &[2, 0, 1])?;

    let mut lstm = |tape: &mut Tape, input: Var| -> Result<Var> {
        let p = [take()?, take()?, take()?, take()?, take()?, take()?];
        Ok(tape.bilstm(input, p)?)
    };
    let mut sum: Option<Var> = None;
    for &scale in &config.branch_scales {
        let mut y = if scale == 1.0 { seq } else { tape.resample_width(seq, scale)? };
        y = lstm(tape, y)?;
        y = lstm(tape, y)?;
        if scale != 1.0 {
            y = tape.resample(y, t)?;
        }
        sum = Some(match sum {
            None => y,
            Some(acc) => tape.add(acc, y)?,
        });
    }
    let y = lstm(tape, sum.expect("at least one branch"))?;

    let h2 = 2 * config.recurrent_hidden;
    let y = tape.permute(y, &[1, 2, 0])?;
    let y = tape.reshape(y, &[n, h2, 1, t])?;
    let (w, bias) = (take()?, take()?);
    let y = tape.conv2d(y, w, (1, 1), (0, config.final_conv_kernel / 2))?;
    let y = tape.add_bias(y, bias, 1)?;
    let k = config.class_count();
    let y = tape.reshape(y, &[n, k, t])?;
    let y = tape.permute(y, &[2, 0, 1])?;
    if take().is_ok() {
        return Err(RecognizerError::Config("too many parameters".into()));
    }
    Ok(tape.log_softmax(y))
}

fn check_input(config: &RecognizerConfig, shape: &[usize]) -> Result<()> {
    if shape.len() != 4 || shape[1] != config.input_channels || shape[2] != config.input_height {
        return Err(RecognizerError::Input(format!(
            "expected [N, {}, {}, W], got {shape:?}",
            config.input_channels, config.input_height
        )));
    }
    let multiple = config.width_multiple();
    if shape[3] % multiple != 0 {
        return Err(RecognizerError::Padding { width: shape[3], multiple });
    }
    Ok(())
}

/// Mean CTC loss over the feasible samples of a `[T, N, K]` batch and its
/// gradient. Samples whose target cannot fit in `T` frames contribute
/// nothing and are counted in the third value.
pub fn batch_ctc(log_probs: &Tensor, targets: &[LabelSequence]) -> Result<(f64, Tensor, usize)> {
    let &[t, n, k] = log_probs.shape() else {
        return Err(RecognizerError::Input(format!("log-probabilities must be [T, N, K], got {:?}", log_probs.shape())));
    };
    if targets.len() != n {
        return Err(RecognizerError::Input(format!("{} targets for a batch of {n}", targets.len())));
    }
    let mut grad = vec![0.0; t * n * k];
    let mut total = 0.0;
    let mut skipped = 0;
    let mut used = Vec::with_capacity(n);
    for (i, target) in targets.iter().enumerate() {
        let sample = sample_log_probs(log_probs, i);
        match ctc_loss_grad(&sample, target) {
            Ok((loss, g)) => {
                total += loss;
                used.push((i, g));
            }
            Err(CtcError::InfeasibleTarget { .. }) => skipped += 1,
            Err(e) => return Err(e.into()),
        }
    }
    if used.is_empty() {
        return Ok((0.0, Tensor::zeros(&[t, n, k]), skipped));
    }
    let scale = 1.0 / used.len() as f64;
    for (i, g) in &used {
        for ti in 0..t {
            let dst = &mut grad[(ti * n + i) * k..(ti * n + i + 1) * k];
            for (d, s) in dst.iter_mut().zip(&g.data()[ti * k..(ti + 1) * k]) {
                *d = s * scale;
            }
        }
    }
    Ok((total * scale, Tensor::new(vec![t, n, k], grad).expect("shape"), skipped))
}

/// `[T, K]` slice of sample `i` from a `[T, N, K]` tensor.
pub fn sample_log_probs(log_probs: &Tensor, i: usize) -> Tensor {
    let s = log_probs.shape();
    let (t, n, k) = (s[0], s[1], s[2]);
    let mut d = Vec::with_capacity(t * k);
    for ti in 0..t {
        d.extend_from_slice(&log_probs.data()[(ti * n + i) * k..(ti * n + i + 1) * k]);
    }
    Tensor::new(vec![t, k], d).expect("shape")
}

#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    /// Samples dropped because their target is longer than the output.
    pub skipped: usize,
    pub used: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recognizer {
    config: RecognizerConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl Recognizer {
    /// Deterministic initialization from `seed`.
    pub fn build(config: RecognizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = config.param_specs();
        let params = specs.iter().map(|s| s.initialize(&mut rng)).collect();
        let names = specs.into_iter().map(|s| s.name).collect();
        Ok(Recognizer { config, names, params })
    }

    pub(crate) fn from_parts(config: RecognizerConfig, names: Vec<String>, params: Vec<Tensor>) -> Self {
        Recognizer { config, names, params }
    }

    pub fn config(&self) -> &RecognizerConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let x = tape.constant(images.clone());
        let out = forward_tape(&self.config, &mut tape, &vars, x)?;
        Ok(tape.value(out).clone())
    }

    pub fn decode(&self, images: &Tensor) -> Result<Vec<LabelSequence>> {
        let lp = self.forward(images)?;
        Ok((0..lp.shape()[1]).map(|i| best_path_decode(&sample_log_probs(&lp, i))).collect())
    }

    /// Mean CTC loss of a batch and its gradient for every parameter.
    pub fn loss_and_grad(&self, images: &Tensor, targets: &[LabelSequence]) -> Result<BatchLoss> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.param(p.clone())).collect();
        let x = tape.constant(images.clone());
        let out = forward_tape(&self.config, &mut tape, &vars, x)?;
        let (loss, grad, skipped) = batch_ctc(tape.value(out), targets)?;
        let used = targets.len() - skipped;
        let l = tape.external_loss(out, loss, grad)?;
        let mut grads = tape.backward(l)?;
        let grads = vars.iter().map(|&v| grads.take(v)).collect();
        Ok(BatchLoss { loss, grads, skipped, used })
    }
}
