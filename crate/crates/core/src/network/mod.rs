//! Layered classifier `f = f_L ∘ … ∘ f_1` with a softmax head.

mod checkpoint;
mod train;

pub use checkpoint::{Checkpoint, CheckpointError, Provenance, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{evaluate, one_hot, predict, train_base, TrainConfig};
pub(crate) use train::{accuracy_of, predict_from};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::tensor::{kernels, Activation, ConvGeom, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("{0}")]
    Usage(String),
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },
}

pub type Result<T> = std::result::Result<T, NetworkError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        activation: Activation,
    },
    Dense {
        inputs: usize,
        outputs: usize,
        activation: Activation,
    },
    /// Global average pool over the spatial axes.
    Pool,
    Flatten,
}

impl LayerSpec {
    pub fn has_weights(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. })
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                Some(vec![out_channels, in_channels, kernel, kernel])
            }
            LayerSpec::Dense { inputs, outputs, .. } => Some(vec![outputs, inputs]),
            _ => None,
        }
    }

    /// Rows and columns of the weight viewed as a matrix: `n_l x n_{l-1}` for
    /// dense layers and `c_out x (c_in k k)` for convolutions.
    pub fn weight_matrix_dims(&self) -> Option<(usize, usize)> {
        self.weight_shape().map(|s| (s[0], s[1..].iter().product()))
    }

    fn fan_in(&self) -> usize {
        self.weight_matrix_dims().map_or(0, |(_, c)| c)
    }

    /// Per-example output shape for a per-example input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding, .. } => {
                let [c, h, w] = input else {
                    return Err(NetworkError::Architecture(format!("conv2d expects [c, h, w] input, got {input:?}")));
                };
                if *c != in_channels {
                    return Err(NetworkError::Architecture(format!(
                        "conv2d expects {in_channels} input channels, got {c}"
                    )));
                }
                let g = ConvGeom { batch: 1, c_in: *c, h: *h, w: *w, c_out: out_channels, k: kernel, stride, padding };
                g.validate()?;
                Ok(vec![out_channels, g.out_h(), g.out_w()])
            }
            LayerSpec::Dense { inputs, outputs, .. } => {
                if input != [inputs] {
                    return Err(NetworkError::Architecture(format!(
                        "dense expects [{inputs}] input, got {input:?}"
                    )));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Pool => match input {
                [c, _, _] => Ok(vec![*c, 1, 1]),
                _ => Err(NetworkError::Architecture(format!("pool expects [c, h, w] input, got {input:?}"))),
            },
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Per-example input shape `[c, h, w]`.
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// Four 3x3 gelu convolutions (8, 16, 16, 32 channels, stride 2), global
    /// average pool and a dense head, on 32x32 single-channel images.
    pub fn reference(classes: usize) -> Self {
        let conv = |i, o| LayerSpec::Conv2d {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride: 2,
            padding: 1,
            activation: Activation::Gelu,
        };
        Architecture {
            input: vec![1, 32, 32],
            layers: vec![
                conv(1, 8),
                conv(8, 16),
                conv(16, 16),
                conv(16, 32),
                LayerSpec::Pool,
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 32, outputs: classes, activation: Activation::Identity },
            ],
        }
    }

    /// Per-example output shape of every layer, checking that consecutive
    /// layers conform.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut cur = self.input.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            cur = l
                .output_shape(&cur)
                .map_err(|e| NetworkError::Architecture(format!("layer {i}: {e}")))?;
            out.push(cur.clone());
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<usize> {
        if self.layers.is_empty() {
            return Err(NetworkError::Architecture("no layers".into()));
        }
        let shapes = self.shapes()?;
        match self.layers.last() {
            Some(LayerSpec::Dense { outputs, .. }) if *outputs >= 1 => {
                debug_assert_eq!(shapes.last().unwrap(), &vec![*outputs]);
                Ok(*outputs)
            }
            _ => Err(NetworkError::Architecture("final layer must be dense".into())),
        }
    }

    pub fn weighted_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].has_weights()).collect()
    }

    pub fn conv_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].is_conv()).collect()
    }
}

/// Parameters of one layer; both are `None` for pool and flatten.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

/// Tape handles for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub weight: Option<Var>,
    pub bias: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: Architecture,
    params: Vec<LayerParams>,
    trainable: Vec<bool>,
    class_count: usize,
}

impl Network {
    /// He-normal convolution weights, scaled normal dense weights, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let class_count = arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch
            .layers
            .iter()
            .map(|spec| match spec.weight_shape() {
                Some(shape) => {
                    let gain = if spec.is_conv() { 2.0 } else { 1.0 };
                    let std = (gain / spec.fan_in() as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("positive std");
                    let n: usize = shape.iter().product();
                    let w: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
                    LayerParams {
                        weight: Some(Tensor::from_parts(shape.clone(), w)),
                        bias: Some(Tensor::zeros(vec![shape[0]])),
                    }
                }
                None => LayerParams { weight: None, bias: None },
            })
            .collect();
        let trainable = arch.layers.iter().map(LayerSpec::has_weights).collect();
        Ok(Network { arch, params, trainable, class_count })
    }

    pub fn from_parts(arch: Architecture, params: Vec<LayerParams>) -> Result<Self> {
        let class_count = arch.validate()?;
        if params.len() != arch.layers.len() {
            return Err(NetworkError::Architecture(format!(
                "{} parameter sets for {} layers",
                params.len(),
                arch.layers.len()
            )));
        }
        for (i, (spec, p)) in arch.layers.iter().zip(&params).enumerate() {
            let want_w = spec.weight_shape();
            let want_b = want_w.as_ref().map(|s| vec![s[0]]);
            let got_w = p.weight.as_ref().map(|t| t.shape().to_vec());
            let got_b = p.bias.as_ref().map(|t| t.shape().to_vec());
            if want_w != got_w || want_b != got_b {
                return Err(NetworkError::Architecture(format!(
                    "layer {i}: parameter shapes {got_w:?}/{got_b:?} do not match {want_w:?}/{want_b:?}"
                )));
            }
        }
        let trainable = arch.layers.iter().map(LayerSpec::has_weights).collect();
        Ok(Network { arch, params, trainable, class_count })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn depth(&self) -> usize {
        self.arch.layers.len()
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub fn layer(&self, index: usize) -> Option<&LayerParams> {
        self.params.get(index)
    }

    pub(crate) fn layer_mut(&mut self, index: usize) -> &mut LayerParams {
        &mut self.params[index]
    }

    pub fn num_params(&self) -> usize {
        self.params
            .iter()
            .flat_map(|p| p.weight.iter().chain(p.bias.iter()))
            .map(Tensor::numel)
            .sum()
    }

    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }

    /// Sets the per-layer trainability mask; layers without weights stay frozen.
    pub fn set_trainable(&mut self, mask: &[bool]) -> Result<()> {
        if mask.len() != self.depth() {
            return Err(NetworkError::Usage(format!(
                "trainability mask has {} entries for {} layers",
                mask.len(),
                self.depth()
            )));
        }
        for (i, (&m, spec)) in mask.iter().zip(&self.arch.layers).enumerate() {
            self.trainable[i] = m && spec.has_weights();
        }
        Ok(())
    }

    /// Freezes every layer except `index`.
    pub fn train_only(&mut self, index: usize) -> Result<()> {
        let mask: Vec<bool> = (0..self.depth()).map(|i| i == index).collect();
        self.set_trainable(&mask)
    }

    /// Checks a batched input against the declared input extent.
    fn check_input(&self, x: &Tensor, start: usize) -> Result<()> {
        let expect = if start == 0 {
            self.arch.input.clone()
        } else {
            self.arch.shapes()?[start - 1].clone()
        };
        if x.rank() != expect.len() + 1 || x.shape()[1..] != expect[..] {
            return Err(TensorError::Shape {
                op: "forward",
                expected: format!("[batch, {}]", expect.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")),
                found: x.shape().to_vec(),
            }
            .into());
        }
        Ok(())
    }

    /// Class probabilities `[batch, class_count]`; every row sums to one.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_from(0, x)
    }

    /// Activations after the first `depth` layers (`1 <= depth <= L`), i.e.
    /// the prefix composition without the softmax head.
    pub fn forward_prefix(&self, depth: usize, x: &Tensor) -> Result<Tensor> {
        if depth == 0 || depth > self.depth() {
            return Err(NetworkError::Usage(format!(
                "prefix depth {depth} outside 1..={}",
                self.depth()
            )));
        }
        self.check_input(x, 0)?;
        self.apply_range(0, depth, x.clone())
    }

    /// Probabilities from activations `h` that already went through the
    /// first `start` layers.
    pub fn forward_from(&self, start: usize, h: &Tensor) -> Result<Tensor> {
        if start >= self.depth() {
            return Err(NetworkError::Usage(format!("start layer {start} outside 0..{}", self.depth())));
        }
        self.check_input(h, start)?;
        let logits = self.apply_range(start, self.depth(), h.clone())?;
        let probs = kernels::softmax_rows(self.class_count, logits.data());
        Ok(Tensor::from_parts(logits.shape().to_vec(), probs))
    }

    fn apply_range(&self, start: usize, end: usize, mut x: Tensor) -> Result<Tensor> {
        for i in start..end {
            x = apply_layer(&self.arch.layers[i], &self.params[i], x)?;
        }
        if !x.is_finite() {
            return Err(TensorError::NonFinite { op: "forward" }.into());
        }
        Ok(x)
    }

    /// Records every parameter on `tape`, with `requires_grad` following the
    /// trainability mask.
    pub fn register(&self, tape: &mut Tape) -> Vec<LayerVars> {
        self.params
            .iter()
            .zip(&self.trainable)
            .map(|(p, &train)| {
                let leaf = |tape: &mut Tape, t: &Option<Tensor>| {
                    t.as_ref().map(|t| {
                        let mut t = t.clone();
                        t.set_requires_grad(train);
                        tape.leaf(t)
                    })
                };
                LayerVars { weight: leaf(tape, &p.weight), bias: leaf(tape, &p.bias) }
            })
            .collect()
    }

    /// Records layers `start..L` on the tape and returns the logits.
    pub fn record(&self, tape: &mut Tape, vars: &[LayerVars], input: Var, start: usize) -> Result<Var> {
        let mut h = input;
        for i in start..self.depth() {
            h = record_layer(tape, &self.arch.layers[i], vars[i], h)?;
        }
        Ok(h)
    }
}

fn apply_layer(spec: &LayerSpec, p: &LayerParams, x: Tensor) -> Result<Tensor> {
    let batch = x.shape()[0];
    Ok(match *spec {
        LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding, activation } => {
            let s = x.shape();
            let g = ConvGeom { batch, c_in: in_channels, h: s[2], w: s[3], c_out: out_channels, k: kernel, stride, padding };
            let w = p.weight.as_ref().expect("conv weight");
            let b = p.bias.as_ref().expect("conv bias");
            let (mut out, _) = kernels::conv2d(&g, w.data(), b.data(), x.data());
            kernels::activate(activation, &mut out);
            Tensor::from_parts(vec![batch, out_channels, g.out_h(), g.out_w()], out)
        }
        LayerSpec::Dense { inputs, outputs, activation } => {
            let w = p.weight.as_ref().expect("dense weight");
            let b = p.bias.as_ref().map(Tensor::data);
            let mut out = kernels::affine(batch, inputs, outputs, w.data(), b, x.data());
            kernels::activate(activation, &mut out);
            Tensor::from_parts(vec![batch, outputs], out)
        }
        LayerSpec::Pool => {
            let s = x.shape().to_vec();
            let out = kernels::global_avg_pool(s[0] * s[1], s[2] * s[3], x.data());
            Tensor::from_parts(vec![s[0], s[1], 1, 1], out)
        }
        LayerSpec::Flatten => {
            let rest = x.numel() / batch.max(1);
            x.reshape(vec![batch, rest])?
        }
    })
}

fn record_layer(tape: &mut Tape, spec: &LayerSpec, v: LayerVars, h: Var) -> Result<Var> {
    Ok(match *spec {
        LayerSpec::Conv2d { stride, padding, activation, .. } => tape.conv2d(
            v.weight.expect("conv weight"),
            v.bias.expect("conv bias"),
            h,
            stride,
            padding,
            activation,
        )?,
        LayerSpec::Dense { activation, .. } => tape.dense(v.weight.expect("dense weight"), v.bias, h, activation)?,
        LayerSpec::Pool => tape.avg_pool(h)?,
        LayerSpec::Flatten => tape.flatten(h)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_arch() -> Architecture {
        Architecture {
            input: vec![1, 1, 2],
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 2, outputs: 2, activation: Activation::Relu },
                LayerSpec::Dense { inputs: 2, outputs: 2, activation: Activation::Identity },
            ],
        }
    }

    fn set(net: &mut Network, layer: usize, w: Vec<f64>, b: Vec<f64>) {
        let p = net.layer_mut(layer);
        let ws = p.weight.as_ref().unwrap().shape().to_vec();
        p.weight = Some(Tensor::new(ws, w).unwrap());
        p.bias = Some(Tensor::vector(b).unwrap());
    }

    #[test]
    fn reference_architecture_is_small_and_valid() {
        let arch = Architecture::reference(5);
        assert_eq!(arch.validate().unwrap(), 5);
        let net = Network::init(arch.clone(), 0).unwrap();
        assert!(net.num_params() <= 100_000, "{}", net.num_params());
        assert_eq!(arch.conv_layers(), vec![0, 1, 2, 3]);
        assert_eq!(arch.weighted_layers(), vec![0, 1, 2, 3, 6]);
    }

    #[test]
    fn architecture_rejects_nonconforming_layers() {
        let mut arch = toy_arch();
        arch.layers[2] = LayerSpec::Dense { inputs: 3, outputs: 2, activation: Activation::Identity };
        assert!(matches!(arch.validate(), Err(NetworkError::Architecture(_))));
        let arch = Architecture { input: vec![1, 1, 2], layers: vec![LayerSpec::Flatten] };
        assert!(arch.validate().is_err());
    }

    #[test]
    fn hand_computed_two_layer_forward() {
        let mut net = Network::init(toy_arch(), 1).unwrap();
        set(&mut net, 1, vec![1.0, -1.0, 0.5, 2.0], vec![0.0, 0.1]);
        set(&mut net, 2, vec![1.0, 0.0, -1.0, 3.0], vec![0.2, 0.0]);
        let x = Tensor::new(vec![1, 1, 1, 2], vec![0.3, 0.7]).unwrap();
        // hidden = relu(W1 x + b1) = relu(-0.4, 1.65) = (0, 1.65)
        // logits = W2 h + b2 = (0.2, 4.95)
        let z = [0.2_f64, 4.95];
        let m = z[1];
        let e = [(z[0] - m).exp(), 1.0];
        let s = e[0] + e[1];
        let p = net.forward(&x).unwrap();
        assert!((p.data()[0] - e[0] / s).abs() < 1e-15);
        assert!((p.data()[1] - e[1] / s).abs() < 1e-15);
        let h = net.forward_prefix(2, &x).unwrap();
        assert_eq!(h.data(), &[0.0, 1.65]);
    }

    #[test]
    fn zero_head_gives_uniform_output() {
        let mut net = Network::init(Architecture::reference(5), 3).unwrap();
        set(&mut net, 6, vec![0.0; 160], vec![0.0; 5]);
        let x = Tensor::new(vec![2, 1, 32, 32], (0..2048).map(|i| (i as f64 * 0.01).sin().abs()).collect()).unwrap();
        let p = net.forward(&x).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn prefix_through_identity_first_layer() {
        let arch = Architecture {
            input: vec![2],
            layers: vec![
                LayerSpec::Dense { inputs: 2, outputs: 2, activation: Activation::Relu },
                LayerSpec::Dense { inputs: 2, outputs: 2, activation: Activation::Identity },
            ],
        };
        let mut net = Network::init(arch, 0).unwrap();
        set(&mut net, 0, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]);
        let x = Tensor::new(vec![1, 2], vec![0.5, -0.3]).unwrap();
        assert_eq!(net.forward_prefix(1, &x).unwrap().data(), &[0.5, 0.0]);
    }

    #[test]
    fn full_prefix_plus_softmax_equals_forward() {
        let net = Network::init(Architecture::reference(5), 11).unwrap();
        let x = Tensor::new(vec![3, 1, 32, 32], (0..3072).map(|i| ((i * 7) % 13) as f64 / 13.0).collect()).unwrap();
        let logits = net.forward_prefix(net.depth(), &x).unwrap();
        let probs = kernels::softmax_rows(5, logits.data());
        assert_eq!(probs.as_slice(), net.forward(&x).unwrap().data());
    }

    #[test]
    fn prefix_depth_out_of_range_is_usage_error() {
        let net = Network::init(toy_arch(), 0).unwrap();
        let x = Tensor::zeros(vec![1, 1, 1, 2]);
        assert!(matches!(net.forward_prefix(0, &x), Err(NetworkError::Usage(_))));
        assert!(matches!(net.forward_prefix(4, &x), Err(NetworkError::Usage(_))));
    }

    #[test]
    fn forward_rejects_wrong_input_extent() {
        let net = Network::init(Architecture::reference(5), 0).unwrap();
        let x = Tensor::zeros(vec![1, 1, 16, 16]);
        assert!(matches!(net.forward(&x), Err(NetworkError::Tensor(TensorError::Shape { .. }))));
    }

    #[test]
    fn trainability_mask_ignores_weightless_layers() {
        let mut net = Network::init(Architecture::reference(5), 0).unwrap();
        net.set_trainable(&[true; 7]).unwrap();
        assert_eq!(net.trainable(), &[true, true, true, true, false, false, true]);
        net.train_only(2).unwrap();
        assert_eq!(net.trainable().iter().filter(|&&t| t).count(), 1);
        assert!(net.set_trainable(&[true; 3]).is_err());
    }
}
