//! A fixed-architecture CNN: dense tensors, forward pass with a full
//! activation trace, parameter/input gradients, relevance propagation and a
//! deterministic training loop.

pub mod backward;
pub mod deeplift;
pub mod lrp;
pub mod ops;
pub mod train;
pub mod weights;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TxError};
use crate::tensor::Tensor;

/// One layer of the network. Conv and Dense carry their parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        /// weights shaped [out_channels, in_channels, kernel, kernel]
        weight: Tensor,
        /// bias shaped [out_channels]
        bias: Tensor,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        in_dim: usize,
        out_dim: usize,
        /// weights shaped [out_dim, in_dim]
        weight: Tensor,
        /// bias shaped [out_dim]
        bias: Tensor,
    },
}

impl LayerSpec {
    /// Conv layer with zeroed parameters (use `Network::init_params` to seed).
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Tensor::zeros(&[out_channels, in_channels, kernel, kernel]),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    pub fn dense(in_dim: usize, out_dim: usize) -> Self {
        LayerSpec::Dense {
            in_dim,
            out_dim,
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn max_pool(kernel: usize, stride: usize) -> Self {
        LayerSpec::MaxPool { kernel, stride }
    }

    fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                weight,
                bias,
                ..
            } => {
                if *kernel < 1 || *stride < 1 {
                    return Err(TxError::Config("conv kernel and stride must be >= 1".into()));
                }
                let expect = [*out_channels, *in_channels, *kernel, *kernel];
                if weight.shape() != expect {
                    return Err(TxError::Config(format!(
                        "conv weight shape {:?} != {:?}",
                        weight.shape(),
                        expect
                    )));
                }
                if bias.shape() != [*out_channels] {
                    return Err(TxError::Config("conv bias shape mismatch".into()));
                }
                Ok(())
            }
            LayerSpec::MaxPool { kernel, stride } => {
                if *kernel < 1 || *stride < 1 {
                    return Err(TxError::Config("pool kernel and stride must be >= 1".into()));
                }
                Ok(())
            }
            LayerSpec::Dense {
                in_dim,
                out_dim,
                weight,
                bias,
            } => {
                if weight.shape() != [*out_dim, *in_dim] {
                    return Err(TxError::Config(format!(
                        "dense weight shape {:?} != [{out_dim}, {in_dim}]",
                        weight.shape()
                    )));
                }
                if bias.shape() != [*out_dim] {
                    return Err(TxError::Config("dense bias shape mismatch".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Shape produced by this layer for the given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let [c, h, w] = three(input)?;
                if c != *in_channels {
                    return Err(TxError::Config(format!(
                        "conv expects {in_channels} channels, got {c}"
                    )));
                }
                if h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                    return Err(TxError::Config("conv kernel larger than padded input".into()));
                }
                Ok(vec![
                    *out_channels,
                    ops::conv_out_dim(h, *kernel, *stride, *padding),
                    ops::conv_out_dim(w, *kernel, *stride, *padding),
                ])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool { kernel, stride } => {
                let [c, h, w] = three(input)?;
                if h < *kernel || w < *kernel {
                    return Err(TxError::Config("pool kernel larger than input".into()));
                }
                Ok(vec![
                    c,
                    ops::pool_out_dim(h, *kernel, *stride),
                    ops::pool_out_dim(w, *kernel, *stride),
                ])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Dense { in_dim, out_dim, .. } => {
                if input != [*in_dim] {
                    return Err(TxError::Config(format!(
                        "dense expects [{in_dim}], got {input:?}"
                    )));
                }
                Ok(vec![*out_dim])
            }
        }
    }
}

fn three(shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        [c, h, w] => Ok([*c, *h, *w]),
        _ => Err(TxError::Config(format!("expected [c,h,w] shape, got {shape:?}"))),
    }
}

/// Output head applied after the last layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Scalar output; the single pre-head value is the prediction.
    Regression,
    /// `classes` logits followed by softmax.
    Classification { classes: usize },
}

/// Selects one scalar pre-head output: the regression output (index 0) or a
/// pre-softmax logit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutputSelector(pub usize);

/// ReLU gating mode for the input-gradient backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReluMode {
    Standard,
    Guided,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    head: Head,
}

/// Per-layer activations cached during a forward pass.
///
/// `activations[0]` is the input; `activations[i + 1]` is the output of layer
/// `i`. MaxPool layers additionally record the flat index of each winner.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    activations: Vec<Tensor>,
    winners: Vec<Option<Vec<u32>>>,
    post_head: Tensor,
}

impl ForwardTrace {
    pub fn input(&self) -> &Tensor {
        &self.activations[0]
    }

    pub fn pre_head(&self) -> &Tensor {
        self.activations.last().expect("trace has activations")
    }

    pub fn post_head(&self) -> &Tensor {
        &self.post_head
    }

    pub fn activation(&self, layer_index: usize) -> Result<&Tensor> {
        if layer_index + 1 >= self.activations.len() {
            return Err(TxError::Index(format!(
                "layer index {layer_index} out of range ({} layers)",
                self.activations.len() - 1
            )));
        }
        Ok(&self.activations[layer_index + 1])
    }

    pub fn winners(&self, layer_index: usize) -> Option<&[u32]> {
        self.winners.get(layer_index).and_then(|w| w.as_deref())
    }

    pub fn num_layers(&self) -> usize {
        self.winners.len()
    }
}

impl Network {
    pub fn new(input_shape: &[usize], layers: Vec<LayerSpec>, head: Head) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        for (i, layer) in layers.iter().enumerate() {
            layer.validate()?;
            shape = layer
                .output_shape(&shape)
                .map_err(|e| TxError::Config(format!("layer {i}: {e}")))?;
        }
        match head {
            Head::Regression => {
                if shape != [1] {
                    return Err(TxError::Config(format!(
                        "regression head needs a single pre-head value, got {shape:?}"
                    )));
                }
            }
            Head::Classification { classes } => {
                if shape != [classes] {
                    return Err(TxError::Config(format!(
                        "classification head needs [{classes}] logits, got {shape:?}"
                    )));
                }
            }
        }
        Ok(Network {
            input_shape: input_shape.to_vec(),
            layers,
            head,
        })
    }

    /// The benchmark CNN: three conv/ReLU/pool blocks over 1x64x64 inputs,
    /// then Dense(2048->64)-ReLU-Dense(64->out). Parameters are seeded.
    pub fn standard(head: Head, seed: u64) -> Self {
        let out_dim = match head {
            Head::Regression => 1,
            Head::Classification { classes } => classes,
        };
        let layers = vec![
            LayerSpec::conv(1, 8, 3, 1, 1),
            LayerSpec::Relu,
            LayerSpec::max_pool(2, 2),
            LayerSpec::conv(8, 16, 3, 1, 1),
            LayerSpec::Relu,
            LayerSpec::max_pool(2, 2),
            LayerSpec::conv(16, 32, 3, 1, 1),
            LayerSpec::Relu,
            LayerSpec::max_pool(2, 2),
            LayerSpec::Flatten,
            LayerSpec::dense(32 * 8 * 8, 64),
            LayerSpec::Relu,
            LayerSpec::dense(64, out_dim),
        ];
        let mut net = Network::new(&[1, 64, 64], layers, head).expect("standard net composes");
        net.init_params(seed);
        net
    }

    /// Glorot-uniform re-initialization of all Conv/Dense parameters,
    /// deterministic in `seed`. Biases are zeroed.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut self.layers {
            match layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    weight,
                    bias,
                    ..
                } => {
                    let fan_in = *in_channels * *kernel * *kernel;
                    let fan_out = *out_channels * *kernel * *kernel;
                    let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
                    for v in weight.data_mut() {
                        *v = rng.gen_range(-bound..=bound);
                    }
                    bias.data_mut().fill(0.0);
                }
                LayerSpec::Dense {
                    in_dim,
                    out_dim,
                    weight,
                    bias,
                } => {
                    let bound = (6.0 / (*in_dim + *out_dim) as f32).sqrt();
                    for v in weight.data_mut() {
                        *v = rng.gen_range(-bound..=bound);
                    }
                    bias.data_mut().fill(0.0);
                }
                _ => {}
            }
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn head(&self) -> Head {
        self.head
    }

    /// Number of pre-head outputs (1 for regression, C for classification).
    pub fn output_dim(&self) -> usize {
        match self.head {
            Head::Regression => 1,
            Head::Classification { classes } => classes,
        }
    }

    /// Index of the last layer producing spatial maps after the final Conv's
    /// ReLU, the default target for the CAM-family methods.
    pub fn last_conv_activation_index(&self) -> Option<usize> {
        let mut last = None;
        for (i, layer) in self.layers.iter().enumerate() {
            if matches!(layer, LayerSpec::Conv { .. }) {
                // prefer the ReLU immediately after the conv, if present
                if matches!(self.layers.get(i + 1), Some(LayerSpec::Relu)) {
                    last = Some(i + 1);
                } else {
                    last = Some(i);
                }
            }
        }
        last
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape {
            return Err(TxError::InputShape(format!(
                "network expects {:?}, got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn validate_selector(&self, target: OutputSelector) -> Result<()> {
        if target.0 >= self.output_dim() {
            return Err(TxError::Selector(format!(
                "target {} out of range ({} outputs)",
                target.0,
                self.output_dim()
            )));
        }
        Ok(())
    }

    /// Full forward pass caching every intermediate activation.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ForwardTrace)> {
        self.check_input(x)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut winners = Vec::with_capacity(self.layers.len());
        activations.push(x.clone());
        let mut shape = self.input_shape.clone();
        for layer in &self.layers {
            let input = activations.last().unwrap();
            let out_shape = layer.output_shape(&shape)?;
            let (out, win) = apply_layer(layer, input, &shape, &out_shape);
            activations.push(out);
            winners.push(win);
            shape = out_shape;
        }
        let pre_head = activations.last().unwrap();
        let post_head = match self.head {
            Head::Regression => pre_head.clone(),
            Head::Classification { .. } => {
                Tensor::from_vec(pre_head.shape(), ops::softmax(pre_head.data()))?
            }
        };
        let trace = ForwardTrace {
            activations,
            winners,
            post_head: post_head.clone(),
        };
        Ok((post_head, trace))
    }

    /// Pre-head outputs without recording a trace; the fast path for methods
    /// that evaluate many perturbed inputs.
    pub fn logits(&self, x: &Tensor) -> Result<Vec<f32>> {
        self.check_input(x)?;
        let mut cur = x.data().to_vec();
        let mut shape = self.input_shape.clone();
        for layer in &self.layers {
            let out_shape = layer.output_shape(&shape)?;
            cur = apply_layer_flat(layer, &cur, &shape, &out_shape);
            shape = out_shape;
        }
        Ok(cur)
    }

    /// Post-head output vector (softmax probabilities or the raw scalar).
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f32>> {
        let logits = self.logits(x)?;
        Ok(match self.head {
            Head::Regression => logits,
            Head::Classification { .. } => ops::softmax(&logits),
        })
    }

    /// Checks that a trace is structurally consistent with this network.
    pub fn check_trace(&self, trace: &ForwardTrace) -> Result<()> {
        if trace.activations.len() != self.layers.len() + 1 {
            return Err(TxError::Trace(format!(
                "trace has {} activations for {} layers",
                trace.activations.len(),
                self.layers.len()
            )));
        }
        let mut shape = self.input_shape.clone();
        if trace.activations[0].shape() != shape {
            return Err(TxError::Trace("trace input shape mismatch".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer.output_shape(&shape)?;
            if trace.activations[i + 1].shape() != shape {
                return Err(TxError::Trace(format!("trace activation {i} shape mismatch")));
            }
            let needs_winners = matches!(layer, LayerSpec::MaxPool { .. });
            if needs_winners != trace.winners[i].is_some() {
                return Err(TxError::Trace(format!("trace winners missing at layer {i}")));
            }
        }
        Ok(())
    }
}

/// Stored output activation of one layer, cloned out of the trace.
pub fn layer_activations(trace: &ForwardTrace, layer_index: usize) -> Result<Tensor> {
    trace.activation(layer_index).cloned()
}

fn apply_layer(
    layer: &LayerSpec,
    input: &Tensor,
    in_shape: &[usize],
    out_shape: &[usize],
) -> (Tensor, Option<Vec<u32>>) {
    match layer {
        LayerSpec::MaxPool { kernel, stride } => {
            let [c, h, w] = [in_shape[0], in_shape[1], in_shape[2]];
            let mut out = Tensor::zeros(out_shape);
            let mut winners = vec![0u32; out.len()];
            ops::maxpool_forward(input.data(), c, h, w, *kernel, *stride, out.data_mut(), &mut winners);
            (out, Some(winners))
        }
        _ => {
            let flat = apply_layer_flat(layer, input.data(), in_shape, out_shape);
            (
                Tensor::from_vec(out_shape, flat).expect("layer output volume"),
                None,
            )
        }
    }
}

fn apply_layer_flat(layer: &LayerSpec, input: &[f32], in_shape: &[usize], out_shape: &[usize]) -> Vec<f32> {
    match layer {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias,
        } => {
            let mut out = vec![0.0f32; out_shape.iter().product()];
            ops::conv2d_forward(
                input,
                *in_channels,
                in_shape[1],
                in_shape[2],
                weight.data(),
                bias.data(),
                *out_channels,
                *kernel,
                *stride,
                *padding,
                &mut out,
            );
            out
        }
        LayerSpec::Relu => {
            let mut out = vec![0.0f32; input.len()];
            ops::relu_forward(input, &mut out);
            out
        }
        LayerSpec::MaxPool { kernel, stride } => {
            let mut out = vec![0.0f32; out_shape.iter().product()];
            let mut winners = vec![0u32; out.len()];
            ops::maxpool_forward(
                input,
                in_shape[0],
                in_shape[1],
                in_shape[2],
                *kernel,
                *stride,
                &mut out,
                &mut winners,
            );
            out
        }
        LayerSpec::Flatten => input.to_vec(),
        LayerSpec::Dense {
            out_dim, weight, bias, ..
        } => {
            let mut out = vec![0.0f32; *out_dim];
            ops::dense_forward(input, weight.data(), bias.data(), *out_dim, &mut out);
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_image_through_zero_bias_conv_is_zero() {
        let layers = vec![
            LayerSpec::conv(1, 2, 3, 1, 1),
            LayerSpec::Flatten,
            LayerSpec::dense(32, 1),
        ];
        let mut n = Network::new(&[1, 4, 4], layers, Head::Regression).unwrap();
        n.init_params(7);
        // init keeps biases at zero, so the feature maps stay all-zero
        let x = Tensor::zeros(&[1, 4, 4]);
        let (_, trace) = n.forward(&x).unwrap();
        assert!(trace.activation(0).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_shape_must_compose() {
        let layers = vec![LayerSpec::conv(1, 2, 3, 1, 1)];
        assert!(Network::new(&[1, 4, 4], layers, Head::Classification { classes: 32 }).is_err());
    }

    #[test]
    fn dense_identity_plus_bias() {
        let weight = Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let bias = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let layers = vec![LayerSpec::Dense {
            in_dim: 3,
            out_dim: 3,
            weight,
            bias,
        }];
        let net = Network::new(&[3], layers, Head::Classification { classes: 3 }).unwrap();
        let x = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let logits = net.logits(&x).unwrap();
        assert_eq!(logits, vec![1.5, 1.0, 5.0]);
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let net = Network::standard(Head::Classification { classes: 4 }, 1);
        let bad = Tensor::zeros(&[1, 32, 32]);
        assert!(matches!(net.forward(&bad), Err(TxError::InputShape(_))));
    }

    #[test]
    fn trace_stores_every_activation_and_replays() {
        let net = Network::standard(Head::Classification { classes: 4 }, 3);
        let x = Tensor::filled(&[1, 64, 64], 0.25);
        let (out, trace) = net.forward(&x).unwrap();
        assert_eq!(trace.activations.len(), net.layers().len() + 1);
        assert_eq!(out.len(), 4);
        // replaying the stored input reproduces the stored outputs exactly
        let (out2, trace2) = net.forward(trace.input()).unwrap();
        assert_eq!(out.data(), out2.data());
        for (a, b) in trace.activations.iter().zip(&trace2.activations) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn selector_bounds_checked() {
        let net = Network::standard(Head::Classification { classes: 4 }, 1);
        assert!(net.validate_selector(OutputSelector(3)).is_ok());
        assert!(net.validate_selector(OutputSelector(4)).is_err());
    }
}
