//! Reverse-mode passes over a cached [`ForwardTrace`]: training gradients,
//! input gradients (standard and guided) and gradients at intermediate
//! activations.

use crate::error::{Result, TxError};
use crate::net::{ops, ForwardTrace, LayerSpec, Network, OutputSelector, ReluMode};
use crate::tensor::Tensor;

/// Gradient of the loss with respect to one layer's parameters.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Per-layer parameter gradients; `None` for parameterless layers.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub layers: Vec<Option<LayerGrads>>,
}

impl ParamGrads {
    pub fn zeros_like(net: &Network) -> Self {
        let layers = net
            .layers()
            .iter()
            .map(|layer| match layer {
                LayerSpec::Conv { weight, bias, .. } | LayerSpec::Dense { weight, bias, .. } => {
                    Some(LayerGrads {
                        weight: Tensor::zeros(weight.shape()),
                        bias: Tensor::zeros(bias.shape()),
                    })
                }
                _ => None,
            })
            .collect();
        ParamGrads { layers }
    }

    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(d), Some(s)) = (dst.as_mut(), src.as_ref()) {
                for (a, b) in d.weight.data_mut().iter_mut().zip(s.weight.data()) {
                    *a += *b;
                }
                for (a, b) in d.bias.data_mut().iter_mut().zip(s.bias.data()) {
                    *a += *b;
                }
            }
        }
    }
}

/// Gradients of every weight and bias given the gradient of the loss with
/// respect to the pre-head output.
pub fn backward_params(net: &Network, trace: &ForwardTrace, loss_grad: &Tensor) -> Result<ParamGrads> {
    net.check_trace(trace)?;
    if loss_grad.shape() != trace.pre_head().shape() {
        return Err(TxError::Trace(format!(
            "loss grad shape {:?} != pre-head {:?}",
            loss_grad.shape(),
            trace.pre_head().shape()
        )));
    }
    let (_, grads, _) = backprop(
        net,
        trace,
        loss_grad.data().to_vec(),
        ReluMode::Standard,
        true,
        None,
    );
    Ok(grads.expect("param grads requested"))
}

/// Gradient of the selected pre-head output with respect to the input image.
pub fn input_gradient(
    net: &Network,
    trace: &ForwardTrace,
    target: OutputSelector,
    mode: ReluMode,
) -> Result<Tensor> {
    net.check_trace(trace)?;
    net.validate_selector(target)?;
    let mut seed = vec![0.0f32; trace.pre_head().len()];
    seed[target.0] = 1.0;
    let (gin, _, _) = backprop(net, trace, seed, mode, false, None);
    Ok(gin.expect("input gradient requested"))
}

/// Gradient of the selected pre-head output with respect to the output
/// activation of `layer_index` (standard ReLU gating).
pub fn activation_gradient(
    net: &Network,
    trace: &ForwardTrace,
    target: OutputSelector,
    layer_index: usize,
) -> Result<Tensor> {
    net.check_trace(trace)?;
    net.validate_selector(target)?;
    if layer_index >= net.layers().len() {
        return Err(TxError::Index(format!(
            "layer index {layer_index} out of range ({} layers)",
            net.layers().len()
        )));
    }
    let mut seed = vec![0.0f32; trace.pre_head().len()];
    seed[target.0] = 1.0;
    let (_, _, stopped) = backprop(net, trace, seed, ReluMode::Standard, false, Some(layer_index));
    Ok(stopped.expect("activation gradient requested"))
}

/// Shared reverse walk. `seed` is the gradient at the pre-head output. When
/// `stop_at` is set, returns the gradient w.r.t. that layer's output instead
/// of walking further down.
fn backprop(
    net: &Network,
    trace: &ForwardTrace,
    seed: Vec<f32>,
    mode: ReluMode,
    collect_params: bool,
    stop_at: Option<usize>,
) -> (Option<Tensor>, Option<ParamGrads>, Option<Tensor>) {
    let mut grads = collect_params.then(|| ParamGrads::zeros_like(net));
    let mut grad = seed;
    for (i, layer) in net.layers().iter().enumerate().rev() {
        if stop_at == Some(i) {
            let shape = trace.activations[i + 1].shape().to_vec();
            let t = Tensor::from_vec(&shape, grad).expect("gradient volume");
            return (None, grads, Some(t));
        }
        let input = &trace.activations[i];
        grad = match layer {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                weight,
                ..
            } => {
                let (h, w) = (input.shape()[1], input.shape()[2]);
                if let Some(g) = grads.as_mut() {
                    let lg = g.layers[i].as_mut().expect("conv grads allocated");
                    ops::conv2d_param_grad(
                        input.data(),
                        &grad,
                        *in_channels,
                        h,
                        w,
                        *out_channels,
                        *kernel,
                        *stride,
                        *padding,
                        lg.weight.data_mut(),
                        lg.bias.data_mut(),
                    );
                }
                let mut gin = vec![0.0f32; input.len()];
                ops::conv2d_input_grad(
                    &grad,
                    weight.data(),
                    *in_channels,
                    h,
                    w,
                    *out_channels,
                    *kernel,
                    *stride,
                    *padding,
                    &mut gin,
                );
                gin
            }
            LayerSpec::Relu => {
                let mut gin = vec![0.0f32; input.len()];
                match mode {
                    ReluMode::Standard => ops::relu_backward(&grad, input.data(), &mut gin),
                    ReluMode::Guided => ops::relu_backward_guided(&grad, input.data(), &mut gin),
                }
                gin
            }
            LayerSpec::MaxPool { .. } => {
                let winners = trace.winners[i].as_deref().expect("pool winners recorded");
                let mut gin = vec![0.0f32; input.len()];
                ops::maxpool_backward(&grad, winners, &mut gin);
                gin
            }
            LayerSpec::Flatten => grad,
            LayerSpec::Dense {
                in_dim, weight, ..
            } => {
                if let Some(g) = grads.as_mut() {
                    let lg = g.layers[i].as_mut().expect("dense grads allocated");
                    ops::dense_param_grad(input.data(), &grad, lg.weight.data_mut(), lg.bias.data_mut());
                }
                let mut gin = vec![0.0f32; *in_dim];
                ops::dense_input_grad(&grad, weight.data(), *in_dim, &mut gin);
                gin
            }
        };
    }
    let t = Tensor::from_vec(net.input_shape(), grad).expect("gradient volume");
    (Some(t), grads, None)
}
