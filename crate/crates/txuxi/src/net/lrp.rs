//! Layer-wise relevance propagation with the epsilon rule.
//!
//! Relevance starts as the selected pre-softmax score and is redistributed
//! backwards layer by layer: epsilon-stabilized proportional shares for Conv
//! and Dense, pass-through for ReLU, winner-takes-all for MaxPool. The
//! denominator uses the bias-free pre-activation so the total relevance is
//! conserved up to epsilon leakage at every step.

use crate::error::Result;
use crate::net::{ops, ForwardTrace, LayerSpec, Network, OutputSelector};
use crate::tensor::Tensor;

const EPSILON: f32 = 1e-6;

fn stabilized(v: f32) -> f32 {
    if v >= 0.0 {
        v + EPSILON
    } else {
        v - EPSILON
    }
}

/// Relevance of every input pixel for the selected output.
pub fn lrp(net: &Network, trace: &ForwardTrace, target: OutputSelector) -> Result<Tensor> {
    lrp_with_layer_sums(net, trace, target).map(|(r, _)| r)
}

/// As [`lrp`], additionally returning the total relevance after every
/// propagation step; `sums[0]` is the initial score, `sums[k]` the total
/// after the k-th layer (counted from the output side).
pub fn lrp_with_layer_sums(
    net: &Network,
    trace: &ForwardTrace,
    target: OutputSelector,
) -> Result<(Tensor, Vec<f64>)> {
    net.check_trace(trace)?;
    net.validate_selector(target)?;

    let score = trace.pre_head().data()[target.0];
    let mut relevance = vec![0.0f32; trace.pre_head().len()];
    relevance[target.0] = score;
    let mut sums = Vec::with_capacity(net.layers().len() + 1);
    sums.push(score as f64);

    for (i, layer) in net.layers().iter().enumerate().rev() {
        let input = &trace.activations[i];
        relevance = match layer {
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
                let out_len = relevance.len();
                // bias-free pre-activations
                let zero_bias = vec![0.0f32; *out_channels];
                let mut z = vec![0.0f32; out_len];
                ops::conv2d_forward(
                    input.data(),
                    *in_channels,
                    h,
                    w,
                    weight.data(),
                    &zero_bias,
                    *out_channels,
                    *kernel,
                    *stride,
                    *padding,
                    &mut z,
                );
                let shares: Vec<f32> = relevance
                    .iter()
                    .zip(&z)
                    .map(|(&r, &zj)| r / stabilized(zj))
                    .collect();
                let mut back = vec![0.0f32; input.len()];
                ops::conv2d_input_grad(
                    &shares,
                    weight.data(),
                    *in_channels,
                    h,
                    w,
                    *out_channels,
                    *kernel,
                    *stride,
                    *padding,
                    &mut back,
                );
                back.iter().zip(input.data()).map(|(&b, &x)| b * x).collect()
            }
            LayerSpec::Dense {
                in_dim, weight, ..
            } => {
                let mut z = vec![0.0f32; relevance.len()];
                let zero_bias = vec![0.0f32; relevance.len()];
                ops::dense_forward(input.data(), weight.data(), &zero_bias, relevance.len(), &mut z);
                let shares: Vec<f32> = relevance
                    .iter()
                    .zip(&z)
                    .map(|(&r, &zj)| r / stabilized(zj))
                    .collect();
                let mut back = vec![0.0f32; *in_dim];
                ops::dense_input_grad(&shares, weight.data(), *in_dim, &mut back);
                back.iter().zip(input.data()).map(|(&b, &x)| b * x).collect()
            }
            LayerSpec::Relu | LayerSpec::Flatten => relevance,
            LayerSpec::MaxPool { .. } => {
                let winners = trace.winners[i].as_deref().expect("pool winners recorded");
                let mut back = vec![0.0f32; input.len()];
                ops::maxpool_backward(&relevance, winners, &mut back);
                back
            }
        };
        sums.push(relevance.iter().map(|&v| v as f64).sum());
    }

    let map = Tensor::from_vec(net.input_shape(), relevance)?;
    Ok((map, sums))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Head;

    #[test]
    fn one_dense_layer_z_rule() {
        // x = (1, 1), W = (2, 3), b = 0: score 5 splits into (2, 3)
        let weight = Tensor::from_vec(&[1, 2], vec![2.0, 3.0]).unwrap();
        let net = Network::new(
            &[2],
            vec![LayerSpec::Dense {
                in_dim: 2,
                out_dim: 1,
                weight,
                bias: Tensor::zeros(&[1]),
            }],
            Head::Regression,
        )
        .unwrap();
        let x = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let (_, trace) = net.forward(&x).unwrap();
        let r = lrp(&net, &trace, OutputSelector(0)).unwrap();
        assert!((r.data()[0] - 2.0).abs() < 1e-4);
        assert!((r.data()[1] - 3.0).abs() < 1e-4);
    }

    #[test]
    fn conservation_on_standard_net() {
        let net = Network::standard(Head::Classification { classes: 4 }, 5);
        let x = Tensor::from_vec(
            &[1, 64, 64],
            (0..64 * 64).map(|i| ((i * 37 % 101) as f32) / 101.0).collect(),
        )
        .unwrap();
        let (_, trace) = net.forward(&x).unwrap();
        let target = OutputSelector(2);
        let score = trace.pre_head().data()[2] as f64;
        let (map, sums) = lrp_with_layer_sums(&net, &trace, target).unwrap();
        let total: f64 = map.data().iter().map(|&v| v as f64).sum();
        assert!(
            (total - score).abs() <= 0.01 * score.abs().max(1e-6),
            "total {total} vs score {score}"
        );
        for s in &sums {
            assert!((s - score).abs() <= 0.01 * score.abs().max(1e-6));
        }
    }
}
