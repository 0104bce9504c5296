//! DeepLIFT contributions with the Rescale rule.
//!
//! Multipliers flow backwards like gradients: linear layers reuse the weight
//! transpose, each nonlinearity uses delta-output over delta-input computed
//! between the actual input and a reference baseline, falling back to the
//! local gradient when the delta is too small to divide by.

use crate::error::{Result, TxError};
use crate::net::{ops, LayerSpec, Network, OutputSelector};
use crate::tensor::Tensor;

const DELTA_FLOOR: f32 = 1e-7;

/// Per-pixel contributions to `f(x) - f(baseline)` for the selected output.
pub fn deeplift(
    net: &Network,
    x: &Tensor,
    baseline: &Tensor,
    target: OutputSelector,
) -> Result<Tensor> {
    net.check_input(x)?;
    if baseline.shape() != x.shape() {
        return Err(TxError::InputShape(format!(
            "baseline shape {:?} != input {:?}",
            baseline.shape(),
            x.shape()
        )));
    }
    net.validate_selector(target)?;

    let (_, trace_x) = net.forward(x)?;
    let (_, trace_b) = net.forward(baseline)?;

    let mut mult = vec![0.0f32; trace_x.pre_head().len()];
    mult[target.0] = 1.0;

    for (i, layer) in net.layers().iter().enumerate().rev() {
        let in_x = &trace_x.activations[i];
        let in_b = &trace_b.activations[i];
        let out_x = &trace_x.activations[i + 1];
        let out_b = &trace_b.activations[i + 1];
        mult = match layer {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                weight,
                ..
            } => {
                let (h, w) = (in_x.shape()[1], in_x.shape()[2]);
                let mut back = vec![0.0f32; in_x.len()];
                ops::conv2d_input_grad(
                    &mult,
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
                back
            }
            LayerSpec::Dense {
                in_dim, weight, ..
            } => {
                let mut back = vec![0.0f32; *in_dim];
                ops::dense_input_grad(&mult, weight.data(), *in_dim, &mut back);
                back
            }
            LayerSpec::Relu => mult
                .iter()
                .enumerate()
                .map(|(j, &m)| {
                    let din = in_x.data()[j] - in_b.data()[j];
                    let rescale = if din.abs() >= DELTA_FLOOR {
                        (out_x.data()[j] - out_b.data()[j]) / din
                    } else if in_x.data()[j] > 0.0 {
                        1.0
                    } else {
                        0.0
                    };
                    m * rescale
                })
                .collect(),
            LayerSpec::MaxPool { .. } => {
                let winners = trace_x.winners[i].as_deref().expect("pool winners recorded");
                let mut back = vec![0.0f32; in_x.len()];
                for (j, (&m, &win)) in mult.iter().zip(winners).enumerate() {
                    let wi = win as usize;
                    let din = in_x.data()[wi] - in_b.data()[wi];
                    let rescale = if din.abs() >= DELTA_FLOOR {
                        (out_x.data()[j] - out_b.data()[j]) / din
                    } else {
                        1.0
                    };
                    back[wi] += m * rescale;
                }
                back
            }
            LayerSpec::Flatten => mult,
        };
    }

    let contributions: Vec<f32> = mult
        .iter()
        .zip(x.data().iter().zip(baseline.data()))
        .map(|(&m, (&xv, &bv))| m * (xv - bv))
        .collect();
    Tensor::from_vec(net.input_shape(), contributions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Head;

    #[test]
    fn zero_delta_gives_zero_contributions() {
        let net = Network::standard(Head::Classification { classes: 4 }, 9);
        let x = Tensor::filled(&[1, 64, 64], 0.4);
        let c = deeplift(&net, &x, &x, OutputSelector(1)).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_net_zero_baseline_recovers_w_times_x() {
        let weight = Tensor::from_vec(&[1, 3], vec![2.0, -1.0, 0.5]).unwrap();
        let net = Network::new(
            &[3],
            vec![LayerSpec::Dense {
                in_dim: 3,
                out_dim: 1,
                weight,
                bias: Tensor::zeros(&[1]),
            }],
            Head::Regression,
        )
        .unwrap();
        let x = Tensor::from_vec(&[3], vec![1.0, 2.0, 4.0]).unwrap();
        let c = deeplift(&net, &x, &Tensor::zeros(&[3]), OutputSelector(0)).unwrap();
        assert_eq!(c.data(), &[2.0, -2.0, 2.0]);
    }

    #[test]
    fn summation_to_delta_on_standard_net() {
        let net = Network::standard(Head::Classification { classes: 4 }, 21);
        let x = Tensor::from_vec(
            &[1, 64, 64],
            (0..64 * 64).map(|i| ((i * 13 % 97) as f32) / 97.0).collect(),
        )
        .unwrap();
        let baseline = Tensor::zeros(&[1, 64, 64]);
        let target = OutputSelector(0);
        let c = deeplift(&net, &x, &baseline, target).unwrap();
        let total: f64 = c.data().iter().map(|&v| v as f64).sum();
        let fx = net.logits(&x).unwrap()[0] as f64;
        let fb = net.logits(&baseline).unwrap()[0] as f64;
        let delta = fx - fb;
        assert!(
            (total - delta).abs() <= 0.01 * delta.abs().max(1e-6),
            "sum {total} vs delta {delta}"
        );
    }
}
