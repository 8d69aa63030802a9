//! Per-channel batch normalization over N×C×H×W.

use crate::tensor::{shape_err, Element, Tensor, TensorError};

const OP: &str = "batchnorm2d";

/// Running mean/variance buffers of one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros([channels]),
            var: Tensor::ones([channels]),
        }
    }
}

/// Static settings of a normalization call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormParams {
    pub eps: f64,
    pub momentum: f64,
    pub training: bool,
}

impl Default for BatchNormParams {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            momentum: 0.1,
            training: true,
        }
    }
}

/// Values kept from the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormSaved<T> {
    /// Normalized input before the affine step.
    pub normalized: Tensor<T>,
    /// `1/sqrt(var + eps)` per channel, from batch or running statistics.
    pub inv_std: Vec<T>,
    pub training: bool,
}

fn check_params<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &RunningStats<T>,
    params: &BatchNormParams,
) -> Result<(usize, usize, usize), TensorError> {
    let (n, c, h, w) = input.dims4(OP)?;
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", &running.mean),
        ("running_var", &running.var),
    ] {
        if t.shape() != [c] {
            return Err(shape_err(
                OP,
                format!("{name} has shape {:?} but the input has {c} channels", t.shape()),
            ));
        }
    }
    if !(params.eps > 0.0) || !(params.momentum > 0.0 && params.momentum <= 1.0) {
        return Err(TensorError::Invalid {
            op: OP,
            detail: format!("eps must be > 0 and momentum in (0,1], got {params:?}"),
        });
    }
    let per_channel = n * h * w;
    if params.training && per_channel < 2 {
        return Err(TensorError::Degenerate {
            op: OP,
            detail: format!(
                "training mode needs at least 2 values per channel, batch {n}×{h}×{w} has {per_channel}"
            ),
        });
    }
    Ok((n, c, h * w))
}

/// Normalizes `input` per channel.
///
/// In training mode the batch statistics are used and `running` is updated
/// with `momentum` (unbiased variance); in eval mode `running` is used as is.
pub fn batchnorm2d<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &mut RunningStats<T>,
    params: BatchNormParams,
) -> Result<(Tensor<T>, BatchNormSaved<T>), TensorError> {
    let (n, c, plane) = check_params(input, gamma, beta, running, &params)?;
    let count = n * plane;
    let x = input.data();
    let channel_values = |ch: usize| {
        (0..n).flat_map(move |b| {
            let start = (b * c + ch) * plane;
            start..start + plane
        })
    };

    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    if params.training {
        for ch in 0..c {
            let m = channel_values(ch).map(|i| x[i].to_f64_lossy()).sum::<f64>() / count as f64;
            let v = channel_values(ch)
                .map(|i| {
                    let d = x[i].to_f64_lossy() - m;
                    d * d
                })
                .sum::<f64>()
                / count as f64;
            mean[ch] = m;
            var[ch] = v;
        }
        let unbias = count as f64 / (count as f64 - 1.0);
        let momentum = params.momentum;
        let rm = running.mean.data_mut();
        for ch in 0..c {
            rm[ch] = T::from_f64_lossy((1.0 - momentum) * rm[ch].to_f64_lossy() + momentum * mean[ch]);
        }
        let rv = running.var.data_mut();
        for ch in 0..c {
            rv[ch] = T::from_f64_lossy(
                (1.0 - momentum) * rv[ch].to_f64_lossy() + momentum * var[ch] * unbias,
            );
        }
    } else {
        for ch in 0..c {
            mean[ch] = running.mean.data()[ch].to_f64_lossy();
            var[ch] = running.var.data()[ch].to_f64_lossy();
        }
    }

    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::from_f64_lossy(1.0 / (v + params.eps).sqrt()))
        .collect();
    let mean: Vec<T> = mean.into_iter().map(T::from_f64_lossy).collect();
    let mut normalized = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let start = (b * c + ch) * plane;
            let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
            for i in start..start + plane {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                normalized[i] = xh;
                out[i] = g * xh + bt;
            }
        }
    }
    let shape = input.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), out)?,
        BatchNormSaved {
            normalized: Tensor::new(shape, normalized)?,
            inv_std,
            training: params.training,
        },
    ))
}

/// Gradients with respect to input, gamma and beta.
pub fn batchnorm2d_backward<T: Element>(
    saved: &BatchNormSaved<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), TensorError> {
    if grad_out.shape() != saved.normalized.shape() {
        return Err(shape_err(
            "batchnorm2d_backward",
            format!(
                "gradient shape {:?} does not match the forward output {:?}",
                grad_out.shape(),
                saved.normalized.shape()
            ),
        ));
    }
    let (n, c, h, w) = grad_out.dims4("batchnorm2d_backward")?;
    let plane = h * w;
    let count = T::from_usize(n * plane).expect("count fits");
    let dy = grad_out.data();
    let xh = saved.normalized.data();

    let mut d_gamma = vec![T::zero(); c];
    let mut d_beta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let start = (b * c + ch) * plane;
            for i in start..start + plane {
                d_beta[ch] = d_beta[ch] + dy[i];
                d_gamma[ch] = d_gamma[ch] + dy[i] * xh[i];
            }
        }
    }

    let mut dx = vec![T::zero(); dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let start = (b * c + ch) * plane;
            let scale = gamma.data()[ch] * saved.inv_std[ch];
            if saved.training {
                // dx = γ·σ⁻¹/M · (M·dy − Σdy − x̂·Σ(dy·x̂))
                let (sum_dy, sum_dy_xh) = (d_beta[ch], d_gamma[ch]);
                for i in start..start + plane {
                    dx[i] = scale / count * (count * dy[i] - sum_dy - xh[i] * sum_dy_xh);
                }
            } else {
                for i in start..start + plane {
                    dx[i] = scale * dy[i];
                }
            }
        }
    }
    Ok((
        Tensor::new(grad_out.shape().to_vec(), dx)?,
        Tensor::new([c], d_gamma)?,
        Tensor::new([c], d_beta)?,
    ))
}
