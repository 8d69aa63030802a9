//! Elementwise activations, channel concatenation, the affine layer and the
//! logits loss.

use crate::tensor::{shape_err, Element, Tensor, TensorError};

pub fn relu<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// Gradient is passed only where the input was strictly positive.
pub fn relu_backward<T: Element>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

/// Logistic function in the branch form that never evaluates `exp` of a
/// large positive argument.
pub fn sigmoid_scalar<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

pub fn sigmoid_backward<T: Element>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect();
    Tensor::new(output.shape().to_vec(), data).expect("same shape")
}

/// Concatenates N×Cᵢ×H×W tensors along the channel axis in list order.
pub fn concat_channels<T: Element>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>, TensorError> {
    const OP: &str = "concat_channels";
    let first = inputs
        .first()
        .ok_or_else(|| shape_err(OP, "needs at least one input"))?;
    let (n, _, h, w) = first.dims4(OP)?;
    let mut channels = 0;
    for t in inputs {
        let (tn, tc, th, tw) = t.dims4(OP)?;
        if (tn, th, tw) != (n, h, w) {
            return Err(shape_err(
                OP,
                format!("input {:?} does not match batch/spatial extent {n}×_×{h}×{w}", t.shape()),
            ));
        }
        channels += tc;
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * channels * plane);
    for b in 0..n {
        for t in inputs {
            let per_sample = t.shape()[1] * plane;
            out.extend_from_slice(&t.data()[b * per_sample..(b + 1) * per_sample]);
        }
    }
    Tensor::new([n, channels, h, w], out)
}

/// Splits a channel-concatenated tensor back into pieces of the given widths.
pub fn split_channels<T: Element>(
    input: &Tensor<T>,
    widths: &[usize],
) -> Result<Vec<Tensor<T>>, TensorError> {
    let (n, c, h, w) = input.dims4("split_channels")?;
    if widths.iter().sum::<usize>() != c {
        return Err(shape_err(
            "split_channels",
            format!("widths {widths:?} do not sum to {c} channels"),
        ));
    }
    let plane = h * w;
    let mut parts: Vec<Vec<T>> = widths
        .iter()
        .map(|&wc| Vec::with_capacity(n * wc * plane))
        .collect();
    for b in 0..n {
        let mut offset = (b * c) * plane;
        for (part, &wc) in parts.iter_mut().zip(widths) {
            part.extend_from_slice(&input.data()[offset..offset + wc * plane]);
            offset += wc * plane;
        }
    }
    parts
        .into_iter()
        .zip(widths)
        .map(|(data, &wc)| Tensor::new([n, wc, h, w], data))
        .collect()
}

/// `input · weightᵀ + bias` for input N×F, weight D×F, bias D.
pub fn linear<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    const OP: &str = "linear";
    let (n, f, d) = linear_dims(input, weight, bias, OP)?;
    let mut out = vec![T::zero(); n * d];
    for row in out.chunks_mut(d) {
        row.copy_from_slice(bias.data());
    }
    T::gemm(n, f, d, input.data(), false, weight.data(), true, &mut out, T::one());
    Tensor::new([n, d], out)
}

fn linear_dims<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    op: &'static str,
) -> Result<(usize, usize, usize), TensorError> {
    let [n, f] = *input.shape() else {
        return Err(shape_err(op, format!("input must be N×F, got {:?}", input.shape())));
    };
    let [d, wf] = *weight.shape() else {
        return Err(shape_err(op, format!("weight must be D×F, got {:?}", weight.shape())));
    };
    if wf != f {
        return Err(shape_err(op, format!("input has {f} features but weight expects {wf}")));
    }
    if bias.shape() != [d] {
        return Err(shape_err(op, format!("bias shape {:?} does not match {d} outputs", bias.shape())));
    }
    Ok((n, f, d))
}

/// Gradients of [`linear`] with respect to input, weight and bias.
pub fn linear_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), TensorError> {
    let [n, f] = *input.shape() else {
        return Err(shape_err("linear_backward", "input must be 2-D"));
    };
    let d = weight.shape()[0];
    if grad_out.shape() != [n, d] {
        return Err(shape_err("linear_backward", "gradient does not match the forward output"));
    }
    let mut dx = vec![T::zero(); n * f];
    T::gemm(n, d, f, grad_out.data(), false, weight.data(), false, &mut dx, T::zero());
    let mut dw = vec![T::zero(); d * f];
    T::gemm(d, n, f, grad_out.data(), true, input.data(), false, &mut dw, T::zero());
    let mut db = vec![T::zero(); d];
    for row in grad_out.data().chunks(d) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc = *acc + g;
        }
    }
    Ok((
        Tensor::new([n, f], dx)?,
        Tensor::new([d, f], dw)?,
        Tensor::new([d], db)?,
    ))
}

fn check_targets<T: Element>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<(), TensorError> {
    const OP: &str = "bce_with_logits";
    if logits.shape() != targets.shape() {
        return Err(shape_err(
            OP,
            format!("logits {:?} and targets {:?} differ", logits.shape(), targets.shape()),
        ));
    }
    if logits.numel() == 0 {
        return Err(shape_err(OP, "empty input"));
    }
    if let Some(bad) = targets.data().iter().find(|&&y| y != T::zero() && y != T::one()) {
        return Err(TensorError::Invalid {
            op: OP,
            detail: format!("targets must be 0 or 1, found {bad}"),
        });
    }
    Ok(())
}

/// Mean binary cross-entropy on raw logits, in the form
/// `max(x,0) − x·y + ln(1 + exp(−|x|))` that stays finite for any logit.
pub fn bce_with_logits<T: Element>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<T, TensorError> {
    check_targets(logits, targets)?;
    let total = logits
        .data()
        .iter()
        .zip(targets.data())
        .fold(T::zero(), |acc, (&x, &y)| {
            acc + (x.max(T::zero()) - x * y + (-x.abs()).exp().ln_1p())
        });
    Ok(total / T::from_usize(logits.numel()).expect("count fits"))
}

/// `(σ(x) − y) / count`, scaled by the upstream scalar gradient.
pub fn bce_with_logits_backward<T: Element>(
    logits: &Tensor<T>,
    targets: &Tensor<T>,
    grad_out: T,
) -> Result<Tensor<T>, TensorError> {
    check_targets(logits, targets)?;
    let count = T::from_usize(logits.numel()).expect("count fits");
    let data = logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&x, &y)| grad_out * (sigmoid_scalar(x) - y) / count)
        .collect();
    Tensor::new(logits.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_forward_and_gradient() {
        let x = Tensor::<f64>::new([3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), [0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::ones([3]));
        assert_eq!(g.data(), [0.0, 0.0, 1.0]);
        let pos = Tensor::<f32>::new([2], vec![0.5, 3.0]).unwrap();
        assert!(relu(&pos).bit_eq(&pos));
    }

    #[test]
    fn sigmoid_saturates_without_overflow() {
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        assert!((sigmoid_scalar(100.0f64) - 1.0).abs() < 1e-12);
        // exp(-100) / (1 + exp(-100)), evaluated at 50 digits
        let expected = 3.720_075_976_020_836e-44;
        let got = sigmoid_scalar(-100.0f64);
        assert!(got.is_finite() && got > 0.0);
        assert!((got - expected).abs() / expected < 1e-12, "{got}");
        assert!(sigmoid_scalar(-1000.0f64).is_finite());
        assert!(sigmoid_scalar(1000.0f32).is_finite());
    }

    #[test]
    fn concat_then_split_recovers_inputs() {
        let a = Tensor::<f32>::from_fn([2, 2, 2, 3], |i| i as f32);
        let b = Tensor::<f32>::from_fn([2, 1, 2, 3], |i| -(i as f32));
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), [2, 3, 2, 3]);
        let parts = split_channels(&cat, &[2, 1]).unwrap();
        assert!(parts[0].bit_eq(&a));
        assert!(parts[1].bit_eq(&b));
    }

    #[test]
    fn concat_widths_add_up() {
        let stem = Tensor::<f32>::zeros([1, 64, 2, 2]);
        assert!(concat_channels(&[&stem]).unwrap().bit_eq(&stem));
        let growth = Tensor::<f32>::zeros([1, 32, 2, 2]);
        assert_eq!(concat_channels(&[&stem, &growth]).unwrap().shape()[1], 96);
        let mut all = vec![&stem];
        all.extend(std::iter::repeat_n(&growth, 6));
        assert_eq!(concat_channels(&all).unwrap().shape()[1], 256);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f32>::zeros([1, 2, 2, 2]);
        let b = Tensor::<f32>::zeros([1, 2, 3, 2]);
        assert!(matches!(concat_channels(&[&a, &b]), Err(TensorError::Shape { .. })));
        assert!(concat_channels::<f32>(&[]).is_err());
    }

    #[test]
    fn linear_small_cases() {
        let x = Tensor::<f64>::new([1, 2], vec![3.0, 4.0]).unwrap();
        let w = Tensor::<f64>::new([1, 2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::<f64>::zeros([1]);
        assert_eq!(linear(&x, &w, &b).unwrap().data(), [7.0]);

        let eye = Tensor::<f64>::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let x = Tensor::<f64>::from_fn([2, 3], |i| i as f64 - 2.5);
        assert!(linear(&x, &eye, &Tensor::zeros([3])).unwrap().bit_eq(&x));

        let bad = Tensor::<f64>::zeros([2, 4]);
        assert!(linear(&x, &bad, &Tensor::zeros([2])).is_err());
    }

    #[test]
    fn bce_reference_points() {
        let one = Tensor::<f64>::ones([1, 1]);
        let l = bce_with_logits(&Tensor::zeros([1, 1]), &one).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let l = bce_with_logits(&Tensor::full([1, 1], -100.0), &one).unwrap();
        assert_eq!(l, 100.0);
        let l = bce_with_logits(&Tensor::full([1, 1], 1e6f64), &Tensor::zeros([1, 1])).unwrap();
        assert!(l.is_finite());
    }

    #[test]
    fn bce_rejects_soft_targets() {
        let y = Tensor::<f32>::new([1, 2], vec![0.7, 1.0]).unwrap();
        let err = bce_with_logits(&Tensor::zeros([1, 2]), &y).unwrap_err();
        assert!(matches!(err, TensorError::Invalid { .. }));
    }
}
