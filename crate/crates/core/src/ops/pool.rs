//! Max, average and global-average pooling.

use crate::ops::conv::out_extent;
use crate::tensor::{shape_err, Element, Tensor, TensorError};

const OP: &str = "pool2d";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Max,
    Average,
    /// Reduces every spatial position; kernel, stride and padding are ignored.
    GlobalAverage,
}

/// Window settings for [`pool2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub mode: PoolMode,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolSpec {
    pub fn max(kernel: usize, stride: usize, padding: usize) -> Self {
        Self { mode: PoolMode::Max, kernel, stride, padding }
    }

    pub fn average(kernel: usize, stride: usize) -> Self {
        Self { mode: PoolMode::Average, kernel, stride, padding: 0 }
    }

    pub fn global_average() -> Self {
        Self { mode: PoolMode::GlobalAverage, kernel: 0, stride: 1, padding: 0 }
    }

    /// Output spatial extent for an `h`×`w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize), TensorError> {
        if self.mode == PoolMode::GlobalAverage {
            return Ok((1, 1));
        }
        let geometry = |detail: String| TensorError::Geometry { op: OP, detail };
        if self.kernel == 0 || self.stride == 0 {
            return Err(geometry(format!(
                "kernel and stride must be positive, got kernel {} stride {}",
                self.kernel, self.stride
            )));
        }
        if 2 * self.padding > self.kernel {
            return Err(geometry(format!(
                "padding {} exceeds half the kernel {}",
                self.padding, self.kernel
            )));
        }
        if self.kernel > h + 2 * self.padding || self.kernel > w + 2 * self.padding {
            return Err(geometry(format!(
                "kernel {} is larger than the {h}×{w} input (padding {})",
                self.kernel, self.padding
            )));
        }
        let oh = out_extent(h, self.kernel, self.stride, self.padding).expect("kernel fits");
        let ow = out_extent(w, self.kernel, self.stride, self.padding).expect("kernel fits");
        Ok((oh, ow))
    }
}

/// Forward result; `argmax` holds, for max pooling, the flat input index
/// chosen for each output element.
#[derive(Debug, Clone)]
pub struct PoolOutput<T> {
    pub output: Tensor<T>,
    pub argmax: Option<Vec<usize>>,
}

pub fn pool2d<T: Element>(input: &Tensor<T>, spec: PoolSpec) -> Result<Tensor<T>, TensorError> {
    pool2d_with_indices(input, spec).map(|p| p.output)
}

pub fn pool2d_with_indices<T: Element>(
    input: &Tensor<T>,
    spec: PoolSpec,
) -> Result<PoolOutput<T>, TensorError> {
    let (n, c, h, w) = input.dims4(OP)?;
    let (oh, ow) = spec.output_size(h, w)?;
    let x = input.data();
    let planes = n * c;
    let mut out = vec![T::zero(); planes * oh * ow];

    if spec.mode == PoolMode::GlobalAverage {
        let denom = T::from_usize(h * w).expect("extent fits");
        for (p, o) in out.iter_mut().enumerate() {
            let plane = &x[p * h * w..(p + 1) * h * w];
            *o = plane.iter().fold(T::zero(), |acc, &v| acc + v) / denom;
        }
        return Ok(PoolOutput {
            output: Tensor::new([n, c, 1, 1], out)?,
            argmax: None,
        });
    }

    let mut argmax = (spec.mode == PoolMode::Max).then(|| vec![0usize; out.len()]);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let (ys, xs) = window(spec, oy, ox, h, w);
                let o = (p * oh + oy) * ow + ox;
                match spec.mode {
                    PoolMode::Max => {
                        let mut best = base + ys.start * w + xs.start;
                        for iy in ys.clone() {
                            for ix in xs.clone() {
                                let i = base + iy * w + ix;
                                // strict comparison keeps the first maximum in scan order
                                if x[i] > x[best] {
                                    best = i;
                                }
                            }
                        }
                        out[o] = x[best];
                        argmax.as_mut().expect("max mode")[o] = best;
                    }
                    PoolMode::Average => {
                        let count = T::from_usize(ys.len() * xs.len()).expect("window fits");
                        let mut acc = T::zero();
                        for iy in ys.clone() {
                            for ix in xs.clone() {
                                acc = acc + x[base + iy * w + ix];
                            }
                        }
                        out[o] = acc / count;
                    }
                    PoolMode::GlobalAverage => unreachable!(),
                }
            }
        }
    }
    Ok(PoolOutput {
        output: Tensor::new([n, c, oh, ow], out)?,
        argmax,
    })
}

/// In-bounds input rows and columns covered by output position `(oy, ox)`.
fn window(
    spec: PoolSpec,
    oy: usize,
    ox: usize,
    h: usize,
    w: usize,
) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let clamp = |start: isize, size: usize| {
        let lo = start.max(0) as usize;
        let hi = ((start + spec.kernel as isize).max(0) as usize).min(size);
        lo..hi
    };
    (
        clamp((oy * spec.stride) as isize - spec.padding as isize, h),
        clamp((ox * spec.stride) as isize - spec.padding as isize, w),
    )
}

pub fn pool2d_backward<T: Element>(
    input_shape: &[usize],
    spec: PoolSpec,
    argmax: Option<&[usize]>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let [n, c, h, w] = *input_shape else {
        return Err(shape_err("pool2d_backward", format!("bad input shape {input_shape:?}")));
    };
    let (oh, ow) = spec.output_size(h, w)?;
    if grad_out.shape() != [n, c, oh, ow] {
        return Err(shape_err(
            "pool2d_backward",
            format!("gradient shape {:?} does not match the forward output", grad_out.shape()),
        ));
    }
    let dy = grad_out.data();
    let mut dx = vec![T::zero(); n * c * h * w];
    match spec.mode {
        PoolMode::GlobalAverage => {
            let denom = T::from_usize(h * w).expect("extent fits");
            for (p, &g) in dy.iter().enumerate() {
                let share = g / denom;
                dx[p * h * w..(p + 1) * h * w].iter_mut().for_each(|v| *v = share);
            }
        }
        PoolMode::Max => {
            let argmax = argmax.ok_or_else(|| TensorError::Invalid {
                op: "pool2d_backward",
                detail: "max pooling needs the forward argmax indices".into(),
            })?;
            for (&i, &g) in argmax.iter().zip(dy) {
                dx[i] = dx[i] + g;
            }
        }
        PoolMode::Average => {
            for p in 0..n * c {
                let base = p * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let (ys, xs) = window(spec, oy, ox, h, w);
                        let count = T::from_usize(ys.len() * xs.len()).expect("window fits");
                        let share = dy[(p * oh + oy) * ow + ox] / count;
                        for iy in ys {
                            for ix in xs.clone() {
                                let i = base + iy * w + ix;
                                dx[i] = dx[i] + share;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}
