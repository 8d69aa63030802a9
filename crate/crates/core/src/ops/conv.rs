//! 2-D convolution via im2col + GEMM.

use crate::tensor::{shape_err, Element, Tensor, TensorError};

/// Resolved sizes of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn resolve(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self, TensorError> {
        const OP: &str = "conv2d";
        let [batch, in_channels, height, width] = *input else {
            return Err(shape_err(OP, format!("input must be N×C×H×W, got {input:?}")));
        };
        let [out_channels, weight_c, kernel_h, kernel_w] = *weight else {
            return Err(shape_err(OP, format!("weight must be O×C×kh×kw, got {weight:?}")));
        };
        if weight_c != in_channels {
            return Err(shape_err(
                OP,
                format!("input has {in_channels} channels but weight expects {weight_c}"),
            ));
        }
        if stride == 0 {
            return Err(TensorError::Geometry {
                op: OP,
                detail: "stride must be at least 1".into(),
            });
        }
        let out_h = out_extent(height, kernel_h, stride, padding);
        let out_w = out_extent(width, kernel_w, stride, padding);
        match (out_h, out_w) {
            (Some(out_h), Some(out_w)) if out_h > 0 && out_w > 0 && kernel_h > 0 && kernel_w > 0 => {
                Ok(Self {
                    batch,
                    in_channels,
                    height,
                    width,
                    out_channels,
                    kernel_h,
                    kernel_w,
                    stride,
                    padding,
                    out_h,
                    out_w,
                })
            }
            _ => Err(TensorError::Geometry {
                op: OP,
                detail: format!(
                    "{kernel_h}×{kernel_w} kernel with stride {stride}, padding {padding} \
                     leaves no output on a {height}×{width} input"
                ),
            }),
        }
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

/// `floor((size + 2·padding − kernel) / stride) + 1`, or `None` when the
/// kernel does not fit.
pub fn out_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    (size + 2 * padding)
        .checked_sub(kernel)
        .map(|span| span / stride + 1)
}

fn im2col<T: Element>(g: &ConvGeometry, image: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    let (h, w) = (g.height as isize, g.width as isize);
    for c in 0..g.in_channels {
        let chan = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= h {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src = &chan[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, out) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *out = if ix < 0 || ix >= w { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(g: &ConvGeometry, cols: &[T], image: &mut [T]) {
    let plane = g.out_plane();
    let (h, w) = (g.height as isize, g.width as isize);
    for c in 0..g.in_channels {
        let chan = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut chan[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T: Element>(bias: Option<&Tensor<T>>, out_channels: usize) -> Result<(), TensorError> {
    match bias {
        Some(b) if b.shape() != [out_channels] => Err(shape_err(
            "conv2d",
            format!("bias shape {:?} does not match {out_channels} output channels", b.shape()),
        )),
        _ => Ok(()),
    }
}

/// Cross-correlation of `input` (N×C×H×W) with `weight` (O×C×kh×kw).
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>, TensorError> {
    let g = ConvGeometry::resolve(input.shape(), weight.shape(), stride, padding)?;
    check_bias(bias, g.out_channels)?;
    let plane = g.out_plane();
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * plane;
    let mut out = vec![T::zero(); g.batch * out_len];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch_len() * plane]
    };
    for n in 0..g.batch {
        let image = &input.data()[n * in_len..(n + 1) * in_len];
        let patches: &[T] = if g.is_pointwise() {
            image
        } else {
            im2col(&g, image, &mut cols);
            &cols
        };
        let dst = &mut out[n * out_len..(n + 1) * out_len];
        T::gemm(
            g.out_channels,
            g.patch_len(),
            plane,
            weight.data(),
            false,
            patches,
            false,
            dst,
            T::zero(),
        );
        if let Some(b) = bias {
            for (o, row) in dst.chunks_mut(plane).enumerate() {
                let bo = b.data()[o];
                row.iter_mut().for_each(|v| *v = *v + bo);
            }
        }
    }
    Tensor::new([g.batch, g.out_channels, g.out_h, g.out_w], out)
}

/// Gradients produced by [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct Conv2dGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    with_bias: bool,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<Conv2dGrads<T>, TensorError> {
    let g = ConvGeometry::resolve(input.shape(), weight.shape(), stride, padding)?;
    if grad_out.shape() != [g.batch, g.out_channels, g.out_h, g.out_w] {
        return Err(shape_err(
            "conv2d_backward",
            format!("gradient shape {:?} does not match the forward output", grad_out.shape()),
        ));
    }
    let plane = g.out_plane();
    let patch = g.patch_len();
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * plane;

    let mut d_weight = vec![T::zero(); g.out_channels * patch];
    let mut d_input = need_input_grad.then(|| vec![T::zero(); g.batch * in_len]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * plane]
    };
    let mut d_cols = if g.is_pointwise() || !need_input_grad {
        Vec::new()
    } else {
        vec![T::zero(); patch * plane]
    };

    for n in 0..g.batch {
        let image = &input.data()[n * in_len..(n + 1) * in_len];
        let dy = &grad_out.data()[n * out_len..(n + 1) * out_len];
        let patches: &[T] = if g.is_pointwise() {
            image
        } else {
            im2col(&g, image, &mut cols);
            &cols
        };
        // dW += dY · colsᵀ
        T::gemm(g.out_channels, plane, patch, dy, false, patches, true, &mut d_weight, T::one());
        if let Some(dx) = d_input.as_mut() {
            let dx = &mut dx[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                T::gemm(patch, g.out_channels, plane, weight.data(), true, dy, false, dx, T::zero());
            } else {
                T::gemm(patch, g.out_channels, plane, weight.data(), true, dy, false, &mut d_cols, T::zero());
                col2im(&g, &d_cols, dx);
            }
        }
    }

    let d_bias = with_bias.then(|| {
        let mut db = vec![T::zero(); g.out_channels];
        for n in 0..g.batch {
            let dy = &grad_out.data()[n * out_len..(n + 1) * out_len];
            for (o, row) in dy.chunks(plane).enumerate() {
                db[o] = row.iter().fold(db[o], |acc, &v| acc + v);
            }
        }
        db
    });

    Ok(Conv2dGrads {
        input: d_input
            .map(|dx| Tensor::new(input.shape().to_vec(), dx))
            .transpose()?,
        weight: Tensor::new(weight.shape().to_vec(), d_weight)?,
        bias: d_bias.map(|db| Tensor::new([g.out_channels], db)).transpose()?,
    })
}
