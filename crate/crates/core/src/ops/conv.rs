//! 2-D convolution over NCHW tensors via im2col + GEMM.

use serde::{Deserialize, Serialize};

use super::scratch::with_buffer;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Geometry of one convolution layer.
///
/// `dilation` is the tap spacing: 1 is a dense kernel, `r` leaves `r - 1`
/// skipped pixels between neighbouring taps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvSpec {
    /// Stride-1 convolution padded so odd kernels keep the spatial size:
    /// `floor((k - 1) * dilation / 2)` per side.
    pub fn same(out_channels: usize, kernel_h: usize, kernel_w: usize, dilation: usize) -> Self {
        ConvSpec {
            out_channels,
            kernel_h,
            kernel_w,
            stride: 1,
            dilation,
            pad_h: (kernel_h - 1) * dilation / 2,
            pad_w: (kernel_w - 1) * dilation / 2,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 {
            return Err(Error::config("convolution needs at least one output channel"));
        }
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::config(format!("kernel {}x{} has a zero side", self.kernel_h, self.kernel_w)));
        }
        if self.dilation == 0 || self.stride == 0 {
            return Err(Error::config("stride and dilation must be at least 1"));
        }
        Ok(())
    }

    /// Number of input pixels spanned by the kernel along each axis.
    pub fn footprint(&self) -> (usize, usize) {
        ((self.kernel_h - 1) * self.dilation + 1, (self.kernel_w - 1) * self.dilation + 1)
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (fh, fw) = self.footprint();
        let (ph, pw) = (h + 2 * self.pad_h, w + 2 * self.pad_w);
        if ph < fh || pw < fw {
            return Err(Error::config(format!(
                "input {h}x{w} (padded {ph}x{pw}) is smaller than the kernel footprint {fh}x{fw}"
            )));
        }
        Ok(((ph - fh) / self.stride + 1, (pw - fw) / self.stride + 1))
    }

    pub fn weight_shape(&self, in_channels: usize) -> [usize; 4] {
        [self.out_channels, in_channels, self.kernel_h, self.kernel_w]
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.pad_h == 0 && self.pad_w == 0
    }
}

/// Resolved sizes for a convolution applied to a concrete input.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub spec: ConvSpec,
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn resolve<T: Scalar>(input: &Tensor<T>, spec: &ConvSpec, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Self> {
        spec.validate()?;
        let (n, c, h, w) = input.dims4()?;
        let expected = spec.weight_shape(c);
        if weight.shape() != expected {
            return Err(Error::config(format!(
                "weight shape {:?} does not match {:?} for {c} input channels",
                weight.shape(),
                expected
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [spec.out_channels] {
                return Err(Error::config(format!(
                    "bias shape {:?} does not match [{}]",
                    b.shape(),
                    spec.out_channels
                )));
            }
        }
        let (out_h, out_w) = spec.output_size(h, w)?;
        Ok(ConvGeometry { spec: *spec, batch: n, in_channels: c, in_h: h, in_w: w, out_h, out_w })
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.spec.kernel_h * self.spec.kernel_w
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.spec.out_channels, self.out_h, self.out_w]
    }
}

/// Range of output coordinates `o` with `0 <= o*stride - pad + offset < len`.
fn valid_range(out_len: usize, in_len: usize, stride: usize, pad: usize, offset: usize) -> (usize, usize) {
    // o*stride + offset >= pad
    let lo = if offset >= pad { 0 } else { (pad - offset).div_ceil(stride) };
    // o*stride + offset - pad <= in_len - 1
    let hi = if in_len + pad > offset { (in_len + pad - offset - 1) / stride + 1 } else { 0 };
    (lo.min(out_len), hi.min(out_len).max(lo.min(out_len)))
}

fn im2col<T: Scalar>(g: &ConvGeometry, image: &[T], col: &mut [T]) {
    let s = &g.spec;
    let p = g.out_pixels();
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..s.kernel_h {
            let (ylo, yhi) = valid_range(g.out_h, g.in_h, s.stride, s.pad_h, ki * s.dilation);
            for kj in 0..s.kernel_w {
                let (xlo, xhi) = valid_range(g.out_w, g.in_w, s.stride, s.pad_w, kj * s.dilation);
                let dst = &mut col[row * p..(row + 1) * p];
                dst.fill(T::zero());
                for oy in ylo..yhi {
                    let iy = oy * s.stride + ki * s.dilation - s.pad_h;
                    let src_row = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if s.stride == 1 {
                        let ix0 = xlo + kj * s.dilation - s.pad_w;
                        out_row[xlo..xhi].copy_from_slice(&src_row[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            out_row[ox] = src_row[ox * s.stride + kj * s.dilation - s.pad_w];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeometry, col: &[T], image: &mut [T]) {
    let s = &g.spec;
    let p = g.out_pixels();
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &mut image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..s.kernel_h {
            let (ylo, yhi) = valid_range(g.out_h, g.in_h, s.stride, s.pad_h, ki * s.dilation);
            for kj in 0..s.kernel_w {
                let (xlo, xhi) = valid_range(g.out_w, g.in_w, s.stride, s.pad_w, kj * s.dilation);
                let src = &col[row * p..(row + 1) * p];
                for oy in ylo..yhi {
                    let iy = oy * s.stride + ki * s.dilation - s.pad_h;
                    let dst_row = &mut plane[iy * g.in_w..(iy + 1) * g.in_w];
                    let col_row = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for ox in xlo..xhi {
                        dst_row[ox * s.stride + kj * s.dilation - s.pad_w] += col_row[ox];
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let k = g.col_rows();
    let p = g.out_pixels();
    let cout = g.spec.out_channels;
    let in_plane = g.in_channels * g.in_h * g.in_w;
    let mut out = vec![T::zero(); g.batch * cout * p];
    let col_len = if g.spec.is_pointwise() { 0 } else { k * p };
    with_buffer(col_len, |col: &mut [T]| {
        for n in 0..g.batch {
            let image = &input[n * in_plane..(n + 1) * in_plane];
            let cols: &[T] = if g.spec.is_pointwise() {
                image
            } else {
                im2col(g, image, col);
                col
            };
            let out_n = &mut out[n * cout * p..(n + 1) * cout * p];
            if let Some(b) = bias {
                for (c, chunk) in out_n.chunks_mut(p).enumerate() {
                    chunk.fill(b[c]);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            T::gemm(cout, k, p, T::one(), weight, (k as isize, 1), cols, (p as isize, 1), beta, out_n, (p as isize, 1));
        }
    });
    out
}

/// Gradients of a convolution. Any of the three outputs may be skipped.
pub(crate) struct ConvGrads<'a, T> {
    pub input: Option<&'a mut [T]>,
    pub weight: Option<&'a mut [T]>,
    pub bias: Option<&'a mut [T]>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    grads: ConvGrads<'_, T>,
) {
    let k = g.col_rows();
    let p = g.out_pixels();
    let cout = g.spec.out_channels;
    let in_plane = g.in_channels * g.in_h * g.in_w;
    let ConvGrads { input: mut d_input, weight: mut d_weight, bias: d_bias } = grads;

    if let Some(db) = d_bias {
        for n in 0..g.batch {
            for c in 0..cout {
                let start = (n * cout + c) * p;
                db[c] += grad_out[start..start + p].iter().copied().sum::<T>();
            }
        }
    }
    if d_input.is_none() && d_weight.is_none() {
        return;
    }
    let pointwise = g.spec.is_pointwise();
    let col_len = if pointwise { 0 } else { k * p };
    with_buffer(col_len, |col: &mut [T]| {
        for n in 0..g.batch {
            let go = &grad_out[n * cout * p..(n + 1) * cout * p];
            if let Some(dw) = d_weight.as_deref_mut() {
                let image = &input[n * in_plane..(n + 1) * in_plane];
                let cols: &[T] = if pointwise {
                    image
                } else {
                    im2col(g, image, col);
                    col
                };
                // dW (cout x k) += dOut (cout x p) * col^T (p x k)
                T::gemm(cout, p, k, T::one(), go, (p as isize, 1), cols, (1, p as isize), T::one(), dw, (k as isize, 1));
            }
            if let Some(di) = d_input.as_deref_mut() {
                let di_n = &mut di[n * in_plane..(n + 1) * in_plane];
                if pointwise {
                    // dIn (k x p) += W^T (k x cout) * dOut (cout x p)
                    T::gemm(k, cout, p, T::one(), weight, (1, k as isize), go, (p as isize, 1), T::one(), di_n, (p as isize, 1));
                } else {
                    // the column buffer is free again once dW is done
                    T::gemm(k, cout, p, T::one(), weight, (1, k as isize), go, (p as isize, 1), T::zero(), col, (p as isize, 1));
                    col2im(g, col, di_n);
                }
            }
        }
    });
}
