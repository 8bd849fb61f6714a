//! Convolution as im2col followed by a single matmul.
//!
//! The patch extraction and its adjoint are custom ops with explicit backward
//! passes, so a convolution's gradient reduces to two matmuls and one
//! scatter-add.

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Module, Shape, Tensor};
use candle_nn::VarBuilder;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    kernel: usize,
    pad: usize,
    stride: usize,
}

impl Geometry {
    fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

fn contiguous<'a, T>(s: &'a [T], layout: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("{op} needs a contiguous input"),
    }
}

fn im2col<T: Copy + Default>(src: &[T], n: usize, c: usize, h: usize, w: usize, g: Geometry) -> Vec<T> {
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let kk = g.kernel * g.kernel;
    let rows = c * kk;
    let mut out = vec![T::default(); n * rows * ho * wo];
    for b in 0..n {
        for ci in 0..c {
            let plane = &src[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let row = ci * kk + ky * g.kernel + kx;
                    let start = (row * n + b) * ho * wo;
                    let dst = &mut out[start..start + ho * wo];
                    for oy in 0..ho {
                        let y = (oy * g.stride + ky) as isize - g.pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let src_row = &plane[y as usize * w..(y as usize + 1) * w];
                        for ox in 0..wo {
                            let x = (ox * g.stride + kx) as isize - g.pad as isize;
                            if x >= 0 && x < w as isize {
                                dst[oy * wo + ox] = src_row[x as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Copy + Default + std::ops::AddAssign>(
    src: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    g: Geometry,
) -> Vec<T> {
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let kk = g.kernel * g.kernel;
    let mut out = vec![T::default(); n * c * h * w];
    for b in 0..n {
        for ci in 0..c {
            let plane = &mut out[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let row = ci * kk + ky * g.kernel + kx;
                    let start = (row * n + b) * ho * wo;
                    let col = &src[start..start + ho * wo];
                    for oy in 0..ho {
                        let y = (oy * g.stride + ky) as isize - g.pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let x = (ox * g.stride + kx) as isize - g.pad as isize;
                            if x >= 0 && x < w as isize {
                                plane[y as usize * w + x as usize] += col[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

struct Im2Col(Geometry);

struct Col2Im {
    g: Geometry,
    channels: usize,
    h: usize,
    w: usize,
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = layout.shape().dims4()?;
        let g = self.0;
        let shape = Shape::from((c * g.kernel * g.kernel, n * g.out_size(h) * g.out_size(w)));
        let out = match storage {
            CpuStorage::F32(s) => CpuStorage::F32(im2col(contiguous(s, layout, "im2col")?, n, c, h, w, g)),
            CpuStorage::F64(s) => CpuStorage::F64(im2col(contiguous(s, layout, "im2col")?, n, c, h, w, g)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, c, h, w) = arg.dims4()?;
        let op = Col2Im {
            g: self.0,
            channels: c,
            h,
            w,
        };
        Ok(Some(grad.contiguous()?.apply_op1(op)?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (c, h, w, g) = (self.channels, self.h, self.w, self.g);
        let (_, cols) = layout.shape().dims2()?;
        let n = cols / (g.out_size(h) * g.out_size(w));
        let out = match storage {
            CpuStorage::F32(s) => CpuStorage::F32(col2im(contiguous(s, layout, "col2im")?, n, c, h, w, g)),
            CpuStorage::F64(s) => CpuStorage::F64(col2im(contiguous(s, layout, "col2im")?, n, c, h, w, g)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, Shape::from((n, c, h, w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.g))?))
    }
}

/// Zero-padded 2-D convolution, `weight` of shape `(C_out, C_in, k, k)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, pad: usize, stride: usize) -> candle_core::Result<Tensor> {
    let (n, _, h, w) = x.dims4()?;
    let (cout, cin, k, k2) = weight.dims4()?;
    if k != k2 {
        candle_core::bail!("square kernels only, got {k}x{k2}");
    }
    let g = Geometry { kernel: k, pad, stride };
    if h + 2 * pad < k || w + 2 * pad < k {
        candle_core::bail!("kernel {k} larger than padded input {h}x{w}");
    }
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let y = weight
        .reshape((cout, cin * k * k))?
        .matmul(&cols)?
        .reshape((cout, n, ho, wo))?
        .transpose(0, 1)?
        .contiguous()?;
    match bias {
        Some(b) => y.broadcast_add(&b.reshape((1, cout, 1, 1))?),
        None => Ok(y),
    }
}

/// Nearest-neighbour 2x upsampling of a `(N, C, H, W)` batch.
pub fn upsample2(x: &Tensor) -> candle_core::Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    x.reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((n, c, 2 * h, 2 * w))
}

/// Convolution layer with `weight` and `bias` variables.
#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Tensor,
    pad: usize,
    stride: usize,
}

impl Conv {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        let init = candle_nn::Init::Uniform { lo: -bound, up: bound };
        Ok(Self {
            weight: vb.get_with_hints((cout, cin, kernel, kernel), "weight", init)?,
            bias: vb.get_with_hints(cout, "bias", init)?,
            pad: kernel / 2,
            stride,
        })
    }

    pub fn dtype(&self) -> DType {
        self.weight.dtype()
    }
}

impl Module for Conv {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        conv2d(x, &self.weight, Some(&self.bias), self.pad, self.stride)
    }
}
