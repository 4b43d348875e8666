//! 2-D convolution as im2col followed by a matrix product.
//!
//! candle's native conv backward is slow on CPU; unfolding patches with a
//! custom op and letting the (fast) matmul carry both gradients is several
//! times quicker at the sizes used here.

use candle_core::{CpuStorage, CustomOp1, Layout, Module, Shape, Tensor, WithDType};

use super::{Init, Scope};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct Unfold {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl Unfold {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// Calls `f(src_start, dst_start, len)` for every run of in-bounds
    /// patch elements along one output row. Within a run the source advances
    /// by `stride` and the destination by one. Destination layout is
    /// `[C*K*K, B*Ho*Wo]`.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = self.out_hw();
        let (k, s, pad) = (self.kernel, self.stride, self.pad);
        for b in 0..self.batch {
            for c in 0..self.channels {
                let src_plane = (b * self.channels + c) * self.height * self.width;
                for ky in 0..k {
                    for kx in 0..k {
                        let lo = if pad > kx { (pad - kx).div_ceil(s) } else { 0 };
                        let hi = ((self.width + pad - kx).div_ceil(s)).min(wo);
                        if lo >= hi {
                            continue;
                        }
                        let row = c * k * k + ky * k + kx;
                        let dst_row = (row * self.batch + b) * ho * wo;
                        for oy in 0..ho {
                            let iy = (oy * s + ky) as isize - pad as isize;
                            if iy < 0 || iy >= self.height as isize {
                                continue;
                            }
                            let ix0 = lo * s + kx - pad;
                            f(
                                src_plane + iy as usize * self.width + ix0,
                                dst_row + oy * wo + lo,
                                hi - lo,
                            );
                        }
                    }
                }
            }
        }
    }

    fn unfold<T: WithDType>(&self, src: &[T]) -> Vec<T> {
        let (ho, wo) = self.out_hw();
        let mut dst =
            vec![T::zero(); self.batch * self.channels * self.kernel * self.kernel * ho * wo];
        let st = self.stride;
        self.for_each_run(|s, d, n| {
            if st == 1 {
                dst[d..d + n].copy_from_slice(&src[s..s + n]);
            } else {
                for (i, out) in dst[d..d + n].iter_mut().enumerate() {
                    *out = src[s + i * st];
                }
            }
        });
        dst
    }

    fn fold<T: WithDType>(&self, grad: &[T]) -> Vec<T> {
        let mut dst = vec![T::zero(); self.batch * self.channels * self.height * self.width];
        let st = self.stride;
        self.for_each_run(|s, d, n| {
            for (i, g) in grad[d..d + n].iter().enumerate() {
                let j = s + i * st;
                dst[j] = dst[j] + *g;
            }
        });
        dst
    }
}

struct UnfoldOp(Unfold);
struct FoldOp(Unfold);

fn contiguous_slice<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((o1, o2)) => Ok(&v[o1..o2]),
        None => candle_core::bail!("im2col: input must be contiguous"),
    }
}

impl CustomOp1 for UnfoldOp {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let p = self.0;
        let (ho, wo) = p.out_hw();
        let shape = Shape::from((p.channels * p.kernel * p.kernel, p.batch * ho * wo));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(p.unfold(contiguous_slice(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(p.unfold(contiguous_slice(v, layout)?)),
            _ => candle_core::bail!("im2col: only f32 and f64 are supported"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let g = grad_res.contiguous()?.apply_op1_no_bwd(&FoldOp(self.0))?;
        Ok(Some(g))
    }
}

impl CustomOp1 for FoldOp {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let p = self.0;
        let shape = Shape::from((p.batch, p.channels, p.height, p.width));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(p.fold(contiguous_slice(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(p.fold(contiguous_slice(v, layout)?)),
            _ => candle_core::bail!("col2im: only f32 and f64 are supported"),
        };
        Ok((out, shape))
    }
}

/// Square-kernel convolution with "same" padding (`kernel / 2`).
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
}

impl Conv2d {
    pub fn new(
        vs: &Scope,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        if stride == 0 || kernel == 0 {
            return Err(Error::Config("conv: kernel and stride must be positive".into()));
        }
        let fan_in = (in_channels * kernel * kernel) as f64;
        let weight = vs.get(
            "weight",
            &[out_channels, in_channels * kernel * kernel],
            Init::Normal((2.0 / fan_in).sqrt()),
        )?;
        let bias = if bias {
            Some(vs.get("bias", &[out_channels], Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
        })
    }

    pub fn out_size(&self, size: usize) -> usize {
        (size + 2 * (self.kernel / 2) - self.kernel) / self.stride + 1
    }
}

impl Module for Conv2d {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = xs.dims4()?;
        if c != self.in_channels {
            candle_core::bail!(
                "conv: expected {} input channels, got {c}",
                self.in_channels
            );
        }
        let (cols, ho, wo) = if self.kernel == 1 && self.stride == 1 {
            let cols = xs.reshape((b, c, h * w))?.transpose(0, 1)?.contiguous()?;
            (cols.reshape((c, b * h * w))?, h, w)
        } else {
            let p = Unfold {
                batch: b,
                channels: c,
                height: h,
                width: w,
                kernel: self.kernel,
                stride: self.stride,
                pad: self.kernel / 2,
            };
            let (ho, wo) = p.out_hw();
            (xs.contiguous()?.apply_op1(UnfoldOp(p))?, ho, wo)
        };
        let ys = self.weight.matmul(&cols)?;
        let ys = match &self.bias {
            Some(bias) => ys.broadcast_add(&bias.reshape((self.out_channels, 1))?)?,
            None => ys,
        };
        ys.reshape((self.out_channels, b, ho * wo))?
            .transpose(0, 1)?
            .contiguous()?
            .reshape((b, self.out_channels, ho, wo))
    }
}
