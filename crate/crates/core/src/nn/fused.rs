//! Group normalization (optionally followed by ReLU) and ReLU as single CPU
//! kernels with hand-written backward passes. Composing them from tensor
//! primitives costs an order of magnitude more in the backward pass.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor, WithDType};

fn slice<'a, T>(v: &'a [T], layout: &Layout, what: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("{what}: input must be contiguous"),
    }
}

macro_rules! dispatch1 {
    ($s:expr, $l:expr, $name:expr, |$v:ident| $body:expr) => {
        match $s {
            CpuStorage::F32(v) => {
                let $v = slice(v, $l, $name)?;
                CpuStorage::F32($body)
            }
            CpuStorage::F64(v) => {
                let $v = slice(v, $l, $name)?;
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("{}: only f32 and f64 are supported", $name),
        }
    };
}

#[derive(Clone, Copy, Debug)]
struct GnDims {
    batch: usize,
    channels: usize,
    spatial: usize,
    groups: usize,
    eps: f64,
    relu: bool,
}

impl GnDims {
    fn per_group(&self) -> usize {
        self.channels / self.groups * self.spatial
    }

    /// Mean and reciprocal standard deviation of group `bg`.
    fn stats<T: WithDType>(&self, x: &[T], bg: usize) -> (f64, f64) {
        let n = self.per_group();
        let chunk = &x[bg * n..(bg + 1) * n];
        let mean = chunk.iter().map(|v| v.to_f64()).sum::<f64>() / n as f64;
        let var = chunk
            .iter()
            .map(|v| {
                let d = v.to_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / n as f64;
        (mean, 1.0 / (var + self.eps).sqrt())
    }

    fn forward<T: WithDType>(&self, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); x.len()];
        let cpg = self.channels / self.groups;
        for bg in 0..self.batch * self.groups {
            let (mean, rstd) = self.stats(x, bg);
            let g = bg % self.groups;
            for cl in 0..cpg {
                let c = g * cpg + cl;
                let (wc, bc) = (w[c].to_f64() * rstd, b[c].to_f64());
                let base = (bg * cpg + cl) * self.spatial;
                for i in base..base + self.spatial {
                    let mut y = (x[i].to_f64() - mean) * wc + bc;
                    if self.relu && y < 0.0 {
                        y = 0.0;
                    }
                    out[i] = T::from_f64(y);
                }
            }
        }
        out
    }

    /// Returns `[dx (x.len()), dw (C), db (C)]` flattened.
    fn backward<T: WithDType>(&self, x: &[T], wb: &[T], dy: &[T]) -> Vec<T> {
        let c_all = self.channels;
        let (w, b) = wb.split_at(c_all);
        let cpg = c_all / self.groups;
        let n = self.per_group() as f64;
        let mut out = vec![T::zero(); x.len() + 2 * c_all];
        let mut dw = vec![0.0f64; c_all];
        let mut db = vec![0.0f64; c_all];
        let mut g_eff = vec![0.0f64; self.per_group()];
        for bg in 0..self.batch * self.groups {
            let (mean, rstd) = self.stats(x, bg);
            let g = bg % self.groups;
            let start = bg * self.per_group();
            let (mut s1, mut s2) = (0.0, 0.0);
            for cl in 0..cpg {
                let c = g * cpg + cl;
                let (wc, bc) = (w[c].to_f64(), b[c].to_f64());
                for s in 0..self.spatial {
                    let j = cl * self.spatial + s;
                    let i = start + j;
                    let xhat = (x[i].to_f64() - mean) * rstd;
                    let mut d = dy[i].to_f64();
                    if self.relu && xhat * wc + bc <= 0.0 {
                        d = 0.0;
                    }
                    dw[c] += d * xhat;
                    db[c] += d;
                    let dxhat = d * wc;
                    g_eff[j] = dxhat;
                    s1 += dxhat;
                    s2 += dxhat * xhat;
                }
            }
            let (m1, m2) = (s1 / n, s2 / n);
            for (j, dxhat) in g_eff.iter().enumerate() {
                let i = start + j;
                let xhat = (x[i].to_f64() - mean) * rstd;
                out[i] = T::from_f64(rstd * (dxhat - m1 - xhat * m2));
            }
        }
        for c in 0..c_all {
            out[x.len() + c] = T::from_f64(dw[c]);
            out[x.len() + c_all + c] = T::from_f64(db[c]);
        }
        out
    }
}

struct GnForward(GnDims);
struct GnBackward(GnDims);

impl CustomOp3 for GnForward {
    fn name(&self) -> &'static str {
        "group-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = self.0;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(w), CpuStorage::F32(b)) => CpuStorage::F32(d.forward(
                slice(x, l1, "group-norm")?,
                slice(w, l2, "group-norm")?,
                slice(b, l3, "group-norm")?,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(w), CpuStorage::F64(b)) => CpuStorage::F64(d.forward(
                slice(x, l1, "group-norm")?,
                slice(w, l2, "group-norm")?,
                slice(b, l3, "group-norm")?,
            )),
            _ => candle_core::bail!("group-norm: inputs must share an f32 or f64 dtype"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let d = self.0;
        let wb = Tensor::cat(&[w, b], 0)?;
        let packed = x.apply_op3_no_bwd(&wb, &grad.contiguous()?, &GnBackward(d))?;
        let n = x.elem_count();
        let dx = packed.narrow(0, 0, n)?.reshape(x.shape())?;
        let dw = packed.narrow(0, n, d.channels)?;
        let db = packed.narrow(0, n + d.channels, d.channels)?;
        Ok((Some(dx), Some(dw), Some(db)))
    }
}

impl CustomOp3 for GnBackward {
    fn name(&self) -> &'static str {
        "group-norm-bwd"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = self.0;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(wb), CpuStorage::F32(dy)) => CpuStorage::F32(d.backward(
                slice(x, l1, "group-norm-bwd")?,
                slice(wb, l2, "group-norm-bwd")?,
                slice(dy, l3, "group-norm-bwd")?,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(wb), CpuStorage::F64(dy)) => CpuStorage::F64(d.backward(
                slice(x, l1, "group-norm-bwd")?,
                slice(wb, l2, "group-norm-bwd")?,
                slice(dy, l3, "group-norm-bwd")?,
            )),
            _ => candle_core::bail!("group-norm-bwd: inputs must share an f32 or f64 dtype"),
        };
        let len = l1.shape().elem_count() + 2 * d.channels;
        Ok((out, Shape::from(len)))
    }
}

/// Group normalization of a contiguous `[B, C, H, W]` tensor with per-channel
/// affine parameters, optionally followed by ReLU.
pub fn group_norm(
    xs: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    groups: usize,
    eps: f64,
    relu: bool,
) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = xs.dims4()?;
    if c % groups != 0 {
        candle_core::bail!("group-norm: {c} channels not divisible into {groups} groups");
    }
    let dims = GnDims {
        batch: b,
        channels: c,
        spatial: h * w,
        groups,
        eps,
        relu,
    };
    xs.contiguous()?
        .apply_op3(&weight.contiguous()?, &bias.contiguous()?, GnForward(dims))
}

struct Relu;
struct ReluBackward;

impl CustomOp1 for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = dispatch1!(s, l, "relu", |v| v
            .iter()
            .map(|&x| if x > WithDType::from_f64(0.0) { x } else { WithDType::from_f64(0.0) })
            .collect());
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(res.apply_op2_no_bwd(&grad.contiguous()?, &ReluBackward)?))
    }
}

fn relu_bwd<T: WithDType>(res: &[T], grad: &[T]) -> Vec<T> {
    let zero = T::from_f64(0.0);
    res.iter()
        .zip(grad)
        .map(|(&r, &g)| if r > zero { g } else { zero })
        .collect()
}

impl CustomOp2 for ReluBackward {
    fn name(&self) -> &'static str {
        "relu-bwd"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(r), CpuStorage::F32(g)) => {
                CpuStorage::F32(relu_bwd(slice(r, l1, "relu-bwd")?, slice(g, l2, "relu-bwd")?))
            }
            (CpuStorage::F64(r), CpuStorage::F64(g)) => {
                CpuStorage::F64(relu_bwd(slice(r, l1, "relu-bwd")?, slice(g, l2, "relu-bwd")?))
            }
            _ => candle_core::bail!("relu-bwd: inputs must share an f32 or f64 dtype"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// ReLU with a single-pass backward.
pub fn relu(xs: &Tensor) -> candle_core::Result<Tensor> {
    xs.contiguous()?.apply_op1(Relu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var, D};

    fn composed(x: &Tensor, w: &Tensor, b: &Tensor, groups: usize, relu: bool) -> Tensor {
        let (n, c, h, wd) = x.dims4().unwrap();
        let g = x.reshape((n, groups, c / groups * h * wd)).unwrap();
        let mean = g.mean_keepdim(D::Minus1).unwrap();
        let cen = g.broadcast_sub(&mean).unwrap();
        let var = cen.sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
        let y = cen
            .broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap())
            .unwrap()
            .reshape((n, c, h, wd))
            .unwrap()
            .broadcast_mul(&w.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&b.reshape((1, c, 1, 1)).unwrap())
            .unwrap();
        if relu {
            y.relu().unwrap()
        } else {
            y
        }
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn group_norm_matches_composed_forward_and_backward() {
        for relu_on in [false, true] {
            let x = Var::randn(0f64, 2.0, (2, 6, 3, 4), &Device::Cpu).unwrap();
            let w = Var::randn(1f64, 0.5, 6, &Device::Cpu).unwrap();
            let b = Var::randn(0f64, 0.5, 6, &Device::Cpu).unwrap();
            let probe = Tensor::randn(0f64, 1.0, (2, 6, 3, 4), &Device::Cpu).unwrap();
            let ours = group_norm(x.as_tensor(), w.as_tensor(), b.as_tensor(), 3, 1e-5, relu_on).unwrap();
            let theirs = composed(x.as_tensor(), w.as_tensor(), b.as_tensor(), 3, relu_on);
            assert!(max_diff(&ours, &theirs) < 1e-12);
            let g1 = (&ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = (&theirs * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &w, &b] {
                let d = max_diff(g1.get(v).unwrap(), g2.get(v).unwrap());
                assert!(d < 1e-10, "relu={relu_on} grad diff {d}");
            }
        }
    }

    #[test]
    fn relu_matches_builtin() {
        let x = Var::randn(0f64, 1.0, (3, 7), &Device::Cpu).unwrap();
        let ours = relu(x.as_tensor()).unwrap();
        let theirs = x.as_tensor().relu().unwrap();
        assert_eq!(max_diff(&ours, &theirs), 0.0);
        let g1 = ours.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = theirs.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        assert_eq!(max_diff(g1.get(&x).unwrap(), g2.get(&x).unwrap()), 0.0);
    }
}
