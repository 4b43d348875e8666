//! Small neural-network toolkit on top of candle tensors.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names. Initialization
//! is seeded per name, so the same (seed, name, shape) always yields the same
//! values regardless of construction order.

mod conv;
mod fused;
mod params;

pub use conv::Conv2d;
pub use fused::relu;
pub use params::{Init, ParamStore, Scope};
pub(crate) use params::tensor_bytes;

use candle_core::{DType, Device, Module, Tensor, D};

use crate::error::Result;

/// Additive bias used for masked attention logits. `exp` of this underflows to
/// exactly zero in both f32 and f64.
pub const MASK_NEG: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(vs: &Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = vs.get("weight", &[out_dim, in_dim], Init::Uniform(bound))?;
        let bias = vs.get("bias", &[out_dim], Init::Uniform(bound))?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn no_bias(vs: &Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = vs.get("weight", &[out_dim, in_dim], Init::Uniform(bound))?;
        Ok(Self { weight, bias: None })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }
}

impl Module for Linear {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let dims = xs.dims();
        let in_dim = dims[dims.len() - 1];
        let rows = xs.elem_count() / in_dim;
        let out_dim = self.weight.dim(0)?;
        let flat = xs.reshape((rows, in_dim))?.matmul(&self.weight.t()?)?;
        let flat = match &self.bias {
            Some(b) => flat.broadcast_add(b)?,
            None => flat,
        };
        let mut out_shape = dims.to_vec();
        *out_shape.last_mut().unwrap() = out_dim;
        flat.reshape(out_shape)
    }
}

/// Layer normalization over the last dimension, composed of differentiable
/// primitives.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(vs: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: vs.get("weight", &[dim], Init::Const(1.0))?,
            bias: vs.get("bias", &[dim], Init::Const(0.0))?,
            eps: 1e-5,
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }
}

impl Module for LayerNorm {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let mean = xs.mean_keepdim(D::Minus1)?;
        let centered = xs.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// Group normalization for `[B, C, H, W]` maps. Per-sample statistics keep the
/// backbone's output independent of batch composition.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(vs: &Scope, channels: usize, groups: usize) -> Result<Self> {
        if channels % groups != 0 {
            return Err(crate::Error::Config(format!(
                "group norm: {channels} channels not divisible into {groups} groups"
            )));
        }
        Ok(Self {
            weight: vs.get("weight", &[channels], Init::Const(1.0))?,
            bias: vs.get("bias", &[channels], Init::Const(0.0))?,
            groups,
            eps: 1e-5,
        })
    }
}

impl GroupNorm {
    /// Normalization followed by ReLU in one pass.
    pub fn forward_relu(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        fused::group_norm(xs, &self.weight, &self.bias, self.groups, self.eps, true)
    }
}

impl Module for GroupNorm {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        fused::group_norm(xs, &self.weight, &self.bias, self.groups, self.eps, false)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    table: Tensor,
}

impl Embedding {
    pub fn new(vs: &Scope, count: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: vs.get("weight", &[count, dim], Init::Normal(0.02))?,
        })
    }

    /// `ids` is `[B, T]` u32; returns `[B, T, dim]`.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, t) = ids.dims2()?;
        let dim = self.table.dim(1)?;
        let flat = self.table.index_select(&ids.flatten_all()?, 0)?;
        Ok(flat.reshape((b, t, dim))?)
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(vs: &Scope, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(&vs.pp("up"), dim, hidden)?,
            down: Linear::new(&vs.pp("down"), hidden, dim)?,
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        [&self.up, &self.down].into_iter().flat_map(Linear::tensors).collect()
    }
}

impl Module for FeedForward {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        self.down.forward(&self.up.forward(xs)?.gelu_erf()?)
    }
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Clone, Debug)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    head_dim: usize,
}

impl Attention {
    pub fn new(vs: &Scope, dim: usize, kv_dim: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            return Err(crate::Error::Config(format!(
                "attention: dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(&vs.pp("q"), dim, dim)?,
            k: Linear::new(&vs.pp("k"), kv_dim, dim)?,
            v: Linear::new(&vs.pp("v"), kv_dim, dim)?,
            out: Linear::new(&vs.pp("out"), dim, dim)?,
            heads,
            head_dim: dim / heads,
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        [&self.q, &self.k, &self.v, &self.out].into_iter().flat_map(Linear::tensors).collect()
    }

    fn split_heads(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let (b, t, _) = xs.dims3()?;
        xs.reshape((b, t, self.heads, self.head_dim))?
            .transpose(1, 2)?
            .contiguous()
    }

    /// Returns the attended output `[B, Tq, dim]` and the attention weights
    /// `[B, heads, Tq, Tk]`. `bias` is added to the logits and must broadcast
    /// to the weight shape.
    pub fn forward(
        &self,
        query: &Tensor,
        memory: &Tensor,
        bias: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let (b, tq, dim) = query.dims3()?;
        let q = self.split_heads(&self.q.forward(query)?)?;
        let k = self.split_heads(&self.k.forward(memory)?)?;
        let v = self.split_heads(&self.v.forward(memory)?)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut logits = (q.matmul(&k.t()?)? * scale)?;
        if let Some(bias) = bias {
            logits = logits.broadcast_add(bias)?;
        }
        let weights = candle_nn::ops::softmax(&logits, D::Minus1)?;
        let ctx = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, tq, dim))?;
        Ok((self.out.forward(&ctx)?, weights))
    }

    pub fn out_proj(&self) -> &Linear {
        &self.out
    }
}

/// `[T, T]` additive mask: zero on and below the diagonal, [`MASK_NEG`] above.
pub fn causal_bias(t: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let data: Vec<f64> = (0..t)
        .flat_map(|i| (0..t).map(move |j| if j <= i { 0.0 } else { MASK_NEG }))
        .collect();
    Ok(Tensor::from_vec(data, (t, t), device)?.to_dtype(dtype)?)
}

/// Converts a `[B, T]` 0/1 key mask into a `[B, 1, 1, T]` additive bias.
pub fn key_padding_bias(mask: &Tensor) -> Result<Tensor> {
    let (b, t) = mask.dims2()?;
    let bias = ((mask.ones_like()? - mask)? * MASK_NEG)?;
    Ok(bias.reshape((b, 1, 1, t))?)
}

/// Row-wise L2 normalization over the last dimension.
pub fn l2_normalize(xs: &Tensor) -> Result<Tensor> {
    let norm = xs.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(xs.broadcast_div(&(norm + 1e-12)?)?)
}

/// 2x nearest-neighbour upsampling of `[B, C, H, W]`, built from broadcasts so
/// it stays differentiable.
pub fn upsample2x(xs: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = xs.dims4()?;
    Ok(xs
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((b, c, h * 2, w * 2))?)
}
