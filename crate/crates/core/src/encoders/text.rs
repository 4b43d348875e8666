use candle_core::{Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::corpus::{BOS, CLS, EOS, PAD};
use crate::error::{Error, Result};
use crate::nn::{
    causal_bias, l2_normalize, Attention, Embedding, FeedForward, Init, LayerNorm, Linear, Scope,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextStackConfig {
    /// Transformer layers in the whole text stack.
    pub total_layers: usize,
    /// Leading layers forming the uni-modal text decoder; the remainder
    /// become the multimodal decoder layers.
    pub unimodal_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    /// Longest token sequence the position table covers (CLS included).
    pub max_positions: usize,
}

impl TextStackConfig {
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            total_layers: 4,
            unimodal_layers: 2,
            hidden: 64,
            heads: 4,
            ffn: 128,
            vocab_size,
            max_positions: 32,
        }
    }

    pub fn paper(vocab_size: usize) -> Self {
        Self {
            total_layers: 12,
            unimodal_layers: 6,
            hidden: 768,
            heads: 12,
            ffn: 3072,
            vocab_size,
            max_positions: 512,
        }
    }

    pub fn decoder_layers(&self) -> usize {
        self.total_layers - self.unimodal_layers
    }

    pub fn validate(&self) -> Result<()> {
        if self.unimodal_layers == 0 || self.unimodal_layers >= self.total_layers {
            return Err(Error::Config(format!(
                "unimodal_layers ({}) must be in 1..total_layers ({})",
                self.unimodal_layers, self.total_layers
            )));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config("hidden must be divisible by heads".into()));
        }
        if self.vocab_size <= CLS as usize {
            return Err(Error::Config("vocabulary lacks reserved tokens".into()));
        }
        Ok(())
    }
}

/// Pre-norm causal transformer layer.
#[derive(Clone, Debug)]
pub struct CausalLayer {
    ln_attn: LayerNorm,
    attn: Attention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

impl CausalLayer {
    pub fn new(vs: &Scope, cfg: &TextStackConfig) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(&vs.pp("ln_attn"), cfg.hidden)?,
            attn: Attention::new(&vs.pp("attn"), cfg.hidden, cfg.hidden, cfg.heads)?,
            ln_ffn: LayerNorm::new(&vs.pp("ln_ffn"), cfg.hidden)?,
            ffn: FeedForward::new(&vs.pp("ffn"), cfg.hidden, cfg.ffn)?,
        })
    }

    pub fn forward(&self, xs: &Tensor, causal: &Tensor) -> Result<Tensor> {
        let h = self.ln_attn.forward(xs)?;
        let (a, _) = self.attn.forward(&h, &h, Some(causal))?;
        let xs = (xs + a)?;
        let f = self.ffn.forward(&self.ln_ffn.forward(&xs)?)?;
        Ok((xs + f)?)
    }
}

/// Output of [`TextEncoder::encode`]. Sequences carry one extra position for
/// the CLS token placed right after each sample's last real token.
#[derive(Clone, Debug)]
pub struct TextEncoding {
    /// Raw stack states `[B, L+1, H]`.
    pub hidden: Tensor,
    /// Unit-norm CLS embedding `[B, D]`.
    pub global: Tensor,
    /// Unit-norm per-position embeddings `[B, L+1, D]`.
    pub tokens: Tensor,
    /// 1.0 on word positions (not PAD/BOS/EOS/CLS) `[B, L+1]`.
    pub token_mask: Tensor,
    /// 1.0 on every non-PAD position, CLS included `[B, L+1]`.
    pub key_mask: Tensor,
    /// Index of the CLS position per sample.
    pub cls_positions: Vec<usize>,
}

/// The uni-modal text decoder: causal layers with a CLS read-out at the end
/// of each sequence. Impression and findings go through the same instance.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    cfg: TextStackConfig,
    embed: Embedding,
    positions: Tensor,
    layers: Vec<CausalLayer>,
    ln_out: LayerNorm,
    global_proj: Linear,
    token_proj: Linear,
}

impl TextEncoder {
    /// `stack` scopes the transformer; `proj` scopes the read-out heads.
    pub fn new(stack: &Scope, proj: &Scope, cfg: &TextStackConfig, embed_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.unimodal_layers)
            .map(|i| CausalLayer::new(&stack.pp(format!("layers.{i}")), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            embed: Embedding::new(&stack.pp("embed"), cfg.vocab_size, cfg.hidden)?,
            positions: stack.get("positions", &[cfg.max_positions, cfg.hidden], Init::Normal(0.02))?,
            layers,
            ln_out: LayerNorm::new(&proj.pp("ln"), cfg.hidden)?,
            global_proj: Linear::new(&proj.pp("global"), cfg.hidden, embed_dim)?,
            token_proj: Linear::new(&proj.pp("token"), cfg.hidden, embed_dim)?,
        })
    }

    pub fn config(&self) -> &TextStackConfig {
        &self.cfg
    }

    /// Causal stack over `ids` `[B, T]`; returns `[B, T, H]`.
    pub fn run_stack(&self, ids: &Tensor) -> Result<Tensor> {
        let (_, t) = ids.dims2()?;
        if t > self.cfg.max_positions {
            return Err(Error::Shape(format!(
                "sequence length {t} exceeds {} positions",
                self.cfg.max_positions
            )));
        }
        let emb = self.embed.forward(ids)?;
        let pos = self.positions.narrow(0, 0, t)?.unsqueeze(0)?;
        let mut h = emb.broadcast_add(&pos)?;
        let causal = causal_bias(t, h.dtype(), h.device())?;
        for layer in &self.layers {
            h = layer.forward(&h, &causal)?;
        }
        Ok(h)
    }

    /// Appends CLS after each sequence's real tokens (`mask` marks them),
    /// runs the stack, and reads out global and token embeddings.
    pub fn encode(&self, ids: &Tensor, mask: &Tensor) -> Result<TextEncoding> {
        let (b, l) = ids.dims2()?;
        let rows = ids.to_vec2::<u32>()?;
        let lens: Vec<usize> = mask
            .to_dtype(candle_core::DType::F32)?
            .to_vec2::<f32>()?
            .iter()
            .map(|m| m.iter().filter(|&&v| v > 0.5).count())
            .collect();
        let width = l + 1;
        let mut with_cls = vec![PAD; b * width];
        let mut tok_mask = vec![0f32; b * width];
        let mut key_mask = vec![0f32; b * width];
        for (i, (row, &len)) in rows.iter().zip(&lens).enumerate() {
            let out = &mut with_cls[i * width..(i + 1) * width];
            out[..len].copy_from_slice(&row[..len]);
            out[len] = CLS;
            for p in 0..=len {
                key_mask[i * width + p] = 1.0;
                if !matches!(out[p], PAD | BOS | EOS | CLS) {
                    tok_mask[i * width + p] = 1.0;
                }
            }
        }
        let device = ids.device();
        let dtype = self.positions.dtype();
        let ids_cls = Tensor::from_vec(with_cls, (b, width), device)?;
        let hidden = self.run_stack(&ids_cls)?;
        let normed = self.ln_out.forward(&hidden)?;
        let flat = normed.reshape((b * width, self.cfg.hidden))?;
        let cls_idx: Vec<u32> = lens
            .iter()
            .enumerate()
            .map(|(i, &len)| (i * width + len) as u32)
            .collect();
        let cls_state = flat.index_select(&Tensor::new(cls_idx.as_slice(), device)?, 0)?;
        let global = l2_normalize(&self.global_proj.forward(&cls_state)?)?;
        let tokens = l2_normalize(&self.token_proj.forward(&normed)?)?;
        Ok(TextEncoding {
            hidden,
            global,
            tokens,
            token_mask: Tensor::from_vec(tok_mask, (b, width), device)?.to_dtype(dtype)?,
            key_mask: Tensor::from_vec(key_mask, (b, width), device)?.to_dtype(dtype)?,
            cls_positions: lens,
        })
    }
}
