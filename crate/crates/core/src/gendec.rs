//! Parallel generative decoder: a summarization branch (impression from
//! findings) and a captioning branch (impression from the image), sharing
//! self-attention and feed-forward weights, each with its own cross-attention.
//!
//! Parameter layout per layer `i`:
//!
//! ```text
//! dec.layers.{i}.shared.{ln_self, self_attn, ln_ffn, ffn}
//! dec.layers.{i}.sum.{ln, ln_mem, attn}
//! dec.layers.{i}.cap.{ln, ln_mem, attn}
//! dec.out.{ln, vocab}
//! ```

use candle_core::{DType, Module, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{causal_bias, key_padding_bias, Attention, FeedForward, LayerNorm, Linear, Scope};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    /// Impression conditioned on findings.
    Summarize,
    /// Impression conditioned on the image.
    Caption,
}

impl Branch {
    pub fn key(self) -> &'static str {
        match self {
            Branch::Summarize => "sum",
            Branch::Caption => "cap",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    /// Width of the findings memory.
    pub sum_memory_dim: usize,
    /// Width of the image memory.
    pub cap_memory_dim: usize,
}

#[derive(Clone, Debug)]
struct SharedBlock {
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct CrossBlock {
    ln: LayerNorm,
    ln_mem: LayerNorm,
    attn: Attention,
}

impl CrossBlock {
    fn new(vs: &Scope, hidden: usize, mem_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln: LayerNorm::new(&vs.pp("ln"), hidden)?,
            ln_mem: LayerNorm::new(&vs.pp("ln_mem"), mem_dim)?,
            attn: Attention::new(&vs.pp("attn"), hidden, mem_dim, heads)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    shared: SharedBlock,
    sum: CrossBlock,
    cap: CrossBlock,
}

impl DecoderLayer {
    pub fn new(vs: &Scope, cfg: &DecoderConfig) -> Result<Self> {
        let s = vs.pp("shared");
        Ok(Self {
            shared: SharedBlock {
                ln_self: LayerNorm::new(&s.pp("ln_self"), cfg.hidden)?,
                self_attn: Attention::new(&s.pp("self_attn"), cfg.hidden, cfg.hidden, cfg.heads)?,
                ln_ffn: LayerNorm::new(&s.pp("ln_ffn"), cfg.hidden)?,
                ffn: FeedForward::new(&s.pp("ffn"), cfg.hidden, cfg.ffn)?,
            },
            sum: CrossBlock::new(&vs.pp("sum"), cfg.hidden, cfg.sum_memory_dim, cfg.heads)?,
            cap: CrossBlock::new(&vs.pp("cap"), cfg.hidden, cfg.cap_memory_dim, cfg.heads)?,
        })
    }

    /// Parameters `branch` reads: the shared self-attention and feed-forward
    /// tensors, then its own cross-attention tensors.
    pub fn branch_tensors(&self, branch: Branch) -> (Vec<&Tensor>, Vec<&Tensor>) {
        let sh = &self.shared;
        let shared = [sh.ln_self.tensors(), sh.self_attn.tensors(), sh.ln_ffn.tensors(), sh.ffn.tensors()].concat();
        let c = self.cross(branch);
        let cross = [c.ln.tensors(), c.ln_mem.tensors(), c.attn.tensors()].concat();
        (shared, cross)
    }

    fn cross(&self, branch: Branch) -> &CrossBlock {
        match branch {
            Branch::Summarize => &self.sum,
            Branch::Caption => &self.cap,
        }
    }

    /// Returns the new states and the cross-attention weights `[B, h, T, M]`.
    pub fn forward(
        &self,
        branch: Branch,
        xs: &Tensor,
        causal: &Tensor,
        memory: &Tensor,
        memory_bias: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let sh = &self.shared;
        let h = sh.ln_self.forward(xs)?;
        let (a, _) = sh.self_attn.forward(&h, &h, Some(causal))?;
        let xs = (xs + a)?;
        let cross = self.cross(branch);
        let mem = cross.ln_mem.forward(memory)?;
        let (c, w) = cross.attn.forward(&cross.ln.forward(&xs)?, &mem, Some(memory_bias))?;
        let xs = (xs + c)?;
        let f = sh.ffn.forward(&sh.ln_ffn.forward(&xs)?)?;
        Ok(((xs + f)?, w))
    }
}

/// Per-position vocabulary logits of one branch.
#[derive(Clone, Debug)]
pub struct BranchOutput {
    /// `[B, T, V]`
    pub logits: Tensor,
    /// Final normalized decoder states `[B, T, H]`.
    pub states: Tensor,
    /// Cross-attention weights per layer, each `[B, heads, T, M]`.
    pub cross_weights: Vec<Tensor>,
}

impl BranchOutput {
    /// Softmax over the vocabulary.
    pub fn probabilities(&self) -> Result<Tensor> {
        Ok(candle_nn::ops::softmax(&self.logits, D::Minus1)?)
    }
}

/// The multimodal decoder layers stacked on top of the uni-modal text stack.
#[derive(Clone, Debug)]
pub struct ParallelDecoder {
    cfg: DecoderConfig,
    layers: Vec<DecoderLayer>,
    ln_out: LayerNorm,
    vocab: Linear,
}

impl ParallelDecoder {
    pub fn new(vs: &Scope, cfg: &DecoderConfig) -> Result<Self> {
        if cfg.layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        let layers = (0..cfg.layers)
            .map(|i| DecoderLayer::new(&vs.pp(format!("layers.{i}")), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            layers,
            ln_out: LayerNorm::new(&vs.pp("out.ln"), cfg.hidden)?,
            vocab: Linear::new(&vs.pp("out.vocab"), cfg.hidden, cfg.vocab_size)?,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[DecoderLayer] {
        &self.layers
    }

    /// Runs one branch. `inputs` `[B, T, H]` are uni-modal text states of the
    /// decoder input prefix; `memory` `[B, M, Dm]` with 0/1 `memory_mask`
    /// `[B, M]`.
    pub fn forward(
        &self,
        branch: Branch,
        inputs: &Tensor,
        memory: &Tensor,
        memory_mask: &Tensor,
    ) -> Result<BranchOutput> {
        let (b, t, _) = inputs.dims3()?;
        let (bm, m, _) = memory.dims3()?;
        if bm != b || memory_mask.dims2()? != (b, m) {
            return Err(Error::Shape(format!(
                "decoder inputs {:?}, memory {:?}, mask {:?}",
                inputs.dims(),
                memory.dims(),
                memory_mask.dims()
            )));
        }
        let counts = memory_mask.sum(1)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        if m == 0 || counts.iter().any(|&c| c < 0.5) {
            return Err(Error::Empty("decoder memory"));
        }
        let causal = causal_bias(t, inputs.dtype(), inputs.device())?;
        let memory_bias = key_padding_bias(memory_mask)?;
        let mut h = inputs.clone();
        let mut cross_weights = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, w) = layer.forward(branch, &h, &causal, memory, &memory_bias)?;
            h = next;
            cross_weights.push(w);
        }
        let states = self.ln_out.forward(&h)?;
        let logits = self.vocab.forward(&states)?;
        Ok(BranchOutput {
            logits,
            states,
            cross_weights,
        })
    }
}

/// Decoder input `y_0..y_{T-1}` and target `y_1..y_T` from one padded batch.
#[derive(Clone, Debug)]
pub struct TeacherForcingPair {
    /// `[B, T-1]` u32
    pub input: Tensor,
    /// `[B, T-1]` u32
    pub target: Tensor,
    /// 1.0 where the target is a real token.
    pub target_mask: Tensor,
}

impl TeacherForcingPair {
    pub fn new(ids: &Tensor, mask: &Tensor) -> Result<Self> {
        let (_, t) = ids.dims2()?;
        if t < 2 {
            return Err(Error::Shape(format!("need at least 2 positions, got {t}")));
        }
        Ok(Self {
            input: ids.narrow(1, 0, t - 1)?,
            target: ids.narrow(1, 1, t - 1)?,
            target_mask: mask.narrow(1, 1, t - 1)?,
        })
    }
}

fn mask_total(mask: &Tensor) -> Result<f64> {
    let n = mask.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if n < 0.5 {
        return Err(Error::Empty("every target position is padding"));
    }
    Ok(n)
}

/// Mean negative log-likelihood of `target` `[B, T]` under `logits`
/// `[B, T, V]`, over positions where `mask` is 1.
pub fn lm_loss(logits: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (b, t, v) = logits.dims3()?;
    if target.dims2()? != (b, t) || mask.dims2()? != (b, t) {
        return Err(Error::Shape(format!(
            "logits {:?}, target {:?}, mask {:?}",
            logits.dims(),
            target.dims(),
            mask.dims()
        )));
    }
    let n = mask_total(mask)?;
    let logp = candle_nn::ops::log_softmax(&logits.reshape((b * t, v))?, D::Minus1)?;
    let picked = logp
        .gather(&target.reshape((b * t, 1))?.contiguous()?, 1)?
        .reshape((b, t))?;
    Ok(((picked * mask)?.sum_all()?.neg()? / n)?)
}

fn check_rows(p: &Tensor, what: &str) -> Result<()> {
    let sums = p.sum(D::Minus1)?.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let min = p.flatten_all()?.min(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if min < 0.0 {
        return Err(Error::InvalidDistribution(format!("{what} has a negative entry")));
    }
    if let Some((i, s)) = sums.iter().enumerate().find(|(_, s)| (**s - 1.0).abs() > 1e-4) {
        return Err(Error::InvalidDistribution(format!(
            "{what} row {i} sums to {s}"
        )));
    }
    Ok(())
}

/// Forward KL `sum_v P_sum log(P_sum / P_cap)` per position, averaged over
/// unmasked positions. `p_sum` is the teacher and receives no gradient.
/// Both inputs are `[B, T, V]` distributions; `mask` is `[B, T]`.
pub fn distill(p_sum: &Tensor, p_cap: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if p_sum.dims() != p_cap.dims() {
        return Err(Error::Shape(format!(
            "teacher {:?} vs student {:?}",
            p_sum.dims(),
            p_cap.dims()
        )));
    }
    check_rows(p_sum, "teacher distribution")?;
    check_rows(p_cap, "student distribution")?;
    let n = mask_total(mask)?;
    let teacher = p_sum.detach();
    // 0 log 0 = 0: the tiny floor only keeps the logarithm finite.
    let floor = f64::MIN_POSITIVE;
    let log_t = teacher.clamp(floor, 1.0)?.log()?;
    let log_s = p_cap.clamp(floor, 1.0)?.log()?;
    let per_pos = (teacher * (log_t - log_s)?)?.sum(D::Minus1)?;
    Ok(((per_pos * mask)?.sum_all()? / n)?)
}

/// [`distill`] evaluated from logits through log-softmax, which is the form
/// used in training.
pub fn distill_logits(teacher_logits: &Tensor, student_logits: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if teacher_logits.dims() != student_logits.dims() {
        return Err(Error::Shape(format!(
            "teacher {:?} vs student {:?}",
            teacher_logits.dims(),
            student_logits.dims()
        )));
    }
    let n = mask_total(mask)?;
    let log_t = candle_nn::ops::log_softmax(&teacher_logits.detach(), D::Minus1)?;
    let log_s = candle_nn::ops::log_softmax(student_logits, D::Minus1)?;
    let per_pos = (log_t.exp()? * (log_t - log_s)?)?.sum(D::Minus1)?;
    Ok(((per_pos * mask)?.sum_all()? / n)?)
}
