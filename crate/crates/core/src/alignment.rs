//! Contrastive objectives: global image-impression InfoNCE and the token-level
//! image-findings contrast built on mutual average token-wise maximum
//! similarity.
//!
//! Both losses use the standard InfoNCE denominator `sum_j exp(s_ij / tau)`
//! (with `j = i` included), evaluated through a max-shifted log-sum-exp.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::nn::MASK_NEG;

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    let probe = t
        .affine(0.0, 0.0)?
        .sum_all()?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?;
    if probe != 0.0 {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

/// `-sum_i log softmax(logits)[i, i]`.
fn diagonal_nll(logits: &Tensor) -> Result<Tensor> {
    let n = logits.dim(0)?;
    let idx: Vec<u32> = (0..n as u32).collect();
    let idx = Tensor::from_vec(idx, (n, 1), logits.device())?;
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    Ok(logp.gather(&idx, 1)?.sum_all()?.neg()?)
}

/// `(1/N) * (CE over rows of a/tau + CE over rows of b/tau)`.
fn symmetric_info_nce(a_to_b: &Tensor, b_to_a: &Tensor, tau: &Tensor) -> Result<Tensor> {
    let n = a_to_b.dim(0)?;
    let ab = a_to_b.broadcast_div(tau)?;
    let ba = b_to_a.broadcast_div(tau)?;
    let total = (diagonal_nll(&ab)? + diagonal_nll(&ba)?)?;
    Ok((total / n as f64)?)
}

fn check_pair(x: &Tensor, y: &Tensor) -> Result<usize> {
    let (n, d) = x.dims2()?;
    if n == 0 {
        return Err(Error::Empty("contrastive batch"));
    }
    if y.dims2()? != (n, d) {
        return Err(Error::Shape(format!(
            "global embeddings {:?} vs {:?}",
            x.dims(),
            y.dims()
        )));
    }
    check_finite(x, "image global embedding")?;
    check_finite(y, "text global embedding")?;
    Ok(n)
}

/// Symmetric global InfoNCE over `[N, D]` image and impression embeddings.
/// `tau` is a scalar tensor.
pub fn global_contrastive(image_global: &Tensor, text_global: &Tensor, tau: &Tensor) -> Result<Tensor> {
    check_pair(image_global, text_global)?;
    let sim = image_global.matmul(&text_global.t()?)?;
    let sim_t = sim.t()?.contiguous()?;
    symmetric_info_nce(&sim, &sim_t, tau)
}

fn check_tokens(image_tokens: &Tensor, text_tokens: &Tensor, mask: &Tensor) -> Result<usize> {
    let (n, n1, d) = image_tokens.dims3()?;
    let (n_t, n2, d_t) = text_tokens.dims3()?;
    if n == 0 {
        return Err(Error::Empty("contrastive batch"));
    }
    if n1 == 0 {
        return Err(Error::Empty("image tokens"));
    }
    if n_t != n || d_t != d || mask.dims2()? != (n, n2) {
        return Err(Error::Shape(format!(
            "token shapes {:?}, {:?}, mask {:?}",
            image_tokens.dims(),
            text_tokens.dims(),
            mask.dims()
        )));
    }
    let counts = mask.sum(1)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if let Some(i) = counts.iter().position(|&c| c < 0.5) {
        return Err(Error::Empty(if i == 0 && n == 1 {
            "text tokens (all masked)"
        } else {
            "text tokens (a sample has every token masked)"
        }));
    }
    check_finite(image_tokens, "image token embeddings")?;
    check_finite(text_tokens, "findings token embeddings")?;
    Ok(n)
}

/// Token-wise similarity between every image of one set and every text of
/// another. `image_tokens` is `[A, n1, D]`, `text_tokens` `[B, n2, D]` and
/// `mask` `[B, n2]`.
///
/// Returns `(xz, zx)`, both `[A, B]`: `xz[a][b]` is the mean over image
/// tokens of the best unmasked text match, `zx[a][b]` the mean over unmasked
/// text tokens of the best image match.
pub fn cross_token_similarity(
    image_tokens: &Tensor,
    text_tokens: &Tensor,
    mask: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (a, n1, d) = image_tokens.dims3()?;
    let (b, n2, d_t) = text_tokens.dims3()?;
    if a == 0 || b == 0 {
        return Err(Error::Empty("token similarity inputs"));
    }
    if n1 == 0 {
        return Err(Error::Empty("image tokens"));
    }
    if d_t != d || mask.dims2()? != (b, n2) {
        return Err(Error::Shape(format!(
            "token shapes {:?}, {:?}, mask {:?}",
            image_tokens.dims(),
            text_tokens.dims(),
            mask.dims()
        )));
    }
    let counts = mask.sum(1)?;
    if counts.min(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()? < 0.5 {
        return Err(Error::Empty("text tokens (a sample has every token masked)"));
    }
    // scores[a, p, b, q] = x'_{a,p} . z_{b,q}
    let scores = image_tokens
        .reshape((a * n1, d))?
        .matmul(&text_tokens.reshape((b * n2, d))?.t()?)?
        .reshape((a, n1, b, n2))?;

    // Image -> text: masked text tokens can never win the max.
    let bias = ((mask.ones_like()? - mask)? * MASK_NEG)?.reshape((1, 1, b, n2))?;
    let xz = scores.broadcast_add(&bias)?.max(3)?.mean(1)?;

    // Text -> image: best image token per text token, then a masked mean.
    let best = scores.max(1)?; // [a, b, q]
    let zx = best
        .broadcast_mul(&mask.reshape((1, b, n2))?)?
        .sum(2)?
        .broadcast_div(&counts.reshape((1, b))?)?;
    Ok((xz, zx))
}

/// All-pairs token-wise similarity for a batch.
///
/// Returns `(m_xz, m_zx)` where `m_xz[i][j] = sim(x'_i, z_j)` (mean over image
/// tokens of the best unmasked text match) and `m_zx[i][j] = sim(z_i, x'_j)`
/// (mean over unmasked text tokens of the best image match).
pub fn token_similarity_matrices(
    image_tokens: &Tensor,
    text_tokens: &Tensor,
    mask: &Tensor,
) -> Result<(Tensor, Tensor)> {
    check_tokens(image_tokens, text_tokens, mask)?;
    let (xz, zx) = cross_token_similarity(image_tokens, text_tokens, mask)?;
    Ok((xz, zx.t()?.contiguous()?))
}

/// Token-wise similarity of one image-text pair in both directions.
/// `image_tokens` is `[n1, D]`, `text_tokens` `[n2, D]`, `mask` `[n2]`.
pub fn token_similarity(
    image_tokens: &Tensor,
    text_tokens: &Tensor,
    mask: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (m_xz, m_zx) = token_similarity_matrices(
        &image_tokens.unsqueeze(0)?,
        &text_tokens.unsqueeze(0)?,
        &mask.unsqueeze(0)?,
    )?;
    Ok((m_xz.flatten_all()?.squeeze(0)?, m_zx.flatten_all()?.squeeze(0)?))
}

/// Symmetric InfoNCE over the token-similarity matrices.
pub fn token_contrastive(
    image_tokens: &Tensor,
    text_tokens: &Tensor,
    mask: &Tensor,
    tau: &Tensor,
) -> Result<Tensor> {
    let (m_xz, m_zx) = token_similarity_matrices(image_tokens, text_tokens, mask)?;
    symmetric_info_nce(&m_xz, &m_zx, tau)
}

/// Inputs to both contrastive losses for one batch.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveBatch<'a> {
    pub image_global: &'a Tensor,
    pub text_global: &'a Tensor,
    pub image_tokens: &'a Tensor,
    pub findings_tokens: &'a Tensor,
    pub findings_mask: &'a Tensor,
    pub tau: &'a Tensor,
}

impl<'a> ContrastiveBatch<'a> {
    pub fn from_bundle(b: &'a crate::encoders::EmbeddingBundle, tau: &'a Tensor) -> Self {
        Self {
            image_global: &b.image_global,
            text_global: &b.text_global,
            image_tokens: &b.image_tokens,
            findings_tokens: &b.findings_tokens,
            findings_mask: &b.findings_mask,
            tau,
        }
    }

    pub fn global_loss(&self) -> Result<Tensor> {
        global_contrastive(self.image_global, self.text_global, self.tau)
    }

    pub fn token_loss(&self) -> Result<Tensor> {
        token_contrastive(
            self.image_tokens,
            self.findings_tokens,
            self.findings_mask,
            self.tau,
        )
    }
}
