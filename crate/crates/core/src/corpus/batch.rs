use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::{EOS, PAD};
use super::ImageReportTriple;
use crate::error::{Error, Result};

/// A padded mini-batch. Masks are 1.0 on real tokens and 0.0 on padding, in
/// the model dtype.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, C, H, W]`
    pub images: Tensor,
    /// `[B, Ly]` u32
    pub impression: Tensor,
    pub impression_mask: Tensor,
    /// `[B, Lz]` u32
    pub findings: Tensor,
    pub findings_mask: Tensor,
    /// Number of sequences that were truncated to fit.
    pub truncated: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Right-pads to the longest sequence (at most `max_len`). Longer sequences
/// are cut to `max_len - 1` tokens followed by `EOS`.
pub fn pad_sequences(seqs: &[&[u32]], max_len: usize) -> (Vec<Vec<u32>>, Vec<Vec<u8>>, usize) {
    assert!(max_len >= 2, "max_len must leave room for markers");
    let mut truncated = 0;
    let cut: Vec<Vec<u32>> = seqs
        .iter()
        .map(|s| {
            if s.len() > max_len {
                truncated += 1;
                let mut v = s[..max_len - 1].to_vec();
                v.push(EOS);
                v
            } else {
                s.to_vec()
            }
        })
        .collect();
    let width = cut.iter().map(Vec::len).max().unwrap_or(0);
    let masks = cut
        .iter()
        .map(|s| (0..width).map(|i| u8::from(i < s.len())).collect())
        .collect();
    let ids = cut
        .into_iter()
        .map(|mut s| {
            s.resize(width, PAD);
            s
        })
        .collect();
    (ids, masks, truncated)
}

/// Pads token sequences into `(ids [B, L] u32, mask [B, L])`.
pub fn token_tensors(
    seqs: &[&[u32]],
    max_len: usize,
    dtype: DType,
    device: &Device,
) -> Result<(Tensor, Tensor)> {
    if seqs.is_empty() {
        return Err(Error::Empty("token batch"));
    }
    let (ids, masks, _) = pad_sequences(seqs, max_len);
    to_tensors(ids, masks, dtype, device)
}

/// Stacks sample images into `[B, C, H, W]`.
pub fn stack_images(samples: &[&ImageReportTriple], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = samples.first().ok_or(Error::Empty("batch"))?;
    let (c, s) = (first.channels, first.size);
    let mut pixels = Vec::with_capacity(samples.len() * c * s * s);
    for t in samples {
        if t.channels != c || t.size != s {
            return Err(Error::Shape("batch mixes image sizes".into()));
        }
        pixels.extend_from_slice(&t.image);
    }
    Ok(Tensor::from_vec(pixels, (samples.len(), c, s, s), device)?.to_dtype(dtype)?)
}

fn to_tensors(
    ids: Vec<Vec<u32>>,
    masks: Vec<Vec<u8>>,
    dtype: DType,
    device: &Device,
) -> Result<(Tensor, Tensor)> {
    let b = ids.len();
    let w = ids.first().map(Vec::len).unwrap_or(0);
    let ids = Tensor::from_vec(ids.into_iter().flatten().collect::<Vec<_>>(), (b, w), device)?;
    let mask: Vec<f32> = masks.into_iter().flatten().map(f32::from).collect();
    let mask = Tensor::from_vec(mask, (b, w), device)?.to_dtype(dtype)?;
    Ok((ids, mask))
}

/// Stacks images and pads both report sections.
pub fn batch(
    samples: &[&ImageReportTriple],
    max_len_y: usize,
    max_len_z: usize,
    dtype: DType,
    device: &Device,
) -> Result<Batch> {
    let images = stack_images(samples, dtype, device)?;

    let ys: Vec<&[u32]> = samples.iter().map(|t| t.impression_tokens.as_slice()).collect();
    let zs: Vec<&[u32]> = samples.iter().map(|t| t.findings_tokens.as_slice()).collect();
    let (y_ids, y_mask, ty) = pad_sequences(&ys, max_len_y);
    let (z_ids, z_mask, tz) = pad_sequences(&zs, max_len_z);
    let truncated = ty + tz;
    if truncated > 0 {
        log::warn!("truncated {truncated} sequences while batching");
    }
    let (impression, impression_mask) = to_tensors(y_ids, y_mask, dtype, device)?;
    let (findings, findings_mask) = to_tensors(z_ids, z_mask, dtype, device)?;
    Ok(Batch {
        images,
        impression,
        impression_mask,
        findings,
        findings_mask,
        truncated,
    })
}

/// Deterministic mini-batch index order: a pure function of
/// `(seed, epoch)`, independent of how batches are later consumed.
#[derive(Clone, Debug)]
pub struct BatchOrder {
    pub len: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl BatchOrder {
    pub fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len).collect();
        if self.shuffle {
            let seed = self.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        idx.chunks(self.batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }
}
