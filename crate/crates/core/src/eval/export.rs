use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, IndexOp, Tensor};

use crate::corpus::{stack_images, token_tensors, Dataset, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{CaptionMemory, Model};

/// A distribution over the image token grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub grid: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid + col]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Mass in quadrant `q` (0 upper-left, 1 upper-right, 2 lower-left,
    /// 3 lower-right). Cells on the midline of an odd grid count half to each
    /// side.
    pub fn quadrant_mass(&self, q: usize) -> f64 {
        let g = self.grid as f64;
        let share = |i: usize, upper: bool| {
            let (lo, hi) = (i as f64, i as f64 + 1.0);
            let mid = g / 2.0;
            let below = (mid.min(hi) - lo).clamp(0.0, 1.0);
            if upper {
                below
            } else {
                1.0 - below
            }
        };
        let mut m = 0.0;
        for r in 0..self.grid {
            for c in 0..self.grid {
                m += self.get(r, c) * share(r, q < 2) * share(c, q % 2 == 0);
            }
        }
        m
    }

    /// One grid row per line, space-separated.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for row in self.values.chunks(self.grid) {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Captioning-branch cross-attention of the last decoder layer, averaged over
/// heads, read from the prompt's final position over the image tokens and
/// renormalized to sum to one. One heatmap per image.
pub fn attention_maps(model: &Model, images: &Tensor, vocab: &Vocabulary, prompt: &str) -> Result<Vec<Heatmap>> {
    if model.config().caption_memory != CaptionMemory::TokenGrid {
        return Err(Error::Config(
            "attention maps need the token-grid caption memory".into(),
        ));
    }
    let b = images.dim(0)?;
    let ids = vocab.tokenize(prompt);
    let rows: Vec<&[u32]> = (0..b).map(|_| ids.as_slice()).collect();
    let (ids, mask) = token_tensors(&rows, ids.len(), model.dtype(), model.device())?;
    let image = model.encode_image(images)?;
    let (_, out, cls) = model.caption_pooled(&ids, &mask, &image)?;
    let last = out
        .cross_weights
        .last()
        .ok_or(Error::Empty("decoder layers"))?
        .mean(1)?; // [B, Tq, Tk]
    let n1 = model.config().image.n_image_tokens();
    let grid = model.config().image.token_grid();
    let mut maps = Vec::with_capacity(b);
    for (i, &p) in cls.iter().enumerate() {
        let row = last.i((i, p))?.narrow(0, 0, n1)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let total: f64 = row.iter().sum();
        if !(total > 0.0) {
            return Err(Error::NonFinite("attention mass over image tokens".into()));
        }
        maps.push(Heatmap {
            grid,
            values: row.iter().map(|v| v / total).collect(),
        });
    }
    Ok(maps)
}

/// Global image embeddings `[n, D]` of every sample, in dataset order.
pub fn extract_global(model: &Model, data: &Dataset, batch_size: usize) -> Result<Tensor> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut parts = Vec::new();
    for chunk in data.samples.chunks(batch_size.max(1)) {
        let refs: Vec<_> = chunk.iter().collect();
        let images = stack_images(&refs, model.dtype(), model.device())?;
        parts.push(model.encode_image(&images)?.global.detach());
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// Writes `features` as CSV: header `d0,...,d{D-1},label`, one row per
/// sample, label as class name (empty when unknown).
pub fn write_embeddings(path: &Path, features: &Tensor, labels: &[Option<usize>], class_names: &[String]) -> Result<()> {
    let rows = features.to_dtype(DType::F32)?.to_vec2::<f32>()?;
    if rows.len() != labels.len() {
        return Err(Error::Shape(format!("{} rows vs {} labels", rows.len(), labels.len())));
    }
    let d = rows.first().map(Vec::len).unwrap_or(0);
    let mut out = String::new();
    for j in 0..d {
        let _ = write!(out, "d{j},");
    }
    out.push_str("label\n");
    for (row, label) in rows.iter().zip(labels) {
        for v in row {
            let _ = write!(out, "{v},");
        }
        if let Some(name) = label.and_then(|l| class_names.get(l)) {
            out.push_str(name);
        }
        out.push('\n');
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn export_embeddings(model: &Model, data: &Dataset, path: &Path, batch_size: usize) -> Result<()> {
    let feats = extract_global(model, data, batch_size)?;
    write_embeddings(path, &feats, &data.labels, &data.class_names)
}
