//! Downstream protocols on a trained model: zero-shot classification, linear
//! probing, visual question answering, and attention and embedding export.

mod export;
mod probe;
mod vqa;

pub use export::{attention_maps, export_embeddings, extract_global, write_embeddings, Heatmap};
pub use probe::{
    linear_probe, macro_auc, probe_subset, roc_auc, train_probe, ProbeConfig, ProbeHead,
    ProbeReport, PROBE_FRACTIONS,
};
pub use vqa::{train_vqa, vqa_accuracy, vqa_answer, VqaConfig, VqaExample, VqaHead, VqaSet};

use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::alignment::cross_token_similarity;
use crate::corpus::synth::{IMPRESSION_TEMPLATES, NEGATIVE_TEMPLATES};
use crate::corpus::{stack_images, token_tensors, Dataset, Vocabulary, UNK};
use crate::error::{Error, Result};
use crate::model::Model;

/// Prompt ensemble for one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrompts {
    pub name: String,
    pub positive: Vec<String>,
    #[serde(default)]
    pub negative: Vec<String>,
}

/// Class prompts in class order. A set with exactly one class is a binary
/// task (positive vs negative ensemble).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub classes: Vec<ClassPrompts>,
}

impl PromptSet {
    /// The default ensemble: impression phrasings as positives and negated
    /// phrasings as negatives.
    pub fn from_templates(class_names: &[String]) -> Self {
        let fill = |ts: &[&str], c: &str| ts.iter().map(|t| t.replace("{}", c)).collect();
        Self {
            classes: class_names
                .iter()
                .map(|c| ClassPrompts {
                    name: c.clone(),
                    positive: fill(&IMPRESSION_TEMPLATES, c),
                    negative: fill(&NEGATIVE_TEMPLATES, c),
                })
                .collect(),
        }
    }

    pub fn is_binary(&self) -> bool {
        self.classes.len() == 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Empty("prompt set"));
        }
        for c in &self.classes {
            if c.positive.is_empty() {
                return Err(Error::Config(format!("class {:?} has no positive prompt", c.name)));
            }
        }
        if self.is_binary() && self.classes[0].negative.is_empty() {
            return Err(Error::Config(
                "a binary prompt set needs negative prompts".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let set: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("prompt set serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Every prompt with its owning class and polarity (`true` = positive).
    /// Negatives are only used by binary sets.
    pub fn entries(&self) -> Vec<(usize, bool, &str)> {
        let mut out = Vec::new();
        for (i, c) in self.classes.iter().enumerate() {
            out.extend(c.positive.iter().map(|p| (i, true, p.as_str())));
            if self.is_binary() {
                out.extend(c.negative.iter().map(|p| (i, false, p.as_str())));
            }
        }
        out
    }
}

/// Image-text similarity at both levels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityScore {
    pub global: f64,
    pub token: f64,
    pub combined: f64,
}

impl SimilarityScore {
    pub fn new(global: f64, token: f64) -> Self {
        Self {
            global,
            token,
            combined: (global + token) / 2.0,
        }
    }
}

/// Encoded prompt ensemble.
#[derive(Clone, Debug)]
pub struct PromptEncoding {
    /// `[P, D]`
    pub global: Tensor,
    /// `[P, n2, D]`
    pub tokens: Tensor,
    /// `[P, n2]`
    pub mask: Tensor,
    /// `(class, positive)` per prompt.
    pub owners: Vec<(usize, bool)>,
    pub n_classes: usize,
    pub binary: bool,
}

pub fn encode_prompts(model: &Model, vocab: &Vocabulary, prompts: &PromptSet) -> Result<PromptEncoding> {
    prompts.validate()?;
    let entries = prompts.entries();
    let mut seqs = Vec::with_capacity(entries.len());
    for (_, _, text) in &entries {
        let ids = vocab.tokenize(text);
        if ids.len() <= 2 {
            return Err(Error::Config(format!("prompt {text:?} has no words")));
        }
        if ids.contains(&UNK) {
            log::warn!("prompt {text:?} contains out-of-vocabulary words");
        }
        seqs.push(ids);
    }
    let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
    let longest = refs.iter().map(|s| s.len()).max().unwrap_or(2);
    let (ids, mask) = token_tensors(&refs, longest, model.dtype(), model.device())?;
    let enc = model.encode_text(&ids, &mask)?;
    Ok(PromptEncoding {
        global: enc.global.detach(),
        tokens: enc.tokens.detach(),
        mask: enc.token_mask,
        owners: entries.iter().map(|&(c, p, _)| (c, p)).collect(),
        n_classes: prompts.classes.len(),
        binary: prompts.is_binary(),
    })
}

fn to_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

/// Similarity of every image in `images` to every prompt: `[image][prompt]`.
pub fn similarity_scores(
    model: &Model,
    images: &Tensor,
    prompts: &PromptEncoding,
) -> Result<Vec<Vec<SimilarityScore>>> {
    let img = model.encode_image(images)?;
    let global = to_rows(&img.global.detach().matmul(&prompts.global.t()?)?)?;
    let (xz, zx) = cross_token_similarity(&img.tokens.detach(), &prompts.tokens, &prompts.mask)?;
    let (xz, zx) = (to_rows(&xz)?, to_rows(&zx)?);
    Ok(global
        .iter()
        .enumerate()
        .map(|(a, row)| {
            row.iter()
                .enumerate()
                .map(|(p, &g)| SimilarityScore::new(g, (xz[a][p] + zx[a][p]) / 2.0))
                .collect()
        })
        .collect())
}

/// Aggregates per-prompt scores into per-class scores: the ensemble mean of
/// each class's positives, or for a binary set the single margin
/// `mean(positive) - mean(negative)`.
pub fn class_scores(per_prompt: &[f64], owners: &[(usize, bool)], n_classes: usize, binary: bool) -> Vec<f64> {
    let mut sums = vec![[0.0f64; 2]; n_classes];
    let mut counts = vec![[0usize; 2]; n_classes];
    for (&s, &(c, pos)) in per_prompt.iter().zip(owners) {
        let k = usize::from(!pos);
        sums[c][k] += s;
        counts[c][k] += 1;
    }
    let mean = |c: usize, k: usize| sums[c][k] / counts[c][k].max(1) as f64;
    if binary {
        vec![mean(0, 0) - mean(0, 1)]
    } else {
        (0..n_classes).map(|c| mean(c, 0)).collect()
    }
}

/// Argmax (first on ties) of multi-class scores; for a binary margin,
/// 1 when positive and 0 otherwise.
pub fn predict(scores: &[f64], binary: bool) -> usize {
    if binary {
        return usize::from(scores[0] > 0.0);
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZeroShotReport {
    pub predictions: Vec<usize>,
    /// Per-image class scores.
    pub scores: Vec<Vec<f64>>,
    /// Fraction of labelled samples predicted correctly, if any are labelled.
    pub accuracy: Option<f64>,
}

/// Classifies every image of `data` by combined similarity to the prompt
/// ensembles. Multi-class prompt sets are matched to dataset classes by
/// name; a binary set scores "is the image of this class".
pub fn zero_shot_classify(
    model: &Model,
    data: &Dataset,
    prompts: &PromptSet,
    batch_size: usize,
) -> Result<ZeroShotReport> {
    if data.is_empty() {
        return Err(Error::Empty("zero-shot dataset"));
    }
    let enc = encode_prompts(model, &data.vocab, prompts)?;
    let mut predictions = Vec::with_capacity(data.len());
    let mut scores = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(batch_size.max(1)) {
        let refs: Vec<_> = chunk.iter().collect();
        let images = stack_images(&refs, model.dtype(), model.device())?;
        for row in similarity_scores(model, &images, &enc)? {
            let combined: Vec<f64> = row.iter().map(|s| s.combined).collect();
            let cs = class_scores(&combined, &enc.owners, enc.n_classes, enc.binary);
            predictions.push(predict(&cs, enc.binary));
            scores.push(cs);
        }
    }
    let truth: Vec<Option<usize>> = data
        .labels
        .iter()
        .map(|l| {
            l.and_then(|l| {
                let name = data.class_names.get(l)?;
                if enc.binary {
                    Some(usize::from(*name == prompts.classes[0].name))
                } else {
                    prompts.classes.iter().position(|c| c.name == *name)
                }
            })
        })
        .collect();
    let labelled: Vec<(usize, usize)> = truth
        .iter()
        .zip(&predictions)
        .filter_map(|(t, &p)| t.map(|t| (t, p)))
        .collect();
    let accuracy = (!labelled.is_empty()).then(|| {
        labelled.iter().filter(|(t, p)| t == p).count() as f64 / labelled.len() as f64
    });
    Ok(ZeroShotReport {
        predictions,
        scores,
        accuracy,
    })
}
