use candle_core::{DType, Device, Tensor, Var, D};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::extract_global;
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Init, ParamStore};
use crate::trainer::{AdamW, AdamWHyper};

pub const PROBE_FRACTIONS: [f64; 3] = [0.01, 0.1, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 0.05,
            weight_decay: 1e-4,
            seed: 0,
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub fraction: f64,
    pub n_train: usize,
    pub auc: f64,
    pub accuracy: f64,
}

/// Area under the ROC curve by exact pair counting: the fraction of
/// (positive, negative) pairs ranked correctly, ties counting one half.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            positive.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("AUC scores".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count() as u64;
    let n_neg = positive.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Empty("AUC needs both positive and negative samples"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the number of correctly ordered pairs, ties counted once.
    let mut doubled: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if positive[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        doubled += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok(doubled as f64 / (2 * n_pos * n_neg) as f64)
}

/// One-vs-rest AUC averaged over classes that have both positives and
/// negatives among `labels`.
pub fn macro_auc(probs: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut used = 0;
    for c in 0..n_classes {
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if pos.iter().all(|&p| p) || !pos.iter().any(|&p| p) {
            continue;
        }
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        total += roc_auc(&scores, &pos)?;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Empty("AUC needs at least two classes in the evaluation split"));
    }
    Ok(total / used as f64)
}

/// Deterministic subset of `ceil(fraction * n)` indices.
pub fn probe_subset(n: usize, fraction: f64, n_classes: usize, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let k = ((n as f64) * fraction).ceil() as usize;
    if k < n_classes {
        return Err(Error::Config(format!(
            "fraction {fraction} of {n} samples gives {k}, fewer than the {n_classes} classes"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// A single linear map `[D -> C]` over frozen features.
#[derive(Clone, Debug)]
pub struct ProbeHead {
    store: ParamStore,
    weight: Tensor,
    bias: Tensor,
}

impl ProbeHead {
    pub fn new(dim: usize, n_classes: usize, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        let store = ParamStore::new(dtype, device.clone(), seed);
        let root = store.root();
        let bound = 1.0 / (dim as f64).sqrt();
        let weight = root.get("probe.weight", &[dim, n_classes], Init::Uniform(bound))?;
        let bias = root.get("probe.bias", &[n_classes], Init::Const(0.0))?;
        Ok(Self { store, weight, bias })
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        Ok(features.matmul(&self.weight)?.broadcast_add(&self.bias)?)
    }

    pub fn probabilities(&self, features: &Tensor) -> Result<Vec<Vec<f64>>> {
        let p = candle_nn::ops::softmax(&self.logits(features)?, D::Minus1)?;
        Ok(p.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }

    fn vars(&self) -> Vec<(String, Var)> {
        self.store.vars()
    }
}

/// Fits a probe with softmax cross-entropy on fixed `features` `[n, D]`.
pub fn train_probe(features: &Tensor, labels: &[usize], n_classes: usize, cfg: &ProbeConfig) -> Result<ProbeHead> {
    let (n, d) = features.dims2()?;
    if n != labels.len() {
        return Err(Error::Shape(format!("{n} feature rows vs {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Config(format!("label {bad} outside {n_classes} classes")));
    }
    let features = features.detach();
    let head = ProbeHead::new(d, n_classes, features.dtype(), features.device(), cfg.seed)?;
    let params = head.vars();
    let mut opt = AdamW::new(AdamWHyper {
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(cfg.batch_size.max(1)) {
            let sel = Tensor::from_vec(chunk.iter().map(|&i| i as u32).collect::<Vec<_>>(), chunk.len(), features.device())?;
            let x = features.index_select(&sel, 0)?;
            let y = Tensor::from_vec(
                chunk.iter().map(|&i| labels[i] as u32).collect::<Vec<_>>(),
                chunk.len(),
                features.device(),
            )?;
            let loss = candle_nn::loss::cross_entropy(&head.logits(&x)?, &y)?;
            let grads = loss.backward()?;
            opt.step(&params, &grads, cfg.learning_rate, None)?;
        }
    }
    Ok(head)
}

fn labels_of(data: &Dataset) -> Result<Vec<usize>> {
    data.labels
        .iter()
        .map(|l| l.ok_or_else(|| Error::Config("linear probing needs a label on every sample".into())))
        .collect()
}

/// Trains a probe on `fraction` of `train` over frozen global image
/// embeddings and reports macro one-vs-rest AUC and accuracy on `test`.
pub fn linear_probe(
    model: &Model,
    train: &Dataset,
    test: &Dataset,
    fraction: f64,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let n_classes = train.class_names.len();
    let train_labels = labels_of(train)?;
    let test_labels = labels_of(test)?;
    let idx = probe_subset(train.len(), fraction, n_classes, cfg.seed)?;
    let sub = train.subset(&idx);
    let sub_labels: Vec<usize> = idx.iter().map(|&i| train_labels[i]).collect();
    let x_train = extract_global(model, &sub, cfg.batch_size)?;
    let x_test = extract_global(model, test, cfg.batch_size)?;
    let head = train_probe(&x_train, &sub_labels, n_classes, cfg)?;
    let probs = head.probabilities(&x_test)?;
    let correct = probs
        .iter()
        .zip(&test_labels)
        .filter(|(p, &l)| super::predict(p, false) == l)
        .count();
    Ok(ProbeReport {
        fraction,
        n_train: idx.len(),
        auc: macro_auc(&probs, &test_labels, n_classes)?,
        accuracy: correct as f64 / test_labels.len().max(1) as f64,
    })
}
