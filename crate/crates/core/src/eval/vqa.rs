use candle_core::{DType, Module, Tensor, D};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{stack_images, token_tensors, Dataset, SyntheticGrammar, VqaKind};
use crate::error::{Error, Result};
use crate::model::{groups, Model};
use crate::nn::{relu, Linear, ParamStore};
use crate::trainer::{AdamW, AdamWHyper};

/// One question about one dataset image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VqaExample {
    pub sample: usize,
    pub question: Vec<u32>,
    pub answer: usize,
}

/// Questions over a closed answer set.
#[derive(Clone, Debug, PartialEq)]
pub struct VqaSet {
    pub examples: Vec<VqaExample>,
    pub answers: Vec<String>,
}

impl VqaSet {
    /// One question of `kind` per sample whose findings follow the grammar.
    pub fn from_dataset(data: &Dataset, grammar: &SyntheticGrammar, kind: VqaKind) -> Result<Self> {
        let answers = grammar.answers(kind);
        if answers.is_empty() {
            return Err(Error::Empty("VQA answer vocabulary"));
        }
        let examples = data
            .records
            .iter()
            .enumerate()
            .filter_map(|(i, r)| {
                let a = grammar.parse_findings(&r.findings)?;
                let pair = grammar.vqa(&a, kind);
                Some(VqaExample {
                    sample: i,
                    question: data.vocab.tokenize(&pair.question),
                    answer: pair.answer,
                })
            })
            .collect::<Vec<_>>();
        if examples.is_empty() {
            return Err(Error::Empty("VQA examples (no findings follow the grammar)"));
        }
        Ok(Self { examples, answers })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqaConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Also fine-tune the captioning branch's cross-attention. Mutates the
    /// model.
    pub finetune_caption: bool,
    pub seed: u64,
}

impl Default for VqaConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 60,
            learning_rate: 3e-3,
            batch_size: 64,
            finetune_caption: false,
            seed: 0,
        }
    }
}

/// Two linear layers with a ReLU between, over the pooled captioning state.
#[derive(Clone, Debug)]
pub struct VqaHead {
    store: ParamStore,
    l1: Linear,
    l2: Linear,
    n_answers: usize,
}

impl VqaHead {
    pub fn new(model: &Model, hidden: usize, n_answers: usize, seed: u64) -> Result<Self> {
        if n_answers == 0 {
            return Err(Error::Empty("VQA answer vocabulary"));
        }
        let store = ParamStore::new(model.dtype(), model.device().clone(), seed);
        let root = store.root();
        let h = model.config().text.hidden;
        Ok(Self {
            l1: Linear::new(&root.pp("vqa.l1"), h, hidden)?,
            l2: Linear::new(&root.pp("vqa.l2"), hidden, n_answers)?,
            store,
            n_answers,
        })
    }

    pub fn n_answers(&self) -> usize {
        self.n_answers
    }

    pub fn logits(&self, pooled: &Tensor) -> Result<Tensor> {
        Ok(self.l2.forward(&relu(&self.l1.forward(pooled)?)?)?)
    }
}

fn pooled(model: &Model, data: &Dataset, set: &VqaSet, idx: &[usize], image_of: &[usize]) -> Result<Tensor> {
    let samples: Vec<_> = idx.iter().map(|&i| &data.samples[image_of[set.examples[i].sample]]).collect();
    let images = stack_images(&samples, model.dtype(), model.device())?;
    let qs: Vec<&[u32]> = idx.iter().map(|&i| set.examples[i].question.as_slice()).collect();
    let longest = qs.iter().map(|q| q.len()).max().unwrap_or(2);
    let (ids, mask) = token_tensors(&qs, longest, model.dtype(), model.device())?;
    let image = model.encode_image(&images)?;
    let (p, _, _) = model.caption_pooled(&ids, &mask, &image)?;
    Ok(p)
}

fn answers_tensor(set: &VqaSet, idx: &[usize], model: &Model) -> Result<Tensor> {
    let a: Vec<u32> = idx.iter().map(|&i| set.examples[i].answer as u32).collect();
    Ok(Tensor::from_vec(a, idx.len(), model.device())?)
}

/// Fits a VQA head on `set` (questions about `data`). Without
/// `finetune_caption` the pooled states are computed once and the model is
/// untouched.
pub fn train_vqa(model: &Model, data: &Dataset, set: &VqaSet, cfg: &VqaConfig) -> Result<VqaHead> {
    let head = VqaHead::new(model, cfg.hidden, set.answers.len(), cfg.seed)?;
    let mut params = head.store.vars();
    if cfg.finetune_caption {
        params.extend(model.store().vars_matching(groups::caption_private));
    }
    let mut opt = AdamW::new(AdamWHyper::default());
    let identity: Vec<usize> = (0..data.len()).collect();
    let all: Vec<usize> = (0..set.examples.len()).collect();
    let cached = if cfg.finetune_caption {
        None
    } else {
        let parts = all
            .chunks(cfg.batch_size.max(1))
            .map(|c| pooled(model, data, set, c, &identity).map(|t| t.detach()))
            .collect::<Result<Vec<_>>>()?;
        Some(Tensor::cat(&parts, 0)?)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = all.clone();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let x = match &cached {
                Some(feats) => {
                    let sel: Vec<u32> = chunk.iter().map(|&i| i as u32).collect();
                    feats.index_select(&Tensor::from_vec(sel, chunk.len(), model.device())?, 0)?
                }
                None => pooled(model, data, set, chunk, &identity)?,
            };
            let y = answers_tensor(set, chunk, model)?;
            let loss = candle_nn::loss::cross_entropy(&head.logits(&x)?, &y)?;
            let grads = loss.backward()?;
            opt.step(&params, &grads, cfg.learning_rate, Some(1.0))?;
        }
    }
    Ok(head)
}

/// Predicted answer index for each `(image, question)` row.
pub fn vqa_answer(model: &Model, head: &VqaHead, images: &Tensor, ids: &Tensor, mask: &Tensor) -> Result<Vec<usize>> {
    let image = model.encode_image(images)?;
    let (p, _, _) = model.caption_pooled(ids, mask, &image)?;
    let pred = head.logits(&p)?.argmax(D::Minus1)?.to_dtype(DType::U32)?.to_vec1::<u32>()?;
    Ok(pred.into_iter().map(|a| a as usize).collect())
}

/// Accuracy of `head` on `set`. With `shuffle_images`, questions are paired
/// with a seeded permutation of the images, which should reduce accuracy to
/// chance.
pub fn vqa_accuracy(
    model: &Model,
    head: &VqaHead,
    data: &Dataset,
    set: &VqaSet,
    shuffle_images: Option<u64>,
    batch_size: usize,
) -> Result<f64> {
    if set.examples.is_empty() {
        return Err(Error::Empty("VQA examples"));
    }
    let mut image_of: Vec<usize> = (0..data.len()).collect();
    if let Some(seed) = shuffle_images {
        image_of.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let all: Vec<usize> = (0..set.examples.len()).collect();
    let mut correct = 0usize;
    for chunk in all.chunks(batch_size.max(1)) {
        let p = pooled(model, data, set, chunk, &image_of)?;
        let pred = head.logits(&p)?.argmax(D::Minus1)?.to_vec1::<u32>()?;
        correct += chunk
            .iter()
            .zip(pred)
            .filter(|(&i, a)| set.examples[i].answer == *a as usize)
            .count();
    }
    Ok(correct as f64 / set.examples.len() as f64)
}
