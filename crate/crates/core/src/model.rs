//! The full network: image encoder, text stack, parallel decoder and the
//! contrastive temperature, all in one [`ParamStore`].

use candle_core::{DType, Device, IndexOp, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::corpus::{BOS, EOS, PAD};
use crate::encoders::{
    ImageEncoder, ImageEncoderConfig, MultiScaleFeatures, Temperature, TextEncoder, TextEncoding,
    TextStackConfig, TAU_INIT,
};
use crate::error::{Error, Result};
use crate::gendec::{Branch, BranchOutput, DecoderConfig, ParallelDecoder};
use crate::nn::ParamStore;

/// What the captioning branch attends to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionMemory {
    /// Aggregated image tokens followed by the global image embedding.
    TokenGrid,
    /// The global image embedding alone.
    GlobalOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image: ImageEncoderConfig,
    pub text: TextStackConfig,
    pub embed_dim: usize,
    pub caption_memory: CaptionMemory,
    pub max_len_impression: usize,
    pub max_len_findings: usize,
    pub tau_init: f64,
}

impl ModelConfig {
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            image: ImageEncoderConfig::toy(),
            text: TextStackConfig::toy(vocab_size),
            embed_dim: 32,
            caption_memory: CaptionMemory::TokenGrid,
            max_len_impression: 8,
            max_len_findings: 16,
            tau_init: TAU_INIT,
        }
    }

    pub fn paper(vocab_size: usize) -> Self {
        Self {
            image: ImageEncoderConfig::paper(),
            text: TextStackConfig::paper(vocab_size),
            embed_dim: 128,
            caption_memory: CaptionMemory::TokenGrid,
            max_len_impression: 64,
            max_len_findings: 256,
            tau_init: TAU_INIT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.text.validate()?;
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        let longest = self.max_len_impression.max(self.max_len_findings) + 1;
        if longest > self.text.max_positions {
            return Err(Error::Config(format!(
                "max sequence length {longest} (with CLS) exceeds {} positions",
                self.text.max_positions
            )));
        }
        if self.max_len_impression < 2 || self.max_len_findings < 2 {
            return Err(Error::Config("max lengths must allow BOS and EOS".into()));
        }
        Ok(())
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            layers: self.text.decoder_layers(),
            hidden: self.text.hidden,
            heads: self.text.heads,
            ffn: self.text.ffn,
            vocab_size: self.text.vocab_size,
            sum_memory_dim: self.text.hidden,
            cap_memory_dim: self.embed_dim,
        }
    }
}

/// Parameter-name predicates for the groups the training schedule refers to.
pub mod groups {
    pub fn image(name: &str) -> bool {
        name.starts_with("image.")
    }

    /// Uni-modal text stack.
    pub fn text_stack(name: &str) -> bool {
        name.starts_with("text.")
    }

    /// Contrastive read-out heads of the text stack.
    pub fn text_projection(name: &str) -> bool {
        name.starts_with("proj.")
    }

    pub fn temperature(name: &str) -> bool {
        name.starts_with("temp.")
    }

    /// Self-attention and feed-forward weights used by both branches.
    pub fn shared(name: &str) -> bool {
        name.starts_with("dec.layers.") && name.contains(".shared.")
    }

    pub fn summarize_private(name: &str) -> bool {
        name.starts_with("dec.layers.") && name.contains(".sum.")
    }

    pub fn caption_private(name: &str) -> bool {
        name.starts_with("dec.layers.") && name.contains(".cap.")
    }

    pub fn vocab_head(name: &str) -> bool {
        name.starts_with("dec.out.")
    }
}

#[derive(Clone, Debug)]
pub struct ImageEncoding {
    pub features: MultiScaleFeatures,
    /// `[B, D]`
    pub global: Tensor,
    /// `[B, n1, D]`
    pub tokens: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    store: ParamStore,
    image: ImageEncoder,
    text: TextEncoder,
    decoder: ParallelDecoder,
    temperature: Temperature,
}

impl Model {
    pub fn new(cfg: &ModelConfig, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(dtype, device.clone(), seed);
        let root = store.root();
        Ok(Self {
            cfg: cfg.clone(),
            image: ImageEncoder::new(&root.pp("image"), &cfg.image, cfg.embed_dim)?,
            text: TextEncoder::new(&root.pp("text"), &root.pp("proj.text"), &cfg.text, cfg.embed_dim)?,
            decoder: ParallelDecoder::new(&root.pp("dec"), &cfg.decoder())?,
            temperature: Temperature::new(&root.pp("temp"), cfg.tau_init)?,
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn temperature(&self) -> &Temperature {
        &self.temperature
    }

    pub fn image_encoder(&self) -> &ImageEncoder {
        &self.image
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    pub fn decoder(&self) -> &ParallelDecoder {
        &self.decoder
    }

    /// Clamps the temperature variable back into range.
    pub fn enforce_constraints(&self) -> Result<()> {
        let var = self
            .store
            .get("temp.log_tau")
            .ok_or_else(|| Error::Config("temperature parameter missing".into()))?;
        self.temperature.enforce(&var)
    }

    pub fn encode_image(&self, images: &Tensor) -> Result<ImageEncoding> {
        let (features, global) = self.image.encode(images)?;
        let tokens = self.image.aggregate(&features)?;
        Ok(ImageEncoding {
            features,
            global,
            tokens,
        })
    }

    pub fn encode_text(&self, ids: &Tensor, mask: &Tensor) -> Result<TextEncoding> {
        self.text.encode(ids, mask)
    }

    /// Memory of the captioning branch and its key mask.
    pub fn caption_memory(&self, image: &ImageEncoding) -> Result<(Tensor, Tensor)> {
        let global = image.global.unsqueeze(1)?;
        let memory = match self.cfg.caption_memory {
            CaptionMemory::TokenGrid => Tensor::cat(&[&image.tokens, &global], 1)?,
            CaptionMemory::GlobalOnly => global,
        };
        let (b, m, _) = memory.dims3()?;
        let mask = Tensor::ones((b, m), self.dtype(), self.device())?;
        Ok((memory, mask))
    }

    /// Memory of the summarization branch: uni-modal findings states over
    /// every non-PAD position.
    pub fn summary_memory(&self, findings: &TextEncoding) -> (Tensor, Tensor) {
        (findings.hidden.clone(), findings.key_mask.clone())
    }

    /// Teacher-forced decoding of an impression batch. `impression` must come
    /// from [`Model::encode_text`] on `ids` of width `L`; the decoder sees
    /// positions `0..L-1` and predicts `1..L`.
    pub fn decode(
        &self,
        branch: Branch,
        impression: &TextEncoding,
        width: usize,
        memory: &Tensor,
        memory_mask: &Tensor,
    ) -> Result<BranchOutput> {
        if width < 2 {
            return Err(Error::Shape("impression needs at least two positions".into()));
        }
        let inputs = impression.hidden.narrow(1, 0, width - 1)?;
        self.decoder.forward(branch, &inputs, memory, memory_mask)
    }

    /// Captioning-branch states for a question, read at the CLS position.
    /// Returns `[B, H]` and the full branch output over `L + 1` positions.
    pub fn caption_pooled(
        &self,
        ids: &Tensor,
        mask: &Tensor,
        image: &ImageEncoding,
    ) -> Result<(Tensor, BranchOutput, Vec<usize>)> {
        let enc = self.encode_text(ids, mask)?;
        let (memory, mem_mask) = self.caption_memory(image)?;
        let out = self.decoder.forward(Branch::Caption, &enc.hidden, &memory, &mem_mask)?;
        let (b, w, h) = out.states.dims3()?;
        let idx: Vec<u32> = enc
            .cls_positions
            .iter()
            .enumerate()
            .map(|(i, &p)| (i * w + p) as u32)
            .collect();
        let pooled = out
            .states
            .reshape((b * w, h))?
            .index_select(&Tensor::new(idx.as_slice(), self.device())?, 0)?;
        Ok((pooled, out, enc.cls_positions))
    }

    /// Greedy decoding from `BOS` until `EOS` or `max_len` tokens.
    pub fn greedy_decode(
        &self,
        branch: Branch,
        memory: &Tensor,
        memory_mask: &Tensor,
        max_len: usize,
    ) -> Result<Vec<Vec<u32>>> {
        let b = memory.dim(0)?;
        let mut seqs: Vec<Vec<u32>> = vec![vec![BOS]; b];
        let mut done = vec![false; b];
        while seqs[0].len() < max_len.min(self.cfg.text.max_positions) && done.iter().any(|d| !d) {
            let t = seqs[0].len();
            let flat: Vec<u32> = seqs.iter().flatten().copied().collect();
            let ids = Tensor::from_vec(flat, (b, t), self.device())?;
            let hidden = self.text.run_stack(&ids)?;
            let out = self.decoder.forward(branch, &hidden, memory, memory_mask)?;
            let next = out.logits.i((.., t - 1, ..))?.argmax(D::Minus1)?.to_vec1::<u32>()?;
            for (i, tok) in next.into_iter().enumerate() {
                let tok = if done[i] { PAD } else { tok };
                done[i] |= tok == EOS;
                seqs[i].push(tok);
            }
        }
        for s in &mut seqs {
            while s.last() == Some(&PAD) {
                s.pop();
            }
        }
        Ok(seqs)
    }
}
