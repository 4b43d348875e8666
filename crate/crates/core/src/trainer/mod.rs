//! Composite objective, the two-stage schedule, optimization and
//! checkpointing.
//!
//! Stage 1 trains the summarization branch alone (uni-modal text stack,
//! shared decoder layers, summarization cross-attention, vocabulary head).
//! Stage 2 trains everything else with the summarization branch's private
//! cross-attention frozen; its logits serve as the distillation teacher.

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use optim::{grad_norm, AdamW, AdamWHyper, StepInfo};

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::alignment::{global_contrastive, token_contrastive};
use crate::corpus::{batch, Batch, BatchOrder, Dataset};
use crate::error::{Error, Result};
use crate::gendec::{distill_logits, lm_loss, Branch, TeacherForcingPair};
use crate::model::{groups, Model};

pub const METRICS_FILE: &str = "metrics.log";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.safetensors";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    One,
    Two,
}

impl TryFrom<u8> for Stage {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            other => Err(format!("stage must be 1 or 2, got {other}")),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        match s {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// Which stage-2 objectives are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Global and token-level contrastive losses.
    pub contrast: bool,
    /// Captioning LM loss.
    pub cap: bool,
    /// Summarization LM loss.
    pub sum: bool,
    /// Distillation from the summarization branch into captioning.
    pub kd: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::all()
    }
}

impl Ablation {
    pub fn all() -> Self {
        Self {
            contrast: true,
            cap: true,
            sum: true,
            kd: true,
        }
    }

    /// The five ablation rows: contrast only, captioning only, both, plus
    /// summarization, plus distillation.
    pub fn table_rows() -> [(&'static str, Ablation); 5] {
        let none = Ablation {
            contrast: false,
            cap: false,
            sum: false,
            kd: false,
        };
        [
            ("contrast", Ablation { contrast: true, ..none }),
            ("cap", Ablation { cap: true, ..none }),
            ("contrast+cap", Ablation { contrast: true, cap: true, ..none }),
            ("contrast+cap+sum", Ablation { kd: false, ..Ablation::all() }),
            ("contrast+cap+sum+kd", Ablation::all()),
        ]
    }

    /// True when stage 2 needs the stage-1 summarization branch.
    pub fn needs_teacher(&self) -> bool {
        self.sum || self.kd
    }

    /// Turns one objective off by name.
    pub fn disable(&mut self, name: &str) -> Result<()> {
        match name {
            "contrast" => self.contrast = false,
            "cap" => self.cap = false,
            "sum" => self.sum = false,
            "kd" => self.kd = false,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation {other:?} (expected contrast, cap, sum or kd)"
                )))
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let parts: Vec<&str> = [
            (self.contrast, "contrast"),
            (self.cap, "cap"),
            (self.sum, "sum"),
            (self.kd, "kd"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cg: f64,
    pub cl: f64,
    pub sum: f64,
    pub cap: f64,
    pub dis: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cg: 1.0,
            cl: 1.0,
            sum: 1.0,
            cap: 1.0,
            dis: 1.0,
        }
    }
}

impl LossWeights {
    pub fn scaled(&self, f: f64) -> Self {
        Self {
            cg: self.cg * f,
            cl: self.cl * f,
            sum: self.sum * f,
            cap: self.cap * f,
            dis: self.dis * f,
        }
    }

    fn as_array(&self) -> [f64; 5] {
        [self.cg, self.cl, self.sum, self.cap, self.dis]
    }
}

pub const COMPONENTS: [&str; 5] = ["l_cg", "l_cl", "l_sum", "l_cap", "l_dis"];

/// Differentiable loss components; `None` means not computed.
#[derive(Clone, Debug, Default)]
pub struct LossTerms {
    pub cg: Option<Tensor>,
    pub cl: Option<Tensor>,
    pub sum: Option<Tensor>,
    pub cap: Option<Tensor>,
    pub dis: Option<Tensor>,
}

impl LossTerms {
    fn as_array(&self) -> [Option<&Tensor>; 5] {
        [
            self.cg.as_ref(),
            self.cl.as_ref(),
            self.sum.as_ref(),
            self.cap.as_ref(),
            self.dis.as_ref(),
        ]
    }
}

/// Scalar values of the five components, the weights, and the weighted total
/// over the components that were active.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_cg: Option<f64>,
    pub l_cl: Option<f64>,
    pub l_sum: Option<f64>,
    pub l_cap: Option<f64>,
    pub l_dis: Option<f64>,
    pub weights: LossWeights,
    /// Which components contribute to `total`.
    pub active: [bool; 5],
    pub total: f64,
}

impl LossReport {
    pub fn components(&self) -> [Option<f64>; 5] {
        [self.l_cg, self.l_cl, self.l_sum, self.l_cap, self.l_dis]
    }

    fn from_values(values: [Option<f64>; 5], active: [bool; 5], weights: LossWeights) -> Self {
        let w = weights.as_array();
        let mut total = 0.0;
        for i in 0..5 {
            if let (true, Some(v)) = (active[i], values[i]) {
                total += w[i] * v;
            }
        }
        Self {
            l_cg: values[0],
            l_cl: values[1],
            l_sum: values[2],
            l_cap: values[3],
            l_dis: values[4],
            weights,
            active,
            total,
        }
    }

    /// `key=value` fields for the metrics log; absent components print `na`.
    pub fn log_fields(&self) -> String {
        let mut s = String::new();
        for (name, v) in COMPONENTS.iter().zip(self.components()) {
            match v {
                Some(v) => write!(s, "{name}={v:.6} ").unwrap(),
                None => write!(s, "{name}=na ").unwrap(),
            }
        }
        write!(s, "total={:.6}", self.total).unwrap();
        s
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Weighted sum of the present components in fixed order. A non-finite
/// component aborts with its name.
pub fn composite_loss(terms: &LossTerms, weights: &LossWeights) -> Result<(Tensor, LossReport)> {
    let w = weights.as_array();
    let mut values = [None; 5];
    let mut active = [false; 5];
    let mut total: Option<Tensor> = None;
    for (i, t) in terms.as_array().into_iter().enumerate() {
        let Some(t) = t else { continue };
        let v = scalar(t)?;
        if !v.is_finite() {
            return Err(Error::NonFinite(COMPONENTS[i].to_string()));
        }
        values[i] = Some(v);
        active[i] = true;
        let weighted = (t * w[i])?;
        total = Some(match total {
            Some(acc) => (acc + weighted)?,
            None => weighted,
        });
    }
    let total = total.ok_or_else(|| Error::Config("no active loss component".into()))?;
    Ok((total, LossReport::from_values(values, active, *weights)))
}

/// Which components a forward pass should produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Needs {
    pub contrast: bool,
    pub sum: bool,
    pub cap: bool,
    pub dis: bool,
}

impl Needs {
    pub fn for_training(stage: Stage, ab: &Ablation) -> Self {
        match stage {
            Stage::One => Self {
                contrast: false,
                sum: true,
                cap: false,
                dis: false,
            },
            Stage::Two => Self {
                contrast: ab.contrast,
                sum: ab.sum,
                cap: ab.cap,
                dis: ab.kd,
            },
        }
    }

    pub fn everything() -> Self {
        Self {
            contrast: true,
            sum: true,
            cap: true,
            dis: true,
        }
    }
}

/// One forward pass producing the requested components. Distillation uses
/// the summarization logits, detached, as the teacher.
pub fn forward_losses(model: &Model, b: &Batch, needs: Needs) -> Result<LossTerms> {
    let imp = model.encode_text(&b.impression, &b.impression_mask)?;
    let width = b.impression.dim(1)?;
    let tf = TeacherForcingPair::new(&b.impression, &b.impression_mask)?;
    let need_findings = needs.sum || needs.dis || needs.contrast;
    let need_image = needs.cap || needs.dis || needs.contrast;
    let findings = if need_findings {
        Some(model.encode_text(&b.findings, &b.findings_mask)?)
    } else {
        None
    };
    let image = if need_image {
        Some(model.encode_image(&b.images)?)
    } else {
        None
    };
    let mut terms = LossTerms::default();
    let sum_logits = match &findings {
        Some(f) if needs.sum || needs.dis => {
            let (mem, mask) = model.summary_memory(f);
            Some(model.decode(Branch::Summarize, &imp, width, &mem, &mask)?.logits)
        }
        _ => None,
    };
    let cap_logits = match &image {
        Some(img) if needs.cap || needs.dis => {
            let (mem, mask) = model.caption_memory(img)?;
            Some(model.decode(Branch::Caption, &imp, width, &mem, &mask)?.logits)
        }
        _ => None,
    };
    if needs.sum {
        terms.sum = Some(lm_loss(sum_logits.as_ref().unwrap(), &tf.target, &tf.target_mask)?);
    }
    if needs.cap {
        terms.cap = Some(lm_loss(cap_logits.as_ref().unwrap(), &tf.target, &tf.target_mask)?);
    }
    if needs.dis {
        terms.dis = Some(distill_logits(
            sum_logits.as_ref().unwrap(),
            cap_logits.as_ref().unwrap(),
            &tf.target_mask,
        )?);
    }
    if needs.contrast {
        let img = image.as_ref().unwrap();
        let f = findings.as_ref().unwrap();
        let tau = model.temperature().tau()?;
        terms.cg = Some(global_contrastive(&img.global, &imp.global, &tau)?);
        terms.cl = Some(token_contrastive(&img.tokens, &f.tokens, &f.token_mask, &tau)?);
    }
    Ok(terms)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub weights: LossWeights,
    /// Also freeze the shared decoder layers in stage 2.
    pub freeze_shared: bool,
    /// Train the summarization cross-attention in stage 2 as well, so both
    /// branches learn under the same settings. Needs no teacher and excludes
    /// distillation.
    pub train_summarizer: bool,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// Fraction of the data held out for early stopping.
    pub val_fraction: f64,
    /// A step whose total exceeds this aborts training.
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper(Stage::One)
    }
}

impl TrainConfig {
    pub fn paper(stage: Stage) -> Self {
        Self {
            stage,
            epochs: 50,
            batch_size: 48,
            learning_rate: 2e-5,
            weight_decay: if stage == Stage::One { 0.05 } else { 0.0 },
            warmup_epochs: if stage == Stage::One { 0 } else { 20 },
            patience: 5,
            seed: 0,
            ablation: Ablation::all(),
            weights: LossWeights::default(),
            freeze_shared: false,
            train_summarizer: false,
            grad_clip: 1.0,
            val_fraction: 0.1,
            divergence_threshold: 1e4,
        }
    }

    /// Short schedule with a larger step size for from-scratch toy models.
    pub fn toy(stage: Stage) -> Self {
        Self {
            epochs: if stage == Stage::One { 6 } else { 10 },
            batch_size: 32,
            learning_rate: 1e-3,
            warmup_epochs: if stage == Stage::One { 0 } else { 1 },
            ..Self::paper(stage)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.weight_decay < 0.0 || self.grad_clip <= 0.0 {
            return Err(Error::Config("weight_decay must be >= 0 and grad_clip > 0".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        if self.stage == Stage::Two {
            let a = self.ablation;
            if !(a.contrast || a.cap || a.sum || a.kd) {
                return Err(Error::Config("every stage-2 objective is ablated".into()));
            }
        }
        if self.train_summarizer && (self.stage != Stage::Two || self.ablation.kd) {
            return Err(Error::Config(
                "train_summarizer applies to stage 2 without distillation".into(),
            ));
        }
        Ok(())
    }

    /// True when training reads a frozen stage-1 summarization branch.
    pub fn needs_teacher(&self) -> bool {
        self.stage == Stage::Two && !self.train_summarizer && self.ablation.needs_teacher()
    }

    /// Parameters the optimizer may touch in this stage.
    pub fn trainable(&self, name: &str) -> bool {
        match self.stage {
            Stage::One => {
                groups::text_stack(name)
                    || groups::shared(name)
                    || groups::summarize_private(name)
                    || groups::vocab_head(name)
            }
            Stage::Two => {
                (self.train_summarizer || !groups::summarize_private(name))
                    && !(self.freeze_shared && groups::shared(name))
            }
        }
    }
}

/// One line of the metrics log.
/// Verdict of [`EarlyStopping::update`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Wait,
    Stop,
}

/// Tracks the best validation value; stops after `patience` epochs without a
/// strict improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, value: f64) -> Progress {
        if value < self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            Progress::Improved
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                Progress::Stop
            } else {
                Progress::Wait
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: &'static str,
    pub report: LossReport,
    pub lr: f64,
}

impl EpochMetrics {
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} split={} {} lr={:.6e}",
            self.epoch,
            self.split,
            self.report.log_fields(),
            self.lr
        )
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_total: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub checkpoint: PathBuf,
}

/// Drives optimization of one model for one stage.
pub struct Trainer<'m> {
    model: &'m Model,
    cfg: TrainConfig,
    opt: AdamW,
    params: Vec<(String, Var)>,
    teacher_frozen: bool,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m Model, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = model.store().vars_matching(|n| cfg.trainable(n));
        Ok(Self {
            model,
            cfg: cfg.clone(),
            opt: AdamW::new(AdamWHyper {
                weight_decay: cfg.weight_decay,
                ..Default::default()
            }),
            params,
            teacher_frozen: false,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    pub fn set_optimizer(&mut self, opt: AdamW) {
        self.opt = opt;
    }

    pub fn trainable_params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// Loads a stage-1 checkpoint as the starting point of stage 2; the
    /// summarization branch it carries becomes the frozen teacher.
    pub fn load_teacher(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if self.cfg.stage != Stage::Two {
            return Err(Error::Config("a teacher is only used in stage 2".into()));
        }
        if ckpt.meta.stage != 1 {
            return Err(Error::Checkpoint(format!(
                "teacher checkpoint comes from stage {}, expected 1",
                ckpt.meta.stage
            )));
        }
        ckpt.apply(self.model)?;
        self.teacher_frozen = !self.cfg.train_summarizer;
        Ok(())
    }

    pub fn teacher_frozen(&self) -> bool {
        self.teacher_frozen
    }

    fn check_teacher(&self) -> Result<()> {
        if self.cfg.needs_teacher() && !self.teacher_frozen {
            return Err(Error::Config(
                "stage 2 with the summarization branch needs a stage-1 teacher checkpoint".into(),
            ));
        }
        Ok(())
    }

    fn make_batch(&self, data: &Dataset, idx: &[usize]) -> Result<Batch> {
        let refs: Vec<_> = idx.iter().map(|&i| &data.samples[i]).collect();
        let c = self.model.config();
        batch(&refs, c.max_len_impression, c.max_len_findings, self.model.dtype(), self.model.device())
    }

    fn apply_step(&mut self, b: &Batch, lr: f64) -> Result<LossReport> {
        let needs = Needs::for_training(self.cfg.stage, &self.cfg.ablation);
        let terms = forward_losses(self.model, b, needs)?;
        let (total, report) = composite_loss(&terms, &self.cfg.weights)?;
        let grads = total.backward()?;
        self.opt.step(&self.params, &grads, lr, Some(self.cfg.grad_clip))?;
        self.model.enforce_constraints()?;
        Ok(report)
    }

    /// One optimization step on the summarization loss alone.
    pub fn stage1_step(&mut self, b: &Batch, lr: f64) -> Result<LossReport> {
        if self.cfg.stage != Stage::One {
            return Err(Error::Config("stage1_step called on a stage-2 trainer".into()));
        }
        self.apply_step(b, lr)
    }

    /// One optimization step on the stage-2 objectives selected by the
    /// ablation flags.
    pub fn stage2_step(&mut self, b: &Batch, lr: f64) -> Result<LossReport> {
        if self.cfg.stage != Stage::Two {
            return Err(Error::Config("stage2_step called on a stage-1 trainer".into()));
        }
        self.check_teacher()?;
        self.apply_step(b, lr)
    }

    pub fn step(&mut self, b: &Batch, lr: f64) -> Result<LossReport> {
        match self.cfg.stage {
            Stage::One => self.stage1_step(b, lr),
            Stage::Two => self.stage2_step(b, lr),
        }
    }

    /// Learning rate at optimizer step `step` (0-based): linear warmup, then
    /// constant.
    pub fn lr_at(&self, step: usize, steps_per_epoch: usize) -> f64 {
        let warm = self.cfg.warmup_epochs * steps_per_epoch;
        if warm == 0 {
            self.cfg.learning_rate
        } else {
            self.cfg.learning_rate * ((step + 1) as f64 / warm as f64).min(1.0)
        }
    }

    /// Sample-weighted mean losses over `data`. Stage-2 evaluation reports all
    /// five components; the total counts only the trained ones.
    pub fn evaluate(&self, data: &Dataset) -> Result<LossReport> {
        if data.is_empty() {
            return Err(Error::Empty("evaluation split"));
        }
        let train_needs = Needs::for_training(self.cfg.stage, &self.cfg.ablation);
        let needs = match self.cfg.stage {
            Stage::One => train_needs,
            Stage::Two => Needs::everything(),
        };
        let active = [
            train_needs.contrast,
            train_needs.contrast,
            train_needs.sum,
            train_needs.cap,
            train_needs.dis,
        ];
        let order = BatchOrder {
            len: data.len(),
            batch_size: self.cfg.batch_size,
            seed: 0,
            shuffle: false,
        };
        let mut sums = [0.0f64; 5];
        let mut seen = [false; 5];
        let mut n = 0usize;
        for idx in order.epoch(0) {
            let b = self.make_batch(data, &idx)?;
            let terms = forward_losses(self.model, &b, needs)?;
            for (i, t) in terms.as_array().into_iter().enumerate() {
                if let Some(t) = t {
                    sums[i] += scalar(t)? * idx.len() as f64;
                    seen[i] = true;
                }
            }
            n += idx.len();
        }
        let mut values = [None; 5];
        for i in 0..5 {
            if seen[i] {
                values[i] = Some(sums[i] / n as f64);
            }
        }
        Ok(LossReport::from_values(values, active, self.cfg.weights))
    }

    /// Trains with early stopping on the validation total. The best weights
    /// are restored into the model and written to `out_dir`; every epoch
    /// appends a train and a val line to the metrics log.
    pub fn fit(
        &mut self,
        train: &Dataset,
        val: &Dataset,
        out_dir: &Path,
        meta: &CheckpointMeta,
    ) -> Result<FitOutcome> {
        self.check_teacher()?;
        if train.is_empty() {
            return Err(Error::Empty("training split"));
        }
        if val.is_empty() {
            return Err(Error::Empty("validation split"));
        }
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let log_path = out_dir.join(METRICS_FILE);
        let mut log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let best_path = out_dir.join(BEST_CHECKPOINT);
        let order = BatchOrder {
            len: train.len(),
            batch_size: self.cfg.batch_size,
            seed: self.cfg.seed,
            shuffle: true,
        };
        let steps_per_epoch = train.len().div_ceil(self.cfg.batch_size);
        let mut last_good = self.model.store().snapshot()?;
        let mut stopper = EarlyStopping::new(self.cfg.patience);
        let mut metrics = Vec::new();
        let mut step = 0usize;
        let mut stopped_early = false;
        let mut epochs_run = 0;
        let mut ckpt_meta = meta.clone();
        ckpt_meta.stage = self.cfg.stage.into();
        ckpt_meta.train = serde_json::to_value(&self.cfg).ok();

        for epoch in 1..=self.cfg.epochs {
            let mut sums = [0.0f64; 5];
            let mut seen = [false; 5];
            let mut active = [false; 5];
            let mut n = 0usize;
            let mut lr = self.cfg.learning_rate;
            for idx in order.epoch(epoch) {
                lr = self.lr_at(step, steps_per_epoch);
                let b = self.make_batch(train, &idx)?;
                let report = match self.step(&b, lr) {
                    Ok(r) if r.total.is_finite() && r.total <= self.cfg.divergence_threshold => r,
                    other => {
                        let msg = match other {
                            Ok(r) => format!("total loss {} exceeds threshold", r.total),
                            Err(e) => e.to_string(),
                        };
                        self.model.store().restore(&last_good)?;
                        let path = out_dir.join(LAST_GOOD_CHECKPOINT);
                        save_checkpoint(&path, self.model, &ckpt_meta, Some(&self.opt))?;
                        return Err(Error::Diverged {
                            epoch,
                            msg: format!("{msg}; last good weights in {}", path.display()),
                        });
                    }
                };
                for (i, v) in report.components().into_iter().enumerate() {
                    if let Some(v) = v {
                        sums[i] += v * idx.len() as f64;
                        seen[i] = true;
                    }
                }
                active = report.active;
                n += idx.len();
                step += 1;
            }
            epochs_run = epoch;
            let mut values = [None; 5];
            for i in 0..5 {
                if seen[i] {
                    values[i] = Some(sums[i] / n as f64);
                }
            }
            let train_report = LossReport::from_values(values, active, self.cfg.weights);
            let val_report = self.evaluate(val)?;
            for (split, report) in [("train", train_report), ("val", val_report)] {
                let m = EpochMetrics {
                    epoch,
                    split,
                    report,
                    lr,
                };
                writeln!(log, "{}", m.log_line()).map_err(|e| Error::io(&log_path, e))?;
                log::info!("{}", m.log_line());
                metrics.push(m);
            }
            last_good = self.model.store().snapshot()?;
            match stopper.update(epoch, val_report.total) {
                Progress::Improved => {
                    ckpt_meta.epoch = epoch;
                    save_checkpoint(&best_path, self.model, &ckpt_meta, Some(&self.opt))?;
                }
                Progress::Wait => {}
                Progress::Stop => {
                    stopped_early = true;
                    break;
                }
            }
        }
        let best_ckpt = load_checkpoint(&best_path, self.model.device())?;
        best_ckpt.apply(self.model)?;
        Ok(FitOutcome {
            metrics,
            best_epoch: stopper.best_epoch(),
            best_val_total: stopper.best(),
            epochs_run,
            stopped_early,
            checkpoint: best_path,
        })
    }
}

/// Captures the current model weights as an in-memory checkpoint.
pub fn capture(model: &Model, meta: &CheckpointMeta) -> Result<Checkpoint> {
    Ok(Checkpoint {
        meta: meta.clone(),
        params: model.store().snapshot()?,
        optimizer: None,
    })
}

/// Parses a metrics log back into `(epoch, split, field -> value)` rows;
/// `na` fields are skipped.
pub fn parse_metrics_log(text: &str) -> Result<Vec<(usize, String, Vec<(String, f64)>)>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut epoch = None;
        let mut split = None;
        let mut fields = Vec::new();
        for kv in line.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Parse {
                path: PathBuf::from(METRICS_FILE),
                line: i + 1,
                msg: format!("field {kv:?} lacks '='"),
            })?;
            match k {
                "epoch" => epoch = v.parse().ok(),
                "split" => split = Some(v.to_string()),
                _ if v == "na" => {}
                _ => fields.push((
                    k.to_string(),
                    v.parse().map_err(|_| Error::Parse {
                        path: PathBuf::from(METRICS_FILE),
                        line: i + 1,
                        msg: format!("bad number in {kv:?}"),
                    })?,
                )),
            }
        }
        match (epoch, split) {
            (Some(e), Some(s)) => rows.push((e, s, fields)),
            _ => {
                return Err(Error::Parse {
                    path: PathBuf::from(METRICS_FILE),
                    line: i + 1,
                    msg: "missing epoch or split".into(),
                })
            }
        }
    }
    Ok(rows)
}
