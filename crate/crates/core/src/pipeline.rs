//! Glue between the corpus on disk, the trainer and the checkpoints.

use std::path::Path;

use crate::corpus::{load_manifest, Dataset, Vocabulary, CLASSES_FILE, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::trainer::{Checkpoint, CheckpointMeta, FitOutcome, Stage, TrainConfig, Trainer};

/// Loads a corpus directory with a fixed vocabulary (normally the one stored
/// in the checkpoint), so token ids agree with the model.
pub fn load_with_vocab(dir: &Path, vocab: Vocabulary, class_names: &[String], model: &Model) -> Result<Dataset> {
    let records = load_manifest(&dir.join(MANIFEST_FILE))?;
    let classes = if dir.join(CLASSES_FILE).exists() {
        Dataset::class_names_in(dir)?
    } else {
        class_names.to_vec()
    };
    let img = &model.config().image;
    Dataset::from_records(dir, records, vocab, classes, img.channels, img.image_size)
}

/// Checkpoint metadata describing `model` trained on `data`.
pub fn meta_for(model: &Model, data: &Dataset, stage: Stage) -> CheckpointMeta {
    CheckpointMeta {
        model: model.config().clone(),
        stage: stage.into(),
        epoch: 0,
        vocab: data.vocab.tokens().to_vec(),
        class_names: data.class_names.clone(),
        train: None,
    }
}

/// Splits off `cfg.val_fraction` of `data` with `cfg.seed` and trains one
/// stage. In stage 2 `init` is the stage-1 checkpoint: it becomes the frozen
/// teacher when the configuration needs one and is otherwise only the
/// starting point.
pub fn pretrain(
    model: &Model,
    data: &Dataset,
    cfg: &TrainConfig,
    out_dir: &Path,
    init: Option<&Checkpoint>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if cfg.val_fraction <= 0.0 {
        return Err(Error::Config("early stopping needs val_fraction > 0".into()));
    }
    let (train, val) = data.split(1.0 - cfg.val_fraction, cfg.seed);
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("train or validation split (corpus too small)"));
    }
    let mut trainer = Trainer::new(model, cfg)?;
    match (cfg.stage, init) {
        (Stage::Two, Some(ck)) if cfg.needs_teacher() => trainer.load_teacher(ck)?,
        (_, Some(ck)) => ck.apply(model)?,
        (_, None) => {}
    }
    trainer.fit(&train, &val, out_dir, &meta_for(model, data, cfg.stage))
}
