use candle_core::{DType, Device};
use medvl::corpus::{batch, generate_synthetic, Batch, Dataset, SyntheticSpec};
use medvl::model::groups;
use medvl::trainer::{
    capture, composite_loss, forward_losses, parse_metrics_log, CheckpointMeta, LossWeights, Needs,
    Stage, TrainConfig, Trainer, METRICS_FILE,
};
use medvl::{Error, Model, ModelConfig};

fn small_config(vocab: usize) -> ModelConfig {
    let mut cfg = ModelConfig::toy(vocab);
    cfg.image.widths = [8, 8, 16, 16];
    cfg.image.fpn_width = 8;
    cfg.text.hidden = 16;
    cfg.text.ffn = 32;
    cfg.text.heads = 2;
    cfg.embed_dim = 8;
    cfg
}

fn data(n: usize, seed: u64) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        n_samples: n,
        seed,
        ..Default::default()
    })
    .unwrap()
    .into_dataset()
}

fn model(d: &Dataset, dtype: DType) -> Model {
    Model::new(&small_config(d.vocab.len()), dtype, &Device::Cpu, 2).unwrap()
}

fn full_batch(m: &Model, d: &Dataset) -> Batch {
    let refs: Vec<_> = d.samples.iter().collect();
    let c = m.config();
    batch(&refs, c.max_len_impression, c.max_len_findings, m.dtype(), m.device()).unwrap()
}

fn meta(m: &Model, d: &Dataset, stage: u8) -> CheckpointMeta {
    CheckpointMeta {
        model: m.config().clone(),
        stage,
        epoch: 0,
        vocab: d.vocab.tokens().to_vec(),
        class_names: d.class_names.clone(),
        train: None,
    }
}

fn small_train(stage: Stage, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        ..TrainConfig::toy(stage)
    }
}

fn teacher_trainer<'m>(m: &'m Model, d: &Dataset, cfg: &TrainConfig) -> Trainer<'m> {
    let ck = capture(m, &meta(m, d, 1)).unwrap();
    let mut tr = Trainer::new(m, cfg).unwrap();
    tr.load_teacher(&ck).unwrap();
    tr
}

#[test]
fn stage_one_leaves_the_image_encoder_untouched() {
    let d = data(8, 1);
    let m = model(&d, DType::F32);
    let b = full_batch(&m, &d);
    let image = m.store().hash(groups::image).unwrap();
    let text = m.store().hash(groups::text_stack).unwrap();
    let mut tr = Trainer::new(&m, &small_train(Stage::One, 1)).unwrap();
    for _ in 0..3 {
        tr.stage1_step(&b, 1e-3).unwrap();
    }
    assert_eq!(image, m.store().hash(groups::image).unwrap());
    assert_ne!(text, m.store().hash(groups::text_stack).unwrap());
}

#[test]
fn stage_one_gradient_reaches_exactly_its_groups() {
    let d = data(8, 1);
    let m = model(&d, DType::F64);
    let b = full_batch(&m, &d);
    let cfg = small_train(Stage::One, 1);
    let terms = forward_losses(&m, &b, Needs::for_training(Stage::One, &cfg.ablation)).unwrap();
    let (total, _) = composite_loss(&terms, &cfg.weights).unwrap();
    let grads = total.backward().unwrap();
    for (name, var) in m.store().vars() {
        let nonzero = grads
            .get(var.as_tensor())
            .map(|g| g.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap() > 0.0)
            .unwrap_or(false);
        assert_eq!(nonzero, cfg.trainable(&name), "{name}");
    }
}

#[test]
fn stage_two_freezes_summarization_cross_attention_only() {
    let d = data(8, 1);
    let m = model(&d, DType::F32);
    let b = full_batch(&m, &d);
    let mut tr = teacher_trainer(&m, &d, &small_train(Stage::Two, 1));
    let sum = m.store().hash(groups::summarize_private).unwrap();
    let shared = m.store().hash(groups::shared).unwrap();
    let image = m.store().hash(groups::image).unwrap();
    for _ in 0..10 {
        tr.stage2_step(&b, 1e-3).unwrap();
    }
    assert_eq!(sum, m.store().hash(groups::summarize_private).unwrap());
    assert_ne!(shared, m.store().hash(groups::shared).unwrap());
    assert_ne!(image, m.store().hash(groups::image).unwrap());
}

#[test]
fn freeze_shared_flag_also_pins_shared_layers() {
    let d = data(8, 1);
    let m = model(&d, DType::F32);
    let b = full_batch(&m, &d);
    let cfg = TrainConfig {
        freeze_shared: true,
        ..small_train(Stage::Two, 1)
    };
    let mut tr = teacher_trainer(&m, &d, &cfg);
    let shared = m.store().hash(groups::shared).unwrap();
    for _ in 0..3 {
        tr.stage2_step(&b, 1e-3).unwrap();
    }
    assert_eq!(shared, m.store().hash(groups::shared).unwrap());
}

#[test]
fn zero_distillation_weight_matches_dropping_the_term() {
    let d = data(6, 3);
    let m = model(&d, DType::F64);
    let b = full_batch(&m, &d);
    let terms = forward_losses(&m, &b, Needs::everything()).unwrap();
    let w0 = LossWeights {
        dis: 0.0,
        ..Default::default()
    };
    let (with_zero, _) = composite_loss(&terms, &w0).unwrap();
    let mut dropped = terms.clone();
    dropped.dis = None;
    let (without, _) = composite_loss(&dropped, &LossWeights::default()).unwrap();
    let g1 = with_zero.backward().unwrap();
    let g2 = without.backward().unwrap();
    for (name, var) in m.store().vars() {
        if let (Some(a), Some(b)) = (g1.get(var.as_tensor()), g2.get(var.as_tensor())) {
            let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(diff <= 1e-7, "{name}: {diff}");
        }
    }
}

#[test]
fn loss_and_gradient_are_linear_in_the_weights() {
    let d = data(6, 3);
    let m = model(&d, DType::F64);
    let b = full_batch(&m, &d);
    let terms = forward_losses(&m, &b, Needs::everything()).unwrap();
    let w = LossWeights {
        cg: 0.3,
        cl: 1.7,
        sum: 0.5,
        cap: 2.0,
        dis: 0.9,
    };
    let (t1, r1) = composite_loss(&terms, &w).unwrap();
    let (t2, r2) = composite_loss(&terms, &w.scaled(2.0)).unwrap();
    assert!((r2.total - 2.0 * r1.total).abs() <= 1e-9 * r1.total.abs().max(1.0));
    let g1 = t1.backward().unwrap();
    let g2 = t2.backward().unwrap();
    let var = m.store().get("dec.out.vocab.weight").unwrap();
    let a = (g1.get(var.as_tensor()).unwrap() * 2.0).unwrap();
    let diff = (a - g2.get(var.as_tensor()).unwrap())
        .unwrap()
        .abs()
        .unwrap()
        .max_all()
        .unwrap()
        .to_scalar::<f64>()
        .unwrap();
    assert!(diff <= 1e-12, "{diff}");
}

#[test]
fn loss_decreases_over_two_hundred_steps() {
    let d = data(16, 5);
    let m = model(&d, DType::F32);
    let b = full_batch(&m, &d);
    let mut tr = teacher_trainer(&m, &d, &small_train(Stage::Two, 1));
    let first = tr.stage2_step(&b, 1e-3).unwrap().total;
    let mut last = first;
    for _ in 0..199 {
        last = tr.stage2_step(&b, 1e-3).unwrap().total;
    }
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn stage_two_without_teacher_is_refused() {
    let d = data(8, 1);
    let m = model(&d, DType::F32);
    let b = full_batch(&m, &d);
    let mut tr = Trainer::new(&m, &small_train(Stage::Two, 1)).unwrap();
    let err = tr.stage2_step(&b, 1e-3).unwrap_err();
    assert!(err.to_string().contains("teacher"), "{err}");
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = d.split(0.5, 0);
    assert!(tr.fit(&train, &val, dir.path(), &meta(&m, &d, 0)).is_err());

    // Without the summarization objectives no teacher is needed.
    let mut cfg = small_train(Stage::Two, 1);
    cfg.ablation.disable("sum").unwrap();
    cfg.ablation.disable("kd").unwrap();
    let mut tr = Trainer::new(&m, &cfg).unwrap();
    tr.stage2_step(&b, 1e-3).unwrap();
}

#[test]
fn metrics_log_is_deterministic_and_complete() {
    let d = data(24, 9);
    let (train, val) = d.split(0.75, 0);
    let run = |dir: &std::path::Path| {
        let m = model(&d, DType::F32);
        let mut tr = teacher_trainer(&m, &d, &small_train(Stage::Two, 2));
        let out = tr.fit(&train, &val, dir, &meta(&m, &d, 0)).unwrap();
        assert!(out.checkpoint.exists());
        std::fs::read_to_string(dir.join(METRICS_FILE)).unwrap()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let log_a = run(a.path());
    assert_eq!(log_a, run(b.path()));
    let rows = parse_metrics_log(&log_a).unwrap();
    assert_eq!(rows.len(), 4);
    for (_, split, fields) in &rows {
        let keys: Vec<&str> = fields.iter().map(|(k, _)| k.as_str()).collect();
        for k in ["l_cg", "l_cl", "l_sum", "l_cap", "l_dis", "total", "lr"] {
            assert!(keys.contains(&k), "{split} lacks {k}: {keys:?}");
        }
    }
}

#[test]
fn divergence_restores_last_good_weights() {
    let d = data(16, 2);
    let (train, val) = d.split(0.75, 0);
    let m = model(&d, DType::F32);
    let before = m.store().hash(|_| true).unwrap();
    let cfg = TrainConfig {
        divergence_threshold: 1e-6,
        ..small_train(Stage::One, 2)
    };
    let mut tr = Trainer::new(&m, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = tr.fit(&train, &val, dir.path(), &meta(&m, &d, 0)).unwrap_err();
    assert!(matches!(err, Error::Diverged { epoch: 1, .. }), "{err}");
    assert_eq!(before, m.store().hash(|_| true).unwrap());
    assert!(dir.path().join(medvl::trainer::LAST_GOOD_CHECKPOINT).exists());
}

#[test]
fn non_finite_batch_is_named() {
    let d = data(4, 1);
    let m = model(&d, DType::F32);
    let mut b = full_batch(&m, &d);
    b.images = (b.images.clone() * f64::NAN).unwrap();
    let mut tr = Trainer::new(&m, &small_train(Stage::One, 1)).unwrap();
    tr.stage1_step(&b, 1e-3).unwrap();
    let mut cfg = small_train(Stage::Two, 1);
    cfg.ablation.disable("sum").unwrap();
    cfg.ablation.disable("kd").unwrap();
    let mut tr = Trainer::new(&m, &cfg).unwrap();
    let err = tr.stage2_step(&b, 1e-3).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
}

#[test]
fn joint_generative_run_trains_both_branches_without_teacher() {
    let d = data(8, 4);
    let m = model(&d, DType::F32);
    let b = full_batch(&m, &d);
    let mut cfg = small_train(Stage::Two, 1);
    cfg.train_summarizer = true;
    assert!(Trainer::new(&m, &cfg).is_err(), "distillation must be off");
    cfg.ablation.disable("kd").unwrap();
    cfg.ablation.disable("contrast").unwrap();
    let mut tr = Trainer::new(&m, &cfg).unwrap();
    let sum = m.store().hash(groups::summarize_private).unwrap();
    let cap = m.store().hash(groups::caption_private).unwrap();
    let r = tr.stage2_step(&b, 1e-3).unwrap();
    assert!(r.components()[2].is_some() && r.components()[3].is_some());
    assert_ne!(sum, m.store().hash(groups::summarize_private).unwrap());
    assert_ne!(cap, m.store().hash(groups::caption_private).unwrap());
}
