use candle_core::{DType, Device};
use medvl::corpus::{batch, generate_synthetic, SyntheticSpec};
use medvl::trainer::{load_checkpoint, save_checkpoint, CheckpointMeta, Stage, TrainConfig, Trainer};
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

fn setup() -> (Model, CheckpointMeta, medvl::corpus::Batch) {
    let corpus = generate_synthetic(&SyntheticSpec {
        n_samples: 8,
        ..Default::default()
    })
    .unwrap();
    let cfg = small_config(corpus.vocab.len());
    let model = Model::new(&cfg, DType::F32, &Device::Cpu, 4).unwrap();
    let meta = CheckpointMeta {
        model: cfg.clone(),
        stage: 1,
        epoch: 3,
        vocab: corpus.vocab.tokens().to_vec(),
        class_names: corpus.grammar.class_names(),
        train: None,
    };
    let refs: Vec<_> = corpus.triples.iter().collect();
    let b = batch(&refs, cfg.max_len_impression, cfg.max_len_findings, DType::F32, &Device::Cpu).unwrap();
    (model, meta, b)
}

fn bits(model: &Model) -> Vec<(String, Vec<u32>)> {
    model
        .store()
        .vars()
        .into_iter()
        .map(|(n, v)| {
            let b = v
                .as_tensor()
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap()
                .into_iter()
                .map(f32::to_bits)
                .collect();
            (n, b)
        })
        .collect()
}

#[test]
fn round_trip_is_bitwise_and_restores_optimizer() {
    let (model, meta, b) = setup();
    let mut tr = Trainer::new(&model, &TrainConfig::toy(Stage::One)).unwrap();
    tr.step(&b, 1e-3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.safetensors");
    save_checkpoint(&path, &model, &meta, Some(tr.optimizer())).unwrap();

    let ck = load_checkpoint(&path, &Device::Cpu).unwrap();
    assert_eq!(ck.meta, meta);
    let fresh = ck.build_model(&Device::Cpu).unwrap();
    assert_eq!(bits(&model), bits(&fresh));
    let opt = ck.optimizer.as_ref().expect("optimizer state saved");
    assert_eq!(opt.steps(), 1);
    assert_eq!(opt.state_tensors().len(), tr.optimizer().state_tensors().len());
    assert_eq!(ck.vocabulary().unwrap().tokens(), meta.vocab.as_slice());
}

#[test]
fn corrupted_file_is_rejected_without_touching_the_model() {
    let (model, meta, _) = setup();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.safetensors");
    save_checkpoint(&path, &model, &meta, None).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0x5a;
    std::fs::write(&path, &bytes).unwrap();

    let target = Model::new(&meta.model, DType::F32, &Device::Cpu, 99).unwrap();
    let before = bits(&target);
    let err = load_checkpoint(&path, &Device::Cpu).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    assert!(err.to_string().contains("corrupt"), "{err}");
    assert_eq!(before, bits(&target));

    std::fs::write(&path, &bytes[..n / 2]).unwrap();
    assert!(matches!(load_checkpoint(&path, &Device::Cpu), Err(Error::Checkpoint(_))));
}

#[test]
fn mismatched_architecture_lists_offenders_and_writes_nothing() {
    let (model, meta, _) = setup();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.safetensors");
    save_checkpoint(&path, &model, &meta, None).unwrap();
    let ck = load_checkpoint(&path, &Device::Cpu).unwrap();

    let mut other_cfg = meta.model.clone();
    other_cfg.embed_dim = 16;
    let other = Model::new(&other_cfg, DType::F32, &Device::Cpu, 1).unwrap();
    let before = bits(&other);
    let err = ck.apply(&other).unwrap_err().to_string();
    assert!(err.contains("image.global_proj.weight"), "{err}");
    assert!(err.contains("[8, 16]") && err.contains("[16, 16]"), "{err}");
    assert_eq!(before, bits(&other));
}

#[test]
fn teacher_must_come_from_stage_one() {
    let (model, mut meta, _) = setup();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.safetensors");
    meta.stage = 2;
    save_checkpoint(&path, &model, &meta, None).unwrap();
    let ck = load_checkpoint(&path, &Device::Cpu).unwrap();
    let mut tr = Trainer::new(&model, &TrainConfig::toy(Stage::Two)).unwrap();
    assert!(tr.load_teacher(&ck).is_err());
    assert!(!tr.teacher_frozen());

    meta.stage = 1;
    save_checkpoint(&path, &model, &meta, None).unwrap();
    let ck = load_checkpoint(&path, &Device::Cpu).unwrap();
    tr.load_teacher(&ck).unwrap();
    assert!(tr.teacher_frozen());
}
