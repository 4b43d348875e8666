use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use candle_core::{DType, Device};
use medvl::corpus::{
    generate_synthetic, load_manifest, stack_images, Dataset, SyntheticGrammar, SyntheticSpec, VqaKind, Vocabulary,
    MANIFEST_FILE, VOCAB_FILE,
};
use medvl::eval::{
    attention_maps, export_embeddings, linear_probe, train_vqa, vqa_accuracy, zero_shot_classify, PromptSet,
    VqaSet, PROBE_FRACTIONS,
};
use medvl::pipeline::{load_with_vocab, pretrain};
use medvl::trainer::{load_checkpoint, Checkpoint, Stage};
use medvl::{gradcheck, Model};
use serde::Serialize;

use crate::config::RunConfig;

const SPEC_FILE: &str = "synthetic_spec.json";

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", p.display()))?;
    Ok(p)
}

pub fn synth_data(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let corpus = generate_synthetic(&cfg.synthetic)?;
    corpus.export(out)?;
    println!("wrote {} samples to {}", corpus.triples.len(), out.display());
    Ok(())
}

fn load_stage_checkpoint(path: &Path, expect: Option<u8>) -> anyhow::Result<Checkpoint> {
    let ck = load_checkpoint(path, &Device::Cpu).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if let Some(s) = expect {
        if ck.meta.stage != s {
            bail!("checkpoint {} is from stage {}, expected {s}", path.display(), ck.meta.stage);
        }
    }
    Ok(ck)
}

fn corpus_vocabulary(dir: &Path) -> anyhow::Result<Vocabulary> {
    let p = dir.join(VOCAB_FILE);
    if p.exists() {
        return Vocabulary::load(&p).with_context(|| format!("reading {}", p.display()));
    }
    let records = load_manifest(&dir.join(MANIFEST_FILE))?;
    Ok(Vocabulary::build(
        records.iter().flat_map(|r| [r.findings.as_str(), r.impression.as_str()]),
    ))
}

/// Config for a training command: the model section comes from `init`
/// when there is one, otherwise from the defaults with the corpus
/// vocabulary size filled in.
pub fn pretrain_cmd(
    cfg: &mut RunConfig,
    stage: Stage,
    data: &Path,
    out: &Path,
    init: Option<&Path>,
) -> anyhow::Result<()> {
    cfg.validate()?;
    if stage == Stage::Two && cfg.train.needs_teacher() && init.is_none() {
        bail!(
            "missing teacher: stage 2 with the summarization branch needs --checkpoint <stage-1 checkpoint> \
             (or --ablate sum --ablate kd)"
        );
    }
    let ck = match init {
        Some(p) => Some(load_stage_checkpoint(p, (stage == Stage::Two && cfg.train.needs_teacher()).then_some(1))?),
        None => None,
    };
    let vocab = match &ck {
        Some(ck) => ck.vocabulary()?,
        None => corpus_vocabulary(data)?,
    };
    match &ck {
        Some(ck) => cfg.model = ck.meta.model.clone(),
        None => cfg.model.text.vocab_size = vocab.len(),
    }
    cfg.model.validate()?;
    cfg.validate()?;
    cfg.echo(Some(out))?;

    let model = Model::new(&cfg.model, DType::F32, &Device::Cpu, cfg.seed)?;
    let classes = ck.as_ref().map(|c| c.meta.class_names.clone()).unwrap_or_default();
    let dataset = load_with_vocab(data, vocab, &classes, &model)?;
    let outcome = pretrain(&model, &dataset, &cfg.train, out, ck.as_ref())?;
    for m in &outcome.metrics {
        println!("{}", m.log_line());
    }
    println!(
        "best epoch {} (val total {:.6}); checkpoint {}",
        outcome.best_epoch,
        outcome.best_val_total,
        outcome.checkpoint.display()
    );
    Ok(())
}

/// Model and corpus for the evaluation commands.
pub fn load_for_eval(cfg: &mut RunConfig, data: &Path, checkpoint: &Path, stage: Option<u8>, out: Option<&Path>) -> anyhow::Result<(Model, Dataset)> {
    let ck = load_stage_checkpoint(checkpoint, stage)?;
    cfg.model = ck.meta.model.clone();
    cfg.validate()?;
    cfg.echo(out)?;
    let model = ck.build_model(&Device::Cpu)?;
    let dataset = load_with_vocab(data, ck.vocabulary()?, &ck.meta.class_names, &model)?;
    if dataset.is_empty() {
        bail!("corpus {} is empty", data.display());
    }
    Ok((model, dataset))
}

#[derive(Serialize)]
struct ZeroShotOut<'a> {
    accuracy: Option<f64>,
    n: usize,
    class_names: &'a [String],
    predictions: &'a [usize],
}

pub fn eval_zeroshot(cfg: &RunConfig, model: &Model, data: &Dataset, prompts: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let prompts = match prompts {
        Some(p) => PromptSet::load(p)?,
        None => PromptSet::from_templates(&data.class_names),
    };
    let r = zero_shot_classify(model, data, &prompts, cfg.eval_batch_size)?;
    let names: Vec<String> = prompts.classes.iter().map(|c| c.name.clone()).collect();
    write_json(
        out,
        "zeroshot.json",
        &ZeroShotOut {
            accuracy: r.accuracy,
            n: data.len(),
            class_names: &names,
            predictions: &r.predictions,
        },
    )?;
    match r.accuracy {
        Some(a) => println!("zero-shot accuracy {a:.4} on {} images", data.len()),
        None => println!("zero-shot predictions for {} unlabelled images", data.len()),
    }
    Ok(())
}

pub fn probe(cfg: &RunConfig, model: &Model, data: &Dataset, fractions: &[f64], out: &Path) -> anyhow::Result<()> {
    let fractions = if fractions.is_empty() { PROBE_FRACTIONS.to_vec() } else { fractions.to_vec() };
    for &f in &fractions {
        if !(f > 0.0 && f <= 1.0) {
            bail!("--fraction must be in (0, 1], got {f}");
        }
    }
    let (train, test) = data.split(cfg.eval_train_fraction, cfg.seed);
    let mut reports = Vec::new();
    for f in fractions {
        let r = linear_probe(model, &train, &test, f, &cfg.probe)?;
        println!("fraction {:.2}: n_train {} auc {:.4} accuracy {:.4}", r.fraction, r.n_train, r.auc, r.accuracy);
        reports.push(r);
    }
    write_json(out, "probe.json", &reports)?;
    Ok(())
}

fn grammar_of(data_dir: &Path) -> anyhow::Result<SyntheticGrammar> {
    let p = data_dir.join(SPEC_FILE);
    let text = std::fs::read_to_string(&p)
        .with_context(|| format!("{} is needed to derive questions; is this a synthetic corpus?", p.display()))?;
    let spec: SyntheticSpec = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
    Ok(SyntheticGrammar::from_spec(&spec)?)
}

#[derive(Serialize)]
struct VqaOut {
    kind: VqaKind,
    n_train: usize,
    n_test: usize,
    accuracy: f64,
    shuffled_image_accuracy: f64,
    chance: f64,
}

pub fn vqa(cfg: &RunConfig, model: &Model, data: &Dataset, data_dir: &Path, kind: VqaKind, out: &Path) -> anyhow::Result<()> {
    let grammar = grammar_of(data_dir)?;
    let (train, test) = data.split(cfg.eval_train_fraction, cfg.seed);
    let train_set = VqaSet::from_dataset(&train, &grammar, kind)?;
    let test_set = VqaSet::from_dataset(&test, &grammar, kind)?;
    let head = train_vqa(model, &train, &train_set, &cfg.vqa)?;
    let accuracy = vqa_accuracy(model, &head, &test, &test_set, None, cfg.eval_batch_size)?;
    let shuffled = vqa_accuracy(model, &head, &test, &test_set, Some(cfg.seed), cfg.eval_batch_size)?;
    let r = VqaOut {
        kind,
        n_train: train_set.examples.len(),
        n_test: test_set.examples.len(),
        accuracy,
        shuffled_image_accuracy: shuffled,
        chance: 1.0 / train_set.answers.len() as f64,
    };
    println!("vqa {kind:?}: accuracy {accuracy:.4}, with shuffled images {shuffled:.4}");
    write_json(out, "vqa.json", &r)?;
    Ok(())
}

#[derive(Serialize)]
struct AttnSummary {
    prompt: String,
    n: usize,
    grid: usize,
    /// Mean attention mass in the quadrant named by each sample's findings.
    mean_lesion_quadrant_mass: Option<f64>,
}

pub fn export_attn(cfg: &RunConfig, model: &Model, data: &Dataset, data_dir: &Path, prompt: &str, n: Option<usize>, out: &Path) -> anyhow::Result<()> {
    let n = n.unwrap_or(data.len()).min(data.len());
    let grammar = grammar_of(data_dir).ok();
    let dir = out.join("attention");
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut lesion_mass = Vec::new();
    let mut grid = 0;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(cfg.eval_batch_size) {
        let refs: Vec<_> = chunk.iter().map(|&i| &data.samples[i]).collect();
        let images = stack_images(&refs, model.dtype(), model.device())?;
        for (&i, map) in chunk.iter().zip(attention_maps(model, &images, &data.vocab, prompt)?) {
            grid = map.grid;
            let p = dir.join(format!("{i:06}.txt"));
            std::fs::write(&p, map.to_text()).with_context(|| format!("writing {}", p.display()))?;
            if let Some(a) = grammar.as_ref().and_then(|g| g.parse_findings(&data.records[i].findings)) {
                lesion_mass.push(map.quadrant_mass(a.quadrant));
            }
        }
    }
    let mean = (!lesion_mass.is_empty()).then(|| lesion_mass.iter().sum::<f64>() / lesion_mass.len() as f64);
    if let Some(m) = mean {
        println!("mean attention mass in the lesion quadrant {m:.4} (uniform 0.25)");
    }
    write_json(
        out,
        "attention_summary.json",
        &AttnSummary {
            prompt: prompt.to_string(),
            n,
            grid,
            mean_lesion_quadrant_mass: mean,
        },
    )?;
    println!("wrote {n} heatmaps to {}", dir.display());
    Ok(())
}

pub fn export_emb(cfg: &RunConfig, model: &Model, data: &Dataset, out: &Path) -> anyhow::Result<()> {
    let p = out.join("embeddings.csv");
    export_embeddings(model, data, &p, cfg.eval_batch_size)?;
    println!("wrote {} embeddings to {}", data.len(), p.display());
    Ok(())
}

pub fn gradcheck_cmd(seed: u64) -> anyhow::Result<()> {
    let reports = gradcheck::run_all(seed)?;
    let mut failed = 0;
    for r in &reports {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {:<20} rel_error {:.3e} max_abs {:.3e} ({} entries)",
            r.name, r.rel_error, r.max_abs_error, r.n_checked
        );
        failed += usize::from(!r.passed());
    }
    let teacher = gradcheck::teacher_gradient(seed)?;
    let verdict = if teacher == 0.0 { "PASS" } else { "FAIL" };
    println!("{verdict} {:<20} max |grad| {teacher:e}", "teacher_detached");
    failed += usize::from(teacher != 0.0);
    if failed > 0 {
        bail!("{failed} gradient check(s) failed (tolerance {:e})", gradcheck::TOLERANCE);
    }
    Ok(())
}
