//! Acceptance suite. Prints one PASS/FAIL line per criterion, then
//! report-only lines, and exits non-zero if any criterion fails.

use std::collections::HashSet;
use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use medvl::alignment::{global_contrastive, token_contrastive, token_similarity};
use medvl::corpus::{batch, generate_synthetic, stack_images, Batch, Dataset, SyntheticCorpus, SyntheticSpec, VqaKind};
use medvl::encoders::{ImageEncoder, ImageEncoderConfig};
use medvl::eval::{
    attention_maps, linear_probe, macro_auc, predict, roc_auc, train_vqa, vqa_accuracy, zero_shot_classify,
    ProbeConfig, PromptSet, VqaConfig, VqaSet,
};
use medvl::gendec::{distill, lm_loss, Branch};
use medvl::model::groups;
use medvl::nn::ParamStore;
use medvl::pipeline::{meta_for, pretrain};
use medvl::trainer::{
    composite_loss, forward_losses, load_checkpoint, parse_metrics_log, save_checkpoint, Ablation, Checkpoint,
    LossWeights, Needs, Stage, TrainConfig, Trainer, METRICS_FILE,
};
use medvl::{gradcheck, Model, ModelConfig};

type Res<T> = Result<T, Box<dyn std::error::Error>>;

const CPU: Device = Device::Cpu;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn scalar(t: &Tensor) -> Res<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> Res<f64> {
    scalar(&(a - b)?.abs()?.max_all()?)
}

fn corpus(n: usize, seed: u64) -> Res<SyntheticCorpus> {
    Ok(generate_synthetic(&SyntheticSpec {
        n_samples: n,
        seed,
        ..Default::default()
    })?)
}

fn full_batch(m: &Model, d: &Dataset, n: usize) -> Res<Batch> {
    let refs: Vec<_> = d.samples.iter().take(n).collect();
    let c = m.config();
    Ok(batch(&refs, c.max_len_impression, c.max_len_findings, m.dtype(), m.device())?)
}

fn criterion_1() -> Res<Verdict> {
    let t0 = Instant::now();
    let reports = gradcheck::run_all(11)?;
    let teacher = gradcheck::teacher_gradient(11)?;
    let elapsed = t0.elapsed();
    let worst = reports.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    let names: Vec<&str> = reports.iter().map(|r| r.name).collect();
    let pass = reports.len() == 5
        && reports.iter().all(|r| r.passed())
        && teacher == 0.0
        && elapsed < Duration::from_secs(60);
    Ok(verdict(
        pass,
        format!("{names:?} worst rel error {worst:.2e}, teacher grad {teacher}, {elapsed:.1?}"),
    ))
}

fn t2(rows: &[&[f64]]) -> Res<Tensor> {
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Ok(Tensor::from_vec(flat, (rows.len(), rows[0].len()), &CPU)?)
}

fn criterion_2() -> Res<Verdict> {
    let mut notes = Vec::new();
    let mut ok = true;
    let tau = Tensor::new(0.07f64, &CPU)?;
    let one = t2(&[&[0.6, 0.8]])?;
    let g1 = scalar(&global_contrastive(&one, &t2(&[&[1.0, 0.0]])?, &tau)?)?;
    let tok = Tensor::from_vec(vec![0.6, 0.8, 1.0, 0.0], (1, 2, 2), &CPU)?;
    let mask = Tensor::ones((1, 2), DType::F64, &CPU)?;
    let l1 = scalar(&token_contrastive(&tok, &tok, &mask, &tau)?)?;
    ok &= g1 == 0.0 && l1 == 0.0;
    notes.push(format!("N=1 losses {g1}, {l1}"));

    let v = 6;
    let logits = Tensor::zeros((2, 3, v), DType::F64, &CPU)?;
    let target = Tensor::new(&[[1u32, 2, 3], [4, 5, 0]], &CPU)?;
    let tmask = Tensor::new(&[[1.0f64, 1.0, 1.0], [1.0, 1.0, 0.0]], &CPU)?;
    let lm = scalar(&lm_loss(&logits, &target, &tmask)?)?;
    ok &= (lm - (v as f64).ln()).abs() <= 1e-6;
    notes.push(format!("uniform LM {lm:.9}"));

    let m1 = Tensor::ones((1, 1), DType::F64, &CPU)?;
    let p = Tensor::new(&[[[0.1f64, 0.2, 0.3, 0.4]]], &CPU)?;
    let kl_pp = scalar(&distill(&p, &p, &m1)?)?;
    ok &= kl_pp == 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut min_kl = f64::INFINITY;
    for _ in 0..1000 {
        let k = rng.random_range(2..7);
        let mut draw = || -> Res<Tensor> {
            let w: Vec<f64> = (0..k).map(|_| rng.random_range(1e-6..1.0)).collect();
            let s: f64 = w.iter().sum();
            Ok(Tensor::from_vec(w.iter().map(|x| x / s).collect::<Vec<_>>(), (1, 1, k), &CPU)?)
        };
        let (a, b) = (draw()?, draw()?);
        min_kl = min_kl.min(scalar(&distill(&a, &b, &m1)?)?);
    }
    ok &= min_kl >= 0.0;
    notes.push(format!("KL(P,P)={kl_pp}, min KL over 1000 pairs {min_kl:.2e}"));

    let e = t2(&[&[1.0, 0.0], &[0.0, 1.0]])?;
    let g2 = scalar(&global_contrastive(&e, &e, &Tensor::new(1.0f64, &CPU)?)?)?;
    let hand = 2.0 * (1.0 + (-1.0f64).exp()).ln();
    ok &= (g2 - hand).abs() <= 1e-6 && (g2 - 0.6266).abs() <= 1e-4;
    notes.push(format!("N=2 global {g2:.6}"));

    let x = t2(&[&[1.0, 0.0], &[0.0, 1.0]])?;
    let z = t2(&[&[1.0, 0.0]])?;
    let (xz, zx) = token_similarity(&x, &z, &Tensor::new(&[1.0f64], &CPU)?)?;
    let (xz, zx) = (scalar(&xz)?, scalar(&zx)?);
    ok &= (xz - 0.5).abs() <= 1e-9 && (zx - 1.0).abs() <= 1e-9;
    notes.push(format!("asymmetry {xz} vs {zx}"));
    Ok(verdict(ok, notes.join("; ")))
}

fn ids(ts: &[&Tensor]) -> HashSet<TensorId> {
    ts.iter().map(|t| t.id()).collect()
}

fn criterion_3() -> Res<Verdict> {
    let model = Model::new(&ModelConfig::toy(40), DType::F32, &CPU, 0)?;
    let mut shared_ok = true;
    let mut disjoint = true;
    for layer in model.decoder().layers() {
        let (s_shared, s_cross) = layer.branch_tensors(Branch::Summarize);
        let (c_shared, c_cross) = layer.branch_tensors(Branch::Caption);
        let same = s_shared.len() == c_shared.len() && s_shared.iter().zip(&c_shared).all(|(a, b)| a.id() == b.id());
        shared_ok &= same && !s_shared.is_empty();
        disjoint &= ids(&s_cross).is_disjoint(&ids(&c_cross)) && !s_cross.is_empty();
    }

    let paper = ImageEncoderConfig::paper();
    let geometry = ImageEncoderConfig {
        widths: [8, 8, 8, 8],
        blocks: [1, 1, 1, 1],
        fpn_width: 8,
        ..paper.clone()
    };
    let store = ParamStore::new(DType::F32, CPU, 0);
    let enc = ImageEncoder::new(&store.root().pp("image"), &geometry, 8)?;
    let (feats, _) = enc.encode(&Tensor::zeros((1, 1, 256, 256), DType::F32, &CPU)?)?;
    let grids = feats.grids();
    let tokens = enc.aggregate(&feats)?.dims().to_vec();
    let grids_ok = grids == vec![(64, 64), (32, 32), (16, 16), (8, 8)]
        && paper.stage_grids() == [64, 32, 16, 8]
        && tokens == vec![1, 256, 8];

    let a = Tensor::new(&[[1u32, 7, 9, 12, 30, 5, 22, 2]], &CPU)?;
    let b = Tensor::new(&[[1u32, 7, 9, 12, 11, 38, 6, 17]], &CPU)?;
    let ha = model.text_encoder().run_stack(&a)?;
    let hb = model.text_encoder().run_stack(&b)?;
    let prefix = max_abs_diff(&ha.narrow(1, 0, 4)?, &hb.narrow(1, 0, 4)?)?;
    let pass = shared_ok && disjoint && grids_ok && prefix <= 1e-5;
    Ok(verdict(
        pass,
        format!(
            "shared storage identical {shared_ok}, cross-attention disjoint {disjoint}, grids {grids:?}, \
             token grid {}x{}, prefix drift {prefix:.1e}",
            paper.token_grid(),
            paper.token_grid()
        ),
    ))
}

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

fn criterion_4() -> Res<Verdict> {
    let d = corpus(16, 3)?.into_dataset();
    let m = Model::new(&small_config(d.vocab.len()), DType::F32, &CPU, 1)?;
    let b = full_batch(&m, &d, 16)?;
    let image = m.store().hash(groups::image)?;
    let mut t1 = Trainer::new(&m, &TrainConfig::toy(Stage::One))?;
    for _ in 0..3 {
        t1.stage1_step(&b, 1e-3)?;
    }
    let image_kept = image == m.store().hash(groups::image)?;

    let ck = medvl::trainer::capture(&m, &meta_for(&m, &d, Stage::One))?;
    let mut t2 = Trainer::new(&m, &TrainConfig::toy(Stage::Two))?;
    t2.load_teacher(&ck)?;
    let sum = m.store().hash(groups::summarize_private)?;
    let shared = m.store().hash(groups::shared)?;
    for _ in 0..3 {
        t2.stage2_step(&b, 1e-3)?;
    }
    let sum_kept = sum == m.store().hash(groups::summarize_private)?;
    let shared_moved = shared != m.store().hash(groups::shared)?;

    // Distillation alone: nothing reaches the summarization branch.
    let terms = forward_losses(
        &m,
        &b,
        Needs {
            contrast: false,
            sum: false,
            cap: false,
            dis: true,
        },
    )?;
    let (total, _) = composite_loss(&terms, &LossWeights::default())?;
    let grads = total.backward()?;
    let mut teacher_max = 0.0f64;
    for (_, v) in m.store().vars_matching(groups::summarize_private) {
        if let Some(g) = grads.get(v.as_tensor()) {
            teacher_max = teacher_max.max(scalar(&g.abs()?.max_all()?)?);
        }
    }
    let oracle = gradcheck::teacher_gradient(4)?;
    let pass = image_kept && sum_kept && shared_moved && teacher_max == 0.0 && oracle == 0.0;
    Ok(verdict(
        pass,
        format!(
            "stage 1 image hash kept {image_kept}; stage 2 summarization cross-attention kept {sum_kept}, \
             shared moved {shared_moved}; teacher gradient {teacher_max} (model), {oracle} (logits)"
        ),
    ))
}

fn criterion_5(work: &Path) -> Res<Verdict> {
    let t0 = Instant::now();
    let d = corpus(1000, 21)?.into_dataset();
    let m = Model::new(&ModelConfig::toy(d.vocab.len()), DType::F32, &CPU, 5)?;
    let mut cfg = TrainConfig {
        epochs: 20,
        patience: 20,
        train_summarizer: true,
        warmup_epochs: 0,
        ..TrainConfig::toy(Stage::Two)
    };
    cfg.ablation = Ablation {
        contrast: false,
        cap: true,
        sum: true,
        kd: false,
    };
    let out = pretrain(&m, &d, &cfg, &work.join("fig2"), None)?;
    let elapsed = t0.elapsed();
    let mut pairs = Vec::new();
    for row in out.metrics.iter().filter(|r| r.split == "val") {
        let c = row.report.components();
        pairs.push((row.epoch, c[2].unwrap_or(f64::NAN), c[3].unwrap_or(f64::NAN)));
    }
    let violations: Vec<usize> = pairs.iter().filter(|(e, s, c)| *e > 2 && !(s < c)).map(|p| p.0).collect();
    let last = pairs.last().copied().unwrap_or((0, f64::NAN, f64::NAN));
    let pass = pairs.len() == 20 && violations.is_empty() && elapsed <= Duration::from_secs(600);
    Ok(verdict(
        pass,
        format!(
            "{} epochs, epochs after 2 with sum >= cap: {violations:?}; epoch {} val sum {:.4} cap {:.4}; {elapsed:.0?}",
            pairs.len(),
            last.0,
            last.1,
            last.2
        ),
    ))
}

struct Pipeline {
    model: Model,
    stage1: Checkpoint,
    data: Dataset,
    test: Dataset,
    test_corpus: SyntheticCorpus,
}

fn criterion_6(work: &Path) -> Res<(Verdict, Pipeline)> {
    let t0 = Instant::now();
    let data = corpus(4000, 7)?.into_dataset();
    let test_corpus = corpus(400, 1234)?;
    let test = test_corpus.clone().into_dataset();
    let model = Model::new(&ModelConfig::toy(data.vocab.len()), DType::F32, &CPU, 0)?;
    let s1 = pretrain(&model, &data, &TrainConfig::toy(Stage::One), &work.join("s1"), None)?;
    let stage1 = load_checkpoint(&s1.checkpoint, &CPU)?;
    pretrain(&model, &data, &TrainConfig::toy(Stage::Two), &work.join("s2"), Some(&stage1))?;
    let prompts = PromptSet::from_templates(&test.class_names);
    let acc = zero_shot_classify(&model, &test, &prompts, 64)?.accuracy.unwrap_or(0.0);
    let elapsed = t0.elapsed();
    let pass = acc >= 0.90 && elapsed <= Duration::from_secs(900);
    Ok((
        verdict(
            pass,
            format!("zero-shot accuracy {acc:.4} on 400 held-out images, 4 classes; {elapsed:.0?}"),
        ),
        Pipeline {
            model,
            stage1,
            data,
            test,
            test_corpus,
        },
    ))
}

const METRIC_KEYS: [&str; 7] = ["l_cg", "l_cl", "l_sum", "l_cap", "l_dis", "total", "lr"];

fn criterion_7(p: &Pipeline, work: &Path) -> Res<(Verdict, Vec<String>)> {
    let subset: Vec<usize> = (0..1000).collect();
    let data = p.data.subset(&subset);
    let prompts = PromptSet::from_templates(&p.test.class_names);
    let mut complete = true;
    let mut rows = Vec::new();
    for (name, ablation) in Ablation::table_rows() {
        let model = p.stage1.build_model(&CPU)?;
        let cfg = TrainConfig {
            epochs: 2,
            ablation,
            ..TrainConfig::toy(Stage::Two)
        };
        let dir = work.join(format!("ablation_{name}"));
        pretrain(&model, &data, &cfg, &dir, Some(&p.stage1))?;
        let log = std::fs::read_to_string(dir.join(METRICS_FILE))?;
        let parsed = parse_metrics_log(&log)?;
        let val_ok = parsed.iter().filter(|r| r.1 == "val").all(|(_, _, fields)| {
            METRIC_KEYS
                .iter()
                .all(|k| fields.iter().any(|(f, v)| f == k && v.is_finite()))
        });
        complete &= parsed.len() == 4 && val_ok;
        let acc = zero_shot_classify(&model, &p.test, &prompts, 64)?.accuracy.unwrap_or(f64::NAN);
        let last_val = parsed.iter().rev().find(|r| r.1 == "val").map(|r| r.2.clone()).unwrap_or_default();
        let get = |k: &str| last_val.iter().find(|(f, _)| f == k).map(|(_, v)| *v).unwrap_or(f64::NAN);
        rows.push(format!(
            "{name:<20} zero-shot {acc:.4}  val l_cg {:.4} l_cl {:.4} l_sum {:.4} l_cap {:.4} l_dis {:.4}",
            get("l_cg"),
            get("l_cl"),
            get("l_sum"),
            get("l_cap"),
            get("l_dis")
        ));
    }
    Ok((
        verdict(complete, format!("5 flag configurations ran; complete metric set {complete}")),
        rows,
    ))
}

fn brute_auc(scores: &[f64], pos: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if pos[i] && !pos[j] {
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn bits(model: &Model) -> Res<Vec<(String, Vec<u32>)>> {
    let mut out = Vec::new();
    for (n, v) in model.store().vars() {
        let b = v.as_tensor().flatten_all()?.to_vec1::<f32>()?.into_iter().map(f32::to_bits).collect();
        out.push((n, b));
    }
    Ok(out)
}

fn criterion_8(p: &Pipeline, work: &Path) -> Res<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut auc_exact = true;
    for trial in 0..50 {
        let n = rng.random_range(2..=200);
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..20) as f64) / 4.0).collect();
        let mut pos: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        pos[0] = true;
        pos[1] = false;
        auc_exact &= roc_auc(&scores, &pos)? == brute_auc(&scores, &pos);
        if trial == 0 {
            let probs: Vec<Vec<f64>> = scores.iter().map(|&s| vec![s, -s]).collect();
            let labels: Vec<usize> = pos.iter().map(|&b| usize::from(!b)).collect();
            auc_exact &= macro_auc(&probs, &labels, 2)? == brute_auc(&scores, &pos);
        }
    }

    let mut argmax_ok = true;
    for _ in 0..200 {
        let scores: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = rng.random_range(0.01..100.0);
        let scaled: Vec<f64> = scores.iter().map(|s| s * c).collect();
        argmax_ok &= predict(&scores, false) == predict(&scaled, false);
    }
    let small = p.test.subset(&(0..64).collect::<Vec<_>>());
    let prompts = PromptSet::from_templates(&small.class_names);
    let base = zero_shot_classify(&p.model, &small, &prompts, 64)?;
    for c in [0.3, 7.0] {
        let scaled: Vec<usize> = base
            .scores
            .iter()
            .map(|s| predict(&s.iter().map(|v| v * c).collect::<Vec<_>>(), false))
            .collect();
        argmax_ok &= scaled == base.predictions;
    }

    let refs: Vec<_> = small.samples.iter().collect();
    let images = stack_images(&refs, p.model.dtype(), p.model.device())?;
    let maps = attention_maps(&p.model, &images, &small.vocab, "findings suggesting")?;
    let worst_sum = maps.iter().map(|m| (m.sum() - 1.0).abs()).fold(0.0, f64::max);
    let nonneg = maps.iter().all(|m| m.values.iter().all(|&v| v >= 0.0));
    let grid = maps.first().map(|m| m.grid).unwrap_or(0);

    let path = work.join("roundtrip.safetensors");
    save_checkpoint(&path, &p.model, &meta_for(&p.model, &p.data, Stage::Two), None)?;
    let restored = load_checkpoint(&path, &CPU)?.build_model(&CPU)?;
    let bitwise = bits(&p.model)? == bits(&restored)?;

    let pass = auc_exact && argmax_ok && worst_sum <= 1e-5 && nonneg && grid == 2 && bitwise;
    Ok(verdict(
        pass,
        format!(
            "AUC exact {auc_exact}; argmax scale-invariant {argmax_ok}; heatmap |sum-1| <= {worst_sum:.1e} on \
             {grid}x{grid} grid; checkpoint bitwise {bitwise}"
        ),
    ))
}

fn reports(p: &Pipeline) -> Res<Vec<String>> {
    let mut out = Vec::new();
    let grammar = &p.test_corpus.grammar;
    let (train, test) = p.test.split(0.7, 0);
    for kind in [VqaKind::Shape, VqaKind::Location] {
        let train_set = VqaSet::from_dataset(&train, grammar, kind)?;
        let test_set = VqaSet::from_dataset(&test, grammar, kind)?;
        let head = train_vqa(&p.model, &train, &train_set, &VqaConfig::default())?;
        let acc = vqa_accuracy(&p.model, &head, &test, &test_set, None, 64)?;
        let shuffled = vqa_accuracy(&p.model, &head, &test, &test_set, Some(1), 64)?;
        out.push(format!(
            "vqa {kind:?}: accuracy {acc:.4}, shuffled images {shuffled:.4}, chance {:.4}",
            1.0 / train_set.answers.len() as f64
        ));
    }

    let refs: Vec<_> = p.test.samples.iter().collect();
    let mut mass = Vec::new();
    for (chunk, recs) in refs.chunks(64).zip(p.test.records.chunks(64)) {
        let images = stack_images(chunk, p.model.dtype(), p.model.device())?;
        for (map, r) in attention_maps(&p.model, &images, &p.test.vocab, "findings suggesting")?.iter().zip(recs) {
            if let Some(a) = grammar.parse_findings(&r.findings) {
                mass.push(map.quadrant_mass(a.quadrant));
            }
        }
    }
    let mean = mass.iter().sum::<f64>() / mass.len() as f64;
    out.push(format!("attention mass in the lesion quadrant {mean:.4} (uniform 0.25, n={})", mass.len()));

    let probe_cfg = ProbeConfig::default();
    for f in [0.1, 1.0] {
        let r = linear_probe(&p.model, &train, &test, f, &probe_cfg)?;
        out.push(format!(
            "linear probe fraction {f}: n_train {} macro AUC {:.4} accuracy {:.4}",
            r.n_train, r.auc, r.accuracy
        ));
    }
    Ok(out)
}

fn line(id: usize, title: &str, r: Res<Verdict>) -> bool {
    match r {
        Ok(v) => {
            println!("{} criterion {id} ({title}): {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
            v.pass
        }
        Err(e) => {
            println!("FAIL criterion {id} ({title}): error: {e}");
            false
        }
    }
}

fn main() {
    // `cargo test -- --list` and filters from the workspace run land here too.
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let work = tempfile::tempdir().expect("temporary directory");
    let work = work.path();
    let mut passed = Vec::new();
    passed.push(line(1, "gradient oracle", criterion_1()));
    passed.push(line(2, "closed-form identities", criterion_2()));
    passed.push(line(3, "architecture invariants", criterion_3()));
    passed.push(line(4, "two-stage schedule", criterion_4()));
    passed.push(line(5, "summarization converges below captioning", criterion_5(work)));
    let pipeline = match criterion_6(work) {
        Ok((v, p)) => {
            passed.push(line(6, "end-to-end toy pipeline", Ok(v)));
            Some(p)
        }
        Err(e) => {
            passed.push(line(6, "end-to-end toy pipeline", Err(e)));
            None
        }
    };
    let mut report_lines = Vec::new();
    match &pipeline {
        Some(p) => {
            match criterion_7(p, work) {
                Ok((v, rows)) => {
                    passed.push(line(7, "ablation harness", Ok(v)));
                    report_lines.extend(rows.into_iter().map(|r| format!("ablation {r}")));
                }
                Err(e) => passed.push(line(7, "ablation harness", Err(e))),
            }
            passed.push(line(8, "evaluation oracles", criterion_8(p, work)));
            match reports(p) {
                Ok(r) => report_lines.extend(r),
                Err(e) => report_lines.push(format!("report failed: {e}")),
            }
        }
        None => {
            passed.push(line(7, "ablation harness", Err("needs the stage-1 checkpoint of criterion 6".into())));
            passed.push(line(8, "evaluation oracles", Err("needs the trained model of criterion 6".into())));
        }
    }
    for r in &report_lines {
        println!("REPORT {r}");
    }
    let n_pass = passed.iter().filter(|&&p| p).count();
    println!("acceptance: {n_pass}/{} criteria passed", passed.len());
    if n_pass != passed.len() {
        std::process::exit(1);
    }
}
