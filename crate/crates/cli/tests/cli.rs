use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn medvl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medvl"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn synth_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = medvl(&["synth-data", "--seed", "7", "--n", "100", "--out", out], tmp.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = tree(&tmp.path().join("a"));
    assert!(a.len() > 100);
    assert_eq!(a, tree(&tmp.path().join("b")));
}

#[test]
fn stage_two_without_teacher_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(medvl(&["synth-data", "--n", "20", "--out", "d"], tmp.path()).status.success());
    let o = medvl(&["pretrain-stage2", "--data", "d", "--out", "s2"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("pretrain-stage2") && err.contains("teacher"), "{err}");
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = medvl(&["gradcheck", "--seed", "3"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 6, "{text}");
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(medvl(&["synth-data", "--bogus"], tmp.path()).status.code(), Some(2));
    assert_eq!(medvl(&["probe", "--data", "d"], tmp.path()).status.code(), Some(2));
    assert_eq!(
        medvl(&["pretrain-stage2", "--data", "d", "--out", "o", "--ablate", "everything"], tmp.path())
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn bad_config_fails_before_touching_data() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("c.toml"), "[train]\nepochs = 0\n").unwrap();
    let o = medvl(
        &["pretrain-stage1", "--data", "missing", "--out", "o", "--config", "c.toml"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("epochs"), "{err}");
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn short_pipeline_runs_and_leaves_inputs_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("c.toml"),
        "[train]\nepochs = 1\nbatch_size = 16\n[probe]\nepochs = 5\n[vqa]\nepochs = 2\n",
    )
    .unwrap();
    let ok = |args: &[&str]| {
        let o = medvl(args, dir);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        o
    };
    ok(&["synth-data", "--n", "80", "--out", "d"]);
    ok(&["pretrain-stage1", "--data", "d", "--out", "s1", "--config", "c.toml"]);
    let before = (tree(&dir.join("d")), tree(&dir.join("s1")));
    ok(&[
        "pretrain-stage2", "--data", "d", "--out", "s2", "--config", "c.toml", "--checkpoint",
        "s1/best.safetensors",
    ]);
    let eval = ["--data", "d", "--checkpoint", "s2/best.safetensors", "--config", "c.toml"];
    for (cmd, out, file) in [
        ("eval-zeroshot", "ez", "zeroshot.json"),
        ("vqa", "vq", "vqa.json"),
        ("export-attn", "at", "attention_summary.json"),
        ("export-emb", "em", "embeddings.csv"),
    ] {
        let mut args = vec![cmd, "--out", out];
        args.extend(eval);
        ok(&args);
        assert!(dir.join(out).join(file).exists(), "{cmd}");
        assert!(dir.join(out).join("resolved_config.toml").exists(), "{cmd}");
    }
    let mut args = vec!["probe", "--out", "pr", "--fraction", "1"];
    args.extend(eval);
    ok(&args);
    assert_eq!(before, (tree(&dir.join("d")), tree(&dir.join("s1"))));

    let first = std::fs::read(dir.join("em/embeddings.csv")).unwrap();
    let mut args = vec!["export-emb", "--out", "em2"];
    args.extend(eval);
    ok(&args);
    assert_eq!(first, std::fs::read(dir.join("em2/embeddings.csv")).unwrap());
    let text = String::from_utf8(first).unwrap();
    assert_eq!(text.lines().count(), 81);
    for line in text.lines().skip(1) {
        let norm: f64 = line
            .split(',')
            .filter_map(|v| v.parse::<f64>().ok())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!((norm - 1.0).abs() < 1e-5, "{norm}");
    }
}
