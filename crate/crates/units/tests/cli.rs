use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use units::checkpoint;
use units::commands::*;
use units::csvio::read_table;
use units::UnitsError;
use units_core::model::ModelConfig;
use units_core::{Model, Scalar};

const MANIFEST: &str = r#"
[[dataset]]
name = "sine"
kind = "forecast"
horizon_tokens = 1
[dataset.generator]
kind = "sine_forecast"
seed = 1
samples = 32
length = 64
horizon = 16

[[dataset]]
name = "waves"
kind = "classify"
n_classes = 2
[dataset.generator]
kind = "two_class"
seed = 2
samples = 32
length = 64
"#;

const CONFIG: &str = r#"
manifest = "manifest.toml"
out = "run"
seed = 5

[model]
blocks = 1
d = 16
patch = 16
heads = 2
prompt_len = 2
dylinear_base = 8
max_positions = 16

[training]
steps = 60
batch_size = 8
effective_batch = 8
lr = 1e-2
schedule = "cosine"
"#;

fn setup(dir: &Path) -> PathBuf {
    fs::write(dir.join("manifest.toml"), MANIFEST).unwrap();
    let cfg = dir.join("train.toml");
    fs::write(&cfg, CONFIG).unwrap();
    cfg
}

fn opts(cfg: &Path, out: &Path) -> RunOptions {
    RunOptions {
        config: cfg.to_path_buf(),
        seed: None,
        out: Some(out.to_path_buf()),
        from_checkpoint: None,
    }
}

fn sine_csv(path: &Path, rows: usize, cols: usize) {
    let mut s: String = (0..cols).map(|c| format!("v{c}")).collect::<Vec<_>>().join(",");
    s.push('\n');
    for r in 0..rows {
        let row: Vec<String> = (0..cols).map(|c| ((r as Scalar) / (5.0 + c as Scalar)).sin().to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    fs::write(path, s).unwrap();
}

fn mean_loss(rows: &[units_core::trainer::MetricRow], dataset: &str, take: impl Fn(usize) -> bool) -> Scalar {
    let sel: Vec<Scalar> = rows.iter().filter(|r| r.dataset == dataset && take(r.step)).map(|r| r.loss).collect();
    sel.iter().sum::<Scalar>() / sel.len() as Scalar
}

#[test]
fn training_lowers_loss_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let a = cmd_train(&opts(&cfg, &dir.path().join("a"))).unwrap();
    for name in ["sine", "waves"] {
        let first = mean_loss(&a.rows, name, |s| s < 5);
        let last = mean_loss(&a.rows, name, |s| s >= 55);
        assert!(last < first, "{name}: {first} -> {last}");
    }
    for f in [CHECKPOINT_FILE, METRICS_FILE, CONFIG_FILE] {
        assert!(a.out.join(f).exists(), "{f}");
    }
    let b = cmd_train(&opts(&cfg, &dir.path().join("b"))).unwrap();
    assert_eq!(fs::read(a.out.join(METRICS_FILE)).unwrap(), fs::read(b.out.join(METRICS_FILE)).unwrap());
    assert_eq!(fs::read(a.out.join(CHECKPOINT_FILE)).unwrap(), fs::read(b.out.join(CHECKPOINT_FILE)).unwrap());

    let mut other = opts(&cfg, &dir.path().join("c"));
    other.seed = Some(6);
    let c = cmd_train(&other).unwrap();
    assert_ne!(fs::read(a.out.join(METRICS_FILE)).unwrap(), fs::read(c.out.join(METRICS_FILE)).unwrap());

    // the written config reproduces the run
    let d = cmd_train(&opts(&a.out.join(CONFIG_FILE), &dir.path().join("d"))).unwrap();
    assert_eq!(fs::read(a.out.join(METRICS_FILE)).unwrap(), fs::read(d.out.join(METRICS_FILE)).unwrap());
}

#[test]
fn eval_writes_one_row_per_metric() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let run = cmd_train(&opts(&cfg, &dir.path().join("r"))).unwrap();
    let mut o = opts(&cfg, &run.out);
    o.from_checkpoint = Some(run.out.join(CHECKPOINT_FILE));
    let metrics = cmd_eval(&o, None).unwrap();
    let names: Vec<(&str, &str)> = metrics.iter().map(|m| (m.dataset.as_str(), m.name)).collect();
    assert_eq!(names, [("sine", "mse"), ("sine", "mae"), ("waves", "accuracy")]);
    let text = fs::read_to_string(run.out.join(EVAL_FILE)).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.starts_with("dataset,metric,value\n"));
    let acc = metrics[2].value;
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn prompt_tune_needs_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let err = cmd_prompt_tune(&opts(&cfg, &dir.path().join("p"))).unwrap_err();
    assert!(matches!(err, UnitsError::Usage(_)), "{err}");
    assert!(!dir.path().join("p").exists());
}

#[test]
fn prompt_tune_leaves_the_backbone_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let base = cmd_train(&opts(&cfg, &dir.path().join("base"))).unwrap();
    let mut o = opts(&cfg, &dir.path().join("pt"));
    o.from_checkpoint = Some(base.out.join(CHECKPOINT_FILE));
    let pt = cmd_prompt_tune(&o).unwrap();
    let before = checkpoint::load(&base.out.join(CHECKPOINT_FILE), None).unwrap();
    let after = checkpoint::load(&pt.out.join(CHECKPOINT_FILE), None).unwrap();
    let mut changed = Vec::new();
    for (name, p) in before.registry.iter() {
        if after.registry.value(name).unwrap() != &p.value {
            changed.push(name.to_string());
        }
    }
    assert!(!changed.is_empty());
    assert!(
        changed.iter().all(|n| n.starts_with("tokens.") || n.starts_with("class_embeddings.")),
        "{changed:?}"
    );
}

fn trained_single_source(dir: &Path, patch: usize) -> PathBuf {
    let cfg = ModelConfig {
        blocks: 1,
        d: 8,
        patch,
        heads: 2,
        prompt_len: 2,
        dylinear_base: 8,
        max_positions: 16,
    };
    let mut m = Model::new(cfg, 3).unwrap();
    m.add_source("s", 2).unwrap();
    let p = dir.join("single.unts");
    checkpoint::save(&p, &m).unwrap();
    p
}

fn infer(dir: &Path, ckpt: PathBuf, input: PathBuf) -> InferOptions {
    InferOptions {
        checkpoint: ckpt,
        input,
        source: None,
        out: dir.join("out"),
        normalize: None,
    }
}

#[test]
fn forecast_emits_horizon_tokens_times_patch_rows() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_single_source(dir.path(), 16);
    let input = dir.path().join("in.csv");
    sine_csv(&input, 48, 2);
    let y = cmd_forecast(&infer(dir.path(), ckpt.clone(), input.clone()), 4).unwrap();
    assert_eq!(y.shape(), &[64, 2]);
    let t = read_table(&dir.path().join("out").join(FORECAST_FILE), None, None).unwrap();
    assert_eq!(t.rows(), 64);
    assert_eq!(t.columns, ["v0", "v1"]);
    assert!(cmd_forecast(&infer(dir.path(), ckpt, input), 0).is_err());
}

#[test]
fn inference_rejects_wrong_width_and_unknown_source() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_single_source(dir.path(), 8);
    let input = dir.path().join("in.csv");
    sine_csv(&input, 32, 3);
    let err = cmd_forecast(&infer(dir.path(), ckpt.clone(), input), 1).unwrap_err();
    assert!(err.to_string().contains("expects 2"), "{err}");
    let input = dir.path().join("in2.csv");
    sine_csv(&input, 32, 2);
    let mut o = infer(dir.path(), ckpt, input);
    o.source = Some("nope".into());
    assert!(matches!(cmd_forecast(&o, 1), Err(UnitsError::Usage(_))));
}

#[test]
fn impute_without_mask_echoes_input() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_single_source(dir.path(), 8);
    let input = dir.path().join("in.csv");
    sine_csv(&input, 40, 2);
    let o = infer(dir.path(), ckpt, input.clone());
    cmd_impute(&o, None).unwrap();
    assert_eq!(
        fs::read_to_string(o.out.join(IMPUTED_FILE)).unwrap(),
        fs::read_to_string(&input).unwrap()
    );

    let mask = dir.path().join("mask.csv");
    let mut m = String::from("missing\n");
    for r in 0..40 {
        m.push_str(if (10..20).contains(&r) { "1\n" } else { "0\n" });
    }
    fs::write(&mask, m).unwrap();
    let y = cmd_impute(&o, Some(&mask)).unwrap();
    let x = read_table(&input, None, None).unwrap().values;
    for r in (0..10).chain(20..40) {
        for v in 0..2 {
            assert_eq!(y.get(&[r, v]).to_bits(), x.get(&[r, v]).to_bits());
        }
    }
}

#[test]
fn detect_with_zero_threshold_flags_every_positive_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_single_source(dir.path(), 8);
    let input = dir.path().join("in.csv");
    sine_csv(&input, 40, 2);
    let o = infer(dir.path(), ckpt, input);
    let flags = cmd_detect(&o, None, Some(0.0)).unwrap();
    let t = read_table(&o.out.join(ANOMALY_FILE), None, None).unwrap();
    assert_eq!(t.columns, ["error", "anomaly"]);
    assert_eq!(t.rows(), 40);
    for r in 0..40 {
        let e = t.values.get(&[r, 0]);
        assert_eq!(flags[r], e > 0.0);
        assert_eq!(t.values.get(&[r, 1]), if e > 0.0 { 1.0 } else { 0.0 });
    }
    let fitted = cmd_detect(&o, Some(0.1), None).unwrap();
    assert_eq!(fitted.iter().filter(|f| **f).count(), 4);
    assert!(cmd_detect(&o, None, None).is_err());
}

#[test]
fn prompt_similarity_is_symmetric_with_unit_diagonal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let run = cmd_train(&opts(&cfg, &dir.path().join("r"))).unwrap();
    let out = dir.path().join("sim");
    let (names, sim) = cmd_analyze_prompts(&run.out.join(CHECKPOINT_FILE), &out).unwrap();
    assert_eq!(names, ["sine", "waves"]);
    for i in 0..2 {
        assert!((sim[i][i] - 1.0).abs() < 1e-12);
        for j in 0..2 {
            assert_eq!(sim[i][j], sim[j][i]);
            assert!(sim[i][j].abs() <= 1.0 + 1e-12);
        }
    }
    let text = fs::read_to_string(out.join(SIMILARITY_FILE)).unwrap();
    assert!(text.starts_with("source,sine,waves\n"));

    let single = trained_single_source(dir.path(), 8);
    assert!(cmd_analyze_prompts(&single, &out).is_err());
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_units"))
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let out = dir.path().join("bin");
    let st = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(st.success());
    assert!(out.join(CHECKPOINT_FILE).exists());

    let pt = bin().args(["prompt-tune", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(pt.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&pt.stderr).contains("--from-checkpoint"));

    let missing = bin().args(["train", "--config", "/nonexistent/x.toml"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(1));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "manifest = 3\n").unwrap();
    let parse = bin().args(["train", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(parse.status.code(), Some(2));

    let ragged = dir.path().join("ragged.csv");
    fs::write(&ragged, "a,b\n1,2\n3\n").unwrap();
    let r = bin()
        .args(["detect", "--threshold", "0", "--from-checkpoint"])
        .arg(out.join(CHECKPOINT_FILE))
        .arg("--input")
        .arg(&ragged)
        .arg("--source")
        .arg("sine")
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("ragged.csv:3"));
}
