use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "data.identities=3",
    "data.samples=8",
    "data.holdout=0.5",
    "model.dim=8",
    "student.channels=4,8,8",
    "teacher.t=2",
    "urfm.L=9",
    "train.epochs=2",
    "train.warmup_epochs=1",
    "train.batch=4",
    "pretrain.epochs=2",
    "pretrain.warmup_epochs=1",
    "perf.samples=2",
];

/// Runs the binary with the tiny overrides ahead of any `--set` in `args`,
/// so per-test overrides win.
fn facekd(args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_facekd"));
    let mut sets = Vec::new();
    let mut it = args.iter();
    while let Some(&a) = it.next() {
        if a == "--set" {
            sets.push(*it.next().expect("--set takes a value"));
        } else {
            cmd.arg(a);
        }
    }
    for kv in TINY.iter().chain(&sets) {
        cmd.args(["--set", kv]);
    }
    cmd.output().expect("spawn facekd")
}

fn ok(args: &[&str]) -> String {
    let out = facekd(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = facekd(&[
        "gen-data",
        "--out",
        p(dir.path()),
        "--set",
        "teacher.prompt_count=3",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("unknown config key `teacher.prompt_count`"),
        "{err}"
    );
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = facekd(&["gen-data", "--out", "x", "--frobnicate"]);
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--out", p(&dir.path().join("data"))]);
    let out = facekd(&[
        "eval",
        "--data",
        p(&dir.path().join("data")),
        "--checkpoint",
        p(&dir.path().join("absent.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("i/o error"));
}

#[test]
fn corrupt_checkpoint_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--out", p(&data)]);
    let ckpt = dir.path().join("bad.ckpt");
    fs::write(&ckpt, b"FKDCKPT\0 not really").unwrap();
    let out = facekd(&["eval", "--data", p(&data), "--checkpoint", p(&ckpt)]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn pipeline_produces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    ok(&["gen-data", "--out", p(&data)]);
    assert!(data.join("landmarks.jsonl").exists());
    assert_eq!(fs::read_dir(data.join("images")).unwrap().count(), 24);

    let teacher = d.join("teacher.ckpt");
    let pre_metrics = d.join("pretrain.jsonl");
    ok(&[
        "pretrain-teacher",
        "--data",
        p(&data),
        "--out",
        p(&teacher),
        "--metrics",
        p(&pre_metrics),
    ]);
    // 12 training images, batch 4, 2 epochs.
    assert_eq!(fs::read_to_string(&pre_metrics).unwrap().lines().count(), 6);
    let teacher_eval = ok(&["eval", "--data", p(&data), "--checkpoint", p(&teacher)]);
    assert!(teacher_eval.contains("\"teacher\""));

    let student = d.join("student.ckpt");
    let metrics = d.join("distill.jsonl");
    ok(&[
        "distill",
        "--data",
        p(&data),
        "--teacher",
        p(&teacher),
        "--out",
        p(&student),
        "--preset",
        "full",
        "--metrics",
        p(&metrics),
    ]);
    let first = fs::read_to_string(&metrics).unwrap();
    let rec: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    for key in ["step", "lr", "loss", "cls", "attn", "feat", "grad_norm"] {
        assert!(rec.get(key).is_some(), "record lacks {key}");
    }

    let a = ok(&["eval", "--data", p(&data), "--checkpoint", p(&student)]);
    let b = ok(&["eval", "--data", p(&data), "--checkpoint", p(&student)]);
    assert_eq!(a, b);
    let report: serde_json::Value = serde_json::from_str(&a).unwrap();
    let acc = report["student"]["verification"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let perf = d.join("perf");
    let line = ok(&[
        "perf",
        "--data",
        p(&data),
        "--checkpoint",
        p(&student),
        "--out-dir",
        p(&perf),
    ]);
    assert!(line.starts_with("perf alignment score"));
    let csv = fs::read_to_string(perf.join("perf_student.csv")).unwrap();
    assert_eq!(csv.lines().count(), 32);
    assert!(csv.lines().all(|l| l.split(',').count() == 32));
}

#[test]
fn zero_alignment_weights_match_the_scratch_preset() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    ok(&["gen-data", "--out", p(&data)]);
    let teacher = d.join("teacher.ckpt");
    ok(&["pretrain-teacher", "--data", p(&data), "--out", p(&teacher)]);
    let run = |name: &str, extra: &[&str]| {
        let ckpt = d.join(name);
        let mut args = vec![
            "distill",
            "--data",
            p(&data),
            "--teacher",
            p(&teacher),
            "--out",
            p(&ckpt),
        ];
        args.extend_from_slice(extra);
        let line = ok(&args);
        let eval = ok(&["eval", "--data", p(&data), "--checkpoint", p(&ckpt)]);
        let v: serde_json::Value = serde_json::from_str(&eval).unwrap();
        (line, v["student"].clone())
    };
    let zero = run(
        "zero.ckpt",
        &["--set", "loss.lambda_attn=0", "--set", "loss.lambda_feat=0"],
    );
    let scratch = run("scratch.ckpt", &["--preset", "scratch"]);
    assert_eq!(zero, scratch);
}

#[test]
fn prompt_sweep_emits_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    ok(&["gen-data", "--out", p(&data)]);
    let teacher = d.join("teacher.ckpt");
    ok(&["pretrain-teacher", "--data", p(&data), "--out", p(&teacher)]);
    let table = d.join("sweep.csv");
    ok(&[
        "sweep",
        "--data",
        p(&data),
        "--teacher",
        p(&teacher),
        "--grid",
        "t",
        "--out",
        p(&table),
        "--set",
        "train.epochs=1",
        "--set",
        "train.warmup_epochs=0",
    ]);
    let text = fs::read_to_string(&table).unwrap();
    let labels: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        labels,
        [
            "frozen",
            "5_prompts",
            "25_prompts",
            "50_prompts",
            "all_learnable"
        ]
    );
    let bad = facekd(&[
        "sweep",
        "--data",
        p(&data),
        "--teacher",
        p(&teacher),
        "--grid",
        "q",
        "--out",
        p(&table),
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn run_command_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["run", "--out", p(&a), "--preset", "full"]);
    ok(&["run", "--out", p(&b), "--preset", "full"]);
    for f in [
        "metrics.json",
        "distill.jsonl",
        "pretrain.jsonl",
        "teacher.ckpt",
        "distilled.ckpt",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
}
