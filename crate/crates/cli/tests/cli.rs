use std::path::Path;
use std::process::{Command, Output};

fn cgcam(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgcam"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const DATA: &[&str] = &[
    "--shapes",
    "2",
    "--textures",
    "2",
    "--train-per-category",
    "4",
    "--eval-per-category",
    "2",
    "--image-size",
    "16",
];
const MODEL: &[&str] = &["--levels", "4,2", "--max-epochs", "2", "--batch-size", "8"];

#[test]
fn stage_commands_chain_together() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut args = vec!["dataset", "generate", "--out", "data", "--seed", "5"];
    args.extend(DATA);
    let out = ok(cgcam(&args, d));
    assert!(out.contains("wrote 16 train and 8 eval images"), "{out}");

    let mut args = vec![
        "hierarchy",
        "build",
        "--data",
        "data",
        "--out",
        "h",
        "--seed",
        "5",
    ];
    args.extend(MODEL);
    ok(cgcam(&args, d));
    assert!(d.join("h/hierarchy.json").exists());

    for level in ["0", "1"] {
        let out_file = format!("m{level}.bin");
        let mut args = vec![
            "train",
            "--data",
            "data",
            "--hierarchy",
            "h/hierarchy.json",
            "--level",
            level,
            "--out",
            &out_file,
            "--seed",
            "5",
        ];
        args.extend(MODEL);
        ok(cgcam(&args, d));
    }

    ok(cgcam(
        &[
            "cam",
            "extract",
            "--data",
            "data",
            "--split",
            "eval",
            "--hierarchy",
            "h/hierarchy.json",
            "--model",
            "m0.bin",
            "--model",
            "m1.bin",
            "--out",
            "run",
        ],
        d,
    ));
    ok(cgcam(&["fuse", "--run", "run"], d));
    let base = ok(cgcam(
        &[
            "eval",
            "--data",
            "data",
            "--run",
            "run",
            "--split",
            "eval",
            "--out",
            "base.json",
        ],
        d,
    ));
    let fused = ok(cgcam(
        &[
            "eval", "--data", "data", "--run", "run", "--split", "eval", "--fused",
        ],
        d,
    ));
    assert!(base.starts_with("mIoU ") && fused.starts_with("mIoU "));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("base.json")).unwrap()).unwrap();
    assert!(report["miou"].as_f64().unwrap() >= 0.0);
}

#[test]
fn run_all_then_report_and_config_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(
        d.join("cfg.json"),
        r#"{"seed": 1, "panels": 1, "train": {"max_epochs": 9}}"#,
    )
    .unwrap();

    // flags beat --set, which beats the file
    let shown = ok(cgcam(
        &[
            "--config",
            "cfg.json",
            "--set",
            "train.max_epochs=4",
            "--set",
            "panels=3",
            "show-config",
            "--panels",
            "2",
        ],
        d,
    ));
    let v: serde_json::Value = serde_json::from_str(&shown).unwrap();
    assert_eq!(v["train"]["max_epochs"], 4);
    assert_eq!(v["panels"], 2);
    assert_eq!(v["seed"], 1);

    let mut args = vec![
        "--config",
        "cfg.json",
        "run-all",
        "--seed",
        "2",
        "--out",
        "run",
        "--no-train-eval",
    ];
    args.extend(DATA);
    args.extend(MODEL);
    let out = ok(cgcam(&args, d));
    assert!(out.contains("baseline mIoU"), "{out}");
    let tables = std::fs::read_to_string(d.join("run/report/tables.txt")).unwrap();
    ok(cgcam(&["report", "--run", "run"], d));
    assert_eq!(
        std::fs::read_to_string(d.join("run/report/tables.txt")).unwrap(),
        tables
    );
}

#[test]
fn run_all_requires_a_seed_and_bad_input_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert!(!cgcam(&["run-all"], d).status.success());

    std::fs::write(d.join("bad.json"), r#"{"sed": 1}"#).unwrap();
    let out = cgcam(&["--config", "bad.json", "show-config"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = cgcam(&["eval", "--data", "nowhere", "--run", "r"], d);
    assert_eq!(out.status.code(), Some(1));
}
