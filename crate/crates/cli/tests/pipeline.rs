use std::path::Path;
use std::process::{Command, Output};

fn motordecode(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_motordecode"))
        .args(args)
        .env("MOTORDECODE_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = motordecode(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn error_kind(out: &Output) -> String {
    assert!(!out.status.success());
    let line = String::from_utf8_lossy(&out.stderr);
    let last = line.lines().last().expect("an error line");
    let v: serde_json::Value = serde_json::from_str(last).expect("stderr ends with a JSON error");
    v["error"]["kind"].as_str().unwrap().to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const FAST: [&str; 6] = ["--epochs", "1", "--batch-size", "16", "--validation-fraction", "0"];

#[test]
fn generate_preprocess_train_eval_report() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    let trials = tmp.path().join("trials");
    ok(&["generate", "--out", p(&raw), "--subjects", "2", "--trials", "30", "--seed", "7"]);
    assert!(raw.join("manifest.json").exists());
    assert!(raw.join("ground_truth.csv").exists());

    let stdout = ok(&["preprocess", "--input", p(&raw), "--out", p(&trials)]);
    assert!(stdout.contains("intent: 120 trials from 2 subjects"), "{stdout}");
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(trials.join("intent/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["channels"], 128);
    assert_eq!(manifest["samples"], 125);
    assert!(trials.join("rt/manifest.json").exists());

    let ckpt = tmp.path().join("model");
    let mut args = vec!["train", "--data", p(&trials), "--task", "intent", "--out", p(&ckpt)];
    args.extend(FAST);
    ok(&args);
    assert!(ckpt.join("checkpoint.bin").exists());

    let run = |dir: &Path| {
        let mut args = vec!["eval", "--data", p(&trials), "--task", "intent", "--scheme", "loo", "--out", p(dir)];
        args.extend(FAST);
        ok(&args)
    };
    let first = tmp.path().join("eval1");
    let second = tmp.path().join("eval2");
    let printed = run(&first);
    assert!(printed.starts_with("Task"));
    run(&second);
    let report = std::fs::read(first.join("report.json")).unwrap();
    assert_eq!(report, std::fs::read(second.join("report.json")).unwrap());
    let v: serde_json::Value = serde_json::from_slice(&report).unwrap();
    assert_eq!(v["folds"].as_array().unwrap().len(), 2);

    for dir in [&raw, &trials, &ckpt, &first] {
        let prov: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("provenance.json")).unwrap()).unwrap();
        assert!(prov["invocation"]["command"].is_string());
        assert!(prov["resolved"].is_object());
    }

    let table = ok(&["report", p(&first), p(&second.join("report.json"))]);
    assert_eq!(table.lines().filter(|l| l.starts_with("Movement Intent (loo) | ")).count(), 2);
    let csv = ok(&["report", "--format", "csv", p(&first)]);
    assert!(csv.lines().nth(1).unwrap().starts_with("intent,loo,2,"));
}

#[test]
fn generation_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&["generate", "--out", p(dir), "--subjects", "2", "--trials", "4", "--seed", "3"]);
    }
    for file in ["manifest.json", "eeg_s000.f32", "eeg_s001.f32", "ground_truth.csv"] {
        assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn errors_are_machine_readable() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    ok(&["generate", "--out", p(&raw), "--subjects", "2", "--trials", "4"]);

    let again = motordecode(&["generate", "--out", p(&raw), "--subjects", "2", "--trials", "4"]);
    assert_eq!(error_kind(&again), "output_exists");
    ok(&["generate", "--out", p(&raw), "--subjects", "2", "--trials", "4", "--force"]);

    let refused = motordecode(&[
        "eval", "--data", p(&raw), "--task", "rt", "--scheme", "subject-specific", "--out", p(&tmp.path().join("e")),
    ]);
    assert_eq!(error_kind(&refused), "unsupported");
    assert!(!tmp.path().join("e").exists());

    let missing = motordecode(&["preprocess", "--input", p(&tmp.path().join("nope")), "--out", p(&tmp.path().join("t"))]);
    assert_eq!(error_kind(&missing), "io");

    std::fs::write(raw.join("manifest.json"), b"{\"format\": \"something-else\"}").unwrap();
    let malformed = motordecode(&["preprocess", "--input", p(&raw), "--out", p(&tmp.path().join("t"))]);
    assert!(["format", "json"].contains(&error_kind(&malformed).as_str()));
}
