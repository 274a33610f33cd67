use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use eeg_ssm::train::RunConfig;

fn eeg_ssm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eeg-ssm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = eeg_ssm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn eval_without_checkpoint_names_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = eeg_ssm(&["eval", "--manifest", "m.json", "--out", s(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--checkpoint"));
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&eeg_ssm(&["synth", "--no-such-flag"])), 2);
    assert_eq!(code(&eeg_ssm(&[])), 2);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"model": {"d_model": 16, "colour": 3}}"#).unwrap();
    let out = eeg_ssm(&["synth", "--config", s(&bad), "--out", s(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));

    std::fs::write(&bad, r#"{"pretrain": {"lr": -1.0}}"#).unwrap();
    assert_eq!(code(&eeg_ssm(&["synth", "--config", s(&bad), "--out", s(dir.path())])), 2);

    let out = Command::new(env!("CARGO_BIN_EXE_eeg-ssm"))
        .args(["synth", "--out", s(dir.path())])
        .env("EEG_SSM_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    let out = eeg_ssm(&["preprocess", "--manifest", s(&missing), "--out", s(dir.path())]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn schema_covers_the_configuration() {
    let schema: serde_json::Value = serde_json::from_str(&String::from_utf8(ok(&["--print-schema"]).stdout).unwrap()).unwrap();
    let cfg = serde_json::to_value(RunConfig::default()).unwrap();
    let train_props = &schema["$defs"]["train"]["properties"];
    for (section, fields) in cfg.as_object().unwrap() {
        let props = match section.as_str() {
            "pretrain" | "finetune" => train_props,
            _ => &schema["properties"][section]["properties"],
        };
        let mut documented: Vec<&String> = props.as_object().unwrap().keys().collect();
        let mut actual: Vec<&String> = fields.as_object().unwrap().keys().collect();
        documented.sort();
        actual.sort();
        assert_eq!(documented, actual, "section {section}");
        if !matches!(section.as_str(), "pretrain" | "finetune") {
            for (k, v) in fields.as_object().unwrap() {
                assert_eq!(&props[k]["default"], v, "default of {section}.{k}");
            }
        }
    }
}

/// The documented quick start: synthetic corpus, caches, a short pretraining
/// run repeated for identical logs, then the downstream commands.
#[test]
fn pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cache, pre) = (dir.path().join("data"), dir.path().join("cache"), dir.path().join("pre"));
    let t0 = Instant::now();
    ok(&["synth", "--patients", "4", "--seed", "7", "--out", s(&data)]);
    let manifest = data.join("manifest.json");
    let before = std::fs::read(&manifest).unwrap();
    ok(&["preprocess", "--manifest", s(&manifest), "--out", s(&cache)]);
    assert_eq!(std::fs::read(&manifest).unwrap(), before, "preprocess changed its input");
    let cached = cache.join("manifest.json");
    ok(&["pretrain", "--manifest", s(&cached), "--steps", "200", "--seed", "7", "--out", s(&pre)]);
    let elapsed = t0.elapsed();
    eprintln!("synth + preprocess + 200 pretraining steps: {elapsed:?}");
    assert!(elapsed < Duration::from_secs(600));
    for f in ["effective_config.json", "metrics.jsonl", "report.json", "model.ckpt"] {
        assert!(pre.join(f).exists(), "{f} missing");
    }
    let effective: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(pre.join("effective_config.json")).unwrap()).unwrap();
    assert_eq!(effective["config"]["pretrain"]["steps"], 200);
    assert_eq!(effective["config"]["pretrain"]["seed"], 7);
    assert!(effective["command"]["pretrain"].is_object());

    let first = std::fs::read(pre.join("metrics.jsonl")).unwrap();
    ok(&["pretrain", "--manifest", s(&cached), "--steps", "200", "--seed", "7", "--out", s(&pre)]);
    assert!(first == std::fs::read(pre.join("metrics.jsonl")).unwrap(), "metric logs differ between runs");

    let ckpt = pre.join("model.ckpt");
    let ckpt_bytes = std::fs::read(&ckpt).unwrap();
    let fine = dir.path().join("fine");
    ok(&[
        "finetune", "--manifest", s(&cached), "--checkpoint", s(&ckpt), "--steps", "10", "--out", s(&fine),
    ]);
    assert_eq!(std::fs::read(&ckpt).unwrap(), ckpt_bytes, "finetune changed the pretrained checkpoint");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fine.join("report.json")).unwrap()).unwrap();
    assert!(report["test"]["auroc"].is_number());

    let ev = dir.path().join("eval");
    let out = ok(&["eval", "--manifest", s(&cached), "--checkpoint", s(&fine.join("model.ckpt")), "--out", s(&ev)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("auroc"));

    let sal = dir.path().join("sal");
    ok(&[
        "saliency", "--manifest", s(&cached), "--checkpoint", s(&fine.join("model.ckpt")), "--csv", "--out", s(&sal),
    ]);
    let map: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(sal.join("saliency.json")).unwrap()).unwrap();
    assert_eq!(map["channels"].as_array().unwrap().len(), 19);
    assert_eq!(std::fs::read_to_string(sal.join("saliency.csv")).unwrap().lines().count(), 19);

    let filt = dir.path().join("filters");
    ok(&["filters", "--checkpoint", s(&ckpt), "--out", s(&filt)]);
    let spectra: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(filt.join("filters.json")).unwrap()).unwrap();
    for spec in spectra.as_array().unwrap() {
        let peak = spec["peak_hz"].as_f64().unwrap();
        assert!((0.0..=100.0).contains(&peak));
    }
    assert_eq!(code(&eeg_ssm(&["saliency", "--manifest", s(&cached), "--checkpoint", s(&ckpt), "--window", "9999", "--out", s(&sal)])), 2);
}
