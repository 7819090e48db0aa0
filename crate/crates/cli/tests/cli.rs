use std::path::Path;
use std::process::{Command, Output};

use mutr_core::data::load_mask;
use mutr_core::model::{build_model, ModelConfig};

fn mutr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mutr")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen(dir: &Path, count: usize, size: usize) {
    let o = mutr(&[
        "gen-data",
        "--count",
        &count.to_string(),
        "--size",
        &size.to_string(),
        "--seed",
        "7",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn analyze_reference_at_512_is_in_the_parameter_band() {
    let o = mutr(&["analyze", "--resolution", "512", "--format", "json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["resolution"], 512);
    let params = v["totals"]["params"].as_u64().unwrap();
    assert!((2_700_000..=3_300_000).contains(&params), "{params}");
}

#[test]
fn analyze_tiny_json_matches_the_library() {
    let o = mutr(&["analyze", "--config", "tiny", "--format", "json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let report = build_model(&ModelConfig::tiny(), 0).unwrap().cost_report(64).unwrap();
    assert_eq!(v["totals"]["params"].as_u64(), Some(report.totals.params));
    assert_eq!(v["totals"]["macs"].as_u64(), Some(report.totals.macs));
}

#[test]
fn calibration_names_the_chosen_resolution() {
    let o = mutr(&["analyze", "--calibrate", "--format", "json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["calibration_resolution"], 256);
    assert_eq!(v["reports"].as_array().unwrap().len(), 2);
}

#[test]
fn bad_config_path_exits_2_naming_the_path() {
    let o = mutr(&["analyze", "--config", "/no/such/config.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/config.json"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(mutr(&["analyze", "--format", "xml"]).status.code(), Some(2));
    assert_eq!(mutr(&["train"]).status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_mutr"))
        .args(["analyze", "--config", "tiny"])
        .env("MUTR_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    gen(&a, 16, 64);
    gen(&b, 16, 64);
    assert!(a.join("meta.json").exists());
    for sub in ["images", "masks"] {
        let mut names: Vec<_> = std::fs::read_dir(a.join(sub)).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert_eq!(names.len(), 16);
        for n in names {
            assert_eq!(std::fs::read(a.join(sub).join(&n)).unwrap(), std::fs::read(b.join(sub).join(&n)).unwrap());
        }
    }
}

#[test]
fn indivisible_size_warns_but_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = mutr(&["gen-data", "--count", "2", "--size", "63", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("warning"), "{}", stderr(&o));
    assert!(out.join("masks/0001.pgm").exists());
}

#[test]
fn train_eval_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    gen(&data, 4, 32);
    let (d, r) = (data.to_str().unwrap(), run.to_str().unwrap());

    let o = mutr(&["train", "--config", "tiny", "--data", d, "--out", r, "--epochs", "2", "--batch-size", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let ck = run.join("final.mutr");
    assert!(ck.exists() && run.join("best.mutr").exists());
    let ck = ck.to_str().unwrap();

    let o = mutr(&["eval", "--checkpoint", ck, "--data", d]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for metric in ["SE", "SP", "ACC", "IoU", "Dice"] {
        assert!(stdout(&o).lines().any(|l| l.starts_with(metric)), "{}", stdout(&o));
    }

    let masks = dir.path().join("masks");
    let image = data.join("images/0002.ppm");
    let o = mutr(&["infer", "--checkpoint", ck, "--input", image.to_str().unwrap(), "--out", masks.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(load_mask(&masks.join("0002.pgm")).unwrap().shape(), &[1, 32, 32]);

    let o = mutr(&["eval", "--checkpoint", ck, "--data", d, "--config", "reference"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("config mismatch"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_detects_sign_flip() {
    let o = mutr(&["gradcheck", "--scope", "block"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.ends_with("pass")).count(), 10);

    let o = mutr(&["gradcheck", "--scope", "model", "--components", "40"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));

    let o = mutr(&["gradcheck", "--scope", "block", "--inject-sign-flip"]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("FAIL"));
}
