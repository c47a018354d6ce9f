use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vidpred_cli::RunConfig;

fn vidpred(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vidpred"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn vidpred")
}

fn tiny_config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.json").display().to_string()
}

fn summary(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("one JSON line on stdout")
}

#[test]
fn shipped_configs_parse_and_validate() {
    for name in ["tiny.json", "desk.json"] {
        let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
        RunConfig::load(&p).unwrap().validate().unwrap();
    }
    assert_eq!(RunConfig::desk().train.generator.resolution(), 32);
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let paths = ["a.tvid", "b.tvid"].map(|n| dir.path().join(n));
    for p in &paths {
        let s = summary(&vidpred(&["gen-data", "--n", "6", "--seed", "9", "--resolution", "16", "--frames", "8", "--out", p.to_str().unwrap()]));
        assert_eq!(s["clips"], 6);
    }
    assert_eq!(fs::read(&paths[0]).unwrap(), fs::read(&paths[1]).unwrap());
}

#[test]
fn zero_step_training_writes_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let s = summary(&vidpred(&["train", "--config", &tiny_config(), "--steps", "0", "--out-dir", out.to_str().unwrap()]));
    assert_eq!(s["steps"], 0);
    assert!(out.join("checkpoint/manifest.json").exists());
    assert!(out.join("checkpoint/tensors.bin").exists());
    assert!(out.join("run.json").exists());
}

#[test]
fn bad_configuration_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"batchsize": 4}}"#).unwrap();
    let out = vidpred(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));

    fs::write(&cfg, r#"{"train": {"batch": 0}}"#).unwrap();
    let out = vidpred(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));

    assert_eq!(vidpred(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(vidpred(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none");
    for cmd in ["eval", "sample", "flow"] {
        let mut args = vec![cmd, "--checkpoint", missing.to_str().unwrap()];
        match cmd {
            "sample" => args.extend(["--grid-out", "g.png"]),
            "flow" => args.extend(["--out", "f"]),
            _ => {}
        }
        let out = vidpred(&args);
        assert_eq!(out.status.code(), Some(2), "{cmd}");
    }
}

#[test]
fn sample_and_flow_render_images() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    summary(&vidpred(&["train", "--config", &tiny_config(), "--steps", "1", "--out-dir", run.to_str().unwrap()]));
    let ckpt = run.join("checkpoint");
    let grid = dir.path().join("grid.png");
    let s = summary(&vidpred(&["sample", "--checkpoint", ckpt.to_str().unwrap(), "--n", "2", "--grid-out", grid.to_str().unwrap()]));
    assert_eq!(s["size"], serde_json::json!([16 * 8, 16 * 2]));
    assert_eq!(image::open(&grid).unwrap().to_rgb8().dimensions(), (128, 32));

    let flows = dir.path().join("flows");
    let s = summary(&vidpred(&["flow", "--checkpoint", ckpt.to_str().unwrap(), "--out", flows.to_str().unwrap()]));
    assert_eq!(s["steps"], 6);
    assert!(flows.join("flow_t0.png").exists());
    assert!(flows.join("fields/manifest.json").exists());

    let out = vidpred(&["flow", "--checkpoint", ckpt.to_str().unwrap(), "--levels", "5", "--out", flows.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}
