use std::path::Path;
use std::process::{Command, Output};

fn transem(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_transem"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "off")
        .env("TRANSEM_THREADS", "1")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn simulate_small(cwd: &Path, name: &str) {
    let out = transem(
        &[
            "simulate",
            "--out",
            name,
            "--phantoms",
            "4",
            "--split",
            "2,1,1",
            "--image-size",
            "16",
            "--angles",
            "12",
            "--counts",
            "2e4",
            "--high-counts",
            "2e5",
        ],
        cwd,
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Names in `dir`, hidden staging directories included.
fn entries(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn every_subcommand_has_help() {
    let tmp = tempfile::tempdir().unwrap();
    let top = transem(&["--help"], tmp.path());
    assert!(top.status.success());
    let text = String::from_utf8_lossy(&top.stdout).into_owned();
    for sub in ["simulate", "recon", "train", "eval", "ablate"] {
        assert!(text.contains(sub), "{sub} missing from top-level help");
        let out = transem(&[sub, "--help"], tmp.path());
        assert!(out.status.success(), "{sub} --help failed");
        assert!(String::from_utf8_lossy(&out.stdout).contains("--config"));
    }
}

#[test]
fn config_errors_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(code(&transem(&["simulate"], dir)), 2, "missing --out");
    assert_eq!(
        code(&transem(
            &["simulate", "--out", "d", "--split", "0.5,0.6,0.1"],
            dir
        )),
        2
    );
    assert_eq!(
        code(&transem(&["frobnicate"], dir)),
        2,
        "unknown subcommand"
    );
    std::fs::write(dir.join("bad.json"), "{\"phantoms\": 3, \"colour\": 1}").unwrap();
    assert_eq!(
        code(&transem(
            &["simulate", "--config", "bad.json", "--out", "d"],
            dir
        )),
        2
    );
    std::fs::write(dir.join("broken.json"), "{").unwrap();
    assert_eq!(
        code(&transem(
            &["simulate", "--config", "broken.json", "--out", "d"],
            dir
        )),
        2
    );
    std::fs::create_dir(dir.join("full")).unwrap();
    std::fs::write(dir.join("full/keep.txt"), "x").unwrap();
    assert_eq!(
        code(&transem(&["simulate", "--out", "full"], dir)),
        2,
        "non-empty output"
    );
    assert_eq!(entries(&dir.join("full")), ["keep.txt"]);
}

#[test]
fn missing_artifacts_and_io_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let no_data = transem(
        &[
            "recon", "--data", "nowhere", "--out", "r", "--method", "osem",
        ],
        dir,
    );
    assert_eq!(code(&no_data), 4);
    simulate_small(dir, "data");
    let no_model = transem(
        &[
            "recon",
            "--data",
            "data",
            "--out",
            "r",
            "--method",
            "transem",
            "--checkpoint",
            "none.tem1",
        ],
        dir,
    );
    assert_eq!(code(&no_model), 4);
    assert_eq!(
        code(&transem(
            &["recon", "--data", "data", "--out", "r", "--method", "transem"],
            dir
        )),
        2
    );
    std::fs::write(dir.join("plain"), "not a directory").unwrap();
    let blocked = transem(
        &[
            "recon", "--data", "data", "--out", "plain/r", "--method", "osem",
        ],
        dir,
    );
    assert_eq!(code(&blocked), 3);
    assert!(!dir.join("r").exists());
}

#[test]
fn diverging_training_exits_with_code_5_and_keeps_state() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulate_small(dir, "data");
    let out = transem(
        &[
            "train",
            "--data",
            "data",
            "--out",
            "model",
            "--lr",
            "1e300",
            "--max-steps",
            "3",
            "--iters",
            "1",
            "--subsets",
            "2",
            "--channels",
            "4",
            "--heads",
            "1",
            "--window",
            "4",
        ],
        dir,
    );
    assert_eq!(code(&out), 5, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.join("model").exists());
    let failed = entries(&dir.join("model.failed"));
    assert!(
        failed.iter().any(|f| f.starts_with("nan_step")),
        "{failed:?}"
    );
    assert_eq!(entries(dir), ["data", "model.failed"]);
}

#[test]
fn config_file_values_yield_to_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("sim.json"),
        r#"{"phantoms": 3, "split": "1,1,1", "image_size": 16, "angles": 10, "seed": 4, "counts": 1e4}"#,
    )
    .unwrap();
    let out = transem(
        &[
            "simulate", "--config", "sim.json", "--out", "d", "--seed", "9",
        ],
        dir,
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let m = manifest(&dir.join("d"));
    assert_eq!(m["config"]["seed"], 9);
    assert_eq!(m["config"]["n_phantoms"], 3);
    assert_eq!(m["config"]["geometry"]["n_angles"], 10);
    assert_eq!(m["config"]["low_counts"], 1e4);
    assert_eq!(m["samples"].as_array().unwrap().len(), 3);
}

#[test]
fn successful_commands_leave_no_staging_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulate_small(dir, "data");
    let recon = transem(
        &[
            "recon", "--data", "data", "--out", "osem", "--method", "mlem", "--iters", "3",
        ],
        dir,
    );
    assert!(recon.status.success());
    let eval = transem(
        &["eval", "--data", "data", "--recon", "osem", "--out", "eval"],
        dir,
    );
    assert!(
        eval.status.success(),
        "{}",
        String::from_utf8_lossy(&eval.stderr)
    );
    assert_eq!(entries(dir), ["data", "eval", "osem"]);
    let files = entries(&dir.join("osem"));
    for f in ["metrics.csv", "metrics.json", "recon.json"] {
        assert!(files.contains(&f.to_string()), "{files:?}");
    }
    let csv = std::fs::read_to_string(dir.join("eval/metrics.csv")).unwrap();
    assert!(csv.starts_with("method,count_level,sample,psnr,ssim,mcrc"));
    assert!(csv.contains("mlem,2e4,mean±std"));
}
