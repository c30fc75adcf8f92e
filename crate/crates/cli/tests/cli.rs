use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rgae_core::trace_io::{find, read_trace};

fn rgae(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rgae"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("RGAE_OUT")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn train_small(dir: &Path) -> String {
    let cfg = write_config(dir, "projector = resampler\nsteps_stage1 = 5\nbatch_size = 2\n");
    ok(&rgae(dir, &["train", "--config", &cfg]));
    dir.join("train/checkpoint.rgae").to_str().unwrap().to_string()
}

#[test]
fn train_writes_checkpoint_loss_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    train_small(dir.path());
    let run = dir.path().join("train");
    let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert!(loss.starts_with("step,stage,loss\n"));
    assert_eq!(loss.lines().count(), 6);
    let manifest = fs::read_to_string(run.join("manifest.txt")).unwrap();
    assert!(manifest.contains("--- begin config ---\nprojector = resampler\n"));
    assert!(manifest.contains("checkpoint.rgae"));
    assert!(manifest.contains("run.cfg"));
    assert_eq!(
        fs::read_to_string(run.join("config.txt")).unwrap(),
        "projector = resampler\nsteps_stage1 = 5\nbatch_size = 2\n"
    );
}

#[test]
fn explain_writes_maps_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_small(dir.path());
    let stdout = ok(&rgae(
        dir.path(),
        &["explain", "--checkpoint", &ck, "--sample", "blue,0,3", "--rule", "simple", "--baseline", "raw-attn"],
    ));
    assert!(stdout.contains("tokens: blue at row 0 col 3"));
    let run = dir.path().join("explain");
    for name in [
        "text_to_patch.pgm",
        "text_to_patch_overlay.ppm",
        "query_to_patch.csv",
        "baseline_text_to_patch.csv",
        "query_grid/contact_sheet.pgm",
        "manifest.txt",
    ] {
        assert!(run.join(name).is_file(), "{name}");
    }
    let records = read_trace(run.join("trace.rgae")).unwrap();
    assert_eq!(find(&records, "rgae/text_to_patch/map").unwrap().shape(), &[1, 16]);
    assert_eq!(find(&records, "rgae/meta/map").unwrap().data()[0], 0.0);
    assert_eq!(find(&records, "encoder/patches/map").unwrap().shape()[0], 16);
}

#[test]
fn explain_greedy_without_text() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_small(dir.path());
    ok(&rgae(dir.path(), &["explain", "--checkpoint", &ck, "--sample", "red,1,1", "--mode", "greedy"]));
    assert!(dir.path().join("explain/text_to_patch.csv").is_file());
}

#[test]
fn pool_csv_and_trace_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("x.csv");
    let rows: Vec<String> = (0..16).map(|i| format!("{i},{}", 100 - i)).collect();
    fs::write(&csv, rows.join("\n") + "\n").unwrap();
    ok(&rgae(dir.path(), &["pool", "--input", csv.to_str().unwrap(), "--out-side", "2"]));
    let pooled = fs::read_to_string(dir.path().join("pool/pooled.csv")).unwrap();
    assert_eq!(pooled.lines().next().unwrap(), "2.5,97.5");
    let plan = fs::read_to_string(dir.path().join("pool/plan.txt")).unwrap();
    assert!(plan.contains("kernel 2\nstride 2"));

    ok(&rgae(dir.path(), &["pool", "--input", csv.to_str().unwrap(), "--out-side", "3", "--mode", "max"]));
    let records = read_trace(dir.path().join("pool/pooled.rgae")).unwrap();
    assert_eq!(find(&records, "pool/output/map").unwrap().shape(), &[9, 2]);
    assert_eq!(find(&records, "pool/argmax/map").unwrap().shape(), &[9, 2]);
}

#[test]
fn render_single_and_grid() {
    let dir = tempfile::tempdir().unwrap();
    let map = dir.path().join("m.csv");
    fs::write(&map, "0,1,2,3\n").unwrap();
    ok(&rgae(dir.path(), &["render", "--input", map.to_str().unwrap(), "--cell-pixels", "2"]));
    let bytes = fs::read(dir.path().join("render/map.pgm")).unwrap();
    assert!(bytes.starts_with(b"P5\n4 4\n255\n"));

    let q = dir.path().join("q.csv");
    fs::write(&q, "1,0,0,0\n0,1,0,0\n0,0,1,0\n0,0,0,1\n").unwrap();
    ok(&rgae(dir.path(), &["render", "--input", q.to_str().unwrap(), "--grid", "--output", "g"]));
    assert!(dir.path().join("render/g/query_3.pgm").is_file());
    assert!(dir.path().join("render/g/contact_sheet.pgm").is_file());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(rgae(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(rgae(dir.path(), &["explain", "--checkpoint", "/no/such/file"]).status.code(), Some(4));
    let cfg = write_config(dir.path(), "heads = 2\nwat = 1\n");
    let out = rgae(dir.path(), &["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    let csv = dir.path().join("x.csv");
    fs::write(&csv, "1\n2\n3\n4\n").unwrap();
    let up = rgae(dir.path(), &["pool", "--input", csv.to_str().unwrap(), "--out-side", "3"]);
    assert_eq!(up.status.code(), Some(3));
}

#[test]
fn output_dir_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let from_cfg = dir.path().join("from_cfg");
    let cfg = write_config(
        dir.path(),
        &format!("steps_stage1 = 1\nbatch_size = 1\noutput_dir = {}\n", from_cfg.display()),
    );
    let status = Command::new(env!("CARGO_BIN_EXE_rgae"))
        .args(["train", "--config", &cfg])
        .env("RGAE_OUT", dir.path().join("from_env"))
        .output()
        .unwrap();
    ok(&status);
    assert!(from_cfg.join("train/manifest.txt").is_file());
    assert!(!dir.path().join("from_env").exists());
}

#[test]
fn gradcheck_reports_against_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let strict = rgae(dir.path(), &["gradcheck", "--config", &cfg]);
    let report = fs::read_to_string(dir.path().join("gradcheck/gradcheck.csv")).unwrap();
    assert!(report.starts_with("check,max_rel_error,passed\n"));
    // Tiny loss-gradient entries fall below the finite-difference noise floor at 1e-6.
    assert_eq!(strict.status.code(), Some(1));
    assert!(dir.path().join("gradcheck/manifest.txt").is_file());
    let loose = rgae(dir.path(), &["gradcheck", "--config", &cfg, "--tolerance", "1e-4"]);
    ok(&loose);
}
