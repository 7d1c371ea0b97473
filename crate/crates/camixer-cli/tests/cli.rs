//! End-to-end checks of the command-line surface: exit codes, determinism,
//! and the per-command output contracts.

use std::path::Path;
use std::process::{Command, Output};

fn camixer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_camixer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny_config(extra: &str) -> String {
    format!(
        r#"{{
  "model": {{"channels": 8, "window": 4, "groups": [1, 1], "scale": 2, "offset_range": 2.0, "rho": 0.25}},
  "train": {{"steps": 12, "patch_size": 8, "seed": 1, "log_every": 4}},
  "data": {{"kind": "half-split", "size": 16}}{extra}
}}"#
    )
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let p = dir.join("run.json");
    std::fs::write(&p, tiny_config(extra)).unwrap();
    p
}

fn train_into(dir: &Path, out: &str) -> std::path::PathBuf {
    let cfg = write_config(dir, "");
    let out_dir = dir.join(out);
    let r = camixer(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()]);
    assert!(r.status.success(), "train failed: {}", String::from_utf8_lossy(&r.stderr));
    out_dir
}

#[test]
fn unknown_config_key_exits_2_with_key_path() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, r#"{"train": {"stpes": 5}}"#).unwrap();
    let r = camixer(&["train", "--config", p.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("train:") && err.contains("stpes"), "{err}");
}

#[test]
fn missing_data_dir_exits_3_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#", "io": {"out_dir": "unused"}"#);
    // patch in a nonexistent data dir
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace(r#""size": 16"#, r#""size": 16, "dir": "/nonexistent/path""#);
    std::fs::write(&cfg, text).unwrap();
    let out = dir.path().join("out");
    let r = camixer(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("/nonexistent/path"));
    assert!(!out.join("metrics.csv").exists(), "no artifacts before the data check");
}

#[test]
fn train_writes_manifest_checkpoints_and_deterministic_csv() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_into(dir.path(), "run_a");
    let b = train_into(dir.path(), "run_b");
    for out in [&a, &b] {
        assert!(out.join("manifest.json").exists());
        assert!(out.join("checkpoint.camx").exists());
        assert!(out.join("checkpoint_step11.camx").exists(), "final milestone checkpoint");
    }
    let ca = std::fs::read(a.join("metrics.csv")).unwrap();
    let cb = std::fs::read(b.join("metrics.csv")).unwrap();
    assert_eq!(ca, cb, "seed-pinned runs must log identically");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["config_hash"].is_string());
    assert!(manifest["code_version"].is_string());
}

#[test]
fn infer_is_deterministic_and_reports_routing() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_into(dir.path(), "run");
    let lr = dir.path().join("in.ppm");
    let r = camixer(&["synth", "--size", "32", "--scale", "2", "--hr", dir.path().join("hr.ppm").to_str().unwrap(), "--lr", lr.to_str().unwrap()]);
    assert!(r.status.success());
    let ckpt = out.join("checkpoint.camx");
    let sr1 = dir.path().join("sr1.ppm");
    let sr2 = dir.path().join("sr2.ppm");
    for srp in [&sr1, &sr2] {
        let r = camixer(&["infer", "--checkpoint", ckpt.to_str().unwrap(), "--input", lr.to_str().unwrap(), "--output", srp.to_str().unwrap(), "--gamma", "0.5"]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        let txt = String::from_utf8_lossy(&r.stdout).into_owned();
        assert!(txt.contains("block 0: realized gamma"), "{txt}");
        assert!(txt.contains("measured MAdds:"), "{txt}");
    }
    assert_eq!(std::fs::read(&sr1).unwrap(), std::fs::read(&sr2).unwrap());
}

#[test]
fn infer_gamma_zero_reports_zero_attention() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_into(dir.path(), "run");
    let lr = dir.path().join("in.ppm");
    camixer(&["synth", "--size", "32", "--scale", "2", "--hr", dir.path().join("h.ppm").to_str().unwrap(), "--lr", lr.to_str().unwrap()]);
    let sr = dir.path().join("sr.ppm");
    let r = camixer(&["infer", "--checkpoint", out.join("checkpoint.camx").to_str().unwrap(), "--input", lr.to_str().unwrap(), "--output", sr.to_str().unwrap(), "--gamma", "0"]);
    assert!(r.status.success());
    let txt = String::from_utf8_lossy(&r.stdout).into_owned();
    assert!(txt.contains("realized gamma 0.0000"), "{txt}");
}

#[test]
fn mask_dump_extremes_are_solid_images() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_into(dir.path(), "run");
    let lr = dir.path().join("in.ppm");
    camixer(&["synth", "--size", "32", "--scale", "2", "--hr", dir.path().join("h.ppm").to_str().unwrap(), "--lr", lr.to_str().unwrap()]);
    let ckpt = out.join("checkpoint.camx");
    for (gamma, expect) in [("1.0", 255u8), ("0.0", 0u8)] {
        let md = dir.path().join(format!("masks_{gamma}"));
        let r = camixer(&["mask-dump", "--checkpoint", ckpt.to_str().unwrap(), "--input", lr.to_str().unwrap(), "--out-dir", md.to_str().unwrap(), "--blocks", "0", "--gamma", gamma]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        let bytes = std::fs::read(md.join("mask_block0.pgm")).unwrap();
        assert!(bytes.starts_with(b"P5"));
        let payload = &bytes[bytes.len() - 16 * 16..];
        assert!(payload.iter().all(|&b| b == expect), "gamma {gamma} mask not solid");
    }
    let r = camixer(&["mask-dump", "--checkpoint", ckpt.to_str().unwrap(), "--input", lr.to_str().unwrap(), "--out-dir", dir.path().join("m").to_str().unwrap(), "--blocks", "99"]);
    assert_eq!(r.status.code(), Some(2), "out-of-range block id is a config error");
}

#[test]
fn flops_reports_table_and_json_with_published_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("base.json");
    std::fs::write(&cfg, "{}").unwrap(); // defaults: C=60, M=16, x4
    let total = |gamma: &str| -> f64 {
        let r = camixer(&["flops", "--config", cfg.to_str().unwrap(), "--gamma", gamma]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        let txt = String::from_utf8_lossy(&r.stdout).into_owned();
        assert!(txt.contains("layer"), "{txt}");
        let json_start = txt.find('{').unwrap();
        let v: serde_json::Value = serde_json::from_str(&txt[json_start..]).unwrap();
        v["total_flops"].as_f64().unwrap()
    };
    let ratio = total("0.5") / total("1.0");
    assert!((ratio - 0.766).abs() < 0.03, "gamma-scaling ratio {ratio}");
}

#[test]
fn eval_identical_dirs_hits_psnr_cap_and_ssim_one() {
    let dir = tempfile::tempdir().unwrap();
    let hr_dir = dir.path().join("hr");
    std::fs::create_dir_all(&hr_dir).unwrap();
    for i in 0..2 {
        camixer(&["synth", "--size", "24", "--scale", "2", "--seed", &i.to_string(), "--hr", hr_dir.join(format!("{i}.ppm")).to_str().unwrap()]);
    }
    let r = camixer(&["eval", "--lr-dir", hr_dir.to_str().unwrap(), "--hr-dir", hr_dir.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let txt = String::from_utf8_lossy(&r.stdout).into_owned();
    assert!(txt.contains("mean: psnr 100.0000 dB, ssim 1.000000"), "{txt}");
}

#[test]
fn eval_lists_missing_pair_files_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let hr_dir = dir.path().join("hr");
    let lr_dir = dir.path().join("lr");
    std::fs::create_dir_all(&hr_dir).unwrap();
    std::fs::create_dir_all(&lr_dir).unwrap();
    camixer(&["synth", "--size", "24", "--scale", "2", "--hr", hr_dir.join("a.ppm").to_str().unwrap()]);
    let r = camixer(&["eval", "--lr-dir", lr_dir.to_str().unwrap(), "--hr-dir", hr_dir.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("a.ppm"));
}
