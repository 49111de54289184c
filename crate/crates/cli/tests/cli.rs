//! End-to-end checks of the `smt` binary: exit-code contract, flag
//! validation, artifact layout, and a miniature train/eval/export/analyze
//! round trip driven entirely through the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smt() -> Command {
    Command::new(env!("CARGO_BIN_EXE_smt"))
}

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("smt-cli-{tag}-{}", std::process::id()));
    if dir.exists() {
        fs::remove_dir_all(&dir).unwrap();
    }
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process terminated by signal")
}

/// Minimal hyperparameter file for fast micro runs.
fn write_spec(dir: &Path, steps: usize) -> PathBuf {
    let path = dir.join("spec.json");
    let body = format!(
        r#"{{
  "steps": {steps}, "batch_size": 8,
  "base_lr": 1e-3, "warmup_steps": 2, "warmup_lr": 1e-6,
  "min_lr": 1e-5, "weight_decay": 0.05, "clip_norm": 5.0,
  "drop_path_max": 0.05, "seed": 7
}}"#
    );
    fs::write(&path, body).unwrap();
    path
}

/// A deterministic 64x64 probe image in canonical binary form.
fn write_probe_ppm(dir: &Path) -> PathBuf {
    let path = dir.join("probe.ppm");
    let mut bytes = b"P6\n64 64\n255\n".to_vec();
    let mut state = 0x1234_5678_u32;
    for _ in 0..64 * 64 * 3 {
        state = state.wrapping_mul(1_664_525).wrapping_add(1_013_904_223);
        bytes.push((state >> 24) as u8);
    }
    fs::write(&path, bytes).unwrap();
    path
}

// ====================================================================
// Usage contract
// ====================================================================

#[test]
fn usage_errors_exit_two() {
    let out = smt().arg("no-such-subcommand").output().unwrap();
    assert_eq!(code(&out), 2);

    let out = smt().args(["summarize", "--bogus-flag"]).output().unwrap();
    assert_eq!(code(&out), 2);

    // A model source is mandatory, and only one may be given.
    let out = smt().arg("summarize").output().unwrap();
    assert_eq!(code(&out), 2);
    let out = smt()
        .args(["summarize", "--preset", "smt-t", "--config", "x.json"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);

    // The stage flag is 1-based and range-checked.
    let out = smt()
        .args([
            "export-maps",
            "--ckpt", "x.ckpt",
            "--image", "x.ppm",
            "--stage", "5",
            "--out", "y",
        ])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    let out = smt()
        .args([
            "export-maps",
            "--ckpt", "x.ckpt",
            "--image", "x.ppm",
            "--stage", "0",
            "--out", "y",
        ])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn domain_errors_exit_one() {
    let out = smt().args(["summarize", "--preset", "no-such"]).output().unwrap();
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    for name in ["smt-m", "smt-t", "smt-s", "smt-b", "smt-l", "smt-micro"] {
        assert!(err.contains(name), "preset listing missing {name}: {err}");
    }

    // Input sizes that do not divide through the stages are refused.
    let out = smt()
        .args(["summarize", "--preset", "smt-t", "--input-size", "100"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);

    let out = smt()
        .args(["ablation", "--family", "nope", "--out", "/tmp/never.csv"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("aggregation"), "should list families");

    // Unknown synthetic task names are usage errors.
    let out = smt()
        .args(["eval", "--ckpt", "x.ckpt", "--data", "synth:frequency"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

// ====================================================================
// Analysis commands
// ====================================================================

#[test]
fn summarize_prints_and_exports_totals() {
    let dir = scratch("summarize");
    let csv_path = dir.join("table.csv");
    let out = smt()
        .args(["summarize", "--preset", "smt-t"])
        .args(["--csv".as_ref(), csv_path.as_os_str()])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("smt-t"));
    assert!(text.contains("11484712"), "total missing: {text}");
    assert!(text.contains("stage3"));

    let csv = fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "section,resolution,dim,depth,plan,params,flops");
    assert_eq!(lines.len(), 8, "header, stem, four stages, head, total");
    assert!(lines[7].starts_with("total"));
    assert!(lines[7].contains("11484712"));
}

#[test]
fn summarize_accepts_config_files_and_env_logging() {
    let dir = scratch("config-file");
    // Round-trip a preset through its JSON form.
    let cfg = smt_core::config::preset("smt-micro").unwrap();
    let path = dir.join("model.json");
    fs::write(&path, smt_core::config::serialize_config(&cfg)).unwrap();

    let out = smt()
        .arg("summarize")
        .args(["--config".as_ref(), path.as_os_str()])
        .args(["--input-size", "64"])
        .env("SMT_LOG", "debug")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("smt-micro"));
    assert!(stdout(&out).contains("326978"));
}

#[test]
fn ablation_emits_cost_columns_only() {
    let dir = scratch("ablation");
    let csv_path = dir.join("agg.csv");
    let out = smt()
        .args(["ablation", "--family", "aggregation"])
        .args(["--out".as_ref(), csv_path.as_os_str()])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let csv = fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,params,flops");
    assert_eq!(lines.len(), 6, "five aggregation variants");
    let params: Vec<u64> = lines[1..]
        .iter()
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    // none < single_linear < two_linears <= saa < ibn
    assert!(params.windows(2).all(|w| w[0] <= w[1]));
    assert!(params[0] < params[1] && params[3] < params[4]);
    // Cost table only: no accuracy column anywhere.
    assert!(!csv.contains("accuracy"));
}

#[test]
fn gradcheck_passes_on_clean_build() {
    let out = smt()
        .args(["gradcheck", "--preset", "smt-micro", "--seed", "1"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("gradcheck passed"));
}

// ====================================================================
// Train / eval / export round trip
// ====================================================================

#[test]
fn train_eval_export_distance_round_trip() {
    let dir = scratch("roundtrip");
    let spec = write_spec(&dir, 6);
    let run_dir = dir.join("run");

    let out = smt()
        .args(["train", "--preset", "smt-micro"])
        .args(["--data", "synth:scale_discrimination:901"])
        .args(["--synth-per-class", "16"])
        .args(["--spec".as_ref(), spec.as_os_str()])
        .args(["--out".as_ref(), run_dir.as_os_str()])
        .args(["--eval-data", "synth:scale_discrimination:902"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("final accuracy"));

    // Artifacts: metrics with the documented header, both checkpoints.
    let metrics = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "step,loss,lr,grad_norm,wall_ms");
    assert_eq!(lines.len(), 7, "header plus six steps");
    assert!(run_dir.join("final.ckpt").is_file());
    assert!(run_dir.join("best.ckpt").is_file());
    let ckpt = run_dir.join("final.ckpt");

    // Evaluate the checkpoint on fresh synthetic data.
    let out = smt()
        .args(["eval".as_ref(), "--ckpt".as_ref(), ckpt.as_os_str()])
        .args(["--data", "synth:scale_discrimination:903"])
        .args(["--synth-per-class", "8", "--batch", "8"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("accuracy"), "{}", stdout(&out));

    // Export the modulation maps of stage 2 (1-based), with heads.
    let probe = write_probe_ppm(&dir);
    let maps_dir = dir.join("maps");
    let out = smt()
        .args(["export-maps".as_ref(), "--ckpt".as_ref(), ckpt.as_os_str()])
        .args(["--image".as_ref(), probe.as_os_str()])
        .args(["--stage", "2", "--upsample", "bilinear", "--per-head"])
        .args(["--out".as_ref(), maps_dir.as_os_str()])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mut grids: Vec<String> = fs::read_dir(&maps_dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".grid"))
        .collect();
    grids.sort();
    assert!(
        grids.iter().any(|n| n.contains("modulator")),
        "missing modulator map: {grids:?}"
    );
    assert!(
        grids.iter().any(|n| n.contains("head0")),
        "missing per-head map: {grids:?}"
    );
    for grid in &grids {
        let sidecar = maps_dir.join(grid.replace(".grid", ".json"));
        assert!(sidecar.is_file(), "no sidecar for {grid}");
    }
    // The grids round-trip through the reader with matching metadata.
    let (meta, data) = smt_core::io::read_grid(&maps_dir.join(&grids[0])).unwrap();
    assert_eq!(meta.model, "smt-micro");
    assert_eq!(data.len(), meta.height * meta.width);

    // Attention distances for the same checkpoint.
    let dist_csv = dir.join("dist.csv");
    let out = smt()
        .args(["attn-distance".as_ref(), "--ckpt".as_ref(), ckpt.as_os_str()])
        .args(["--data", "synth:scale_discrimination:904"])
        .args(["--synth-per-class", "4", "--batch", "4"])
        .args(["--out".as_ref(), dist_csv.as_os_str()])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(&dist_csv).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "stage,block,head,distance_px");
    // smt-micro carries attention in stages 3 and 4 (8 and 16 heads).
    assert_eq!(lines.len(), 1 + 8 + 16);
    for line in &lines[1..] {
        let d: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        assert!(d.is_finite() && d >= 0.0);
    }

    // Resume training from the final checkpoint for a few more steps.
    let spec12 = write_spec(&dir, 12);
    let resumed_dir = dir.join("resumed");
    let out = smt()
        .args(["train", "--preset", "smt-micro"])
        .args(["--data", "synth:scale_discrimination:901"])
        .args(["--synth-per-class", "16"])
        .args(["--spec".as_ref(), spec12.as_os_str()])
        .args(["--out".as_ref(), resumed_dir.as_os_str()])
        .args(["--resume".as_ref(), ckpt.as_os_str()])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("trained 6 steps"), "{}", stdout(&out));
}

#[test]
fn bench_reports_throughput() {
    let out = smt()
        .args(["bench", "--preset", "smt-micro"])
        .args(["--batch", "2", "--reps", "2", "--input-size", "64"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("ms/pass"), "{text}");
    assert!(text.contains("images/s"), "{text}");
}
