use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fsfm::diagnostics::AttentionStats;
use fsfm::facedata::DatasetManifest;
use serde_json::Value;

fn fsfm() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fsfm"));
    cmd.env_remove("FSFM_SEED").env("RUST_LOG", "warn");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn ok(cmd: &mut Command) -> Output {
    let out = run(cmd);
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/pretrain_smoke.json")
}

fn fixtures(dir: &Path, n: usize, labeled: bool) -> PathBuf {
    let out = dir.join("fx");
    let mut cmd = fsfm();
    cmd.args(["make-fixtures", "--n", &n.to_string(), "--size", "64", "--out"]).arg(&out);
    if labeled {
        cmd.arg("--labeled");
    }
    ok(&mut cmd);
    out.join("manifest.json")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = run(fsfm().arg("bogus"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(fsfm().args(["mask-sample", "--nope"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_ratio_is_a_validation_error() {
    let out = run(fsfm().args(["mask-sample", "--ratio", "1.5"]));
    assert_eq!(out.status.code(), Some(3));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "validation");
}

#[test]
fn unreadable_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(fsfm()
        .args(["pretrain", "--config", "/nonexistent/cfg.json", "--manifest", "m.json", "--out"])
        .arg(dir.path()));
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unknown_config_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"epochs": 1, "effective_batch": 8, "learning_rate": 1}"#).unwrap();
    let out = run(fsfm()
        .args(["pretrain", "--manifest", "m.json", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path()));
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn mask_sample_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a/masks.json");
    let b = dir.path().join("b/masks.json");
    for p in [&a, &b] {
        ok(fsfm().args(["mask-sample", "--strategy", "crfr_p", "--ratio", "0.75", "--seed", "1", "--out"]).arg(p));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let (ra, rb) = (json(&dir.path().join("a/run.json")), json(&dir.path().join("b/run.json")));
    assert_eq!(ra["run_id"], rb["run_id"]);
    assert_eq!(ra["config"], rb["config"]);
    let v = json(&a);
    let m: Vec<u8> = serde_json::from_value(v["M"].clone()).unwrap();
    let fr: Vec<u8> = serde_json::from_value(v["M_fr"].clone()).unwrap();
    assert_eq!(m.len(), 64);
    assert_eq!(m.iter().map(|&x| x as usize).sum::<usize>(), 48);
    assert!(m.iter().zip(&fr).all(|(&x, &y)| x >= y));
    assert!(v["fr"].is_string());

    let other = ok(fsfm().args(["mask-sample", "--seed", "2"]));
    let other: Value = serde_json::from_slice(&other.stdout).unwrap();
    assert_ne!(other["M"], v["M"]);
}

#[test]
fn seed_env_overrides_default_and_flag_wins() {
    let flag = ok(fsfm().args(["mask-sample", "--seed", "5"])).stdout;
    let env = ok(fsfm().env("FSFM_SEED", "5").arg("mask-sample")).stdout;
    assert_eq!(flag, env);
    let both = ok(fsfm().env("FSFM_SEED", "9").args(["mask-sample", "--seed", "5"])).stdout;
    assert_eq!(flag, both);
    let bad = run(fsfm().env("FSFM_SEED", "five").arg("mask-sample"));
    assert_eq!(bad.status.code(), Some(3));
}

#[test]
fn mask_sample_reads_image_and_parsing() {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path(), 2, false);
    let fx = dir.path().join("fx");
    let overlay = dir.path().join("overlay.png");
    let out = ok(fsfm()
        .args(["mask-sample", "--strategy", "frp", "--image"])
        .arg(fx.join("images/face_001.png"))
        .arg("--parsing")
        .arg(fx.join("parsing/face_001.fspm"))
        .arg("--overlay")
        .arg(&overlay));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["strategy"], "frp");
    assert!(v["fr"].is_null());
    assert!(overlay.is_file());
}

#[test]
fn make_fixtures_passes_manifest_validation() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixtures(dir.path(), 32, false);
    let m = DatasetManifest::load(&manifest).unwrap();
    m.validate().unwrap();
    assert_eq!(m.len(), 32);
    let run = json(&dir.path().join("fx/run.json"));
    assert_eq!(run["command"], "make-fixtures");
}

#[test]
fn pretrain_is_reproducible_and_feeds_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixtures(dir.path(), 16, true);
    let mut outs = Vec::new();
    for name in ["r1", "r2"] {
        let out = dir.path().join(name);
        ok(fsfm()
            .args(["pretrain", "--max-steps", "3", "--config"])
            .arg(smoke_config())
            .arg("--manifest")
            .arg(&manifest)
            .arg("--out")
            .arg(&out));
        outs.push(out);
    }
    let ckpt = |d: &Path| std::fs::read(d.join("checkpoint-final.safetensors")).unwrap();
    assert_eq!(ckpt(&outs[0]), ckpt(&outs[1]));
    let steps = |d: &Path| -> Vec<Value> {
        std::fs::read_to_string(d.join("steps.jsonl"))
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wall_time_s");
                v
            })
            .collect()
    };
    assert_eq!(steps(&outs[0]).len(), 3);
    assert_eq!(steps(&outs[0]), steps(&outs[1]));
    let run = json(&outs[0].join("run.json"));
    assert_eq!(run["config"]["mask"]["strategy"], "crfr_p");
    assert_eq!(json(&outs[1].join("run.json"))["run_id"], run["run_id"]);

    let final_ckpt = outs[0].join("checkpoint-final.safetensors");
    let stats_path = dir.path().join("attn/stats.json");
    ok(fsfm()
        .args(["attn-stats", "--limit", "3", "--checkpoint"])
        .arg(&final_ckpt)
        .arg("--manifest")
        .arg(&manifest)
        .arg("--out")
        .arg(&stats_path));
    let stats: AttentionStats = serde_json::from_value(json(&stats_path)).unwrap();
    assert_eq!(stats.samples, 3);
    for block in &stats.blocks {
        for (i, row) in block.kl.iter().enumerate() {
            assert_eq!(row[i], 0.0);
        }
    }

    let fx = dir.path().join("fx");
    let panel = dir.path().join("rec/panel.png");
    ok(fsfm()
        .args(["reconstruct", "--checkpoint"])
        .arg(&final_ckpt)
        .arg("--image")
        .arg(fx.join("images/face_000.png"))
        .arg("--parsing")
        .arg(fx.join("parsing/face_000.fspm"))
        .arg("--out")
        .arg(&panel));
    let (w, h) = image_dims(&panel);
    assert_eq!((w, h), (192, 64));

    let ft_cfg = dir.path().join("ft.json");
    let cfg = serde_json::json!({ "checkpoint": final_ckpt, "epochs": 2, "batch": 4 });
    std::fs::write(&ft_cfg, cfg.to_string()).unwrap();
    let ft_out = dir.path().join("ft");
    ok(fsfm()
        .args(["finetune", "--config"])
        .arg(&ft_cfg)
        .arg("--manifest")
        .arg(&manifest)
        .arg("--eval-manifest")
        .arg(&manifest)
        .arg("--out")
        .arg(&ft_out));
    let scores = ft_out.join("scores.jsonl");
    assert_eq!(std::fs::read_to_string(&scores).unwrap().lines().count(), 16);
    let report = ok(fsfm().arg("evaluate").arg("--scores").arg(&scores));
    let report: Value = serde_json::from_slice(&report.stdout).unwrap();
    let auc = report["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
}

fn image_dims(path: &Path) -> (u32, u32) {
    let bytes = std::fs::read(path).unwrap();
    assert_eq!(&bytes[1..4], b"PNG");
    let w = u32::from_be_bytes(bytes[16..20].try_into().unwrap());
    let h = u32::from_be_bytes(bytes[20..24].try_into().unwrap());
    (w, h)
}

#[test]
fn evaluate_groups_by_video() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.jsonl");
    let lines = [
        r#"{"id":"a0","video_id":"a","score":0.9,"label":1}"#,
        r#"{"id":"a1","video_id":"a","score":0.1,"label":1}"#,
        r#"{"id":"b0","video_id":"b","score":0.4,"label":0}"#,
        r#"{"id":"b1","video_id":"b","score":0.4,"label":0}"#,
    ];
    std::fs::write(&scores, lines.join("\n")).unwrap();
    let out_path = dir.path().join("report.json");
    ok(fsfm()
        .args(["evaluate", "--group-by", "video", "--scores"])
        .arg(&scores)
        .arg("--out")
        .arg(&out_path));
    let v = json(&out_path);
    // video means 0.5 vs 0.4; frame AUC is 0.5
    assert_eq!(v["auc"], 1.0);
    assert_eq!(v["units"], 2);
    assert_eq!(v["report"]["frame_auc"], 0.5);
    assert!(dir.path().join("run.json").is_file());
}

#[test]
fn evaluate_rejects_single_class() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.jsonl");
    std::fs::write(&scores, r#"{"id":"a","score":0.2,"label":1}"#).unwrap();
    let out = run(fsfm().arg("evaluate").arg("--scores").arg(&scores));
    assert!(matches!(out.status.code(), Some(3) | Some(4)));
}
