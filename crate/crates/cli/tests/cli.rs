//! End-to-end checks of the `lorair` binary: the built-in selftest must pass,
//! and mismatched artifacts must fail loudly with a named error.

use std::process::Command;

use lorair_core::backbone::{load_backbone, EncoderSpec};
use lorair_core::moe::MoeConfig;
use lorair_core::router::{save_router, Router, RouterConfig};
use lorair_core::synth::{build_corpus, CorpusManifest, DataConfig};
use lorair_core::train::{self, ScheduleKind, StageConfig};
use lorair_core::{net::NetConfig, router::train_router};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lorair"))
}

#[test]
fn selftest_passes() {
    let out = bin().arg("selftest").output().expect("spawn");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        out.status.success(),
        "selftest failed:\n{stdout}\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let passes = stdout.lines().filter(|l| l.starts_with("PASS ")).count();
    assert!(passes >= 5, "expected >= 5 PASS lines, got {passes}:\n{stdout}");
    assert!(!stdout.contains("FAIL"), "unexpected FAIL line:\n{stdout}");
}

#[test]
fn eval_rejects_mismatched_router() {
    let keep = tempfile::tempdir().unwrap();
    let dir = keep.path();

    // micro pipeline straight through the library
    let data = DataConfig {
        per_kind: 4,
        split: [0.5, 0.5, 0.0],
        mixed_pairs: vec![],
        mixed_per_pair: 0,
        ..DataConfig::default()
    };
    build_corpus(&data, dir, 7).unwrap();
    let train_m = CorpusManifest::load(&dir.join("manifest_train.json")).unwrap();
    let val_m = CorpusManifest::load(&dir.join("manifest_val.json")).unwrap();
    let encoder = load_backbone(&EncoderSpec::default()).unwrap();
    let mut router = Router::init(6, encoder.embed_dim(), (64, 64), true, 7);
    let rc = RouterConfig { steps: 5, ..RouterConfig::default() };
    train_router(&encoder, &mut router, dir, &train_m, &val_m, &rc, 7).unwrap();
    let pre = StageConfig { total_iters: 2, ..StageConfig::default() };
    let ckpt1 = train::pretrain(
        NetConfig::default(),
        &pre,
        dir,
        &train_m,
        &encoder,
        &router,
        7,
        "{}",
    )
    .unwrap();
    let fin = StageConfig {
        total_iters: 2,
        schedule_after: 1,
        lr_init: 1e-4,
        schedule: ScheduleKind::Step,
        ..StageConfig::default()
    };
    let ckpt2 = train::finetune(
        &ckpt1,
        &MoeConfig::default(),
        &fin,
        dir,
        &train_m,
        &encoder,
        &router,
        7,
        "{}",
    )
    .unwrap();
    let ckpt_dir = dir.join("ckpt2");
    ckpt2.save(&ckpt_dir).unwrap();

    // a router over only 2 kinds cannot drive a 6-expert checkpoint
    let rogue = Router::init(2, encoder.embed_dim(), (64, 64), true, 8);
    let rogue_dir = dir.join("rogue_router");
    save_router(&rogue, &encoder.checksum(), &rogue_dir).unwrap();

    let cfg_path = dir.join("cfg.toml");
    std::fs::write(
        &cfg_path,
        concat!(
            "[data]\n",
            "kinds = [\"gaussian-noise\", \"gaussian-blur\", \"jpeg\", \"low-light\", \"rain-streaks\", \"haze\"]\n",
            "per_kind = 4\nheight = 96\nwidth = 96\n",
            "split = [0.5, 0.5, 0.0]\nmixed_pairs = []\nmixed_per_pair = 0\n",
        ),
    )
    .unwrap();

    let out = bin()
        .args(["eval", "--config"])
        .arg(&cfg_path)
        .arg("--ckpt")
        .arg(&ckpt_dir)
        .arg("--router")
        .arg(&rogue_dir)
        .arg("--manifest")
        .arg(dir.join("manifest_val.json"))
        .arg("--out")
        .arg(dir.join("eval_bad"))
        .output()
        .expect("spawn");
    assert!(!out.status.success(), "eval with wrong router must fail");
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("does not match checkpoint"),
        "error should name the router/checkpoint mismatch, got: {err}"
    );

    // sanity: with the matching router the same invocation succeeds
    let good_dir = dir.join("router");
    save_router(&router, &encoder.checksum(), &good_dir).unwrap();
    let out = bin()
        .args(["eval", "--config"])
        .arg(&cfg_path)
        .arg("--ckpt")
        .arg(&ckpt_dir)
        .arg("--router")
        .arg(&good_dir)
        .arg("--manifest")
        .arg(dir.join("manifest_val.json"))
        .arg("--out")
        .arg(dir.join("eval_ok"))
        .output()
        .expect("spawn");
    assert!(
        out.status.success(),
        "eval with matching router failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.join("eval_ok/report.json").exists());
}
