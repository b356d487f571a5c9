//! Single pipeline entry point. Every stage is a subcommand sharing the
//! uniform flags `--config`, `--seed`, `--out`, `--ckpt`, `--router` and
//! `--manifest`; artifacts embed the resolved configuration and tool version.

mod report;
mod selftest;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use lorair_core::backbone::{load_backbone, FrozenEncoder};
use lorair_core::config::RunConfig;
use lorair_core::metrics::MetricReport;
use lorair_core::router::{load_router, save_router, Router};
use lorair_core::synth::CorpusManifest;
use lorair_core::train::{self, Checkpoint};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "lorair", version, about = "All-in-one image restoration pipeline")]
struct Cli {
    /// TOML run configuration; desk-scale defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; every stage derives its own stream from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory for the produced artifact.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Restoration checkpoint directory (input).
    #[arg(long, global = true)]
    ckpt: Option<PathBuf>,
    /// Trained router directory (input).
    #[arg(long, global = true)]
    router: Option<PathBuf>,
    /// Corpus manifest JSON (its directory is the corpus root).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize the degradation corpus and its split manifests.
    Synth,
    /// Train the degradation router head on frozen encoder features.
    TrainRouter,
    /// Stage 1: train the full restoration network.
    Pretrain,
    /// Stage 2: train the low-rank expert bank on a stage-1 checkpoint.
    Finetune,
    /// Score a checkpoint + router over a manifest split.
    Eval,
    /// Render plots and a text summary from an evaluation report.
    Report,
    /// Run the in-tree invariant suite; prints pass/fail per property.
    Selftest,
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    if std::env::var("LORAIR_DETERMINISTIC").as_deref() == Ok("1") {
        // Every kernel in this tree is already deterministic; the variable is
        // honored by never spawning nondeterministic work.
        eprintln!("deterministic mode requested (all kernels are deterministic by construction)");
    }
    match cli.cmd {
        Cmd::Synth => synth(&cli),
        Cmd::TrainRouter => train_router(&cli),
        Cmd::Pretrain => pretrain(&cli),
        Cmd::Finetune => finetune(&cli),
        Cmd::Eval => eval(&cli),
        Cmd::Report => report::run(cli.out.as_deref(), cli.ckpt.as_deref()),
        Cmd::Selftest => selftest::run(),
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    match &cli.config {
        Some(p) => Ok(RunConfig::load(p)?),
        None => {
            let mut cfg = RunConfig::default();
            cfg.resolve();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn need<'a>(flag: &'a Option<PathBuf>, name: &str) -> anyhow::Result<&'a Path> {
    flag.as_deref()
        .with_context(|| format!("--{name} is required for this subcommand"))
}

/// Load the manifest named by `--manifest`; the corpus root is its directory.
fn load_manifest(path: &Path) -> anyhow::Result<(PathBuf, CorpusManifest)> {
    let dir = path
        .parent()
        .context("--manifest has no parent directory")?
        .to_path_buf();
    let m = CorpusManifest::load(path)?;
    Ok((dir, m))
}

/// Load a saved router and check it was trained against the same encoder.
fn load_router_checked(
    dir: &Path,
    encoder: &FrozenEncoder,
) -> anyhow::Result<Router> {
    let (router, encoder_checksum) = load_router(dir)?;
    if encoder_checksum != encoder.checksum() {
        bail!(
            "encoder: router at {} was trained against a different encoder \
             (checksum {} != {})",
            dir.display(),
            encoder_checksum,
            encoder.checksum()
        );
    }
    Ok(router)
}

/// Write the resolved config echo + tool version next to an artifact.
fn write_provenance(dir: &Path, cfg: &RunConfig, seed: u64) -> anyhow::Result<()> {
    let doc = serde_json::json!({
        "tool_version": VERSION,
        "seed": seed,
        "config": serde_json::from_str::<serde_json::Value>(&cfg.echo())?,
    });
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("run_config.json"),
        serde_json::to_string_pretty(&doc)? + "\n",
    )?;
    Ok(())
}

fn synth(cli: &Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli)?;
    let out = need(&cli.out, "out")?;
    let manifests = lorair_core::synth::build_corpus(&cfg.data, out, cli.seed)?;
    write_provenance(out, &cfg, cli.seed)?;
    for m in &manifests {
        println!("{}: {} pairs", m.split, m.entries.len());
    }
    Ok(())
}

fn train_router(cli: &Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli)?;
    let out = need(&cli.out, "out")?;
    let (dir, train_m) = load_manifest(need(&cli.manifest, "manifest")?)?;
    let holdout = CorpusManifest::load(&dir.join("manifest_val.json"))?;
    let encoder = load_backbone(&cfg.encoder)?;
    let before = encoder.checksum();
    let mut router = Router::init(
        cfg.data.n(),
        encoder.embed_dim(),
        cfg.encoder.input_size,
        cfg.ablation.high_res,
        lorair_core::seeds::derive(cli.seed, "router-init", 0),
    );
    let report = lorair_core::router::train_router(
        &encoder, &mut router, &dir, &train_m, &holdout, &cfg.router, cli.seed,
    )?;
    assert_eq!(encoder.checksum(), before, "frozen encoder drifted");
    save_router(&router, &before, out)?;
    write_provenance(out, &cfg, cli.seed)?;
    std::fs::write(
        out.join("train_report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    println!(
        "router trained: {} steps, loss {:.4}, train acc {:.3}, holdout acc {:.3}",
        report.steps, report.final_loss, report.train_accuracy, report.holdout_accuracy
    );
    Ok(())
}

fn pretrain(cli: &Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli)?;
    let out = need(&cli.out, "out")?;
    let (dir, train_m) = load_manifest(need(&cli.manifest, "manifest")?)?;
    let encoder = load_backbone(&cfg.encoder)?;
    let router = load_router_checked(need(&cli.router, "router")?, &encoder)?;
    let ckpt = train::pretrain(
        cfg.net.clone(),
        &cfg.stage.pretrain,
        &dir,
        &train_m,
        &encoder,
        &router,
        cli.seed,
        &cfg.echo(),
    )?;
    ckpt.save(out)?;
    write_provenance(out, &cfg, cli.seed)?;
    let last = ckpt.history.losses.last().copied().unwrap_or(f64::NAN);
    println!("pretrain done: {} steps, final loss {last:.4}", ckpt.step);
    Ok(())
}

fn finetune(cli: &Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli)?;
    if !cfg.ablation.experts {
        bail!("ablation.experts = false: this arm has no expert stage to train");
    }
    let out = need(&cli.out, "out")?;
    let (dir, train_m) = load_manifest(need(&cli.manifest, "manifest")?)?;
    let encoder = load_backbone(&cfg.encoder)?;
    let router = load_router_checked(need(&cli.router, "router")?, &encoder)?;
    let stage1 = Checkpoint::load(need(&cli.ckpt, "ckpt")?)?;
    let ckpt = train::finetune(
        &stage1,
        &cfg.moe,
        &cfg.stage.finetune,
        &dir,
        &train_m,
        &encoder,
        &router,
        cli.seed,
        &cfg.echo(),
    )?;
    ckpt.save(out)?;
    write_provenance(out, &cfg, cli.seed)?;
    let last = ckpt.history.losses.last().copied().unwrap_or(f64::NAN);
    println!("finetune done: {} steps, final loss {last:.4}", ckpt.step);
    Ok(())
}

fn eval(cli: &Cli) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(need(&cli.ckpt, "ckpt")?)?;
    // Fall back to the configuration the checkpoint was trained with.
    let cfg: RunConfig = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => serde_json::from_str(&ckpt.config_echo)
            .context("checkpoint carries no parseable config echo; pass --config")?,
    };
    let out = need(&cli.out, "out")?;
    let (dir, manifest) = load_manifest(need(&cli.manifest, "manifest")?)?;
    let encoder = load_backbone(&cfg.encoder)?;
    let router = load_router_checked(need(&cli.router, "router")?, &encoder)?;
    let report = lorair_core::metrics::evaluate(&ckpt, &encoder, &router, &dir, &manifest)?;
    std::fs::create_dir_all(out)?;
    report.save(&out.join("report.json"), &out.join("report.csv"))?;
    write_provenance(out, &cfg, cli.seed)?;
    print_report(&report);
    Ok(())
}

fn print_report(r: &MetricReport) {
    for (kind, a) in &r.per_kind {
        println!(
            "{kind:30} n={:3}  psnr {:6.2} dB (lq {:6.2})  ssim {:.4}",
            a.count, a.mean_psnr_db, a.baseline_mean_psnr_db, a.mean_ssim
        );
    }
    println!(
        "overall: psnr {:.2} dB (lq {:.2}), ssim {:.4} over {} images",
        r.overall.mean_psnr_db,
        r.overall.baseline_mean_psnr_db,
        r.overall.mean_ssim,
        r.overall.count
    );
}
