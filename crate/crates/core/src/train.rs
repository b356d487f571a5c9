//! Two-stage training: full pre-training of the modulated restoration
//! network, then parameter-efficient fine-tuning of the expert bank alone.
//!
//! Both stages minimize the negative-PSNR loss on randomly cropped, flipped
//! and rotated patches, route every crop through the frozen router, and
//! checkpoint into the on-disk container. Training is deliberately
//! single-threaded and seeded, so identical inputs reproduce bit-identical
//! parameter maps.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD};
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::backbone::FrozenEncoder;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::image_io::{self, Image, ImageBatch};
use crate::moe::{self, MoeConfig};
use crate::net::{ModulatorKind, MoeContext, Net, NetConfig};
use crate::params::{bind, AdamW, ParamStore};
use crate::router::{self, GateDecision, Router};
use crate::seeds;
use crate::synth::CorpusManifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// Constant until `after`, then cosine decay to `lr_min` at `total_iters`.
    Cosine,
    /// Constant until `after`, then `lr_min`.
    Step,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub batch_size: usize,
    pub patch_size: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub schedule: ScheduleKind,
    /// Step at which the schedule leaves the constant phase.
    pub schedule_after: usize,
    pub total_iters: usize,
    pub weight_decay: f64,
    pub augment: bool,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            batch_size: 8,
            patch_size: 64,
            lr_init: 1e-3,
            lr_min: 1e-5,
            schedule: ScheduleKind::Cosine,
            schedule_after: 0,
            total_iters: 800,
            weight_decay: 0.0,
            augment: true,
        }
    }
}

impl StageConfig {
    /// Desk default for the fine-tuning stage: step decay 1e-4 -> 1e-5.
    pub fn finetune_default() -> Self {
        StageConfig {
            lr_init: 1e-4,
            schedule: ScheduleKind::Step,
            schedule_after: 300,
            total_iters: 600,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_min > self.lr_init {
            return Err(Error::Config("lr_min must be <= lr_init".into()));
        }
        if self.total_iters == 0 || self.batch_size == 0 || self.patch_size == 0 {
            return Err(Error::Config("iters, batch and patch must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate at a given optimization step.
pub fn lr_at(cfg: &StageConfig, step: usize) -> f64 {
    if step < cfg.schedule_after {
        return cfg.lr_init;
    }
    match cfg.schedule {
        ScheduleKind::Step => cfg.lr_min,
        ScheduleKind::Cosine => {
            let horizon = cfg.total_iters.saturating_sub(cfg.schedule_after).max(1);
            let phase = ((step - cfg.schedule_after) as f64 / horizon as f64).min(1.0);
            cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + (std::f64::consts::PI * phase).cos())
        }
    }
}

/// In-memory `(lq, hq)` pairs of one manifest split.
pub fn load_pairs(dir: &Path, manifest: &CorpusManifest) -> Result<Vec<(Image, Image)>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            Ok((
                image_io::load_png(&dir.join(&e.lq))?,
                image_io::load_png(&dir.join(&e.hq))?,
            ))
        })
        .collect()
}

fn rot90(img: &Image) -> Image {
    // (C, H, W) -> (C, W, H), rotating counter-clockwise
    let (c, h, w) = img.dim();
    Array3::from_shape_fn((c, w, h), |(cc, i, j)| img[(cc, j, w - 1 - i)])
}

fn flip_w(img: &Image) -> Image {
    let (c, h, w) = img.dim();
    Array3::from_shape_fn((c, h, w), |(cc, i, j)| img[(cc, i, w - 1 - j)])
}

/// Paired random crop + flip + 90-degree rotation.
fn augment<R: rand::Rng>(
    lq: &Image,
    hq: &Image,
    patch: usize,
    enable: bool,
    rng: &mut R,
) -> (Image, Image) {
    let (_, h, w) = lq.dim();
    let (oy, ox) = if h > patch || w > patch {
        (rng.gen_range(0..=h - patch), rng.gen_range(0..=w - patch))
    } else {
        (0, 0)
    };
    let mut a = lq.slice(ndarray::s![.., oy..oy + patch, ox..ox + patch]).to_owned();
    let mut b = hq.slice(ndarray::s![.., oy..oy + patch, ox..ox + patch]).to_owned();
    if enable {
        if rng.gen::<bool>() {
            a = flip_w(&a);
            b = flip_w(&b);
        }
        let rot = rng.gen_range(0..4u8);
        for _ in 0..rot {
            a = rot90(&a);
            b = rot90(&b);
        }
    }
    (a, b)
}

fn sample_batch(
    pairs: &[(Image, Image)],
    cfg: &StageConfig,
    seed: u64,
    step: usize,
) -> (ImageBatch, ImageBatch) {
    let mut rng = seeds::rng(seed, "train-batch", step as u64);
    use rand::Rng;
    let mut lqs = Vec::with_capacity(cfg.batch_size);
    let mut hqs = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let idx = rng.gen_range(0..pairs.len());
        let (a, b) = augment(&pairs[idx].0, &pairs[idx].1, cfg.patch_size, cfg.augment, &mut rng);
        lqs.push(a);
        hqs.push(b);
    }
    (image_io::batch(&lqs), image_io::batch(&hqs))
}

/// Route a batch of training crops through the frozen router in one encoder
/// pass. Valid when the crop size equals the router window, in which case the
/// downsample path and the single sliding window see identical pixels.
pub fn route_crops(
    encoder: &FrozenEncoder,
    router: &Router,
    crops: &ImageBatch,
    k: usize,
) -> Result<(Array2<f32>, Vec<GateDecision>)> {
    let (bs, _, h, w) = crops.dim();
    if (h, w) != router.window {
        return Err(Error::ShapeMismatch {
            expected: format!("crops of {:?}", router.window),
            got: format!("({h}, {w})"),
        });
    }
    let e = encoder.encode_batch(crops)?;
    let mut feats = Array2::zeros((bs, 2 * router.c_clip));
    for b in 0..bs {
        feats.slice_mut(ndarray::s![b, ..router.c_clip]).assign(&e.row(b));
        feats.slice_mut(ndarray::s![b, router.c_clip..]).assign(&e.row(b));
    }
    let mut tape = Tape::new();
    let bound = bind(&mut tape, &router.params);
    let fv = tape.constant(feats.into_dyn());
    let (e_clip, logits) = router.head_forward(&mut tape, &bound, fv);
    let ec: Array2<f32> = tape.value(e_clip).clone().into_dimensionality().unwrap();
    let lg: Array2<f32> = tape.value(logits).clone().into_dimensionality().unwrap();
    let gates = (0..bs)
        .map(|b| router::top_k_gate(&lg.row(b).to_owned(), k))
        .collect::<Result<Vec<_>>>()?;
    Ok((ec, gates))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
}

/// One checkpointable training artifact.
pub struct Checkpoint {
    pub stage: String,
    pub net: Net<f32>,
    pub stage_cfg: StageConfig,
    pub moe_cfg: Option<MoeConfig>,
    pub seed: u64,
    pub step: u64,
    pub opt_state: BTreeMap<String, ArrayD<f32>>,
    pub router_checksum: String,
    pub stage1_checksum: Option<String>,
    /// Resolved run configuration echo (free-form JSON).
    pub config_echo: String,
    pub history: TrainHistory,
}

impl Checkpoint {
    pub fn params_checksum(&self) -> String {
        self.net.params.checksum_all()
    }

    /// Checksum of the non-expert (stage-1) parameters only.
    pub fn base_checksum(&self) -> String {
        let paths: Vec<&str> = self
            .net
            .params
            .paths()
            .filter(|p| !p.starts_with("experts/"))
            .collect();
        self.net.params.checksum_of(paths.into_iter())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut c = Container::new(&self.stage);
        for (k, v) in self.net.params.iter() {
            c.arrays.insert(k.to_string(), v.clone());
        }
        for (k, v) in &self.opt_state {
            c.arrays.insert(format!("opt/{k}"), v.clone());
        }
        c.meta.insert("net_cfg".into(), serde_json::json!(serde_json::to_string(&self.net.cfg)?));
        c.meta.insert("stage_cfg".into(), serde_json::json!(serde_json::to_string(&self.stage_cfg)?));
        if let Some(m) = &self.moe_cfg {
            c.meta.insert("moe_cfg".into(), serde_json::json!(serde_json::to_string(m)?));
        }
        c.meta.insert("seed".into(), serde_json::json!(self.seed));
        c.meta.insert("step".into(), serde_json::json!(self.step));
        c.meta.insert("router_checksum".into(), serde_json::json!(self.router_checksum));
        if let Some(s) = &self.stage1_checksum {
            c.meta.insert("stage1_checksum".into(), serde_json::json!(s));
        }
        c.meta.insert("config_echo".into(), serde_json::json!(self.config_echo));
        c.meta.insert("history".into(), serde_json::json!(serde_json::to_string(&self.history)?));
        c.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let c = Container::load(dir)?;
        let net_cfg: NetConfig = serde_json::from_str(&c.meta_str("net_cfg")?)?;
        let stage_cfg: StageConfig = serde_json::from_str(&c.meta_str("stage_cfg")?)?;
        let moe_cfg: Option<MoeConfig> = match c.meta.get("moe_cfg") {
            Some(v) => Some(serde_json::from_str(v.as_str().unwrap_or_default())?),
            None => None,
        };
        let mut params = ParamStore::new();
        let mut opt_state = BTreeMap::new();
        let mut has_experts = false;
        for (k, v) in &c.arrays {
            if let Some(rest) = k.strip_prefix("opt/") {
                opt_state.insert(rest.to_string(), v.clone());
            } else {
                if k.starts_with("experts/") {
                    has_experts = true;
                }
                params.insert(k, v.clone(), false);
            }
        }
        let experts = if has_experts {
            Some(moe_cfg.as_ref().map(|m| m.n).ok_or_else(|| {
                Error::CorruptIndex("experts present but no bank config".into())
            })?)
        } else {
            None
        };
        let history = match c.meta.get("history") {
            Some(v) => serde_json::from_str(v.as_str().unwrap_or("{}"))?,
            None => TrainHistory { losses: vec![], lrs: vec![] },
        };
        Ok(Checkpoint {
            stage: c.stage.clone(),
            net: Net { cfg: net_cfg, params, experts },
            stage_cfg,
            moe_cfg,
            seed: c.meta_u64("seed")?,
            step: c.meta_u64("step")?,
            opt_state,
            router_checksum: c.meta_str("router_checksum")?,
            stage1_checksum: c.meta.get("stage1_checksum").and_then(|v| v.as_str()).map(str::to_string),
            config_echo: c.meta_str("config_echo").unwrap_or_default(),
            history,
        })
    }
}

fn run_stage(
    net: &mut Net<f32>,
    encoder: &FrozenEncoder,
    router: &Router,
    pairs: &[(Image, Image)],
    cfg: &StageConfig,
    moe_cfg: Option<&MoeConfig>,
    seed: u64,
) -> Result<(TrainHistory, BTreeMap<String, ArrayD<f32>>, u64)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let needs_routing = net.cfg.modulator != ModulatorKind::None || net.experts.is_some();
    let mut opt = AdamW::<f32>::new(cfg.weight_decay);
    let mut history = TrainHistory { losses: Vec::new(), lrs: Vec::new() };
    for step in 0..cfg.total_iters {
        let (lqs, hqs) = sample_batch(pairs, cfg, seed, step);
        let (e_clip, moe_ctx): (Option<Array2<f32>>, Option<MoeContext<f32>>) = if needs_routing {
            let k = moe_cfg.map(|m| m.k).unwrap_or(1);
            let (ec, gates) = route_crops(encoder, router, &lqs, k)?;
            let ctx = moe_cfg
                .filter(|_| net.experts.is_some())
                .map(|m| moe::gate_context_rows::<f32>(&gates, m));
            (Some(ec), ctx)
        } else {
            (None, None)
        };
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &net.params);
        let xv = tape.constant(lqs.into_dyn());
        let e_for_net = if net.cfg.modulator != ModulatorKind::None { e_clip.as_ref() } else { None };
        let out = net.forward(&mut tape, &bound, xv, e_for_net, moe_ctx.as_ref())?;
        let loss = tape.psnr_loss(out, &hqs.into_dyn());
        let loss_val = f64::from(tape.scalar(loss));
        if !loss_val.is_finite() {
            return Err(Error::Divergence { step });
        }
        let grads = tape.backward(loss);
        let gmap = bound.grads(&net.params, &grads);
        let lr = lr_at(cfg, step);
        opt.step(&mut net.params, &gmap, lr);
        history.losses.push(loss_val);
        history.lrs.push(lr);
    }
    let steps = opt.step_count();
    Ok((history, opt.state(), steps))
}

/// Stage 1: train every restoration-net parameter with the frozen router
/// providing per-crop conditioning.
#[allow(clippy::too_many_arguments)]
pub fn pretrain(
    net_cfg: NetConfig,
    stage_cfg: &StageConfig,
    corpus_dir: &Path,
    train_manifest: &CorpusManifest,
    encoder: &FrozenEncoder,
    router: &Router,
    seed: u64,
    config_echo: &str,
) -> Result<Checkpoint> {
    let router_before = router.checksum();
    let mut net = Net::<f32>::init(net_cfg, seed)?;
    let pairs = load_pairs(corpus_dir, train_manifest)?;
    let (history, opt_state, step) =
        run_stage(&mut net, encoder, router, &pairs, stage_cfg, None, seed)?;
    debug_assert_eq!(router.checksum(), router_before);
    Ok(Checkpoint {
        stage: "pretrain".into(),
        net,
        stage_cfg: stage_cfg.clone(),
        moe_cfg: None,
        seed,
        step,
        opt_state,
        router_checksum: router_before,
        stage1_checksum: None,
        config_echo: config_echo.to_string(),
        history,
    })
}

/// Stage 2: attach the expert bank to a stage-1 checkpoint, freeze everything
/// else, and train only the expert pairs under per-crop top-k gating.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    stage1: &Checkpoint,
    moe_cfg: &MoeConfig,
    stage_cfg: &StageConfig,
    corpus_dir: &Path,
    train_manifest: &CorpusManifest,
    encoder: &FrozenEncoder,
    router: &Router,
    seed: u64,
    config_echo: &str,
) -> Result<Checkpoint> {
    if stage1.stage != "pretrain" {
        return Err(Error::Config(format!(
            "stage-2 initialization requires a pretrain checkpoint, found {}",
            stage1.stage
        )));
    }
    if moe_cfg.n != router.n {
        return Err(Error::RouterCheckpointMismatch {
            router_n: router.n,
            ckpt_n: moe_cfg.n,
        });
    }
    let mut net = Net {
        cfg: stage1.net.cfg.clone(),
        params: stage1.net.params.clone(),
        experts: None,
    };
    moe::init_experts(&mut net, moe_cfg, seed)?;
    let base_before = checksum_base(&net);
    let pairs = load_pairs(corpus_dir, train_manifest)?;
    let (history, opt_state, step) =
        run_stage(&mut net, encoder, router, &pairs, stage_cfg, Some(moe_cfg), seed)?;
    let base_after = checksum_base(&net);
    if base_before != base_after {
        return Err(Error::ChecksumMismatch(format!(
            "expected {base_before}, got {base_after}"
        )));
    }
    Ok(Checkpoint {
        stage: "finetune".into(),
        net,
        stage_cfg: stage_cfg.clone(),
        moe_cfg: Some(moe_cfg.clone()),
        seed,
        step,
        opt_state,
        router_checksum: router.checksum(),
        stage1_checksum: Some(base_before),
        config_echo: config_echo.to_string(),
        history,
    })
}

fn checksum_base(net: &Net<f32>) -> String {
    let paths: Vec<&str> = net
        .params
        .paths()
        .filter(|p| !p.starts_with("experts/"))
        .collect();
    net.params.checksum_of(paths.into_iter())
}

/// Restore one image with a checkpointed network (routing included).
pub fn restore_with(
    ckpt: &Checkpoint,
    encoder: &FrozenEncoder,
    router: &Router,
    lq: &Image,
) -> Result<Image> {
    let needs_routing = ckpt.net.cfg.modulator != ModulatorKind::None || ckpt.net.experts.is_some();
    let (e_clip, ctx) = if needs_routing {
        let out = router::router_forward(encoder, router, lq)?;
        let ctx = match (&ckpt.moe_cfg, ckpt.net.experts) {
            (Some(m), Some(_)) => {
                let gate = router::top_k_gate(&out.logits, m.k)?;
                Some(moe::gate_context::<f32>(&gate, 1, m))
            }
            _ => None,
        };
        (Some(out.e_clip), ctx)
    } else {
        (None, None)
    };
    let e_for_net = if ckpt.net.cfg.modulator != ModulatorKind::None {
        e_clip.as_ref()
    } else {
        None
    };
    crate::net::restore_image(&ckpt.net, lq, e_for_net, ctx.as_ref())
}

/// Mean restored PSNR over a manifest split.
pub fn mean_psnr(
    ckpt: &Checkpoint,
    encoder: &FrozenEncoder,
    router: &Router,
    corpus_dir: &Path,
    manifest: &CorpusManifest,
) -> Result<f64> {
    let mut total = 0.0;
    for e in &manifest.entries {
        let lq = image_io::load_png(&corpus_dir.join(&e.lq))?;
        let hq = image_io::load_png(&corpus_dir.join(&e.hq))?;
        let restored = restore_with(ckpt, encoder, router, &lq)?;
        total += crate::metrics::psnr(&restored, &hq)?;
    }
    Ok(total / manifest.entries.len().max(1) as f64)
}
