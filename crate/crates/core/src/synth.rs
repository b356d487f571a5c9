//! Procedural multi-degradation corpus generation.
//!
//! Six degradation families (noise, blur, jpeg, low-light, rain, haze) are
//! applied to procedurally generated clean images. Everything is keyed off
//! derived sub-seeds, so a corpus — including every individual LQ image — can
//! be regenerated bit-exactly from `(config, seed)`. HQ images are quantized
//! to the 8-bit disk representation *before* degradation, so re-applying the
//! stored parameters to the stored HQ file reproduces the stored LQ file
//! byte for byte.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::{self, Image};
use crate::seeds;

/// Names of the built-in degradation families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KindName {
    GaussianNoise,
    GaussianBlur,
    Jpeg,
    LowLight,
    RainStreaks,
    Haze,
}

pub const ALL_KINDS: [KindName; 6] = [
    KindName::GaussianNoise,
    KindName::GaussianBlur,
    KindName::Jpeg,
    KindName::LowLight,
    KindName::RainStreaks,
    KindName::Haze,
];

impl fmt::Display for KindName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            KindName::GaussianNoise => "gaussian-noise",
            KindName::GaussianBlur => "gaussian-blur",
            KindName::Jpeg => "jpeg",
            KindName::LowLight => "low-light",
            KindName::RainStreaks => "rain-streaks",
            KindName::Haze => "haze",
        };
        f.write_str(s)
    }
}

impl FromStr for KindName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gaussian-noise" => KindName::GaussianNoise,
            "gaussian-blur" => KindName::GaussianBlur,
            "jpeg" => KindName::Jpeg,
            "low-light" => KindName::LowLight,
            "rain-streaks" => KindName::RainStreaks,
            "haze" => KindName::Haze,
            other => return Err(Error::UnknownKind(other.to_string())),
        })
    }
}

/// Resolved, kind-specific degradation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum KindParams {
    GaussianNoise { sigma: f64 },
    GaussianBlur { radius: usize, sigma: f64 },
    Jpeg { quality: u8 },
    LowLight { gamma: f64, gain: f64 },
    RainStreaks { count: usize, length: f64, angle_deg: f64, intensity: f64 },
    Haze { transmission: f64, airlight: f64 },
}

impl KindParams {
    pub fn name(&self) -> KindName {
        match self {
            KindParams::GaussianNoise { .. } => KindName::GaussianNoise,
            KindParams::GaussianBlur { .. } => KindName::GaussianBlur,
            KindParams::Jpeg { .. } => KindName::Jpeg,
            KindParams::LowLight { .. } => KindName::LowLight,
            KindParams::RainStreaks { .. } => KindName::RainStreaks,
            KindParams::Haze { .. } => KindName::Haze,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |detail: &str| {
            Err(Error::ParamOutOfRange {
                kind: self.name().to_string(),
                detail: detail.to_string(),
            })
        };
        match *self {
            KindParams::GaussianNoise { sigma } => {
                if !(0.0..=1.0).contains(&sigma) || sigma == 0.0 {
                    return fail("sigma must be in (0, 1]");
                }
            }
            KindParams::GaussianBlur { radius, sigma } => {
                if radius == 0 || sigma <= 0.0 {
                    return fail("radius >= 1 and sigma > 0 required");
                }
            }
            KindParams::Jpeg { quality } => {
                if !(1..=100).contains(&quality) {
                    return fail("quality must be in [1, 100]");
                }
            }
            KindParams::LowLight { gamma, gain } => {
                if gamma <= 1.0 {
                    return fail("gamma must be > 1");
                }
                if !(0.0..=1.0).contains(&gain) || gain == 0.0 {
                    return fail("gain must be in (0, 1]");
                }
            }
            KindParams::RainStreaks { count, length, angle_deg, intensity } => {
                if count == 0 || length < 1.0 {
                    return fail("count >= 1 and length >= 1 required");
                }
                if !(60.0..=120.0).contains(&angle_deg) {
                    return fail("angle must be in [60, 120] degrees");
                }
                if !(0.0..=1.0).contains(&intensity) || intensity == 0.0 {
                    return fail("intensity must be in (0, 1]");
                }
            }
            KindParams::Haze { transmission, airlight } => {
                if !(0.0..=1.0).contains(&transmission) {
                    return fail("transmission must be in [0, 1]");
                }
                if !(0.0..=1.0).contains(&airlight) {
                    return fail("airlight must be in [0, 1]");
                }
            }
        }
        Ok(())
    }
}

/// A degradation family with an id in the configured contiguous range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationKind {
    pub id: usize,
    pub params: KindParams,
}

impl DegradationKind {
    pub fn name(&self) -> KindName {
        self.params.name()
    }
}

// ---------------------------------------------------------------------------
// HQ generation
// ---------------------------------------------------------------------------

/// Deterministic procedural clean images: low-frequency gradients, a handful
/// of filled triangles, and mild smooth texture.
pub fn generate_hq(count: usize, height: usize, width: usize, seed: u64) -> Result<Vec<Image>> {
    if count == 0 {
        return Err(Error::InvalidDimension("count must be >= 1".into()));
    }
    if height < 32 || width < 32 {
        return Err(Error::InvalidDimension(format!(
            "height and width must be >= 32, got {height}x{width}"
        )));
    }
    (0..count)
        .map(|i| Ok(generate_one_hq(height, width, seeds::derive(seed, "hq", i as u64))))
        .collect()
}

fn generate_one_hq(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = seeds::rng(seed, "hq-image", 0);
    let mut img = Array3::<f32>::zeros((3, h, w));

    // smooth background: sum of a few low-frequency sinusoids per channel
    for c in 0..3 {
        let base: f64 = rng.gen_range(0.3..0.7);
        let terms: Vec<(f64, f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.gen_range(0.05..0.2),               // amplitude
                    rng.gen_range(0.5..2.5),                // fy (cycles per image)
                    rng.gen_range(0.5..2.5),                // fx
                    rng.gen_range(0.0..std::f64::consts::TAU), // phase
                    rng.gen_range(-1.0..1.0),               // diagonal mix
                )
            })
            .collect();
        for i in 0..h {
            for j in 0..w {
                let (y, x) = (i as f64 / h as f64, j as f64 / w as f64);
                let mut v = base;
                for &(a, fy, fx, ph, d) in &terms {
                    v += a * (std::f64::consts::TAU * (fy * y + fx * x + d * x * y) + ph).sin();
                }
                img[(c, i, j)] = v as f32;
            }
        }
    }

    // random filled triangles
    let n_tris = rng.gen_range(3..7);
    for _ in 0..n_tris {
        let pts: Vec<(f64, f64)> = (0..3)
            .map(|_| (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64)))
            .collect();
        let color: [f32; 3] = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
        let alpha: f32 = rng.gen_range(0.4..0.9);
        fill_triangle(&mut img, &pts, color, alpha);
    }

    // mild smooth texture: coarse noise grid, bilinearly upsampled
    let (gh, gw) = (h.div_ceil(8).max(2), w.div_ceil(8).max(2));
    let grid = Array3::<f32>::from_shape_fn((3, gh, gw), |_| rng.gen_range(-1.0f32..1.0));
    let tex = image_io::resize_bilinear(&grid, h, w);
    let amp: f32 = rng.gen_range(0.02..0.06);
    img.zip_mut_with(&tex, |a, &t| *a += amp * t);

    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    img
}

fn fill_triangle(img: &mut Image, pts: &[(f64, f64)], color: [f32; 3], alpha: f32) {
    let (_, h, w) = img.dim();
    let ys: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let xs: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let (y0, y1) = (ys.iter().cloned().fold(f64::MAX, f64::min).floor().max(0.0) as usize,
                    (ys.iter().cloned().fold(f64::MIN, f64::max).ceil() as usize).min(h.saturating_sub(1)));
    let (x0, x1) = (xs.iter().cloned().fold(f64::MAX, f64::min).floor().max(0.0) as usize,
                    (xs.iter().cloned().fold(f64::MIN, f64::max).ceil() as usize).min(w.saturating_sub(1)));
    let sign = |a: (f64, f64), b: (f64, f64), p: (f64, f64)| {
        (p.1 - b.1) * (a.0 - b.0) - (a.1 - b.1) * (p.0 - b.0)
    };
    for i in y0..=y1.min(h - 1) {
        for j in x0..=x1.min(w - 1) {
            let p = (i as f64 + 0.5, j as f64 + 0.5);
            let d1 = sign(pts[0], pts[1], p);
            let d2 = sign(pts[1], pts[2], p);
            let d3 = sign(pts[2], pts[0], p);
            let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
            let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
            if !(has_neg && has_pos) {
                for c in 0..3 {
                    img[(c, i, j)] = (1.0 - alpha) * img[(c, i, j)] + alpha * color[c];
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Degradations
// ---------------------------------------------------------------------------

/// Apply one degradation. Deterministic given `(hq, params, seed)`.
pub fn apply_degradation(hq: &Image, kind: &DegradationKind, seed: u64) -> Result<Image> {
    kind.params.validate()?;
    let mut lq = match &kind.params {
        KindParams::GaussianNoise { sigma } => {
            let mut rng = seeds::rng(seed, "noise", 0);
            let normal = Normal::new(0.0, *sigma).unwrap();
            hq.mapv(|v| v + normal.sample(&mut rng) as f32)
        }
        KindParams::GaussianBlur { radius, sigma } => gaussian_blur(hq, *radius, *sigma),
        KindParams::Jpeg { quality } => jpeg_roundtrip(hq, *quality)?,
        KindParams::LowLight { gamma, gain } => {
            hq.mapv(|v| (*gain as f32) * v.max(0.0).powf(*gamma as f32))
        }
        KindParams::RainStreaks { count, length, angle_deg, intensity } => {
            rain_streaks(hq, *count, *length, *angle_deg, *intensity, seed)
        }
        KindParams::Haze { transmission, airlight } => {
            let (t, a) = (*transmission as f32, *airlight as f32);
            hq.mapv(|v| v * t + a * (1.0 - t))
        }
    };
    lq.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(lq)
}

/// Compose several distinct degradations in order, each with its own derived
/// sub-seed.
pub fn mix_degradations(hq: &Image, kinds: &[DegradationKind], seed: u64) -> Result<Image> {
    if kinds.is_empty() {
        return Err(Error::InvalidDimension("kinds must be non-empty".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for k in kinds {
        if !seen.insert(k.id) {
            return Err(Error::DuplicateKind(k.name().to_string()));
        }
    }
    let mut img = hq.clone();
    for (i, k) in kinds.iter().enumerate() {
        img = apply_degradation(&img, k, seeds::derive(seed, "mix", i as u64))?;
    }
    Ok(img)
}

fn gaussian_blur(img: &Image, radius: usize, sigma: f64) -> Image {
    let r = radius as isize;
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    let mut total = 0.0f64;
    for d in -r..=r {
        let v = (-0.5 * (d as f64 / sigma).powi(2)).exp();
        kernel.push(v);
        total += v;
    }
    for v in &mut kernel {
        *v /= total;
    }
    let (ch, h, w) = img.dim();
    let reflect = |i: isize, len: usize| -> usize {
        let len = len as isize;
        let mut i = i;
        if i < 0 {
            i = -i;
        }
        if i >= len {
            i = 2 * (len - 1) - i;
        }
        i.clamp(0, len - 1) as usize
    };
    let mut tmp = Array3::<f32>::zeros((ch, h, w));
    for c in 0..ch {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0f64;
                for (ki, d) in (-r..=r).enumerate() {
                    acc += kernel[ki] * f64::from(img[(c, reflect(i as isize + d, h), j)]);
                }
                tmp[(c, i, j)] = acc as f32;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((ch, h, w));
    for c in 0..ch {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0f64;
                for (ki, d) in (-r..=r).enumerate() {
                    acc += kernel[ki] * f64::from(tmp[(c, i, reflect(j as isize + d, w))]);
                }
                out[(c, i, j)] = acc as f32;
            }
        }
    }
    out
}

fn jpeg_roundtrip(img: &Image, quality: u8) -> Result<Image> {
    let (_, h, w) = img.dim();
    let mut rgb = image::ImageBuffer::<image::Rgb<u8>, Vec<u8>>::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            rgb.put_pixel(
                j as u32,
                i as u32,
                image::Rgb([
                    image_io::quantize(img[(0, i, j)]),
                    image_io::quantize(img[(1, i, j)]),
                    image_io::quantize(img[(2, i, j)]),
                ]),
            );
        }
    }
    let mut bytes = Vec::new();
    let mut enc =
        image::codecs::jpeg::JpegEncoder::new_with_quality(std::io::Cursor::new(&mut bytes), quality);
    enc.encode_image(&rgb)?;
    let dec = image::load_from_memory_with_format(&bytes, image::ImageFormat::Jpeg)?.into_rgb8();
    let mut out = Array3::<f32>::zeros((3, h, w));
    for i in 0..h {
        for j in 0..w {
            let p = dec.get_pixel(j as u32, i as u32);
            for c in 0..3 {
                out[(c, i, j)] = image_io::dequantize(p.0[c]);
            }
        }
    }
    Ok(out)
}

fn rain_streaks(img: &Image, count: usize, length: f64, angle_deg: f64, intensity: f64, seed: u64) -> Image {
    let (_, h, w) = img.dim();
    let mut rng = seeds::rng(seed, "rain", 0);
    let mut out = img.clone();
    for _ in 0..count {
        let cy: f64 = rng.gen_range(0.0..h as f64);
        let cx: f64 = rng.gen_range(0.0..w as f64);
        let len: f64 = length * rng.gen_range(0.7..1.3);
        // jitter the streak angle a little around the configured one
        let ang = (angle_deg + rng.gen_range(-5.0..5.0)).to_radians();
        let alpha = (intensity * rng.gen_range(0.6..1.0)) as f32;
        let (dy, dx) = (ang.sin(), ang.cos());
        let steps = (len * 2.0) as usize + 1;
        for s in 0..steps {
            let t = s as f64 / 2.0 - len / 2.0;
            let (y, x) = (cy + t * dy, cx + t * dx);
            let (yi, xi) = (y.round(), x.round());
            if yi < 0.0 || xi < 0.0 || yi >= h as f64 || xi >= w as f64 {
                continue;
            }
            let (yi, xi) = (yi as usize, xi as usize);
            for c in 0..3 {
                let v = out[(c, yi, xi)];
                out[(c, yi, xi)] = v + alpha * (1.0 - v);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Parameter sampling and corpus building
// ---------------------------------------------------------------------------

/// Sample desk-default parameters for a kind.
pub fn sample_params<R: Rng>(name: KindName, rng: &mut R) -> KindParams {
    match name {
        KindName::GaussianNoise => KindParams::GaussianNoise {
            sigma: rng.gen_range(15.0..50.0) / 255.0,
        },
        KindName::GaussianBlur => {
            let sigma: f64 = rng.gen_range(1.0..2.5);
            KindParams::GaussianBlur { radius: (3.0 * sigma).ceil() as usize, sigma }
        }
        KindName::Jpeg => KindParams::Jpeg { quality: rng.gen_range(10..=30) },
        KindName::LowLight => KindParams::LowLight {
            gamma: rng.gen_range(1.8..2.8),
            gain: rng.gen_range(0.5..0.9),
        },
        KindName::RainStreaks => KindParams::RainStreaks {
            count: rng.gen_range(40..=80),
            length: rng.gen_range(8.0..16.0),
            angle_deg: rng.gen_range(60.0..120.0),
            intensity: rng.gen_range(0.25..0.6),
        },
        KindName::Haze => KindParams::Haze {
            transmission: rng.gen_range(0.35..0.7),
            airlight: rng.gen_range(0.7..0.95),
        },
    }
}

/// One corpus entry: file paths plus everything needed to regenerate the LQ
/// image bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub hq: String,
    pub lq: String,
    /// Kind ids, one for plain samples, several (in application order) for
    /// mixed ones.
    pub label: Vec<usize>,
    pub seed: u64,
    pub params: Vec<KindParams>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub split: String,
    pub global_seed: u64,
    pub kinds: Vec<KindName>,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.display().to_string()));
        }
        Ok(serde_json::from_reader(std::io::BufReader::new(
            std::fs::File::open(path)?,
        ))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        use std::io::Write;
        writeln!(f)?;
        Ok(())
    }
}

/// Corpus synthesis settings (the `data.*` config block).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kinds: Vec<String>,
    pub per_kind: usize,
    pub height: usize,
    pub width: usize,
    /// train/val/test fractions, must sum to 1.
    pub split: [f64; 3],
    /// Ordered mixed-degradation pairs for the test split.
    #[serde(default)]
    pub mixed_pairs: Vec<[String; 2]>,
    #[serde(default)]
    pub mixed_per_pair: usize,
}

impl Default for DataConfig {
    /// Desk-scale corpus: 6 kinds, 60 images each split 48/6/6, plus two
    /// mixed-degradation pairs in the test split.
    fn default() -> Self {
        DataConfig {
            kinds: ALL_KINDS.iter().map(|k| k.to_string()).collect(),
            per_kind: 60,
            height: 96,
            width: 96,
            split: [0.8, 0.1, 0.1],
            mixed_pairs: vec![
                ["gaussian-noise".into(), "gaussian-blur".into()],
                ["haze".into(), "rain-streaks".into()],
            ],
            mixed_per_pair: 2,
        }
    }
}

impl DataConfig {
    pub fn kind_names(&self) -> Result<Vec<KindName>> {
        self.kinds.iter().map(|s| s.parse()).collect()
    }

    pub fn n(&self) -> usize {
        self.kinds.len()
    }
}

/// Synthesize the corpus under `out_dir` and write one manifest per split.
/// Returns the manifests in (train, val, test) order.
pub fn build_corpus(cfg: &DataConfig, out_dir: &Path, seed: u64) -> Result<[CorpusManifest; 3]> {
    let kinds = cfg.kind_names()?;
    let frac_sum: f64 = cfg.split.iter().sum();
    if (frac_sum - 1.0).abs() > 1e-9 {
        return Err(Error::BadSplit(cfg.split.to_vec()));
    }
    std::fs::create_dir_all(out_dir.join("hq"))?;
    std::fs::create_dir_all(out_dir.join("lq"))?;

    let n_train = (cfg.split[0] * cfg.per_kind as f64).round() as usize;
    let n_val = (cfg.split[1] * cfg.per_kind as f64).round() as usize;
    let n_test = cfg.per_kind - n_train.min(cfg.per_kind) - n_val.min(cfg.per_kind);

    let mut splits: [CorpusManifest; 3] = ["train", "val", "test"].map(|s| CorpusManifest {
        split: s.to_string(),
        global_seed: seed,
        kinds: kinds.clone(),
        entries: Vec::new(),
    });

    let mut global_idx = 0u64;
    for (kid, kind_name) in kinds.iter().enumerate() {
        for s in 0..cfg.per_kind {
            let entry = synth_entry(
                cfg,
                out_dir,
                seed,
                global_idx,
                &format!("{kind_name}_{s:04}"),
                &[DegradationKind {
                    id: kid,
                    params: sample_params(*kind_name, &mut seeds::rng(seed, "params", global_idx)),
                }],
            )?;
            let split_idx = if s < n_train {
                0
            } else if s < n_train + n_val {
                1
            } else {
                2
            };
            let _ = n_test;
            splits[split_idx].entries.push(entry);
            global_idx += 1;
        }
    }

    // mixed samples are evaluation-only
    for pair in &cfg.mixed_pairs {
        let a: KindName = pair[0].parse()?;
        let b: KindName = pair[1].parse()?;
        let (ia, ib) = (
            kinds.iter().position(|k| *k == a).ok_or_else(|| Error::UnknownKind(pair[0].clone()))?,
            kinds.iter().position(|k| *k == b).ok_or_else(|| Error::UnknownKind(pair[1].clone()))?,
        );
        for s in 0..cfg.mixed_per_pair {
            let entry = synth_entry(
                cfg,
                out_dir,
                seed,
                global_idx,
                &format!("mixed_{a}_{b}_{s:04}"),
                &[
                    DegradationKind {
                        id: ia,
                        params: sample_params(a, &mut seeds::rng(seed, "params", global_idx)),
                    },
                    DegradationKind {
                        id: ib,
                        params: sample_params(b, &mut seeds::rng(seed, "params-b", global_idx)),
                    },
                ],
            )?;
            splits[2].entries.push(entry);
            global_idx += 1;
        }
    }

    for m in &splits {
        m.save(&out_dir.join(format!("manifest_{}.json", m.split)))?;
    }
    Ok(splits)
}

fn synth_entry(
    cfg: &DataConfig,
    out_dir: &Path,
    seed: u64,
    global_idx: u64,
    stem: &str,
    kinds: &[DegradationKind],
) -> Result<ManifestEntry> {
    let hq_raw = generate_one_hq(cfg.height, cfg.width, seeds::derive(seed, "hq", global_idx));
    let hq = image_io::quantize_image(&hq_raw);
    let lq_seed = seeds::derive(seed, "lq", global_idx);
    let lq = mix_degradations(&hq, kinds, lq_seed)?;
    let hq_rel = format!("hq/{stem}.png");
    let lq_rel = format!("lq/{stem}.png");
    image_io::save_png(&hq, &out_dir.join(&hq_rel))?;
    image_io::save_png(&lq, &out_dir.join(&lq_rel))?;
    Ok(ManifestEntry {
        hq: hq_rel,
        lq: lq_rel,
        label: kinds.iter().map(|k| k.id).collect(),
        seed: lq_seed,
        params: kinds.iter().map(|k| k.params.clone()).collect(),
    })
}

/// Re-apply the stored parameters to the stored HQ file and check the result
/// matches the stored LQ file after quantization (label-soundness check).
pub fn verify_entry(dir: &Path, entry: &ManifestEntry) -> Result<bool> {
    let hq = image_io::load_png(&dir.join(&entry.hq))?;
    let lq = image_io::load_png(&dir.join(&entry.lq))?;
    let kinds: Vec<DegradationKind> = entry
        .label
        .iter()
        .zip(&entry.params)
        .map(|(&id, p)| DegradationKind { id, params: p.clone() })
        .collect();
    let re = mix_degradations(&hq, &kinds, entry.seed)?;
    Ok(image_io::quantize_image(&re) == lq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    fn kind(id: usize, params: KindParams) -> DegradationKind {
        DegradationKind { id, params }
    }

    #[test]
    fn hq_determinism_and_range() {
        let a = generate_hq(1, 64, 64, 7).unwrap();
        let b = generate_hq(1, 64, 64, 7).unwrap();
        assert_eq!(a[0], b[0]);
        let two = generate_hq(2, 64, 64, 7).unwrap();
        let l2: f32 = two[0]
            .iter()
            .zip(two[1].iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        assert!(l2 > 0.0);
        assert!(a[0].iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn hq_rejects_bad_dims() {
        assert!(generate_hq(0, 64, 64, 1).is_err());
        assert!(generate_hq(1, 16, 64, 1).is_err());
    }

    #[test]
    fn haze_degenerate_cases() {
        let hq = generate_hq(1, 32, 32, 3).unwrap().remove(0);
        let id = apply_degradation(
            &hq,
            &kind(5, KindParams::Haze { transmission: 1.0, airlight: 0.5 }),
            0,
        )
        .unwrap();
        assert_eq!(id, hq);
        let flat = apply_degradation(
            &hq,
            &kind(5, KindParams::Haze { transmission: 0.0, airlight: 0.8 }),
            0,
        )
        .unwrap();
        assert!(flat.iter().all(|&v| (v - 0.8).abs() < 1e-6));
    }

    #[test]
    fn noise_psnr_monte_carlo() {
        // sigma = 25/255 on mid-gray: analytic 20*log10(255/25) = 20.17 dB
        let hq = Array3::from_elem((3, 64, 64), 0.5f32);
        let k = kind(0, KindParams::GaussianNoise { sigma: 25.0 / 255.0 });
        let mean: f64 = (0..32)
            .map(|s| psnr(&apply_degradation(&hq, &k, s).unwrap(), &hq).unwrap())
            .sum::<f64>()
            / 32.0;
        assert!((mean - 20.17).abs() < 0.5, "mean PSNR {mean}");
    }

    #[test]
    fn mix_singleton_matches_apply_with_derived_seed() {
        let hq = generate_hq(1, 32, 32, 11).unwrap().remove(0);
        let k = kind(0, KindParams::GaussianNoise { sigma: 0.1 });
        let mixed = mix_degradations(&hq, std::slice::from_ref(&k), 42).unwrap();
        let direct = apply_degradation(&hq, &k, seeds::derive(42, "mix", 0)).unwrap();
        assert_eq!(mixed, direct);
    }

    #[test]
    fn mix_rejects_duplicates_and_orders_matter() {
        let hq = generate_hq(1, 48, 48, 13).unwrap().remove(0);
        let k1 = kind(3, KindParams::LowLight { gamma: 2.2, gain: 0.7 });
        let k2 = kind(1, KindParams::GaussianBlur { radius: 4, sigma: 1.5 });
        assert!(matches!(
            mix_degradations(&hq, &[k1.clone(), k1.clone()], 0),
            Err(Error::DuplicateKind(_))
        ));
        let ab = mix_degradations(&hq, &[k1.clone(), k2.clone()], 5).unwrap();
        let ba = mix_degradations(&hq, &[k2, k1], 5).unwrap();
        let l2: f32 = ab.iter().zip(ba.iter()).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(l2 > 0.0, "composition should not commute");
    }

    #[test]
    fn degradations_lower_fidelity() {
        let hq = image_io::quantize_image(&generate_hq(1, 64, 64, 17).unwrap().remove(0));
        let cases = [
            KindParams::GaussianNoise { sigma: 25.0 / 255.0 },
            KindParams::GaussianBlur { radius: 5, sigma: 1.5 },
            KindParams::Jpeg { quality: 20 },
            KindParams::LowLight { gamma: 2.2, gain: 0.7 },
            KindParams::RainStreaks { count: 60, length: 12.0, angle_deg: 90.0, intensity: 0.4 },
            KindParams::Haze { transmission: 0.5, airlight: 0.8 },
        ];
        for (i, p) in cases.into_iter().enumerate() {
            let lq = apply_degradation(&hq, &kind(i, p.clone()), 1).unwrap();
            let db = psnr(&lq, &hq).unwrap();
            assert!(db < 60.0, "{p:?} gave {db} dB");
            assert!(lq.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn param_validation() {
        assert!(KindParams::GaussianNoise { sigma: 1.5 }.validate().is_err());
        assert!(KindParams::Jpeg { quality: 0 }.validate().is_err());
        assert!(KindParams::LowLight { gamma: 0.9, gain: 0.5 }.validate().is_err());
        assert!(KindParams::Haze { transmission: 1.2, airlight: 0.5 }.validate().is_err());
        assert!(KindParams::RainStreaks { count: 60, length: 12.0, angle_deg: 30.0, intensity: 0.4 }
            .validate()
            .is_err());
    }

    fn small_cfg() -> DataConfig {
        DataConfig {
            kinds: ALL_KINDS.iter().map(|k| k.to_string()).collect(),
            per_kind: 10,
            height: 32,
            width: 32,
            split: [0.8, 0.1, 0.1],
            mixed_pairs: vec![],
            mixed_per_pair: 0,
        }
    }

    #[test]
    fn corpus_split_counts_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let [train, val, test] = build_corpus(&small_cfg(), dir.path(), 9).unwrap();
        assert_eq!(train.entries.len(), 48);
        assert_eq!(val.entries.len(), 6);
        assert_eq!(test.entries.len(), 6);
        // equal counts per kind in train
        for kid in 0..6 {
            assert_eq!(train.entries.iter().filter(|e| e.label == vec![kid]).count(), 8);
        }
        let bytes1 = std::fs::read(dir.path().join("manifest_train.json")).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        build_corpus(&small_cfg(), dir2.path(), 9).unwrap();
        let bytes2 = std::fs::read(dir2.path().join("manifest_train.json")).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn corpus_labels_are_sound() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg();
        cfg.per_kind = 2;
        cfg.mixed_pairs = vec![["low-light".into(), "gaussian-blur".into()]];
        cfg.mixed_per_pair = 1;
        let [train, _, test] = build_corpus(&cfg, dir.path(), 21).unwrap();
        for e in train.entries.iter().chain(test.entries.iter()) {
            assert!(verify_entry(dir.path(), e).unwrap(), "entry {e:?} not reproducible");
        }
    }

    #[test]
    fn corpus_rejects_bad_split() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg();
        cfg.split = [0.5, 0.2, 0.2];
        assert!(matches!(build_corpus(&cfg, dir.path(), 0), Err(Error::BadSplit(_))));
    }
}
