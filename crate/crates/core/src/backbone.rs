//! Frozen image encoder behind a backend registry.
//!
//! The `stub` backend is a seeded random-projection conv stack (4 stride-2
//! convolutions, ReLU, global average pool, linear head). It is hermetic and
//! fast while still producing class-separable statistics for synthetic
//! degradations. The `pretrained` backend loads externally supplied weights
//! for the same stack from a container directory. Either way the encoder is
//! immutable after load: it exposes no mutation and a checksum for the frozen
//! contract.

use ndarray::{Array1, Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::image_io::ImageBatch;
use crate::params::{randn_init, zeros, ParamStore};
use crate::seeds;

/// Stub conv widths after each stride-2 stage.
const STUB_CHANNELS: [usize; 4] = [16, 32, 64, 128];

/// Hand-crafted global statistics appended to the pooled conv features.
const GLOBAL_STATS: usize = 6;

/// Luminance statistics that separate degradation families the random conv
/// stack struggles with: 8x8 block-boundary contrast (compression), gradient
/// anisotropy (directional streaks) and high-frequency residual energy
/// (blur vs. noise). Computed on the raw `[0, 1]` image.
fn global_stats(img: &ndarray::Array3<f32>) -> [f32; GLOBAL_STATS] {
    let (_, h, w) = img.dim();
    let luma = |i: usize, j: usize| -> f32 {
        (img[(0, i, j)] + img[(1, i, j)] + img[(2, i, j)]) / 3.0
    };
    let eps = 1e-6f32;
    // column/row absolute differences, split at 8-pixel block boundaries
    let (mut bc, mut oc, mut nbc, mut noc) = (0.0f32, 0.0f32, 0usize, 0usize);
    let (mut br, mut or_, mut nbr, mut nor) = (0.0f32, 0.0f32, 0usize, 0usize);
    let mut dx_sum = 0.0f32;
    let mut dy_sum = 0.0f32;
    for i in 0..h {
        for j in 0..w - 1 {
            let d = (luma(i, j + 1) - luma(i, j)).abs();
            dx_sum += d;
            if (j + 1) % 8 == 0 {
                bc += d;
                nbc += 1;
            } else {
                oc += d;
                noc += 1;
            }
        }
    }
    for j in 0..w {
        for i in 0..h - 1 {
            let d = (luma(i + 1, j) - luma(i, j)).abs();
            dy_sum += d;
            if (i + 1) % 8 == 0 {
                br += d;
                nbr += 1;
            } else {
                or_ += d;
                nor += 1;
            }
        }
    }
    let blockiness_c = ((bc / nbc.max(1) as f32 + eps) / (oc / noc.max(1) as f32 + eps)).ln();
    let blockiness_r = ((br / nbr.max(1) as f32 + eps) / (or_ / nor.max(1) as f32 + eps)).ln();
    let anisotropy = ((dx_sum + eps) / (dy_sum + eps)).ln();
    // high-frequency residual: luma minus its 3x3 box average
    let (mut hf_sum, mut hf_sq, mut hf_max) = (0.0f32, 0.0f32, 0.0f32);
    let mut count = 0usize;
    for i in 1..h - 1 {
        for j in 1..w - 1 {
            let mut acc = 0.0f32;
            for di in 0..3 {
                for dj in 0..3 {
                    acc += luma(i + di - 1, j + dj - 1);
                }
            }
            let r = (luma(i, j) - acc / 9.0).abs();
            hf_sum += r;
            hf_sq += r * r;
            hf_max = hf_max.max(r);
            count += 1;
        }
    }
    let m = hf_sum / count.max(1) as f32;
    let sd = (hf_sq / count.max(1) as f32 - m * m).max(0.0).sqrt();
    [blockiness_c, blockiness_r, anisotropy, (m + eps).ln(), (sd + eps).ln(), hf_max]
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    /// Registered backend: `stub` or `pretrained`.
    pub name: String,
    /// Supported input resolution `(Hc, Wc)`.
    pub input_size: (usize, usize),
    /// Embedding dimensionality.
    pub embed_dim: usize,
    /// Seed for the stub backend's frozen random weights.
    #[serde(default)]
    pub seed: u64,
    /// Per-channel normalization applied inside `encode_batch`.
    #[serde(default = "default_norm")]
    pub norm_mean: [f32; 3],
    #[serde(default = "default_norm")]
    pub norm_std: [f32; 3],
    /// Weight container directory for the `pretrained` backend.
    #[serde(default)]
    pub weights: Option<String>,
}

fn default_norm() -> [f32; 3] {
    [0.5, 0.5, 0.5]
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            name: "stub".to_string(),
            input_size: (64, 64),
            embed_dim: 128,
            seed: 0,
            norm_mean: default_norm(),
            norm_std: default_norm(),
            weights: None,
        }
    }
}

/// A loaded, immutable encoder.
pub struct FrozenEncoder {
    spec: EncoderSpec,
    params: ParamStore<f32>,
    channels: Vec<usize>,
}

/// Load a registered backend. The returned encoder never changes.
pub fn load_backbone(spec: &EncoderSpec) -> Result<FrozenEncoder> {
    if spec.input_size.0 < 16 || spec.input_size.1 < 16 {
        return Err(Error::InvalidDimension(
            "encoder input size must be >= 16".into(),
        ));
    }
    if spec.embed_dim < 8 {
        return Err(Error::InvalidDimension("embed_dim must be >= 8".into()));
    }
    match spec.name.as_str() {
        "stub" => Ok(FrozenEncoder::new_stub(spec.clone())),
        "pretrained" => {
            let path = spec
                .weights
                .as_ref()
                .ok_or_else(|| Error::MissingWeights("no weights path configured".into()))?;
            let dir = std::path::Path::new(path);
            if !dir.join("index.json").exists() {
                return Err(Error::MissingWeights(path.clone()));
            }
            let container = Container::load(dir)?;
            FrozenEncoder::from_container(spec.clone(), &container)
        }
        other => Err(Error::UnknownBackend(other.to_string())),
    }
}

impl FrozenEncoder {
    fn new_stub(spec: EncoderSpec) -> Self {
        let mut params = ParamStore::new();
        let mut rng = seeds::rng(spec.seed, "stub-backbone", 0);
        let mut c_in = 3;
        for (i, &c_out) in STUB_CHANNELS.iter().enumerate() {
            let std = (2.0 / (c_in * 9) as f64).sqrt();
            params.insert(&format!("conv{i}/w"), randn_init(&mut rng, &[c_out, c_in, 3, 3], std), false);
            params.insert(&format!("conv{i}/b"), zeros(&[c_out]), false);
            c_in = c_out;
        }
        // mean + std + max pooled over every stage, plus global statistics
        let pooled: usize = 3 * STUB_CHANNELS.iter().sum::<usize>() + GLOBAL_STATS;
        let std = (1.0 / pooled as f64).sqrt();
        params.insert("proj/w", randn_init(&mut rng, &[spec.embed_dim, pooled], std), false);
        params.insert("proj/b", zeros(&[spec.embed_dim]), false);
        FrozenEncoder {
            spec,
            params,
            channels: STUB_CHANNELS.to_vec(),
        }
    }

    fn from_container(spec: EncoderSpec, container: &Container) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut channels = Vec::new();
        for i in 0.. {
            let key = format!("conv{i}/w");
            let Some(w) = container.arrays.get(&key) else { break };
            channels.push(w.shape()[0]);
            params.insert(&key, w.clone(), false);
            let bkey = format!("conv{i}/b");
            let b = container
                .arrays
                .get(&bkey)
                .ok_or_else(|| Error::MissingWeights(bkey.clone()))?;
            params.insert(&bkey, b.clone(), false);
        }
        if channels.is_empty() {
            return Err(Error::MissingWeights("no conv layers in container".into()));
        }
        for key in ["proj/w", "proj/b"] {
            let a = container
                .arrays
                .get(key)
                .ok_or_else(|| Error::MissingWeights(key.into()))?;
            params.insert(key, a.clone(), false);
        }
        if params.get("proj/w").shape()[0] != spec.embed_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("embed_dim {}", spec.embed_dim),
                got: format!("{}", params.get("proj/w").shape()[0]),
            });
        }
        Ok(FrozenEncoder { spec, params, channels })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn embed_dim(&self) -> usize {
        self.spec.embed_dim
    }

    /// Checksum of every backbone parameter (frozen contract).
    pub fn checksum(&self) -> String {
        self.params.checksum_all()
    }

    /// Encode a batch of `(B, 3, Hc, Wc)` images in `[0, 1]` into `(B, embed_dim)`.
    pub fn encode_batch(&self, images: &ImageBatch) -> Result<Array2<f32>> {
        let (bs, ch, h, w) = images.dim();
        if ch != 3 || (h, w) != self.spec.input_size {
            return Err(Error::ShapeMismatch {
                expected: format!("(B, 3, {}, {})", self.spec.input_size.0, self.spec.input_size.1),
                got: format!("({bs}, {ch}, {h}, {w})"),
            });
        }
        let mut x = images.clone();
        for b in 0..bs {
            for c in 0..3 {
                let (m, s) = (self.spec.norm_mean[c], self.spec.norm_std[c]);
                x.slice_mut(ndarray::s![b, c, .., ..])
                    .mapv_inplace(|v| (v - m) / s);
            }
        }
        // per-stage mean + std + max pooling: degradation signatures live in
        // the activation statistics at several scales, not just the final map
        let total_c: usize = self.channels.iter().sum();
        let mut pooled = Array2::<f32>::zeros((bs, 3 * total_c + GLOBAL_STATS));
        for n in 0..bs {
            let stats = global_stats(&images.index_axis(ndarray::Axis(0), n).to_owned());
            for (k, &v) in stats.iter().enumerate() {
                pooled[(n, 3 * total_c + k)] = v;
            }
        }
        let mut col = 0usize;
        for i in 0..self.channels.len() {
            let w = self.params.get(&format!("conv{i}/w"));
            let b = self.params.get(&format!("conv{i}/b"));
            let stride = if i == 0 { 1 } else { 2 };
            x = conv3x3(&x, &w.view().into_dimensionality().unwrap(), &b.view().into_dimensionality().unwrap(), stride);
            x.mapv_inplace(|v| v.max(0.0)); // ReLU
            let (_, cf, hf, wf) = x.dim();
            let inv = 1.0 / (hf * wf) as f32;
            for n in 0..bs {
                for c in 0..cf {
                    let sl = x.slice(ndarray::s![n, c, .., ..]);
                    let mean = sl.sum() * inv;
                    let var = sl.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() * inv;
                    let mx = sl.iter().cloned().fold(0.0f32, f32::max);
                    pooled[(n, col + c)] = mean;
                    pooled[(n, col + cf + c)] = (var + 1e-8).sqrt();
                    pooled[(n, col + 2 * cf + c)] = mx;
                }
            }
            col += 3 * cf;
        }
        let pw = self
            .params
            .get("proj/w")
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let pb = self
            .params
            .get("proj/b")
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        let mut out = pooled.dot(&pw.t());
        out += &pb.broadcast(out.raw_dim()).unwrap();
        debug_assert!(out.iter().all(|v| v.is_finite()));
        Ok(out)
    }
}

/// 3x3 convolution with configurable stride, zero padding 1, via im2col.
fn conv3x3(
    x: &Array4<f32>,
    w: &ndarray::ArrayView4<'_, f32>,
    b: &ndarray::ArrayView1<'_, f32>,
    stride: usize,
) -> Array4<f32> {
    let (bs, ci, h, wd) = x.dim();
    let (co, ci2, _, _) = w.dim();
    debug_assert_eq!(ci, ci2);
    let (oh, ow) = (h.div_ceil(stride), wd.div_ceil(stride));
    let mut cols = Array2::<f32>::zeros((bs * oh * ow, ci * 9));
    for n in 0..bs {
        for i in 0..oh {
            for j in 0..ow {
                let row = n * oh * ow + i * ow + j;
                for cc in 0..ci {
                    for di in 0..3usize {
                        for dj in 0..3usize {
                            let (ii, jj) = (stride * i + di, stride * j + dj);
                            if ii >= 1 && jj >= 1 && ii - 1 < h && jj - 1 < wd {
                                cols[(row, cc * 9 + di * 3 + dj)] = x[(n, cc, ii - 1, jj - 1)];
                            }
                        }
                    }
                }
            }
        }
    }
    let wm = w.to_owned().into_shape_with_order((co, ci * 9)).unwrap();
    let ym = cols.dot(&wm.t());
    let mut out = Array4::<f32>::zeros((bs, co, oh, ow));
    for n in 0..bs {
        for c in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    out[(n, c, i, j)] = ym[(n * oh * ow + i * ow + j, c)] + b[c];
                }
            }
        }
    }
    out
}

/// Cosine similarity between two embedding rows.
pub fn cosine_similarity(a: &Array1<f32>, b: &Array1<f32>) -> f64 {
    let dot: f64 = a.iter().zip(b.iter()).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
    let na: f64 = a.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}
