//! Distortion metrics (PSNR, SSIM) and manifest-level evaluation.
//!
//! Metrics are computed in double precision regardless of model precision.
//! PSNR of an exact match is reported as a 100 dB cap so aggregates stay
//! finite.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::{self, Image};

/// PSNR cap used when MSE is exactly zero.
pub const PSNR_CAP_DB: f64 = 100.0;

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.dim()),
            got: format!("{:?}", b.dim()),
        });
    }
    let mse: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean local SSIM on luma: 11x11 Gaussian window with sigma 1.5,
/// C1 = 0.01^2, C2 = 0.03^2 on the [0, 1] range.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.dim()),
            got: format!("{:?}", b.dim()),
        });
    }
    let la = image_io::luma(a);
    let lb = image_io::luma(b);
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);

    let mu_a = gaussian_filter(&la);
    let mu_b = gaussian_filter(&lb);
    let aa = gaussian_filter(&(&la * &la));
    let bb = gaussian_filter(&(&lb * &lb));
    let ab = gaussian_filter(&(&la * &lb));

    let (h, w) = la.dim();
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            let (ma, mb) = (mu_a[(i, j)], mu_b[(i, j)]);
            let va = aa[(i, j)] - ma * ma;
            let vb = bb[(i, j)] - mb * mb;
            let cov = ab[(i, j)] - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            total += s;
        }
    }
    Ok(total / (h * w) as f64)
}

/// 11x11 separable Gaussian (sigma 1.5) with reflected borders.
fn gaussian_filter(x: &Array2<f64>) -> Array2<f64> {
    const RADIUS: isize = 5;
    const SIGMA: f64 = 1.5;
    let mut kernel = [0.0f64; 11];
    let mut total = 0.0;
    for d in -RADIUS..=RADIUS {
        let v = (-0.5 * (d as f64 / SIGMA).powi(2)).exp();
        kernel[(d + RADIUS) as usize] = v;
        total += v;
    }
    for v in &mut kernel {
        *v /= total;
    }
    let (h, w) = x.dim();
    let reflect = |i: isize, len: usize| -> usize {
        let len = len as isize;
        if len == 1 {
            return 0;
        }
        let period = 2 * (len - 1);
        let mut m = i.rem_euclid(period);
        if m >= len {
            m = period - m;
        }
        m as usize
    };
    let mut tmp = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for d in -RADIUS..=RADIUS {
                acc += kernel[(d + RADIUS) as usize] * x[(reflect(i as isize + d, h), j)];
            }
            tmp[(i, j)] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for d in -RADIUS..=RADIUS {
                acc += kernel[(d + RADIUS) as usize] * tmp[(i, reflect(j as isize + d, w))];
            }
            out[(i, j)] = acc;
        }
    }
    out
}

/// One evaluated manifest entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub kinds: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub baseline_psnr_db: f64,
    pub baseline_ssim: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct KindAggregate {
    pub count: usize,
    pub mean_psnr_db: f64,
    pub std_psnr_db: f64,
    pub mean_ssim: f64,
    pub baseline_mean_psnr_db: f64,
    pub baseline_mean_ssim: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub checkpoint: String,
    pub router: String,
    pub config_echo: String,
    pub rows: Vec<MetricRow>,
    pub per_kind: BTreeMap<String, KindAggregate>,
    pub overall: KindAggregate,
}

impl MetricReport {
    pub fn assemble(checkpoint: &str, router: &str, config_echo: &str, rows: Vec<MetricRow>) -> Self {
        let mut groups: BTreeMap<String, Vec<&MetricRow>> = BTreeMap::new();
        for r in &rows {
            groups.entry(r.kinds.clone()).or_default().push(r);
        }
        let agg = |rs: &[&MetricRow]| {
            let n = rs.len() as f64;
            let mean_psnr = rs.iter().map(|r| r.psnr_db).sum::<f64>() / n;
            let var = rs
                .iter()
                .map(|r| (r.psnr_db - mean_psnr).powi(2))
                .sum::<f64>()
                / n;
            KindAggregate {
                count: rs.len(),
                mean_psnr_db: mean_psnr,
                std_psnr_db: var.sqrt(),
                mean_ssim: rs.iter().map(|r| r.ssim).sum::<f64>() / n,
                baseline_mean_psnr_db: rs.iter().map(|r| r.baseline_psnr_db).sum::<f64>() / n,
                baseline_mean_ssim: rs.iter().map(|r| r.baseline_ssim).sum::<f64>() / n,
            }
        };
        let per_kind = groups
            .iter()
            .map(|(k, rs)| (k.clone(), agg(rs)))
            .collect();
        let all: Vec<&MetricRow> = rows.iter().collect();
        let overall = agg(&all);
        MetricReport {
            checkpoint: checkpoint.to_string(),
            router: router.to_string(),
            config_echo: config_echo.to_string(),
            rows,
            per_kind,
            overall,
        }
    }

    pub fn save(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(json_path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        use std::io::Write;
        writeln!(f)?;
        let mut csv = String::from("id,kinds,psnr_db,ssim,baseline_psnr_db,baseline_ssim\n");
        for r in &self.rows {
            csv.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6}\n",
                r.id, r.kinds, r.psnr_db, r.ssim, r.baseline_psnr_db, r.baseline_ssim
            ));
        }
        std::fs::write(csv_path, csv)?;
        Ok(())
    }

    pub fn load(json_path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(std::io::BufReader::new(
            std::fs::File::open(json_path)?,
        ))?)
    }
}

/// Evaluate one restoration checkpoint + one router over a manifest split:
/// the same pair serves every degradation kind (all-in-one contract).
pub fn evaluate(
    ckpt: &crate::train::Checkpoint,
    encoder: &crate::backbone::FrozenEncoder,
    router: &crate::router::Router,
    corpus_dir: &Path,
    manifest: &crate::synth::CorpusManifest,
) -> Result<MetricReport> {
    if let Some(n) = ckpt.net.experts {
        if n != router.n {
            return Err(Error::RouterCheckpointMismatch { router_n: router.n, ckpt_n: n });
        }
    }
    let mut rows = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let lq = image_io::load_png(&corpus_dir.join(&e.lq))?;
        let hq = image_io::load_png(&corpus_dir.join(&e.hq))?;
        let restored = crate::train::restore_with(ckpt, encoder, router, &lq)?;
        let kinds = e
            .label
            .iter()
            .map(|&id| manifest.kinds[id].to_string())
            .collect::<Vec<_>>()
            .join("+");
        rows.push(MetricRow {
            id: e.lq.clone(),
            kinds,
            psnr_db: psnr(&restored, &hq)?,
            ssim: ssim(&restored, &hq)?,
            baseline_psnr_db: psnr(&lq, &hq)?,
            baseline_ssim: ssim(&lq, &hq)?,
        });
    }
    Ok(MetricReport::assemble(
        &ckpt.params_checksum(),
        &router.checksum(),
        &ckpt.config_echo,
        rows,
    ))
}
