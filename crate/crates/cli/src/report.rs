//! Plot and summary emission from a saved evaluation report: a per-kind
//! grouped bar chart (degraded baseline vs restored PSNR) and, when a
//! checkpoint is supplied, the training loss/learning-rate curves.

use std::path::Path;

use anyhow::Context;
use ndarray::Array3;

use lorair_core::image_io::{save_png, Image};
use lorair_core::metrics::MetricReport;
use lorair_core::train::Checkpoint;

const BG: [f32; 3] = [1.0, 1.0, 1.0];
const BASELINE: [f32; 3] = [0.55, 0.55, 0.55];
const RESTORED: [f32; 3] = [0.15, 0.45, 0.8];
const AXIS: [f32; 3] = [0.0, 0.0, 0.0];
const CURVE: [f32; 3] = [0.8, 0.3, 0.1];

pub fn run(out: Option<&Path>, ckpt: Option<&Path>) -> anyhow::Result<()> {
    let dir = out.context("--out must point at a directory holding report.json")?;
    let report = MetricReport::load(&dir.join("report.json"))?;
    save_png(&bar_chart(&report), &dir.join("report.png"))?;
    std::fs::write(dir.join("summary.txt"), summary(&report))?;
    if let Some(cdir) = ckpt {
        let c = Checkpoint::load(cdir)?;
        save_png(&loss_curve(&c), &dir.join("curve.png"))?;
        println!("wrote report.png, summary.txt, curve.png in {}", dir.display());
    } else {
        println!("wrote report.png, summary.txt in {}", dir.display());
    }
    Ok(())
}

fn summary(r: &MetricReport) -> String {
    let mut s = String::new();
    s.push_str("kind, count, psnr_db, baseline_psnr_db, ssim, baseline_ssim\n");
    for (kind, a) in &r.per_kind {
        s.push_str(&format!(
            "{kind}, {}, {:.3}, {:.3}, {:.4}, {:.4}\n",
            a.count, a.mean_psnr_db, a.baseline_mean_psnr_db, a.mean_ssim, a.baseline_mean_ssim
        ));
    }
    s.push_str(&format!(
        "overall, {}, {:.3}, {:.3}, {:.4}, {:.4}\n",
        r.overall.count,
        r.overall.mean_psnr_db,
        r.overall.baseline_mean_psnr_db,
        r.overall.mean_ssim,
        r.overall.baseline_mean_ssim
    ));
    s.push_str(&format!("checkpoint: {}\nrouter: {}\n", r.checkpoint, r.router));
    s
}

fn blank(h: usize, w: usize) -> Image {
    Array3::from_shape_fn((3, h, w), |(c, _, _)| BG[c])
}

fn fill(img: &mut Image, y0: usize, y1: usize, x0: usize, x1: usize, color: [f32; 3]) {
    let (_, h, w) = img.dim();
    for y in y0..y1.min(h) {
        for x in x0..x1.min(w) {
            for c in 0..3 {
                img[(c, y, x)] = color[c];
            }
        }
    }
}

/// Grouped bars, one pair (baseline, restored) per kind; kinds appear in the
/// report's (alphabetical) order and are listed in `summary.txt`.
fn bar_chart(r: &MetricReport) -> Image {
    let kinds: Vec<_> = r.per_kind.iter().collect();
    let n = kinds.len().max(1);
    let (h, margin, bar_w, gap) = (240usize, 20usize, 14usize, 10usize);
    let w = 2 * margin + n * (2 * bar_w + gap) + gap;
    let mut img = blank(h, w);
    let top = kinds
        .iter()
        .map(|(_, a)| a.mean_psnr_db.max(a.baseline_mean_psnr_db))
        .fold(1.0f64, f64::max);
    let scale = (h - 2 * margin) as f64 / top;
    let base_y = h - margin;
    for (i, (_, a)) in kinds.iter().enumerate() {
        let x0 = margin + gap + i * (2 * bar_w + gap);
        let hb = (a.baseline_mean_psnr_db.max(0.0) * scale) as usize;
        let hr = (a.mean_psnr_db.max(0.0) * scale) as usize;
        fill(&mut img, base_y - hb, base_y, x0, x0 + bar_w, BASELINE);
        fill(&mut img, base_y - hr, base_y, x0 + bar_w, x0 + 2 * bar_w, RESTORED);
    }
    fill(&mut img, base_y, base_y + 2, 0, w, AXIS);
    img
}

fn loss_curve(c: &Checkpoint) -> Image {
    let losses = &c.history.losses;
    let (h, w, margin) = (240usize, 480usize, 20usize);
    let mut img = blank(h, w);
    if losses.len() >= 2 {
        let lo = losses.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        let px = (w - 2 * margin) as f64 / (losses.len() - 1) as f64;
        let py = (h - 2 * margin) as f64 / span;
        for (i, &l) in losses.iter().enumerate() {
            let x = margin + (i as f64 * px) as usize;
            let y = h - margin - ((l - lo) * py) as usize;
            fill(&mut img, y.saturating_sub(1), y + 1, x, x + 2, CURVE);
        }
    }
    fill(&mut img, h - margin, h - margin + 2, 0, w, AXIS);
    img
}
