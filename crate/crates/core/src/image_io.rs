//! Image tensors and disk boundary.
//!
//! In-memory images are `(3, H, W)` f32 arrays with values in `[0, 1]`.
//! Quantization to 8-bit happens only when writing PNGs; loading dequantizes
//! back to float. Resizing uses an antialiased separable triangle filter so
//! downsampling behaves like a standard image processor rather than naive
//! point sampling.

use std::path::Path;

use image::{ImageBuffer, Rgb};
use ndarray::{Array3, Array4};

use crate::error::{Error, Result};

/// A single `(3, H, W)` image in `[0, 1]`.
pub type Image = Array3<f32>;
/// A batch of images, `(B, 3, H, W)`.
pub type ImageBatch = Array4<f32>;

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(v: u8) -> f32 {
    f32::from(v) / 255.0
}

/// Round-trip through the 8-bit disk representation without touching disk.
pub fn quantize_image(img: &Image) -> Image {
    img.mapv(|v| dequantize(quantize(v)))
}

pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::ChannelMismatch { expected: 3, got: c });
    }
    let mut buf = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            buf.put_pixel(
                j as u32,
                i as u32,
                Rgb([
                    quantize(img[(0, i, j)]),
                    quantize(img[(1, i, j)]),
                    quantize(img[(2, i, j)]),
                ]),
            );
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(Error::MissingFile(path.display().to_string()));
    }
    let img = image::open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::<f32>::zeros((3, h, w));
    for i in 0..h {
        for j in 0..w {
            let p = img.get_pixel(j as u32, i as u32);
            for ch in 0..3 {
                out[(ch, i, j)] = dequantize(p.0[ch]);
            }
        }
    }
    Ok(out)
}

/// Antialiased bilinear (triangle-filter) resize. When downsampling, the
/// filter support is widened by the scale ratio, which is what makes the
/// operation antialiasing.
pub fn resize_bilinear(img: &Image, oh: usize, ow: usize) -> Image {
    let (ch, h, w) = img.dim();
    // rows first
    let mut tmp = Array3::<f32>::zeros((ch, oh, w));
    resize_axis(img, &mut tmp, h, oh, true);
    let mut out = Array3::<f32>::zeros((ch, oh, ow));
    resize_axis(&tmp, &mut out, w, ow, false);
    out
}

fn resize_axis(src: &Array3<f32>, dst: &mut Array3<f32>, in_len: usize, out_len: usize, rows: bool) {
    let scale = in_len as f64 / out_len as f64;
    let support = scale.max(1.0); // triangle filter radius 1 in output space
    let (ch, _, other) = if rows {
        (src.dim().0, src.dim().1, src.dim().2)
    } else {
        (src.dim().0, src.dim().2, src.dim().1)
    };
    for o in 0..out_len {
        let center = (o as f64 + 0.5) * scale - 0.5;
        let lo = (center - support).floor().max(0.0) as usize;
        let hi = ((center + support).ceil() as usize).min(in_len - 1);
        let mut weights = Vec::with_capacity(hi - lo + 1);
        let mut total = 0.0f64;
        for i in lo..=hi {
            let d = (i as f64 - center).abs() / support.max(1e-12);
            let w = (1.0 - d).max(0.0);
            weights.push(w);
            total += w;
        }
        if total <= 0.0 {
            // degenerate window: nearest sample
            let i = (center.round().max(0.0) as usize).min(in_len - 1);
            weights.clear();
            weights.resize(hi - lo + 1, 0.0);
            weights[i - lo] = 1.0;
            total = 1.0;
        }
        for c in 0..ch {
            for k in 0..other {
                let mut acc = 0.0f64;
                for (idx, i) in (lo..=hi).enumerate() {
                    let v = if rows { src[(c, i, k)] } else { src[(c, k, i)] };
                    acc += weights[idx] * f64::from(v);
                }
                let v = (acc / total) as f32;
                if rows {
                    dst[(c, o, k)] = v;
                } else {
                    dst[(c, k, o)] = v;
                }
            }
        }
    }
}

/// Reflect-pad on the bottom/right so the image is at least `(th, tw)`.
pub fn reflect_pad_to(img: &Image, th: usize, tw: usize) -> Image {
    let (ch, h, w) = img.dim();
    let (nh, nw) = (h.max(th), w.max(tw));
    if nh == h && nw == w {
        return img.clone();
    }
    let mut out = Array3::<f32>::zeros((ch, nh, nw));
    for c in 0..ch {
        for i in 0..nh {
            let si = reflect_index(i, h);
            for j in 0..nw {
                let sj = reflect_index(j, w);
                out[(c, i, j)] = img[(c, si, sj)];
            }
        }
    }
    out
}

/// Reflect-pad bottom/right so both spatial dims are multiples of `m`.
pub fn pad_to_multiple(img: &Image, m: usize) -> Image {
    let (_, h, w) = img.dim();
    let nh = h.div_ceil(m) * m;
    let nw = w.div_ceil(m) * m;
    reflect_pad_to(img, nh, nw)
}

fn reflect_index(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i % period;
    if m < len {
        m
    } else {
        period - m
    }
}

/// BT.601 luma, `(H, W)` in `[0, 1]`.
pub fn luma(img: &Image) -> ndarray::Array2<f64> {
    let (_, h, w) = img.dim();
    ndarray::Array2::from_shape_fn((h, w), |(i, j)| {
        0.299 * f64::from(img[(0, i, j)])
            + 0.587 * f64::from(img[(1, i, j)])
            + 0.114 * f64::from(img[(2, i, j)])
    })
}

/// Stack images of identical shape into a batch.
pub fn batch(images: &[Image]) -> ImageBatch {
    assert!(!images.is_empty());
    let (c, h, w) = images[0].dim();
    let mut out = Array4::<f32>::zeros((images.len(), c, h, w));
    for (n, img) in images.iter().enumerate() {
        assert_eq!(img.dim(), (c, h, w));
        out.index_axis_mut(ndarray::Axis(0), n).assign(img);
    }
    out
}
