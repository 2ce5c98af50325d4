//! Image/mask samples, NetPBM dataset folders, synthetic lesions and
//! contour overlays.
//!
//! A dataset folder holds pairs `<id>.ppm` (P6 image) and `<id>_mask.pgm`
//! (P5 mask). Samples are returned in lexicographic id order.

pub mod overlay;
pub mod pnm;
pub mod synth;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use pnm::{Pnm, PnmKind};

pub use overlay::{contour, overlay_contours, write_overlay};
pub use synth::{synth_dataset, synth_dataset_recorded, Ellipse, SynthSpec};

/// Mask samples at or above this 8-bit level are foreground.
pub const MASK_THRESHOLD: u8 = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// `[1, H, W]` in `{0, 1}`.
    pub mask: Tensor,
    pub id: String,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor, mask: Tensor) -> Result<Self> {
        let (is, ms) = (image.shape(), mask.shape());
        if is.len() != 3 || is[0] != 3 || ms.len() != 3 || ms[0] != 1 || is[1..] != ms[1..] {
            return Err(Error::ExtentMismatch(format!("image {is:?} vs mask {ms:?}")));
        }
        Ok(Sample { image, mask, id: id.into() })
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }
}

/// Bilinear resampling of a `[c, h, w]` plane stack with half-pixel
/// centres and edge clamping.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let axis = |o: usize, n_in: usize, n_out: usize| {
        let pos = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, pos - i0 as f64)
    };
    let ys: Vec<_> = (0..out_h).map(|o| axis(o, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|o| axis(o, w, out_w)).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new([c, out_h, out_w], out).expect("extents computed above")
}

/// Nearest-neighbour resampling of an 8-bit single-channel raster.
pub fn resize_nearest(data: &[u8], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let y = ((oy * 2 + 1) * h / (2 * out_h)).min(h - 1);
        for ox in 0..out_w {
            let x = ((ox * 2 + 1) * w / (2 * out_w)).min(w - 1);
            out.push(data[y * w + x]);
        }
    }
    out
}

fn image_from_pnm(img: &Pnm) -> Tensor {
    let (h, w) = (img.height, img.width);
    let scale = img.maxval as f64;
    Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        img.data[p * 3 + c] as f64 / scale
    })
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Interleave a `[3, H, W]` tensor in `[0, 1]` into a P6 raster.
pub fn image_to_pnm(image: &Tensor) -> Pnm {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    let data = (0..h * w).flat_map(|p| (0..3).map(move |c| quantize(d[c * h * w + p]))).collect();
    Pnm { kind: PnmKind::Rgb, width: w, height: h, maxval: 255, data }
}

/// A binary `[1, H, W]` mask (or any values in `[0, 1]`) as a P5 raster.
pub fn mask_to_pnm(mask: &Tensor) -> Pnm {
    let (h, w) = (mask.shape()[1], mask.shape()[2]);
    Pnm { kind: PnmKind::Gray, width: w, height: h, maxval: 255, data: mask.data().iter().map(|&v| quantize(v)).collect() }
}

/// Load one P6 image, resized bilinearly to `hw` and scaled to `[0, 1]`.
/// Also returns the original `(height, width)`.
pub fn load_image(path: &Path, hw: (usize, usize)) -> Result<(Tensor, (usize, usize))> {
    let img = pnm::read(path)?;
    if img.kind != PnmKind::Rgb {
        return Err(Error::MalformedPnm(format!("{}: expected a P6 image", path.display())));
    }
    Ok((resize_bilinear(&image_from_pnm(&img), hw.0, hw.1), (img.height, img.width)))
}

fn load_mask(path: &Path, hw: (usize, usize)) -> Result<(Tensor, (usize, usize))> {
    let m = pnm::read(path)?;
    if m.kind != PnmKind::Gray {
        return Err(Error::MalformedPnm(format!("{}: expected a P5 mask", path.display())));
    }
    let resized = resize_nearest(&m.data, m.height, m.width, hw.0, hw.1);
    let full = |v: u8| (v as u32 * 255 / m.maxval as u32) as u8;
    let data = resized.iter().map(|&v| if full(v) >= MASK_THRESHOLD { 1.0 } else { 0.0 }).collect();
    Ok((Tensor::new([1, hw.0, hw.1], data)?, (m.height, m.width)))
}

/// Load every `<id>.ppm` / `<id>_mask.pgm` pair in `dir`.
pub fn load_dataset(dir: &Path, hw: (usize, usize)) -> Result<Vec<Sample>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "ppm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_owned());
            }
        }
    }
    ids.sort();
    let mut samples = Vec::with_capacity(ids.len());
    for id in ids {
        let mask_path = dir.join(format!("{id}_mask.pgm"));
        if !mask_path.is_file() {
            return Err(Error::MissingMask(mask_path));
        }
        let image_path = dir.join(format!("{id}.ppm"));
        let raw = pnm::read(&image_path)?;
        let (mask, mask_hw) = load_mask(&mask_path, hw)?;
        if (raw.height, raw.width) != mask_hw {
            return Err(Error::ExtentMismatch(format!(
                "{id}: image {}x{} vs mask {}x{}",
                raw.height, raw.width, mask_hw.0, mask_hw.1
            )));
        }
        if raw.kind != PnmKind::Rgb {
            return Err(Error::MalformedPnm(format!("{}: expected a P6 image", image_path.display())));
        }
        let image = resize_bilinear(&image_from_pnm(&raw), hw.0, hw.1);
        samples.push(Sample::new(id, image, mask)?);
    }
    Ok(samples)
}

/// Write a sample as `<id>.ppm` and `<id>_mask.pgm` under `dir`.
pub fn save_sample(dir: &Path, sample: &Sample) -> Result<()> {
    pnm::write(&dir.join(format!("{}.ppm", sample.id)), &image_to_pnm(&sample.image))?;
    pnm::write(&dir.join(format!("{}_mask.pgm", sample.id)), &mask_to_pnm(&sample.mask))
}

/// Seeded shuffle, then the first `val_count` samples become validation.
pub fn split_dataset(mut samples: Vec<Sample>, val_count: usize, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if val_count >= samples.len() {
        return Err(Error::InvalidConfig(format!(
            "validation split {val_count} leaves no training data out of {}",
            samples.len()
        )));
    }
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = samples.split_off(val_count);
    Ok((train, samples))
}

/// Stack samples into `[b, 3, H, W]` images and `[b, 1, H, W]` masks.
pub fn stack(samples: &[&Sample]) -> Result<(Tensor, Tensor)> {
    let (h, w) = samples.first().ok_or_else(|| Error::InvalidConfig("empty batch".into()))?.hw();
    let mut img = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut mask = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.hw() != (h, w) {
            return Err(Error::ExtentMismatch(format!("sample {} is {:?}, batch is {:?}", s.id, s.hw(), (h, w))));
        }
        img.extend_from_slice(s.image.data());
        mask.extend_from_slice(s.mask.data());
    }
    Ok((Tensor::new([samples.len(), 3, h, w], img)?, Tensor::new([samples.len(), 1, h, w], mask)?))
}
