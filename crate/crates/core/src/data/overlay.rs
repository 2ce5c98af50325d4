//! Contour overlays: ground truth in green, prediction in blue on top.

use std::path::Path;

use super::{image_to_pnm, pnm};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GT_COLOR: [u8; 3] = [0, 255, 0];
pub const PRED_COLOR: [u8; 3] = [0, 0, 255];

/// Positive pixels of an `[.., H, W]` binary mask with at least one in-bounds
/// 4-neighbour of the opposite value.
pub fn contour(mask: &Tensor) -> Vec<bool> {
    let s = mask.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let m = &mask.data()[..h * w];
    let on = |r: usize, c: usize| m[r * w + c] > 0.5;
    (0..h * w)
        .map(|p| {
            let (r, c) = (p / w, p % w);
            on(r, c)
                && ((r > 0 && !on(r - 1, c))
                    || (r + 1 < h && !on(r + 1, c))
                    || (c > 0 && !on(r, c - 1))
                    || (c + 1 < w && !on(r, c + 1)))
        })
        .collect()
}

/// Paint both contours onto an interleaved RGB copy of `image`. The
/// prediction is painted second, so it wins where the two coincide.
pub fn overlay_contours(image: &Tensor, gt: &Tensor, pred: &Tensor) -> Result<pnm::Pnm> {
    let hw = &image.shape()[1..];
    for (name, m) in [("ground truth", gt), ("prediction", pred)] {
        if &m.shape()[m.shape().len() - 2..] != hw || m.numel() != hw[0] * hw[1] {
            return Err(Error::ExtentMismatch(format!("{name} mask {:?} vs image {:?}", m.shape(), image.shape())));
        }
    }
    let mut out = image_to_pnm(image);
    for (mask, color) in [(gt, GT_COLOR), (pred, PRED_COLOR)] {
        for (p, _) in contour(mask).iter().enumerate().filter(|(_, &b)| b) {
            out.data[3 * p..3 * p + 3].copy_from_slice(&color);
        }
    }
    Ok(out)
}

pub fn write_overlay(image: &Tensor, gt: &Tensor, pred: &Tensor, path: &Path) -> Result<()> {
    pnm::write(path, &overlay_contours(image, gt, pred)?)
}
