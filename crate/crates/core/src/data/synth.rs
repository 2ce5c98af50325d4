//! Synthetic lesion images: a textured skin-toned background with one or
//! more filled, rotated ellipses that form the mask and carry a darker tint.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub count: usize,
    pub hw: [usize; 2],
    /// Inclusive range of ellipses per sample.
    pub ellipses: [usize; 2],
    /// Accepted band for the positive mask fraction.
    pub fraction: [f64; 2],
    /// Semi-axis range as a fraction of the shorter image side.
    pub axis: [f64; 2],
    pub background: [f64; 3],
    pub lesion: [f64; 3],
    /// Peak amplitude of the low-frequency background texture.
    pub texture: f64,
    /// Std of the additive per-pixel Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            count: 250,
            hw: [64, 64],
            ellipses: [1, 3],
            fraction: [0.05, 0.60],
            axis: [0.10, 0.35],
            background: [0.86, 0.68, 0.58],
            lesion: [0.45, 0.27, 0.20],
            texture: 0.06,
            noise: 0.04,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        let [h, w] = self.hw;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return bad(format!("hw {h}x{w} must be positive multiples of 32"));
        }
        if self.ellipses[0] == 0 || self.ellipses[0] > self.ellipses[1] {
            return bad(format!("ellipse range {:?}", self.ellipses));
        }
        let [lo, hi] = self.fraction;
        if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
            return bad(format!("fraction band {:?}", self.fraction));
        }
        if !(self.axis[0] > 0.0 && self.axis[0] <= self.axis[1]) {
            return bad(format!("axis range {:?}", self.axis));
        }
        if !(self.noise >= 0.0 && self.texture >= 0.0) {
            return bad("noise and texture must be nonnegative".into());
        }
        Ok(())
    }
}

/// Ellipse in pixel coordinates; `theta` rotates the `a` axis off +x.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    /// Whether the centre of pixel `(row, col)` lies inside.
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let (dx, dy) = (col as f64 + 0.5 - self.cx, row as f64 + 0.5 - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Rasterize the union of `ellipses` into a `[1, h, w]` binary mask.
pub fn rasterize(ellipses: &[Ellipse], h: usize, w: usize) -> Tensor {
    Tensor::from_fn([1, h, w], |i| {
        let (r, c) = (i / w, i % w);
        if ellipses.iter().any(|e| e.contains(r, c)) {
            1.0
        } else {
            0.0
        }
    })
}

fn sample_ellipses(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Ellipse> {
    let [h, w] = spec.hw;
    let side = h.min(w) as f64;
    let k = rng.gen_range(spec.ellipses[0]..=spec.ellipses[1]);
    (0..k)
        .map(|_| Ellipse {
            cx: rng.gen_range(0.2..0.8) * w as f64,
            cy: rng.gen_range(0.2..0.8) * h as f64,
            a: rng.gen_range(spec.axis[0]..=spec.axis[1]) * side,
            b: rng.gen_range(spec.axis[0]..=spec.axis[1]) * side,
            theta: rng.gen_range(0.0..std::f64::consts::PI),
        })
        .collect()
}

fn paint(spec: &SynthSpec, mask: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let [h, w] = spec.hw;
    let noise = Normal::new(0.0, spec.noise).expect("validated std");
    // two random plane waves per channel give a blotchy skin texture
    let waves: Vec<[f64; 3]> = (0..6)
        .map(|_| {
            let freq = rng.gen_range(1.0..4.0) * std::f64::consts::TAU;
            let dir = rng.gen_range(0.0..std::f64::consts::TAU);
            [freq * dir.cos() / w as f64, freq * dir.sin() / h as f64, rng.gen_range(0.0..std::f64::consts::TAU)]
        })
        .collect();
    let shade: f64 = rng.gen_range(-0.08..0.08);
    let tint: [f64; 3] = std::array::from_fn(|c| spec.lesion[c] + rng.gen_range(-0.06..0.06));
    let m = mask.data();
    let mut out = vec![0.0; 3 * h * w];
    for c in 0..3 {
        let [w0, w1] = [&waves[2 * c], &waves[2 * c + 1]];
        for r in 0..h {
            for col in 0..w {
                let p = r * w + col;
                let (x, y) = (col as f64, r as f64);
                let tex = 0.5 * spec.texture * ((w0[0] * x + w0[1] * y + w0[2]).sin() + (w1[0] * x + w1[1] * y + w1[2]).sin());
                let base = if m[p] > 0.5 { tint[c] } else { spec.background[c] + shade };
                let v = base + tex + if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
                out[c * h * w + p] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new([3, h, w], out).expect("extents match")
}

/// Generate `spec.count` samples together with the ellipses behind each mask.
pub fn synth_dataset_recorded(spec: &SynthSpec) -> Result<Vec<(Sample, Vec<Ellipse>)>> {
    spec.validate()?;
    let [h, w] = spec.hw;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let width = (spec.count.max(1) - 1).to_string().len();
    (0..spec.count)
        .map(|i| {
            let (mask, ellipses) = (0..MAX_ATTEMPTS)
                .find_map(|_| {
                    let ellipses = sample_ellipses(spec, &mut rng);
                    let mask = rasterize(&ellipses, h, w);
                    let frac = mask.sum() / (h * w) as f64;
                    (spec.fraction[0]..=spec.fraction[1]).contains(&frac).then_some((mask, ellipses))
                })
                .ok_or_else(|| {
                    Error::InvalidSpec(format!("no ellipse set within fraction band {:?} after {MAX_ATTEMPTS} draws", spec.fraction))
                })?;
            let image = paint(spec, &mask, &mut rng);
            Ok((Sample::new(format!("synth_{i:0width$}"), image, mask)?, ellipses))
        })
        .collect()
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<Vec<Sample>> {
    Ok(synth_dataset_recorded(spec)?.into_iter().map(|(s, _)| s).collect())
}
