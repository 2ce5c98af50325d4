//! Token-lattice operations: overlapping patch embedding, 2x2 patch
//! merging, 2x patch expanding and the final 4x expansion.
//!
//! Merge and expand share one raster convention for a 2x2 neighbourhood:
//! row-major `(dy, dx)`, i.e. top-left, top-right, bottom-left,
//! bottom-right.

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::ops::{conv_out_extent, Conv2dOptions};
use crate::params::{Bound, Init, ParamBuilder, INIT_STD};

pub const LN_EPS: f64 = 1e-6;

/// Token lattice extents `(rows, cols)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn new(h: usize, w: usize) -> Self {
        Grid { h, w }
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn halved(&self) -> Grid {
        Grid { h: self.h / 2, w: self.w / 2 }
    }

    pub fn doubled(&self) -> Grid {
        Grid { h: self.h * 2, w: self.w * 2 }
    }
}

/// Overlapping patch embedding geometry. Defaults to kernel 7, stride 4,
/// pad 3 followed by a layer norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedConfig {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub norm: bool,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig { kernel: 7, stride: 4, pad: 3, norm: true }
    }
}

impl EmbedConfig {
    pub fn grid(&self, h: usize, w: usize) -> Result<Grid> {
        Ok(Grid::new(
            conv_out_extent(h, self.kernel, self.stride, self.pad)?,
            conv_out_extent(w, self.kernel, self.stride, self.pad)?,
        ))
    }

    pub fn param_count(&self, in_channels: usize, width: usize) -> usize {
        let conv = width * in_channels * self.kernel * self.kernel + width;
        conv + if self.norm { 2 * width } else { 0 }
    }
}

pub fn register_embed(b: &mut ParamBuilder, prefix: &str, in_ch: usize, width: usize, e: &EmbedConfig) -> Result<()> {
    b.conv(&format!("{prefix}.proj"), [width, in_ch, e.kernel, e.kernel], Init::TruncNormal(INIT_STD))?;
    if e.norm {
        b.layer_norm(&format!("{prefix}.norm"), width)?;
    }
    Ok(())
}

/// `[b, c, H, W]` image to `[b, n, width]` tokens on the returned grid.
pub fn patch_embed(tape: &mut Tape, p: &Bound, prefix: &str, img: Var, e: &EmbedConfig) -> Result<(Var, Grid)> {
    let shape = tape.shape(img).to_vec();
    if shape.len() != 4 {
        return Err(shape_err(format!("patch_embed expects [b, c, H, W], got {shape:?}")));
    }
    let (h, w) = (shape[2], shape[3]);
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::BadInputExtent { h, w });
    }
    let opts = Conv2dOptions { stride: e.stride, pad: e.pad, groups: 1 };
    let conv = tape.conv2d(
        img,
        p.var(&format!("{prefix}.proj.weight"))?,
        p.var(&format!("{prefix}.proj.bias"))?,
        opts,
    )?;
    let cs = tape.shape(conv).to_vec();
    let grid = Grid::new(cs[2], cs[3]);
    let flat = tape.reshape(conv, &[cs[0], cs[1], grid.tokens()])?;
    let tokens = tape.permute(flat, &[0, 2, 1])?;
    if !e.norm {
        return Ok((tokens, grid));
    }
    let out = tape.layer_norm(
        tokens,
        p.var(&format!("{prefix}.norm.gamma"))?,
        p.var(&format!("{prefix}.norm.beta"))?,
        LN_EPS,
    )?;
    Ok((out, grid))
}

fn token_dims(tape: &Tape, x: Var, grid: Grid) -> Result<(usize, usize)> {
    let s = tape.shape(x);
    if s.len() != 3 || s[1] != grid.tokens() {
        return Err(shape_err(format!("expected [b, {}, c] tokens for grid {grid:?}, got {s:?}", grid.tokens())));
    }
    Ok((s[0], s[2]))
}

pub fn register_merge(b: &mut ParamBuilder, prefix: &str, c: usize) -> Result<()> {
    b.layer_norm(&format!("{prefix}.norm"), 4 * c)?;
    b.linear(&format!("{prefix}.reduction"), 4 * c, 2 * c, false)
}

pub fn merge_param_count(c: usize) -> usize {
    8 * c + 8 * c * c
}

/// Gather each 2x2 neighbourhood into a `4c` vector, layer-normalize it and
/// project to `2c`.
pub fn patch_merge(tape: &mut Tape, p: &Bound, prefix: &str, x: Var, grid: Grid) -> Result<(Var, Grid)> {
    let gathered = merge_gather(tape, x, grid)?;
    let normed = tape.layer_norm(
        gathered,
        p.var(&format!("{prefix}.norm.gamma"))?,
        p.var(&format!("{prefix}.norm.beta"))?,
        LN_EPS,
    )?;
    let out = tape.linear(normed, p.var(&format!("{prefix}.reduction.weight"))?, None)?;
    Ok((out, grid.halved()))
}

/// The layout half of [`patch_merge`]: `[b, n, c]` to `[b, n/4, 4c]`.
pub fn merge_gather(tape: &mut Tape, x: Var, grid: Grid) -> Result<Var> {
    let (b, c) = token_dims(tape, x, grid)?;
    if grid.h % 2 != 0 || grid.w % 2 != 0 {
        return Err(Error::OddGrid { h: grid.h, w: grid.w });
    }
    let (h2, w2) = (grid.h / 2, grid.w / 2);
    let r = tape.reshape(x, &[b, h2, 2, w2, 2, c])?;
    let r = tape.permute(r, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(r, &[b, h2 * w2, 4 * c])
}

/// Inverse layout of [`merge_gather`] generalized to a `factor x factor`
/// neighbourhood: `[b, n, f*f*c]` to `[b, f*f*n, c]`.
fn scatter(tape: &mut Tape, x: Var, grid: Grid, factor: usize, c: usize) -> Result<Var> {
    let b = tape.shape(x)[0];
    let r = tape.reshape(x, &[b, grid.h, grid.w, factor, factor, c])?;
    let r = tape.permute(r, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(r, &[b, grid.tokens() * factor * factor, c])
}

pub fn register_expand(b: &mut ParamBuilder, prefix: &str, c: usize) -> Result<()> {
    b.linear(&format!("{prefix}.expand"), c, 2 * c, false)
}

pub fn expand_param_count(c: usize) -> usize {
    2 * c * c
}

/// Project `c -> 2c` and unfold each token into a 2x2 block of `c/2`
/// channel tokens.
pub fn patch_expand(tape: &mut Tape, p: &Bound, prefix: &str, x: Var, grid: Grid) -> Result<(Var, Grid)> {
    let (_, c) = token_dims(tape, x, grid)?;
    if c % 2 != 0 {
        return Err(Error::OddChannels(c));
    }
    let y = tape.linear(x, p.var(&format!("{prefix}.expand.weight"))?, None)?;
    Ok((scatter(tape, y, grid, 2, c / 2)?, grid.doubled()))
}

pub fn register_expand4(b: &mut ParamBuilder, prefix: &str, c: usize) -> Result<()> {
    b.linear(&format!("{prefix}.expand"), c, 16 * c, false)
}

pub fn expand4_param_count(c: usize) -> usize {
    16 * c * c
}

/// Project `c -> 16c` and unfold each token into a 4x4 block of `c`
/// channel tokens, restoring full input resolution.
pub fn final_expand4(tape: &mut Tape, p: &Bound, prefix: &str, x: Var, grid: Grid) -> Result<(Var, Grid)> {
    let (_, c) = token_dims(tape, x, grid)?;
    let y = tape.linear(x, p.var(&format!("{prefix}.expand.weight"))?, None)?;
    Ok((scatter(tape, y, grid, 4, c)?, Grid::new(grid.h * 4, grid.w * 4)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ModelParams;
    use crate::tensor::Tensor;

    fn bound(tape: &mut Tape, params: &ModelParams) -> Bound {
        params.bind(tape)
    }

    #[test]
    fn embed_token_counts() {
        let e = EmbedConfig::default();
        assert_eq!(e.grid(224, 224).unwrap().tokens(), 3136);
        assert_eq!(e.grid(64, 64).unwrap().tokens(), 256);
        assert_eq!(e.grid(384, 384).unwrap(), Grid::new(96, 96));
    }

    #[test]
    fn embed_rejects_bad_extent_and_zero_image_is_zero() {
        let mut b = ParamBuilder::new(1);
        let e = EmbedConfig { norm: false, ..Default::default() };
        register_embed(&mut b, "embed", 3, 8, &e).unwrap();
        let params = b.finish();
        let mut tape = Tape::inference();
        let p = bound(&mut tape, &params);
        let bad = tape.constant(Tensor::zeros([1, 3, 48, 64]));
        assert!(matches!(patch_embed(&mut tape, &p, "embed", bad, &e), Err(Error::BadInputExtent { .. })));
        let img = tape.constant(Tensor::zeros([1, 3, 32, 32]));
        let (tokens, grid) = patch_embed(&mut tape, &p, "embed", img, &e).unwrap();
        assert_eq!(grid, Grid::new(8, 8));
        assert_eq!(tape.value(tokens), &Tensor::zeros([1, 64, 8]));
    }

    #[test]
    fn merge_gathers_row_major() {
        // 2x4 grid, 1 channel; token value = its index.
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::from_fn([1, 8, 1], |i| i as f64));
        let g = merge_gather(&mut tape, x, Grid::new(2, 4)).unwrap();
        assert_eq!(tape.value(g).data(), &[0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0]);
        let odd = tape.constant(Tensor::zeros([1, 6, 1]));
        assert!(matches!(merge_gather(&mut tape, odd, Grid::new(3, 2)), Err(Error::OddGrid { .. })));
    }

    #[test]
    fn constant_field_merges_to_repeated_token() {
        let mut tape = Tape::inference();
        let token = [0.5, -1.0, 2.0];
        let x = tape.constant(Tensor::from_fn([1, 4, 3], |i| token[i % 3]));
        let g = merge_gather(&mut tape, x, Grid::new(2, 2)).unwrap();
        let expect: Vec<f64> = (0..4).flat_map(|_| token).collect();
        assert_eq!(tape.value(g).data(), expect.as_slice());
    }

    #[test]
    fn merge_expand_shapes() {
        let mut b = ParamBuilder::new(3);
        register_merge(&mut b, "m", 4).unwrap();
        register_expand(&mut b, "e", 8).unwrap();
        register_expand4(&mut b, "f", 4).unwrap();
        let params = b.finish();
        assert_eq!(params.total_count(), merge_param_count(4) + expand_param_count(8) + expand4_param_count(4));
        let mut tape = Tape::inference();
        let p = bound(&mut tape, &params);
        let x = tape.constant(Tensor::from_fn([2, 16, 4], |i| (i as f64).sin()));
        let (m, g) = patch_merge(&mut tape, &p, "m", x, Grid::new(4, 4)).unwrap();
        assert_eq!((tape.shape(m), g), (&[2, 4, 8][..], Grid::new(2, 2)));
        let (e, g) = patch_expand(&mut tape, &p, "e", m, g).unwrap();
        assert_eq!((tape.shape(e), g), (&[2, 16, 4][..], Grid::new(4, 4)));
        let (f, g) = final_expand4(&mut tape, &p, "f", e, g).unwrap();
        assert_eq!((tape.shape(f), g), (&[2, 256, 4][..], Grid::new(16, 16)));
        let odd = tape.constant(Tensor::zeros([1, 4, 3]));
        assert!(matches!(patch_expand(&mut tape, &p, "e", odd, Grid::new(2, 2)), Err(Error::OddChannels(3))));
    }

    #[test]
    fn expand_inverts_merge_layout() {
        // scatter(gather(x)) with an identity projection is the identity.
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::from_fn([1, 16, 2], |i| i as f64));
        let g = merge_gather(&mut tape, x, Grid::new(4, 4)).unwrap();
        let back = scatter(&mut tape, g, Grid::new(2, 2), 2, 2).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }

    #[test]
    fn zero_expand4_weights_give_zero() {
        let mut params = ModelParams::new();
        params.insert("f.expand.weight", Tensor::zeros([3, 48])).unwrap();
        let mut tape = Tape::inference();
        let p = bound(&mut tape, &params);
        let x = tape.constant(Tensor::from_fn([1, 4, 3], |i| i as f64 + 1.0));
        let (y, _) = final_expand4(&mut tape, &p, "f", x, Grid::new(2, 2)).unwrap();
        assert_eq!(tape.value(y), &Tensor::zeros([1, 64, 3]));
    }
}
