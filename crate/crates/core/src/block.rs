//! Mix-FFN and the efficient transformer block:
//!
//! ```text
//! x1 = E(Q, K, V) + x
//! y  = MixFFN(LN(x1)) + x1
//! ```

use crate::attention::{self, AttentionConfig};
use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::ops::Conv2dOptions;
use crate::params::{Bound, Init, ParamBuilder, INIT_STD};
use crate::patch::{Grid, LN_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub d_model: usize,
    pub grid: Grid,
    pub blocks_per_stage: usize,
    pub ffn_expansion: usize,
    pub heads: usize,
    /// Layer-normalize the attention input. Off by default: the residual
    /// equation above feeds `x` to attention directly.
    pub attn_pre_norm: bool,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.h == 0 || self.grid.w == 0 {
            return Err(Error::InvalidConfig(format!("empty token grid {:?}", self.grid)));
        }
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return Err(Error::InvalidConfig(format!("stage width {} must be even", self.d_model)));
        }
        if self.ffn_expansion == 0 || self.blocks_per_stage == 0 {
            return Err(Error::InvalidConfig("ffn_expansion and blocks_per_stage must be positive".into()));
        }
        self.attention().validate()
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig { d_model: self.d_model, d_k: self.d_model / 2, d_v: self.d_model, heads: self.heads }
    }

    pub fn block_param_count(&self) -> usize {
        let d = self.d_model;
        let hidden = self.ffn_expansion * d;
        let norms = if self.attn_pre_norm { 4 * d } else { 2 * d };
        let ffn = (d * hidden + hidden) + (hidden * 9 + hidden) + (hidden * d + d);
        self.attention().param_count() + norms + ffn
    }
}

pub fn register_mix_ffn(b: &mut ParamBuilder, prefix: &str, c: usize, expansion: usize) -> Result<()> {
    let hidden = c * expansion;
    b.linear(&format!("{prefix}.fc1"), c, hidden, true)?;
    b.conv(&format!("{prefix}.dw"), [hidden, 1, 3, 3], Init::TruncNormal(INIT_STD))?;
    b.linear(&format!("{prefix}.fc2"), hidden, c, true)
}

fn linear_named(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    tape.linear(x, p.var(&format!("{prefix}.weight"))?, p.try_var(&format!("{prefix}.bias")))
}

/// `fc1 -> depthwise 3x3 conv on the token grid -> GELU -> fc2`.
pub fn mix_ffn(tape: &mut Tape, p: &Bound, prefix: &str, x: Var, grid: Grid) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[1] != grid.tokens() {
        return Err(shape_err(format!("mix_ffn input {s:?} does not match grid {grid:?}")));
    }
    let h = linear_named(tape, p, &format!("{prefix}.fc1"), x)?;
    let hidden = tape.shape(h)[2];
    let chw = tape.permute(h, &[0, 2, 1])?;
    let img = tape.reshape(chw, &[s[0], hidden, grid.h, grid.w])?;
    let conv = tape.conv2d(
        img,
        p.var(&format!("{prefix}.dw.weight"))?,
        p.var(&format!("{prefix}.dw.bias"))?,
        Conv2dOptions { stride: 1, pad: 1, groups: hidden },
    )?;
    let act = tape.gelu(conv);
    let flat = tape.reshape(act, &[s[0], hidden, grid.tokens()])?;
    let tokens = tape.permute(flat, &[0, 2, 1])?;
    linear_named(tape, p, &format!("{prefix}.fc2"), tokens)
}

pub fn register_block(b: &mut ParamBuilder, prefix: &str, cfg: &StageConfig) -> Result<()> {
    if cfg.attn_pre_norm {
        b.layer_norm(&format!("{prefix}.norm0"), cfg.d_model)?;
    }
    attention::register_params(b, &format!("{prefix}.attn"), &cfg.attention())?;
    b.layer_norm(&format!("{prefix}.norm1"), cfg.d_model)?;
    register_mix_ffn(b, &format!("{prefix}.ffn"), cfg.d_model, cfg.ffn_expansion)
}

/// One efficient transformer block. Returns the output tokens and the
/// block's normalized key map `[b, n, d_model/2]`.
pub fn transformer_block(tape: &mut Tape, p: &Bound, prefix: &str, x: Var, cfg: &StageConfig) -> Result<(Var, Var)> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[1] != cfg.grid.tokens() || s[2] != cfg.d_model {
        return Err(shape_err(format!(
            "block expects [b, {}, {}], got {s:?}",
            cfg.grid.tokens(),
            cfg.d_model
        )));
    }
    let attn_in = if cfg.attn_pre_norm {
        tape.layer_norm(
            x,
            p.var(&format!("{prefix}.norm0.gamma"))?,
            p.var(&format!("{prefix}.norm0.beta"))?,
            LN_EPS,
        )?
    } else {
        x
    };
    let attn_prefix = format!("{prefix}.attn");
    let qkv = attention::make_qkv(tape, p, &attn_prefix, attn_in)?;
    let (e, key_map) = attention::efficient_attention(tape, p, &attn_prefix, qkv, &cfg.attention())?;
    let x1 = tape.add(e, x)?;
    let normed = tape.layer_norm(
        x1,
        p.var(&format!("{prefix}.norm1.gamma"))?,
        p.var(&format!("{prefix}.norm1.beta"))?,
        LN_EPS,
    )?;
    let f = mix_ffn(tape, p, &format!("{prefix}.ffn"), normed, cfg.grid)?;
    let y = tape.add(f, x1)?;
    Ok((y, key_map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ModelParams;
    use crate::tensor::Tensor;

    fn stage(d: usize, grid: Grid) -> StageConfig {
        StageConfig { d_model: d, grid, blocks_per_stage: 2, ffn_expansion: 4, heads: 1, attn_pre_norm: false }
    }

    fn zeroed(params: &ModelParams) -> ModelParams {
        let mut z = params.clone();
        let names: Vec<String> = params.names().map(str::to_owned).collect();
        for n in names {
            if !n.contains("norm") {
                let shape = z.value(&n).unwrap().shape().to_vec();
                z.set(&n, Tensor::zeros(shape)).unwrap();
            }
        }
        z
    }

    #[test]
    fn zero_weights_make_block_identity() {
        for pre_norm in [false, true] {
            let cfg = StageConfig { attn_pre_norm: pre_norm, ..stage(8, Grid::new(4, 4)) };
            let mut b = ParamBuilder::new(5);
            register_block(&mut b, "blk", &cfg).unwrap();
            let params = zeroed(&b.finish());
            assert_eq!(params.total_count(), cfg.block_param_count());
            let mut tape = Tape::inference();
            let p = params.bind(&mut tape);
            let xv = Tensor::from_fn([2, 16, 8], |i| (i as f64 * 0.37).sin());
            let x = tape.constant(xv.clone());
            let (y, _) = transformer_block(&mut tape, &p, "blk", x, &cfg).unwrap();
            assert_eq!(tape.value(y), &xv);
        }
    }

    #[test]
    fn zero_ffn_outputs_zero() {
        let mut b = ParamBuilder::new(1);
        register_mix_ffn(&mut b, "ffn", 4, 4).unwrap();
        let params = zeroed(&b.finish());
        let mut tape = Tape::inference();
        let p = params.bind(&mut tape);
        let x = tape.constant(Tensor::from_fn([1, 9, 4], |i| i as f64));
        let y = mix_ffn(&mut tape, &p, "ffn", x, Grid::new(3, 3)).unwrap();
        assert_eq!(tape.value(y), &Tensor::zeros([1, 9, 4]));
    }

    #[test]
    fn block_preserves_shape_for_each_stage_width() {
        for (d, g) in [(8, Grid::new(8, 8)), (16, Grid::new(4, 4)), (32, Grid::new(2, 2))] {
            let cfg = stage(d, g);
            let mut b = ParamBuilder::new(2);
            register_block(&mut b, "blk", &cfg).unwrap();
            let params = b.finish();
            let mut tape = Tape::inference();
            let p = params.bind(&mut tape);
            let x = tape.constant(Tensor::from_fn([1, g.tokens(), d], |i| (i as f64).cos()));
            let (y, tap) = transformer_block(&mut tape, &p, "blk", x, &cfg).unwrap();
            assert_eq!(tape.shape(y), &[1, g.tokens(), d]);
            assert_eq!(tape.shape(tap), &[1, g.tokens(), d / 2]);
        }
    }

    #[test]
    fn rejects_wrong_width() {
        let cfg = stage(8, Grid::new(2, 2));
        let mut b = ParamBuilder::new(2);
        register_block(&mut b, "blk", &cfg).unwrap();
        let params = b.finish();
        let mut tape = Tape::inference();
        let p = params.bind(&mut tape);
        let x = tape.constant(Tensor::zeros([1, 4, 6]));
        assert!(transformer_block(&mut tape, &p, "blk", x, &cfg).is_err());
        assert!(StageConfig { d_model: 7, ..cfg }.validate().is_err());
    }
}
