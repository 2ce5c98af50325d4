//! The full U-shaped network: patch embedding, three encoder stages with
//! patch merging, a bottleneck, three decoder stages fed by ISCF-enriched
//! skips, and a 1-channel segmentation head.

mod checkpoint;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::block::{self, StageConfig};
use crate::error::{Error, Result};
use crate::iscf::{self, IscfLayout, IscfOutput, ScaleMapSet, StageShape};
use crate::params::{Bound, ModelParams, ParamBuilder};
use crate::patch::{self, EmbedConfig, Grid};
use crate::attention::AttentionTap;
use crate::tensor::Tensor;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input `(H, W)`; both divisible by 32.
    pub input_hw: [usize; 2],
    pub in_channels: usize,
    /// Stage-1 width `d1`; stages use `[d1, 2 d1, 4 d1]`, bottleneck `8 d1`.
    pub base_width: usize,
    pub blocks_per_stage: usize,
    /// Encoder stages (1-based) whose skips go through ISCF. Empty turns
    /// the module off.
    pub iscf_stages: Vec<usize>,
    pub ffn_expansion: usize,
    pub heads: usize,
    pub attn_pre_norm: bool,
    pub embed: EmbedConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// 64x64 input, `d1 = 16`.
    pub fn desk() -> Self {
        ModelConfig {
            input_hw: [64, 64],
            in_channels: 3,
            base_width: 16,
            blocks_per_stage: 2,
            iscf_stages: vec![1, 2, 3],
            ffn_expansion: 4,
            heads: 1,
            attn_pre_norm: false,
            embed: EmbedConfig::default(),
            seed: 0,
        }
    }

    /// 32x32 input, `d1 = 8`; used by the end-to-end gradient check.
    pub fn tiny() -> Self {
        ModelConfig { input_hw: [32, 32], base_width: 8, ..ModelConfig::desk() }
    }

    /// 224x224 input, `d1 = 64`; for parameter-count reporting.
    pub fn full_scale() -> Self {
        ModelConfig { input_hw: [224, 224], base_width: 64, ..ModelConfig::desk() }
    }

    pub fn stage_widths(&self) -> [usize; 3] {
        let d = self.base_width;
        [d, 2 * d, 4 * d]
    }

    pub fn bottleneck_width(&self) -> usize {
        8 * self.base_width
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.input_hw;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::InvalidConfig(format!("input {h}x{w} must be a positive multiple of 32")));
        }
        if self.in_channels == 0 {
            return Err(Error::InvalidConfig("in_channels must be positive".into()));
        }
        if self.base_width == 0 || self.base_width % 2 != 0 {
            return Err(Error::InvalidConfig(format!("base_width {} must be even and positive", self.base_width)));
        }
        if self.embed.stride != 4 || self.embed_grid()?.h * 4 != h || self.embed_grid()?.w * 4 != w {
            return Err(Error::InvalidConfig(format!("embedding {:?} must map {h}x{w} to a /4 token grid", self.embed)));
        }
        IscfLayout::new(self.iscf_shapes()?, &self.iscf_stages)?;
        for s in self.stage_configs()? {
            s.validate()?;
        }
        Ok(())
    }

    fn embed_grid(&self) -> Result<Grid> {
        self.embed.grid(self.input_hw[0], self.input_hw[1])
    }

    /// Token grids of encoder stages 1..3 and the bottleneck.
    pub fn grids(&self) -> Result<[Grid; 4]> {
        let g1 = self.embed_grid()?;
        let g2 = g1.halved();
        let g3 = g2.halved();
        Ok([g1, g2, g3, g3.halved()])
    }

    fn stage(&self, width: usize, grid: Grid) -> StageConfig {
        StageConfig {
            d_model: width,
            grid,
            blocks_per_stage: self.blocks_per_stage,
            ffn_expansion: self.ffn_expansion,
            heads: self.heads,
            attn_pre_norm: self.attn_pre_norm,
        }
    }

    /// Encoder stages 1..3 followed by the bottleneck.
    pub fn stage_configs(&self) -> Result<[StageConfig; 4]> {
        let g = self.grids()?;
        let w = self.stage_widths();
        Ok([
            self.stage(w[0], g[0]),
            self.stage(w[1], g[1]),
            self.stage(w[2], g[2]),
            self.stage(self.bottleneck_width(), g[3]),
        ])
    }

    fn iscf_shapes(&self) -> Result<[StageShape; 3]> {
        let g = self.grids()?;
        let w = self.stage_widths();
        Ok(std::array::from_fn(|i| StageShape { tokens: g[i].tokens(), key_dim: w[i] / 2, width: w[i] }))
    }

    pub fn iscf_layout(&self) -> Result<IscfLayout> {
        IscfLayout::new(self.iscf_shapes()?, &self.iscf_stages)
    }

    /// Parameter count derived from the architecture formulas alone,
    /// independent of the parameter store.
    pub fn closed_form_param_count(&self) -> Result<usize> {
        let stages = self.stage_configs()?;
        let w = self.stage_widths();
        let blocks = self.blocks_per_stage;
        let mut total = self.embed.param_count(self.in_channels, w[0]);
        for (i, s) in stages.iter().enumerate() {
            total += blocks * s.block_param_count();
            if i < 3 {
                total += patch::merge_param_count(w[i]);
            }
        }
        for (i, s) in stages[..3].iter().enumerate() {
            let c = w[i];
            total += patch::expand_param_count(2 * c);
            total += 2 * c * c + c; // concat projection 2c -> c
            total += blocks * s.block_param_count();
        }
        total += patch::expand4_param_count(w[0]) + w[0] + 1;
        total += self.iscf_layout()?.param_count();
        Ok(total)
    }

    /// Closed-form ISCF parameter overhead of this configuration.
    pub fn iscf_overhead(&self) -> Result<usize> {
        Ok(self.iscf_layout()?.param_count())
    }
}

fn enc_prefix(stage: usize) -> String {
    format!("enc{stage}")
}

fn dec_prefix(stage: usize) -> String {
    format!("dec{stage}")
}

/// Create every parameter with its seeded initializer. The ISCF fusion
/// convolution starts at zero.
pub fn build(cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let stages = cfg.stage_configs()?;
    let w = cfg.stage_widths();
    let mut b = ParamBuilder::new(cfg.seed);
    patch::register_embed(&mut b, "embed", cfg.in_channels, w[0], &cfg.embed)?;
    for s in 1..=3 {
        for i in 0..cfg.blocks_per_stage {
            block::register_block(&mut b, &format!("{}.block{i}", enc_prefix(s)), &stages[s - 1])?;
        }
        patch::register_merge(&mut b, &format!("{}.merge", enc_prefix(s)), w[s - 1])?;
    }
    for i in 0..cfg.blocks_per_stage {
        block::register_block(&mut b, &format!("bottleneck.block{i}"), &stages[3])?;
    }
    for s in (1..=3).rev() {
        let c = w[s - 1];
        let p = dec_prefix(s);
        patch::register_expand(&mut b, &format!("{p}.up"), 2 * c)?;
        b.linear(&format!("{p}.concat"), 2 * c, c, true)?;
        for i in 0..cfg.blocks_per_stage {
            block::register_block(&mut b, &format!("{p}.block{i}"), &stages[s - 1])?;
        }
    }
    patch::register_expand4(&mut b, "head.up", w[0])?;
    b.linear("head.proj", w[0], 1, true)?;
    iscf::register_params(&mut b, &cfg.iscf_layout()?)?;
    Ok(b.finish())
}

pub fn param_count(params: &ModelParams) -> usize {
    params.total_count()
}

/// Everything a forward pass produces that callers may want to inspect.
#[derive(Clone, Debug)]
pub struct ForwardArtifacts {
    /// `[b, 1, H, W]`.
    pub logits: Var,
    pub taps: ScaleMapSet,
    pub skips_pre: Vec<Var>,
    pub iscf: IscfOutput,
    pub bottleneck: Var,
    /// Token counts of encoder stages 1..3 and the bottleneck.
    pub token_counts: [usize; 4],
}

fn run_blocks(tape: &mut Tape, p: &Bound, prefix: &str, mut x: Var, cfg: &StageConfig) -> Result<(Var, Var)> {
    let mut tap = None;
    for i in 0..cfg.blocks_per_stage {
        let (y, key_map) = block::transformer_block(tape, p, &format!("{prefix}.block{i}"), x, cfg)?;
        x = y;
        tap = Some(key_map);
    }
    Ok((x, tap.expect("blocks_per_stage >= 1")))
}

pub fn forward(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, img: Var) -> Result<ForwardArtifacts> {
    let shape = tape.shape(img).to_vec();
    let [h, w] = cfg.input_hw;
    if shape.len() != 4 || shape[1] != cfg.in_channels || shape[2] != h || shape[3] != w {
        return Err(Error::ShapeMismatch(format!(
            "model expects [b, {}, {h}, {w}] input, got {shape:?}",
            cfg.in_channels
        )));
    }
    let batch = shape[0];
    let stages = cfg.stage_configs()?;
    let (mut x, mut grid) = patch::patch_embed(tape, p, "embed", img, &cfg.embed)?;

    let mut skips = Vec::with_capacity(3);
    let mut taps = Vec::with_capacity(3);
    for s in 1..=3 {
        let (y, key_map) = run_blocks(tape, p, &enc_prefix(s), x, &stages[s - 1])?;
        skips.push(y);
        taps.push(AttentionTap { stage: s, key_map, token_count: grid.tokens() });
        (x, grid) = patch::patch_merge(tape, p, &format!("{}.merge", enc_prefix(s)), y, grid)?;
    }
    let (bottleneck, _) = run_blocks(tape, p, "bottleneck", x, &stages[3])?;
    let taps = ScaleMapSet::new(taps)?;
    let fusion = iscf::iscf_forward(tape, p, &cfg.iscf_layout()?, &taps, &skips)?;

    x = bottleneck;
    for s in (1..=3).rev() {
        let pre = dec_prefix(s);
        let (up, g) = patch::patch_expand(tape, p, &format!("{pre}.up"), x, grid)?;
        grid = g;
        let joined = tape.concat(&[up, fusion.skips[s - 1]], 2)?;
        let merged = tape.linear(
            joined,
            p.var(&format!("{pre}.concat.weight"))?,
            Some(p.var(&format!("{pre}.concat.bias"))?),
        )?;
        (x, _) = run_blocks(tape, p, &pre, merged, &stages[s - 1])?;
    }
    let (full, _) = patch::final_expand4(tape, p, "head.up", x, grid)?;
    let proj = tape.linear(full, p.var("head.proj.weight")?, Some(p.var("head.proj.bias")?))?;
    let logits = tape.reshape(proj, &[batch, 1, h, w])?;
    let g = cfg.grids()?;
    Ok(ForwardArtifacts {
        logits,
        taps,
        skips_pre: skips,
        iscf: fusion,
        bottleneck,
        token_counts: [g[0].tokens(), g[1].tokens(), g[2].tokens(), g[3].tokens()],
    })
}

/// Inference-only forward pass returning `[b, 1, H, W]` logits.
pub fn predict_logits(params: &ModelParams, cfg: &ModelConfig, img: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let p = params.bind(&mut tape);
    let x = tape.constant(img.clone());
    let out = forward(&mut tape, &p, cfg, x)?;
    Ok(tape.value(out.logits).clone())
}
