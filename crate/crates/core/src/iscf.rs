//! Inter-scale context fusion on the skip connections.
//!
//! Pipeline for the enabled stages `E`:
//!
//! 1. remap every stage's key map `[n_s, d_s]` to the stage-3 reference
//!    shape `[n_ref, d_ref]` with a token-axis and a channel-axis linear
//!    (stage 3 passes through);
//! 2. global-average-pool each remapped map to one value, concatenate into
//!    a length-`|E|` descriptor;
//! 3. an FFN `|E| -> 4|E| -> |E|` with GELU and a terminal sigmoid turns
//!    the descriptor into per-stage scaling factors in `(0, 1)`;
//! 4. scale each map, stack them as `|E|` channels and fuse with a 1x1
//!    convolution to a single `[n_ref, d_ref]` context;
//! 5. project the context back to every enabled stage's skip shape
//!    `[n_s, c_s]` and add it to the skip.
//!
//! The fusion convolution starts at zero, so an untrained module is the
//! identity on the skips.

use crate::attention::AttentionTap;
use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::ops::Conv2dOptions;
use crate::params::{Bound, Init, ParamBuilder};

pub const STAGES: usize = 3;
/// Hidden width multiplier of the scaling FFN.
pub const FFN_RATIO: usize = 4;

/// Extents of one encoder stage as seen by the fusion module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageShape {
    /// Token count `n_s`.
    pub tokens: usize,
    /// Key dimension `d_s` of the stage's attention map.
    pub key_dim: usize,
    /// Full model width `c_s` of the stage's skip features.
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IscfLayout {
    pub stages: [StageShape; STAGES],
    /// Enabled stages, 1-based, ascending, no duplicates.
    pub enabled: Vec<usize>,
}

impl IscfLayout {
    pub fn new(stages: [StageShape; STAGES], enabled: &[usize]) -> Result<Self> {
        let mut e = enabled.to_vec();
        e.sort_unstable();
        e.dedup();
        if e.len() != enabled.len() || e.iter().any(|&s| !(1..=STAGES).contains(&s)) {
            return Err(Error::InvalidConfig(format!("ISCF stages {enabled:?} must be distinct values in 1..=3")));
        }
        Ok(IscfLayout { stages, enabled: e })
    }

    pub fn reference(&self) -> StageShape {
        self.stages[STAGES - 1]
    }

    pub fn is_enabled(&self, stage: usize) -> bool {
        self.enabled.contains(&stage)
    }

    fn shape(&self, stage: usize) -> StageShape {
        self.stages[stage - 1]
    }

    /// Closed-form parameter count of the module.
    pub fn param_count(&self) -> usize {
        let e = self.enabled.len();
        if e == 0 {
            return 0;
        }
        let r = self.reference();
        let mut total = 0;
        for &s in &self.enabled {
            let st = self.shape(s);
            if s < STAGES {
                total += st.tokens * r.tokens + r.tokens; // remap, token axis
                total += st.key_dim * r.key_dim + r.key_dim; // remap, channel axis
                total += r.tokens * st.tokens + st.tokens; // redistribute, token axis
            }
            total += r.key_dim * st.width + st.width; // redistribute, channel axis
        }
        let hidden = FFN_RATIO * e;
        total += e * hidden + hidden + hidden * e + e;
        total += e + 1; // 1x1 fusion convolution
        total
    }
}

/// One attention tap per encoder stage.
#[derive(Clone, Debug)]
pub struct ScaleMapSet {
    pub maps: Vec<AttentionTap>,
}

impl ScaleMapSet {
    pub fn new(maps: Vec<AttentionTap>) -> Result<Self> {
        let stages: Vec<usize> = maps.iter().map(|t| t.stage).collect();
        if stages != [1, 2, 3] {
            return Err(Error::InvalidConfig(format!("expected taps for stages [1, 2, 3], got {stages:?}")));
        }
        Ok(ScaleMapSet { maps })
    }

    pub fn tap(&self, stage: usize) -> &AttentionTap {
        &self.maps[stage - 1]
    }
}

pub fn register_params(b: &mut ParamBuilder, layout: &IscfLayout) -> Result<()> {
    let e = layout.enabled.len();
    if e == 0 {
        return Ok(());
    }
    let r = layout.reference();
    for &s in &layout.enabled {
        let st = layout.shape(s);
        if s < STAGES {
            b.linear(&format!("iscf.remap{s}.tokens"), st.tokens, r.tokens, true)?;
            b.linear(&format!("iscf.remap{s}.channels"), st.key_dim, r.key_dim, true)?;
        }
    }
    b.linear("iscf.ffn.fc1", e, FFN_RATIO * e, true)?;
    b.linear("iscf.ffn.fc2", FFN_RATIO * e, e, true)?;
    b.conv("iscf.fuse", [1, e, 1, 1], Init::Zeros)?;
    for &s in &layout.enabled {
        let st = layout.shape(s);
        if s < STAGES {
            b.linear(&format!("iscf.redist{s}.tokens"), r.tokens, st.tokens, true)?;
        }
        b.linear(&format!("iscf.redist{s}.channels"), r.key_dim, st.width, true)?;
    }
    Ok(())
}

fn linear_named(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    tape.linear(x, p.var(&format!("{prefix}.weight"))?, p.try_var(&format!("{prefix}.bias")))
}

/// Linear map over the token axis of `[b, n, d]`.
fn token_linear(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let t = tape.permute(x, &[0, 2, 1])?;
    let y = linear_named(tape, p, prefix, t)?;
    tape.permute(y, &[0, 2, 1])
}

/// Bring a stage's key map to the reference shape `[b, n_ref, d_ref]`.
pub fn remap_to_reference(tape: &mut Tape, p: &Bound, layout: &IscfLayout, stage: usize, map: Var) -> Result<Var> {
    let st = layout.shape(stage);
    let s = tape.shape(map);
    if s.len() != 3 || s[1] != st.tokens || s[2] != st.key_dim {
        return Err(shape_err(format!(
            "stage {stage} map {s:?} does not match [b, {}, {}]",
            st.tokens, st.key_dim
        )));
    }
    if stage == STAGES {
        return Ok(map);
    }
    let t = token_linear(tape, p, &format!("iscf.remap{stage}.tokens"), map)?;
    linear_named(tape, p, &format!("iscf.remap{stage}.channels"), t)
}

/// Global average of each map, concatenated to `[b, |maps|]`.
pub fn global_descriptor(tape: &mut Tape, maps: &[Var]) -> Result<Var> {
    let mut parts = Vec::with_capacity(maps.len());
    for &m in maps {
        let b = tape.shape(m)[0];
        let rank = tape.shape(m).len();
        let axes: Vec<usize> = (1..rank).collect();
        let pooled = tape.reduce(crate::ops::ReduceKind::Mean, m, &axes)?;
        parts.push(tape.reshape(pooled, &[b, 1])?);
    }
    tape.concat(&parts, 1)
}

/// Per-stage scaling factors in `(0, 1)`, shape `[b, |E|]`.
pub fn fusion_weights(tape: &mut Tape, p: &Bound, descriptor: Var) -> Result<Var> {
    let h = linear_named(tape, p, "iscf.ffn.fc1", descriptor)?;
    let h = tape.gelu(h);
    let o = linear_named(tape, p, "iscf.ffn.fc2", h)?;
    Ok(tape.sigmoid(o))
}

/// Scale each map by its factor, stack as channels and apply the 1x1
/// fusion convolution. Returns `[b, n_ref, d_ref]`.
pub fn fuse(tape: &mut Tape, p: &Bound, maps: &[Var], weights: Var) -> Result<Var> {
    let first = tape.shape(maps[0]).to_vec();
    let (b, n, d) = (first[0], first[1], first[2]);
    let e = maps.len();
    if tape.shape(weights) != [b, e] {
        return Err(shape_err(format!("fusion weights {:?} vs {e} maps", tape.shape(weights))));
    }
    let mut stacked = Vec::with_capacity(e);
    for &m in maps {
        if tape.shape(m) != first.as_slice() {
            return Err(shape_err(format!("fuse inputs {:?} vs {first:?}", tape.shape(m))));
        }
        stacked.push(tape.reshape(m, &[b, 1, n, d])?);
    }
    let stack = tape.concat(&stacked, 1)?;
    let w = tape.reshape(weights, &[b, e, 1, 1])?;
    let scaled = tape.mul(stack, w)?;
    let fused = tape.conv2d(
        scaled,
        p.var("iscf.fuse.weight")?,
        p.var("iscf.fuse.bias")?,
        Conv2dOptions::default(),
    )?;
    tape.reshape(fused, &[b, n, d])
}

/// Project the fused context to stage `stage`'s skip shape `[b, n_s, c_s]`.
pub fn redistribute(tape: &mut Tape, p: &Bound, stage: usize, fused: Var) -> Result<Var> {
    let t = if stage < STAGES {
        token_linear(tape, p, &format!("iscf.redist{stage}.tokens"), fused)?
    } else {
        fused
    };
    linear_named(tape, p, &format!("iscf.redist{stage}.channels"), t)
}

/// Intermediate values of one fusion pass, exposed for inspection.
#[derive(Clone, Debug)]
pub struct IscfOutput {
    pub skips: Vec<Var>,
    pub descriptor: Option<Var>,
    pub weights: Option<Var>,
    pub fused: Option<Var>,
}

/// Enrich the three skip tensors. Disabled stages pass through untouched;
/// only enabled stages contribute to the descriptor and the fusion.
pub fn iscf_forward(tape: &mut Tape, p: &Bound, layout: &IscfLayout, taps: &ScaleMapSet, skips: &[Var]) -> Result<IscfOutput> {
    if skips.len() != STAGES {
        return Err(shape_err(format!("expected {STAGES} skips, got {}", skips.len())));
    }
    for (i, &s) in skips.iter().enumerate() {
        let st = layout.stages[i];
        let shape = tape.shape(s);
        if shape.len() != 3 || shape[1] != st.tokens || shape[2] != st.width {
            return Err(shape_err(format!("skip {} is {shape:?}, expected [b, {}, {}]", i + 1, st.tokens, st.width)));
        }
    }
    if layout.enabled.is_empty() {
        return Ok(IscfOutput { skips: skips.to_vec(), descriptor: None, weights: None, fused: None });
    }
    let mut maps = Vec::with_capacity(layout.enabled.len());
    for &s in &layout.enabled {
        maps.push(remap_to_reference(tape, p, layout, s, taps.tap(s).key_map)?);
    }
    let descriptor = global_descriptor(tape, &maps)?;
    let weights = fusion_weights(tape, p, descriptor)?;
    let fused = fuse(tape, p, &maps, weights)?;
    let mut out = skips.to_vec();
    for &s in &layout.enabled {
        let correction = redistribute(tape, p, s, fused)?;
        out[s - 1] = tape.add(skips[s - 1], correction)?;
    }
    Ok(IscfOutput { skips: out, descriptor: Some(descriptor), weights: Some(weights), fused: Some(fused) })
}
