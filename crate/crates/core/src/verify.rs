//! Finite-difference verification harness behind `iscf gradcheck`.
//!
//! Every target reduces its output to a scalar with a fixed random weight
//! tensor, so each output coordinate contributes a distinct amount and a
//! wrong backward rule cannot hide behind symmetric sums. Parameters are
//! redrawn at a larger scale than the training initialization (and the
//! fusion convolution is made nonzero) so that no branch is numerically
//! dormant during the check.

use crate::attention::{self, AttentionConfig, AttentionTap};
use crate::autodiff::{gradcheck::check_coordinates, GradCheck, OpKind, Tape, Var};
use crate::block::{self, StageConfig};
use crate::error::{Error, Result};
use crate::iscf::{self, IscfLayout, ScaleMapSet, StageShape};
use crate::model::{self, ModelConfig};
use crate::ops::{Conv2dOptions, ReduceKind};
use crate::params::{init_tensor, Bound, Init, ModelParams, ParamBuilder};
use crate::patch::{self, EmbedConfig, Grid};
use crate::tensor::Tensor;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Central-difference step. Error here is dominated by rounding, which
/// shrinks as the step grows, while truncation stays below 1e-6 up to 1e-3.
const EPS: f64 = 1e-4;
/// Scale of the redrawn parameters and inputs.
const PROBE_STD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Primitives,
    Blocks,
    Iscf,
    Model,
}

impl Scope {
    pub const ALL: [Scope; 4] = [Scope::Primitives, Scope::Blocks, Scope::Iscf, Scope::Model];

    pub fn threshold(self) -> f64 {
        match self {
            Scope::Model => 1e-3,
            _ => 1e-4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scope::Primitives => "primitives",
            Scope::Blocks => "blocks",
            Scope::Iscf => "iscf",
            Scope::Model => "model",
        }
    }

    pub fn from_name(s: &str) -> Option<Scope> {
        Scope::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Clone, Debug)]
pub struct TargetReport {
    pub name: String,
    pub check: GradCheck,
    pub threshold: f64,
}

impl TargetReport {
    pub fn passed(&self) -> bool {
        self.check.max_rel_err < self.threshold
    }
}

#[derive(Clone, Debug)]
pub struct ScopeReport {
    pub scope: Scope,
    pub targets: Vec<TargetReport>,
}

impl ScopeReport {
    pub fn passed(&self) -> bool {
        self.targets.iter().all(TargetReport::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &TargetReport> {
        self.targets.iter().filter(|t| !t.passed())
    }
}

type Objective = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    name: String,
    inputs: Vec<Tensor>,
    f: Objective,
    /// Coordinates probed per input; `None` probes all of them.
    per_input: Option<usize>,
}

fn randn(shape: &[usize], seed: u64, tag: &str) -> Tensor {
    init_tensor(shape, Init::TruncNormal(PROBE_STD), seed, tag)
}

/// Contract `out` against a fixed random tensor of the same shape.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let w = randn(tape.shape(out), seed, "objective");
    let c = tape.constant(w);
    let m = tape.mul(out, c)?;
    Ok(tape.sum_all(m))
}

fn case(name: &str, inputs: Vec<Tensor>, seed: u64, body: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name: name.to_owned(),
        inputs,
        f: Box::new(move |t, v| {
            let out = body(t, v)?;
            weighted_sum(t, out, seed)
        }),
        per_input: None,
    }
}

fn primitive_cases(seed: u64) -> Vec<Case> {
    let r = |shape: &[usize], tag: &str| randn(shape, seed, tag);
    let conv = |stride, pad, groups| Conv2dOptions { stride, pad, groups };
    let mut cases = vec![
        case("matmul", vec![r(&[2, 3, 4], "a"), r(&[2, 4, 5], "b")], seed, |t, v| t.matmul(v[0], v[1])),
        case("matmul_shared_rhs", vec![r(&[2, 3, 4], "a"), r(&[4, 5], "b")], seed, |t, v| t.matmul(v[0], v[1])),
        case("linear", vec![r(&[2, 3, 4], "x"), r(&[4, 5], "w"), r(&[5], "b")], seed, |t, v| {
            t.linear(v[0], v[1], Some(v[2]))
        }),
        case("add_broadcast", vec![r(&[2, 3, 4], "a"), r(&[4], "b")], seed, |t, v| t.add(v[0], v[1])),
        case("mul_broadcast", vec![r(&[2, 3, 4], "a"), r(&[3, 1], "b")], seed, |t, v| t.mul(v[0], v[1])),
        case("scale", vec![r(&[3, 4], "x")], seed, |t, v| Ok(t.scale(v[0], -1.75))),
        case("gelu", vec![r(&[3, 5], "x")], seed, |t, v| Ok(t.gelu(v[0]))),
        case("sigmoid", vec![r(&[3, 5], "x")], seed, |t, v| Ok(t.sigmoid(v[0]))),
        case("softmax_last", vec![r(&[2, 3, 5], "x")], seed, |t, v| t.softmax(v[0], 2)),
        case("softmax_tokens", vec![r(&[2, 5, 3], "x")], seed, |t, v| t.softmax(v[0], 1)),
        case("layer_norm", vec![r(&[2, 3, 6], "x"), r(&[6], "g"), r(&[6], "b")], seed, |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-6)
        }),
        case("conv2d_strided", vec![r(&[2, 3, 7, 6], "x"), r(&[4, 3, 3, 3], "w"), r(&[4], "b")], seed, move |t, v| {
            t.conv2d(v[0], v[1], v[2], conv(2, 1, 1))
        }),
        case("conv2d_depthwise", vec![r(&[1, 4, 5, 5], "x"), r(&[4, 1, 3, 3], "w"), r(&[4], "b")], seed, move |t, v| {
            t.conv2d(v[0], v[1], v[2], conv(1, 1, 4))
        }),
        case("reduce_sum", vec![r(&[2, 3, 4], "x")], seed, |t, v| t.reduce(ReduceKind::Sum, v[0], &[0, 2])),
        case("reduce_mean", vec![r(&[2, 3, 4], "x")], seed, |t, v| t.reduce(ReduceKind::Mean, v[0], &[1])),
        case("reshape", vec![r(&[2, 3, 4], "x")], seed, |t, v| t.reshape(v[0], &[4, 6])),
        case("permute", vec![r(&[2, 3, 4], "x")], seed, |t, v| t.permute(v[0], &[2, 0, 1])),
        case("transpose", vec![r(&[2, 3, 4], "x")], seed, |t, v| t.transpose(v[0])),
        case("concat", vec![r(&[2, 3, 4], "a"), r(&[2, 2, 4], "b")], seed, |t, v| t.concat(&[v[0], v[1]], 1)),
    ];
    let target = Tensor::from_fn([2, 1, 3, 3], |i| ((i * 5) % 3 == 0) as u8 as f64);
    cases.push(Case {
        name: "bce_loss".into(),
        inputs: vec![r(&[2, 1, 3, 3], "z")],
        f: Box::new(move |t, v| t.bce_with_logits(v[0], &target)),
        per_input: None,
    });
    cases
}

/// Redraw every parameter from a wide truncated normal, keeping names.
fn probe_params(p: &ModelParams, seed: u64) -> Vec<(String, Tensor)> {
    p.iter().map(|q| (q.name.clone(), randn(q.value.shape(), seed, &q.name))).collect()
}

/// A case whose inputs are `extra` followed by the parameters of `params`.
fn param_case(
    name: &str,
    extra: Vec<Tensor>,
    params: &ModelParams,
    seed: u64,
    per_input: Option<usize>,
    body: impl Fn(&mut Tape, &Bound, &[Var]) -> Result<Var> + 'static,
) -> Case {
    let drawn = probe_params(params, seed);
    let names: Vec<String> = drawn.iter().map(|(n, _)| n.clone()).collect();
    let k = extra.len();
    let mut inputs = extra;
    inputs.extend(drawn.into_iter().map(|(_, t)| t));
    Case {
        name: name.to_owned(),
        inputs,
        f: Box::new(move |t, v| {
            let bound = Bound::from_pairs(names.iter().cloned().zip(v[k..].iter().copied()));
            let out = body(t, &bound, &v[..k])?;
            weighted_sum(t, out, seed)
        }),
        per_input,
    }
}

fn built(f: impl FnOnce(&mut ParamBuilder) -> Result<()>) -> Result<ModelParams> {
    let mut b = ParamBuilder::new(0);
    f(&mut b)?;
    Ok(b.finish())
}

fn block_cases(seed: u64) -> Result<Vec<Case>> {
    let grid = Grid::new(4, 4);
    let stage = |heads, attn_pre_norm| StageConfig {
        d_model: 8,
        grid,
        blocks_per_stage: 1,
        ffn_expansion: 2,
        heads,
        attn_pre_norm,
    };
    let tokens = randn(&[2, 16, 8], seed, "tokens");
    let mut cases = Vec::new();

    for heads in [1, 2] {
        let acfg = AttentionConfig::for_width(8, heads)?;
        let p = built(|b| attention::register_params(b, "attn", &acfg))?;
        cases.push(param_case(
            &format!("efficient_attention_h{heads}"),
            vec![tokens.clone()],
            &p,
            seed,
            None,
            move |t, p, x| {
                let qkv = attention::make_qkv(t, p, "attn", x[0])?;
                let (out, key_map) = attention::efficient_attention(t, p, "attn", qkv, &acfg)?;
                // fold the tap in so its gradient path is exercised too
                let km = t.reduce(ReduceKind::Sum, key_map, &[2])?;
                let km = t.reshape(km, &[2, 16, 1])?;
                t.add(out, km)
            },
        ));
    }

    let p = built(|b| block::register_mix_ffn(b, "ffn", 8, 2))?;
    cases.push(param_case("mix_ffn", vec![tokens.clone()], &p, seed, None, move |t, p, x| {
        block::mix_ffn(t, p, "ffn", x[0], grid)
    }));

    for pre_norm in [false, true] {
        let cfg = stage(1, pre_norm);
        let p = built(|b| block::register_block(b, "blk", &cfg))?;
        let name = if pre_norm { "transformer_block_prenorm" } else { "transformer_block" };
        cases.push(param_case(name, vec![tokens.clone()], &p, seed, Some(12), move |t, p, x| {
            Ok(block::transformer_block(t, p, "blk", x[0], &cfg)?.0)
        }));
    }

    let embed = EmbedConfig::default();
    let p = built(|b| patch::register_embed(b, "embed", 3, 8, &embed))?;
    cases.push(param_case("patch_embed", vec![randn(&[1, 3, 32, 32], seed, "img")], &p, seed, Some(12), move |t, p, x| {
        Ok(patch::patch_embed(t, p, "embed", x[0], &embed)?.0)
    }));

    let p = built(|b| patch::register_merge(b, "merge", 8))?;
    cases.push(param_case("patch_merge", vec![tokens.clone()], &p, seed, Some(12), move |t, p, x| {
        Ok(patch::patch_merge(t, p, "merge", x[0], grid)?.0)
    }));

    let p = built(|b| patch::register_expand(b, "up", 8))?;
    cases.push(param_case("patch_expand", vec![tokens.clone()], &p, seed, None, move |t, p, x| {
        Ok(patch::patch_expand(t, p, "up", x[0], grid)?.0)
    }));

    let p = built(|b| patch::register_expand4(b, "up4", 8))?;
    cases.push(param_case("final_expand4", vec![tokens], &p, seed, Some(12), move |t, p, x| {
        Ok(patch::final_expand4(t, p, "up4", x[0], grid)?.0)
    }));
    Ok(cases)
}

fn iscf_cases(seed: u64) -> Result<Vec<Case>> {
    let stages = [
        StageShape { tokens: 16, key_dim: 4, width: 8 },
        StageShape { tokens: 4, key_dim: 8, width: 16 },
        StageShape { tokens: 1, key_dim: 16, width: 32 },
    ];
    let mut cases = Vec::new();
    for enabled in [vec![1], vec![1, 2], vec![1, 2, 3], vec![2, 3]] {
        let layout = IscfLayout::new(stages, &enabled)?;
        let p = built(|b| iscf::register_params(b, &layout))?;
        let mut extra = Vec::new();
        for (i, st) in stages.iter().enumerate() {
            extra.push(randn(&[2, st.tokens, st.key_dim], seed, &format!("map{i}")));
        }
        for (i, st) in stages.iter().enumerate() {
            extra.push(randn(&[2, st.tokens, st.width], seed, &format!("skip{i}")));
        }
        let label: String = enabled.iter().map(|s| s.to_string()).collect();
        let lay = layout.clone();
        cases.push(param_case(&format!("iscf_{label}"), extra, &p, seed, None, move |t, p, x| {
            // key maps are column-softmaxed in the model; keep that here
            let mut taps = Vec::new();
            for s in 0..3 {
                let km = t.softmax(x[s], 1)?;
                taps.push(AttentionTap { stage: s + 1, key_map: km, token_count: stages[s].tokens });
            }
            let out = iscf::iscf_forward(t, p, &lay, &ScaleMapSet::new(taps)?, &x[3..6])?;
            let flat: Vec<Var> = out
                .skips
                .iter()
                .map(|&s| {
                    let n = t.shape(s).iter().product();
                    t.reshape(s, &[n])
                })
                .collect::<Result<_>>()?;
            t.concat(&flat, 0)
        }));
    }
    Ok(cases)
}

fn model_cases(seed: u64) -> Result<Vec<Case>> {
    let cfg = ModelConfig::tiny();
    let p = model::build(&cfg)?;
    let [h, w] = cfg.input_hw;
    let img = init_tensor(&[1, 3, h, w], Init::TruncNormal(1.0), seed, "image").map(|v| 0.5 + 0.25 * v);
    let target = Tensor::from_fn([1, 1, h, w], |i| ((i / w + i % w) % 3 == 0) as u8 as f64);
    let names: Vec<String> = p.names().map(str::to_owned).collect();
    // a narrower draw than the block targets keeps the deep stack out of
    // saturation
    let inputs: Vec<Tensor> = std::iter::once(img)
        .chain(p.iter().map(|q| init_tensor(q.value.shape(), Init::TruncNormal(0.2), seed, &q.name)))
        .collect();
    Ok(vec![Case {
        name: "model_tiny".into(),
        inputs,
        f: Box::new(move |t, v| {
            let bound = Bound::from_pairs(names.iter().cloned().zip(v[1..].iter().copied()));
            let out = model::forward(t, &bound, &cfg, v[0])?;
            t.bce_with_logits(out.logits, &target)
        }),
        per_input: Some(5),
    }])
}

fn run_case(c: &Case, threshold: f64, seed: u64, fault: Option<OpKind>) -> Result<TargetReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<Vec<usize>> = c
        .inputs
        .iter()
        .map(|t| match c.per_input {
            Some(k) if k < t.numel() => {
                let mut idx = sample(&mut rng, t.numel(), k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..t.numel()).collect(),
        })
        .collect();
    let check = check_coordinates(&c.f, &c.inputs, EPS, &picks, fault)?;
    Ok(TargetReport { name: c.name.clone(), check, threshold })
}

/// Run every target of `scope`. `fault` perturbs one backward rule, which
/// the report must then flag.
pub fn run_scope(scope: Scope, seed: u64, fault: Option<OpKind>) -> Result<ScopeReport> {
    let cases = match scope {
        Scope::Primitives => primitive_cases(seed),
        Scope::Blocks => block_cases(seed)?,
        Scope::Iscf => iscf_cases(seed)?,
        Scope::Model => model_cases(seed)?,
    };
    let targets = cases
        .iter()
        .map(|c| run_case(c, scope.threshold(), seed, fault))
        .collect::<Result<Vec<_>>>()?;
    if targets.is_empty() {
        return Err(Error::InvalidConfig(format!("scope {} has no targets", scope.name())));
    }
    Ok(ScopeReport { scope, targets })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass_and_fault_is_flagged() {
        let report = run_scope(Scope::Primitives, 3, None).unwrap();
        for t in &report.targets {
            assert!(t.passed(), "{} {:?}", t.name, t.check);
        }
        let faulty = run_scope(Scope::Primitives, 3, Some(OpKind::Gelu)).unwrap();
        let failed: Vec<&str> = faulty.failures().map(|t| t.name.as_str()).collect();
        assert_eq!(failed, vec!["gelu"]);
    }

    #[test]
    fn scope_names_round_trip() {
        for s in Scope::ALL {
            assert_eq!(Scope::from_name(s.name()), Some(s));
        }
    }
}
