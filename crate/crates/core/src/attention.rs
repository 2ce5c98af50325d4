//! Standard (quadratic) and efficient (linear) self-attention.
//!
//! Efficient attention normalizes queries with a softmax over the channel
//! axis of each token (`rho_q`) and keys with a softmax over the token axis
//! of each channel (`rho_k`), then evaluates `rho_q(Q) (rho_k(K)^T V)`.
//! The bracketed `d_k x d_v` context is formed first, so no `n x n` buffer
//! ever exists. The normalized key map `rho_k(K)` is exported as the
//! stage's attention tap.

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::ops::{self, gemm_nn, gemm_nt, gemm_tn};
use crate::params::{Bound, ParamBuilder};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub heads: usize,
}

impl AttentionConfig {
    /// The usual setting: `d_k = d_model / 2`, `d_v = d_model`.
    pub fn for_width(d_model: usize, heads: usize) -> Result<Self> {
        let cfg = AttentionConfig { d_model, d_k: d_model / 2, d_v: d_model, heads };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_k == 0 || self.d_v == 0 || self.heads == 0 {
            return Err(Error::InvalidConfig(format!("degenerate attention config {self:?}")));
        }
        if self.d_k % self.heads != 0 || self.d_v % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_k={} and d_v={} must be divisible by heads={}",
                self.d_k, self.d_v, self.heads
            )));
        }
        if self.heads == 1 && self.d_v != self.d_model {
            return Err(Error::InvalidConfig("single-head attention needs d_v == d_model".into()));
        }
        Ok(())
    }

    /// Learned parameter count of [`make_qkv`] plus the output projection.
    pub fn param_count(&self) -> usize {
        let qkv = self.d_model * (2 * self.d_k + self.d_v);
        let proj = if self.heads > 1 { self.d_v * self.d_model + self.d_model } else { 0 };
        qkv + proj
    }
}

/// Normalized key map of one encoder stage.
#[derive(Clone, Copy, Debug)]
pub struct AttentionTap {
    pub stage: usize,
    /// `rho_k(K)`, shape `[batch, n, d_k]`; every column sums to one.
    pub key_map: Var,
    pub token_count: usize,
}

fn check_qkv(q: &[usize], k: &[usize], v: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let r = q.len();
    if r < 2 || k.len() != r || v.len() != r {
        return Err(shape_err(format!("attention operands {q:?}, {k:?}, {v:?}")));
    }
    if q[..r - 2] != k[..r - 2] || q[..r - 2] != v[..r - 2] {
        return Err(shape_err(format!("attention batch axes differ: {q:?}, {k:?}, {v:?}")));
    }
    let (n, dk, dv) = (k[r - 2], k[r - 1], v[r - 1]);
    if q[r - 1] != dk || v[r - 2] != n || q[r - 2] != n {
        return Err(shape_err(format!("attention operands {q:?}, {k:?}, {v:?}")));
    }
    Ok((q[..r - 2].iter().product(), n, dk, dv))
}

/// `softmax(q k^T * scale) v`, materializing the full `n x n` matrix.
pub fn standard_attention(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64) -> Result<Tensor> {
    let (batch, n, dk, dv) = check_qkv(q.shape(), k.shape(), v.shape())?;
    let mut out = vec![0.0; batch * n * dv];
    let mut logits = vec![0.0; n * n];
    for b in 0..batch {
        logits.fill(0.0);
        gemm_nt(&q.data()[b * n * dk..][..n * dk], &k.data()[b * n * dk..][..n * dk], &mut logits, n, dk, n);
        for row in logits.chunks_exact_mut(n) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x * scale));
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x * scale - max).exp();
                total += *x;
            }
            row.iter_mut().for_each(|x| *x /= total);
        }
        gemm_nn(&logits, &v.data()[b * n * dv..][..n * dv], &mut out[b * n * dv..][..n * dv], n, n, dv);
    }
    Ok(Tensor::from_parts(v.shape().to_vec(), out))
}

/// Single-head efficient attention on plain tensors; returns the output and
/// `rho_k(K)`. Auxiliary storage is `O(n d + d^2)`.
pub fn efficient_attention_values(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let (batch, n, dk, dv) = check_qkv(q.shape(), k.shape(), v.shape())?;
    let token_axis = q.rank() - 2;
    let rho_q = ops::softmax(q, q.rank() - 1)?;
    let rho_k = ops::softmax(k, token_axis)?;
    let mut out = vec![0.0; batch * n * dv];
    let mut context = vec![0.0; dk * dv];
    for b in 0..batch {
        context.fill(0.0);
        gemm_tn(&rho_k.data()[b * n * dk..][..n * dk], &v.data()[b * n * dv..][..n * dv], &mut context, dk, n, dv);
        gemm_nn(&rho_q.data()[b * n * dk..][..n * dk], &context, &mut out[b * n * dv..][..n * dv], n, dk, dv);
    }
    Ok((Tensor::from_parts(v.shape().to_vec(), out), rho_k))
}

/// `(rho_q(Q) rho_k(K)^T) V`: the same quantity as efficient attention but
/// grouped through an explicit `n x n` matrix. Associativity makes the two
/// groupings equal, which is the primary oracle for the efficient path.
pub fn explicit_context_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    check_qkv(q.shape(), k.shape(), v.shape())?;
    let rho_q = ops::softmax(q, q.rank() - 1)?;
    let rho_k = ops::softmax(k, q.rank() - 2)?;
    let affinity = ops::matmul(&rho_q, &ops::transpose_last2(&rho_k)?)?;
    ops::matmul(&affinity, v)
}

pub fn register_params(b: &mut ParamBuilder, prefix: &str, cfg: &AttentionConfig) -> Result<()> {
    b.linear(&format!("{prefix}.q"), cfg.d_model, cfg.d_k, false)?;
    b.linear(&format!("{prefix}.k"), cfg.d_model, cfg.d_k, false)?;
    b.linear(&format!("{prefix}.v"), cfg.d_model, cfg.d_v, false)?;
    if cfg.heads > 1 {
        b.linear(&format!("{prefix}.proj"), cfg.d_v, cfg.d_model, true)?;
    }
    Ok(())
}

/// Bias-free projections of the tokens `x` into queries, keys and values.
pub fn make_qkv(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<(Var, Var, Var)> {
    let q = tape.linear(x, p.var(&format!("{prefix}.q.weight"))?, None)?;
    let k = tape.linear(x, p.var(&format!("{prefix}.k.weight"))?, None)?;
    let v = tape.linear(x, p.var(&format!("{prefix}.v.weight"))?, None)?;
    Ok((q, k, v))
}

/// Efficient attention on the tape for `[batch, n, d]` operands. Returns
/// the `[batch, n, d_model]` output and `rho_k(K)` as `[batch, n, d_k]`.
pub fn efficient_attention(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    (q, k, v): (Var, Var, Var),
    cfg: &AttentionConfig,
) -> Result<(Var, Var)> {
    let shape = tape.shape(q).to_vec();
    if shape.len() != 3 || shape[2] != cfg.d_k || tape.shape(v)[2] != cfg.d_v {
        return Err(shape_err(format!("efficient attention expects [b, n, {}], got {shape:?}", cfg.d_k)));
    }
    check_qkv(&shape, tape.shape(k), tape.shape(v))?;
    if cfg.heads == 1 {
        let rho_q = tape.softmax(q, 2)?;
        let rho_k = tape.softmax(k, 1)?;
        let rho_k_t = tape.transpose(rho_k)?;
        let context = tape.matmul(rho_k_t, v)?;
        let out = tape.matmul(rho_q, context)?;
        return Ok((out, rho_k));
    }
    let (b, n, h) = (shape[0], shape[1], cfg.heads);
    let split = |tape: &mut Tape, x: Var, d: usize| -> Result<Var> {
        let r = tape.reshape(x, &[b, n, h, d / h])?;
        tape.permute(r, &[0, 2, 1, 3])
    };
    let merge = |tape: &mut Tape, x: Var, d: usize| -> Result<Var> {
        let r = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(r, &[b, n, d])
    };
    let qh = split(tape, q, cfg.d_k)?;
    let kh = split(tape, k, cfg.d_k)?;
    let vh = split(tape, v, cfg.d_v)?;
    let rho_q = tape.softmax(qh, 3)?;
    let rho_k = tape.softmax(kh, 2)?;
    let rho_k_t = tape.transpose(rho_k)?;
    let context = tape.matmul(rho_k_t, vh)?;
    let heads_out = tape.matmul(rho_q, context)?;
    let joined = merge(tape, heads_out, cfg.d_v)?;
    let out = tape.linear(
        joined,
        p.var(&format!("{prefix}.proj.weight"))?,
        Some(p.var(&format!("{prefix}.proj.bias"))?),
    )?;
    let key_map = merge(tape, rho_k, cfg.d_k)?;
    Ok((out, key_map))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape.to_vec(), |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn standard_single_token_returns_value() {
        let q = rand_tensor(&[1, 4], 1);
        let k = rand_tensor(&[1, 4], 2);
        let v = rand_tensor(&[1, 3], 3);
        let out = standard_attention(&q, &k, &v, 0.5).unwrap();
        assert!(out.max_rel_diff(&v, 1e-12) < 1e-15);
    }

    #[test]
    fn standard_uniform_logits_average_values() {
        // q orthogonal to every key row -> all logits zero.
        let q = Tensor::new([3, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let k = Tensor::new([3, 2], vec![0.0, 1.0, 0.0, -2.0, 0.0, 0.5]).unwrap();
        let v = rand_tensor(&[3, 2], 9);
        let out = standard_attention(&q, &k, &v, 1.0).unwrap();
        for c in 0..2 {
            let mean = (0..3).map(|r| v.at(&[r, c])).sum::<f64>() / 3.0;
            for r in 0..3 {
                assert!((out.at(&[r, c]) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn efficient_single_token_degenerates() {
        let q = rand_tensor(&[1, 4], 4);
        let k = rand_tensor(&[1, 4], 5);
        let v = rand_tensor(&[1, 4], 6);
        let (out, rho_k) = efficient_attention_values(&q, &k, &v).unwrap();
        assert_eq!(rho_k, Tensor::ones([1, 4]));
        // rho_q(q) sums to one, and every context row is v.
        assert!(out.max_rel_diff(&v, 1e-12) < 1e-14);
    }

    #[test]
    fn key_map_columns_sum_to_one() {
        let (_, rho_k) =
            efficient_attention_values(&rand_tensor(&[2, 7, 4], 1), &rand_tensor(&[2, 7, 4], 2), &rand_tensor(&[2, 7, 8], 3))
                .unwrap();
        for b in 0..2 {
            for c in 0..4 {
                let s: f64 = (0..7).map(|j| rho_k.at(&[b, j, c])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(AttentionConfig::for_width(16, 1).is_ok());
        assert!(AttentionConfig::for_width(16, 3).is_err());
        assert_eq!(AttentionConfig::for_width(16, 1).unwrap().param_count(), 16 * 32);
    }

    #[test]
    fn rejects_mismatched_operands() {
        let q = Tensor::zeros([4, 3]);
        assert!(standard_attention(&q, &Tensor::zeros([4, 2]), &Tensor::zeros([4, 2]), 1.0).is_err());
        assert!(efficient_attention_values(&q, &Tensor::zeros([4, 3]), &Tensor::zeros([5, 2])).is_err());
    }
}
