use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Absolute floor on the relative-error denominator.
const REL_FLOOR: f64 = 1e-8;
/// Floor relative to the objective value: derivatives smaller than this
/// share of `|f(x)|` sit inside the rounding noise of a central difference.
const OBJECTIVE_FLOOR: f64 = 1e-6;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// (input index, flat coordinate) of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    /// (analytic, numeric) derivative at `worst`.
    pub worst_values: Option<(f64, f64)>,
    pub coordinates: usize,
}

/// Compare analytic gradients of the scalar function `f` against central
/// differences `(f(x+eps) - f(x-eps)) / 2eps` at every coordinate of every
/// input. Relative error uses `max(|analytic|, |numeric|, 1e-8, 1e-6 |f(x)|)`
/// as the denominator.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let picks: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    check_coordinates(&f, inputs, eps, &picks, None)
}

/// Like [`grad_check`] but probes at most `per_input` randomly chosen
/// coordinates of each input.
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    per_input: usize,
    seed: u64,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = inputs
        .iter()
        .map(|t| {
            let n = t.numel();
            let mut idx = sample(&mut rng, n, per_input.min(n)).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect::<Vec<_>>();
    check_coordinates(&f, inputs, eps, &picks, None)
}

pub(crate) fn check_coordinates<F>(
    f: &F,
    inputs: &[Tensor],
    eps: f64,
    picks: &[Vec<usize>],
    fault: Option<super::OpKind>,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_backward_fault(kind);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let floor = REL_FLOOR.max(OBJECTIVE_FLOOR * tape.value(out).item()?.abs());

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut t = Tape::inference();
        let vs: Vec<Var> = values.iter().map(|v| t.constant(v.clone())).collect();
        let out = f(&mut t, &vs)?;
        t.value(out).item()
    };

    let mut report = GradCheck { max_rel_err: 0.0, worst: None, worst_values: None, coordinates: 0 };
    let mut probe = inputs.to_vec();
    for (i, coords) in picks.iter().enumerate() {
        let analytic = grads.get(vars[i]);
        for &c in coords {
            let x0 = inputs[i].data()[c];
            probe[i] = inputs[i].with_value(c, x0 + eps);
            let up = eval(&probe)?;
            probe[i] = inputs[i].with_value(c, x0 - eps);
            let down = eval(&probe)?;
            probe[i] = inputs[i].clone();
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.map_or(0.0, |g| g.data()[c]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.coordinates += 1;
            if rel >= report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((i, c));
                report.worst_values = Some((a, numeric));
            }
        }
    }
    Ok(report)
}
