use iscf_core::autodiff::{grad_check, OpKind};
use iscf_core::ops::{self, ReduceKind};
use iscf_core::params::{init_tensor, Init};
use iscf_core::verify::{run_scope, Scope};
use iscf_core::{Tape, Tensor};

fn rand(shape: &[usize], seed: u64, tag: &str) -> Tensor {
    init_tensor(shape, Init::TruncNormal(1.0), seed, tag)
}

#[test]
fn every_primitive_passes_over_ten_seeds() {
    for seed in 0..10 {
        let report = run_scope(Scope::Primitives, seed, None).unwrap();
        let failed: Vec<_> = report.failures().map(|t| (t.name.clone(), t.check.max_rel_err)).collect();
        assert!(failed.is_empty(), "seed {seed}: {failed:?}");
    }
}

#[test]
fn composite_scopes_pass() {
    for scope in [Scope::Blocks, Scope::Iscf] {
        for seed in [0, 7] {
            let report = run_scope(scope, seed, None).unwrap();
            assert!(report.passed(), "{} seed {seed}", scope.name());
        }
    }
}

#[test]
fn faulty_backward_rule_is_named() {
    for kind in [OpKind::Softmax, OpKind::LayerNorm] {
        let report = run_scope(Scope::Primitives, 0, Some(kind)).unwrap();
        assert!(!report.passed());
        assert!(report.failures().any(|t| t.name.contains(kind.name())), "{}", kind.name());
    }
}

#[test]
fn matmul_gradient_is_ones_times_b_transposed() {
    let a = rand(&[3, 4], 1, "a");
    let b = rand(&[4, 2], 1, "b");
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
    let c = tape.matmul(va, vb).unwrap();
    let loss = tape.sum_all(c);
    let grads = tape.backward(loss).unwrap();

    // Hand oracle: d/dA_ij sum(AB) = sum_k B_jk.
    let expected = Tensor::from_fn([3, 4], |i| (0..2).map(|k| b.at(&[i % 4, k])).sum());
    assert!(grads.get(va).unwrap().max_rel_diff(&expected, 1e-12) < 1e-12);

    let check = grad_check(
        |t, v| {
            let c = t.matmul(v[0], v[1])?;
            Ok(t.sum_all(c))
        },
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(check.max_rel_err < 1e-6, "{check:?}");
}

#[test]
fn fan_out_gradient_is_sum_of_paths() {
    let x = rand(&[2, 3], 3, "x");
    let w = rand(&[3, 3], 3, "w");
    let path = |use_a: bool, use_b: bool| {
        let mut tape = Tape::new();
        let vx = tape.leaf(x.clone());
        let vw = tape.constant(w.clone());
        let shared = tape.gelu(vx);
        let mut terms = Vec::new();
        if use_a {
            let a = tape.matmul(shared, vw).unwrap();
            terms.push(tape.sum_all(a));
        }
        if use_b {
            let b = tape.mul(shared, shared).unwrap();
            terms.push(tape.mean_all(b));
        }
        let loss = terms.into_iter().reduce(|l, r| tape.add(l, r).unwrap()).unwrap();
        tape.backward(loss).unwrap().get(vx).unwrap().clone()
    };
    let both = path(true, true);
    let sum = path(true, false).zip_map(&path(false, true), |a, b| a + b).unwrap();
    assert!(both.max_rel_diff(&sum, 1e-12) < 1e-12);
}

#[test]
fn sum_of_squares_gradient_is_twice_x() {
    let x = rand(&[5], 9, "x");
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let sq = tape.mul(v, v).unwrap();
    let loss = tape.sum_all(sq);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(v).unwrap(), &x.map(|a| 2.0 * a));
}

#[test]
fn mean_spreads_one_over_count() {
    let x = rand(&[2, 3, 4], 4, "x");
    let mut tape = Tape::new();
    let v = tape.leaf(x);
    let m = tape.reduce(ReduceKind::Mean, v, &[0, 1, 2]).unwrap();
    let loss = tape.sum_all(m);
    let g = tape.backward(loss).unwrap();
    assert!(g.get(v).unwrap().data().iter().all(|&d| (d - 1.0 / 24.0).abs() < 1e-15));
}

#[test]
fn grad_check_of_sum_is_exact_up_to_rounding() {
    let check = grad_check(|t, v| Ok(t.sum_all(v[0])), &[rand(&[4, 4], 2, "x")], 1e-5).unwrap();
    assert!(check.max_rel_err < 1e-9, "{check:?}");
}

#[test]
fn reshape_permute_concat_round_trip_bitwise() {
    let x = rand(&[2, 3, 4], 5, "x");
    let back = x.reshape([4, 6]).unwrap().reshape([2, 3, 4]).unwrap();
    assert_eq!(back, x);
    let p = ops::permute(&x, &[2, 0, 1]).unwrap();
    assert_eq!(ops::permute(&p, &[1, 2, 0]).unwrap(), x);
    let y = rand(&[2, 5, 4], 5, "y");
    let joined = ops::concat(&[&x, &y], 1).unwrap();
    assert_eq!(joined.shape(), &[2, 8, 4]);
    assert_eq!(joined.at(&[1, 2, 3]), x.at(&[1, 2, 3]));
    assert_eq!(joined.at(&[1, 7, 0]), y.at(&[1, 4, 0]));
}
