//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines are never captured; exits nonzero if any
//! criterion fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use assert_cmd::Command;
use iscf_core::attention::{efficient_attention_values, explicit_context_attention};
use iscf_core::bench::{run_bench, BenchConfig, CountingAlloc, Variant};
use iscf_core::data::{pnm, save_sample, split_dataset, synth_dataset, Sample, SynthSpec};
use iscf_core::model::{self, build, forward, load_checkpoint, predict_logits, save_checkpoint, ModelConfig};
use iscf_core::params::{init_tensor, Init};
use iscf_core::pipeline::{confusion, evaluate, train, Confusion, Metrics, TrainConfig};
use iscf_core::verify::{run_scope, Scope};
use iscf_core::{Tape, Tensor};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(start: Instant, budget: Duration, what: &str) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < budget, format!("{what} took {took:.1?}, budget {budget:?}"))
}

fn attention_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for case in 0..100u64 {
        // Walk the (n, d) box with coprime strides so every extent occurs.
        let n = 1 + (case as usize * 37) % 64;
        let dk = 1 + (case as usize * 13) % 32;
        let dv = 1 + (case as usize * 7) % 32;
        let q = init_tensor(&[1, n, dk], Init::TruncNormal(1.0), case, "q");
        let k = init_tensor(&[1, n, dk], Init::TruncNormal(1.0), case, "k");
        let v = init_tensor(&[1, n, dv], Init::TruncNormal(1.0), case, "v");
        let (fast, _) = efficient_attention_values(&q, &k, &v).map_err(|e| e.to_string())?;
        let slow = explicit_context_attention(&q, &k, &v).map_err(|e| e.to_string())?;
        worst = worst.max(fast.max_rel_diff(&slow, 1e-12));
    }
    ensure(worst < 1e-9, format!("max rel err {worst:e}"))?;
    within(start, Duration::from_secs(10), "oracle")?;
    Ok(format!("100 cases, max rel err {worst:.2e}, {:.2?}", start.elapsed()))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    for scope in Scope::ALL {
        let report = run_scope(scope, 0, None).map_err(|e| e.to_string())?;
        let worst = report.targets.iter().map(|t| t.check.max_rel_err).fold(0.0, f64::max);
        let failed: Vec<String> = report.failures().map(|t| format!("{} {:.2e}", t.name, t.check.max_rel_err)).collect();
        ensure(failed.is_empty(), format!("{} breaches: {}", scope.name(), failed.join(", ")))?;
        parts.push(format!("{} {} targets max {worst:.1e} < {:.0e}", scope.name(), report.targets.len(), scope.threshold()));
    }
    within(start, Duration::from_secs(300), "gradient suite")?;
    Ok(format!("{}; {:.1?}", parts.join("; "), start.elapsed()))
}

fn complexity() -> Outcome {
    let start = Instant::now();
    let report = run_bench(&BenchConfig::default()).map_err(|e| e.to_string())?;
    let eff = report.slope(Variant::Efficient).ok_or("no efficient rows")?;
    let std = report.slope(Variant::Standard).ok_or("no standard rows")?;
    ensure((0.8..=1.3).contains(&eff), format!("efficient slope {eff:.3} outside [0.8, 1.3]"))?;
    ensure((1.7..=2.3).contains(&std), format!("standard slope {std:.3} outside [1.7, 2.3]"))?;
    ensure(report.rows.iter().all(|r| r.bytes_allocated > 0), "allocation counter inactive")?;
    for r in report.rows.iter().filter(|r| r.variant == Variant::Efficient) {
        let square = (r.n * r.n * 8) as u64;
        ensure(r.largest_alloc < square, format!("efficient n={} allocated {} >= n^2 buffer {square}", r.n, r.largest_alloc))?;
    }
    within(start, Duration::from_secs(120), "benchmark")?;
    let big = report.rows.iter().filter(|r| r.n == 4096).map(|r| format!("{} {} B", r.variant.name(), r.largest_alloc));
    Ok(format!(
        "slopes efficient {eff:.3}, standard {std:.3}; largest block at n=4096: {}; {:.1?}",
        big.collect::<Vec<_>>().join(", "),
        start.elapsed()
    ))
}

fn identity_start() -> Outcome {
    let on = ModelConfig::desk();
    let off = ModelConfig { iscf_stages: vec![], ..on.clone() };
    let (p_on, p_off) = (build(&on).map_err(|e| e.to_string())?, build(&off).map_err(|e| e.to_string())?);
    for seed in 0..10 {
        let img = init_tensor(&[1, 3, 64, 64], Init::TruncNormal(0.5), seed, "input");
        let a = predict_logits(&p_on, &on, &img).map_err(|e| e.to_string())?;
        let b = predict_logits(&p_off, &off, &img).map_err(|e| e.to_string())?;
        let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(same, format!("input {seed}: logits differ"))?;
    }
    Ok("10 inputs, ISCF {1,2,3} vs off bitwise equal".into())
}

fn shape_pipeline() -> Outcome {
    let cfg = ModelConfig::full_scale();
    let params = build(&cfg).map_err(|e| e.to_string())?;
    let mut tape = Tape::inference();
    let p = params.bind(&mut tape);
    let x = tape.constant(Tensor::full([1, 3, 224, 224], 0.5));
    let out = forward(&mut tape, &p, &cfg, x).map_err(|e| e.to_string())?;
    ensure(out.token_counts == [3136, 784, 196, 49], format!("token counts {:?}", out.token_counts))?;
    let shape = tape.shape(out.logits).to_vec();
    ensure(shape == [1, 1, 224, 224], format!("logits {shape:?}"))?;
    Ok(format!("tokens {:?}, logits {shape:?} (d1 = {})", out.token_counts, cfg.base_width))
}

fn desk_learning() -> Outcome {
    let start = Instant::now();
    let tc = TrainConfig::default();
    let cfg = ModelConfig::desk();
    let samples = synth_dataset(&SynthSpec::default()).map_err(|e| e.to_string())?;
    let n = samples.len();
    let (tr, va) = split_dataset(samples, tc.val_count(n), tc.seed).map_err(|e| e.to_string())?;
    ensure(tr.len() == 200 && va.len() == 50, format!("split {} / {}", tr.len(), va.len()))?;
    let outcome = train(&cfg, &tc, &tr, &va, None, &mut |r| {
        println!("    epoch {:>2}  loss {:.5}  val dsc {:.4}", r.epoch, r.train_loss, r.val.dsc);
    })
    .map_err(|e| e.to_string())?;
    ensure(outcome.history.iter().all(|r| r.train_loss.is_finite()), "non-finite epoch loss")?;
    let best = outcome.best_record();
    ensure(best.val.dsc >= 0.85, format!("best val DSC {:.4} < 0.85", best.val.dsc))?;
    let first = outcome.history.iter().find(|r| r.val.dsc >= 0.85).map_or(0, |r| r.epoch);
    let train_dsc = evaluate(&outcome.best, &cfg, &tr, tc.threshold, tc.batch_size).map_err(|e| e.to_string())?.micro.dsc;
    ensure(train_dsc >= best.val.dsc - 0.05, format!("train DSC {train_dsc:.4} far below val {:.4}", best.val.dsc))?;
    within(start, Duration::from_secs(1800), "desk run")?;
    let infer_dsc = infer_round_trip(&outcome.best, &cfg, &tr[..5])?;
    ensure(infer_dsc >= 0.85, format!("infer DSC on training images {infer_dsc:.4} < 0.85"))?;
    Ok(format!(
        "best val DSC {:.4} at epoch {} (first >= 0.85 at epoch {first}), train DSC {train_dsc:.4}, \
         infer DSC on 5 training images {infer_dsc:.4}, {} epochs in {:.0?}",
        best.val.dsc,
        outcome.best_epoch,
        tc.epochs,
        start.elapsed()
    ))
}

/// Mean DSC of `iscf infer` masks against the ground truth of `samples`.
fn infer_round_trip(params: &iscf_core::ModelParams, cfg: &ModelConfig, samples: &[Sample]) -> Result<f64, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ckpt = dir.path().join("best.ckpt");
    save_checkpoint(params, cfg, &ckpt).map_err(|e| e.to_string())?;
    let mut total = 0.0;
    for s in samples {
        save_sample(dir.path(), s).map_err(|e| e.to_string())?;
        let out = dir.path().join(format!("{}_pred.pgm", s.id));
        let status = Command::cargo_bin("iscf")
            .map_err(|e| e.to_string())?
            .args(["infer", "--ckpt"])
            .arg(&ckpt)
            .arg("--image")
            .arg(dir.path().join(format!("{}.ppm", s.id)))
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?
            .status;
        ensure(status.success(), format!("infer exited {:?}", status.code()))?;
        let raw = pnm::read(&out).map_err(|e| e.to_string())?;
        let (h, w) = s.hw();
        let pred = Tensor::new([1, h, w], raw.data.iter().map(|&b| (b >= 128) as u8 as f64).collect())
            .map_err(|e| e.to_string())?;
        total += Metrics::from_counts(&confusion(&pred, &s.mask).map_err(|e| e.to_string())?).dsc;
    }
    Ok(total / samples.len() as f64)
}

fn ablation_harness() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = Command::cargo_bin("iscf")
        .map_err(|e| e.to_string())?
        .args(["ablate", "--synth", "--synth-count", "40", "--epochs", "2", "--seed", "0", "--scales", "1,12,123", "--out"])
        .arg(dir.path())
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), format!("ablate exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)))?;
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).map_err(|e| e.to_string())?;
    let lines: Vec<&str> = csv.lines().collect();
    ensure(lines.first() == Some(&"setting,dsc,se,sp,acc"), format!("header {:?}", lines.first()))?;
    ensure(lines.len() == 4, format!("{} rows", lines.len() - 1))?;
    for (line, label) in lines[1..].iter().zip(["1", "12", "123"]) {
        let cells: Vec<&str> = line.split(',').collect();
        ensure(cells.len() == 5 && cells[0] == label, format!("row {line:?}"))?;
        for c in &cells[1..] {
            let v: f64 = c.parse().map_err(|_| format!("cell {c:?}"))?;
            ensure((0.0..=1.0).contains(&v), format!("cell {c}"))?;
        }
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    ensure(stdout.contains("0.9025") && stdout.contains("0.9136"), "reference row missing from output")?;
    // Each setting must really be a different network.
    let counts: Vec<u64> = stdout
        .lines()
        .filter_map(|l| l.strip_prefix("setting ")?.split_once(": ")?.1.strip_suffix(" parameters")?.parse().ok())
        .collect();
    ensure(counts.len() == 3 && counts.windows(2).all(|w| w[0] < w[1]), format!("parameter counts {counts:?}"))?;
    Ok(format!(
        "rows {}; parameters {counts:?}; published reference 0.9025 -> 0.9065 -> 0.9136 reported, not asserted",
        lines[1..].join(" | ")
    ))
}

fn metrics_suite() -> Outcome {
    let t = |xs: &[u8]| Tensor::new([xs.len()], xs.iter().map(|&x| x as f64).collect()).unwrap();
    let c = confusion(&t(&[1, 1, 0, 0]), &t(&[1, 0, 1, 0])).map_err(|e| e.to_string())?;
    ensure(c == Confusion { tp: 1, fp: 1, fn_: 1, tn: 1 }, format!("{c:?}"))?;
    let half = Metrics { dsc: 0.5, se: 0.5, sp: 0.5, acc: 0.5 };
    ensure(Metrics::from_counts(&c) == half, "hand case")?;
    let one = Metrics { dsc: 1.0, se: 1.0, sp: 1.0, acc: 1.0 };
    let m = |p: &[u8], g: &[u8]| Metrics::from_counts(&confusion(&t(p), &t(g)).unwrap());
    ensure(m(&[1, 0, 1], &[1, 0, 1]) == one, "identical masks")?;
    ensure(m(&[0, 0, 0], &[0, 0, 0]) == one, "empty masks")?;
    // Every pair of 4-pixel masks.
    let bits = |x: u8| [x & 1, (x >> 1) & 1, (x >> 2) & 1, (x >> 3) & 1];
    for a in 0..16u8 {
        for b in 0..16u8 {
            let (p, g) = (bits(a), bits(b));
            let (fwd, back) = (m(&p, &g), m(&g, &p));
            ensure(fwd.dsc == back.dsc && fwd.acc == back.acc, format!("swap {p:?} {g:?}"))?;
            let inv = |x: [u8; 4]| x.map(|v| 1 - v);
            let flipped = m(&inv(p), &inv(g));
            ensure(flipped.se == fwd.sp && flipped.sp == fwd.se, format!("relabel {p:?} {g:?}"))?;
        }
    }
    Ok("hand case 0.5 x4, identical and empty masks 1, identities exact on all 256 4-pixel pairs".into())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = ModelConfig::desk();
    let params = build(&cfg).map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&params, &cfg, &a).map_err(|e| e.to_string())?;
    let (loaded, loaded_cfg) = load_checkpoint(&a).map_err(|e| e.to_string())?;
    save_checkpoint(&loaded, &loaded_cfg, &b).map_err(|e| e.to_string())?;
    let (bytes_a, bytes_b) = (fs::read(&a).unwrap(), fs::read(&b).unwrap());
    ensure(bytes_a == bytes_b && loaded_cfg == cfg, "checkpoint bytes differ after reload")?;

    let tiny = ModelConfig::tiny();
    let tc = TrainConfig { epochs: 2, batch_size: 4, ..TrainConfig::default() };
    let data = synth_dataset(&SynthSpec { count: 12, hw: [32, 32], ..SynthSpec::default() }).map_err(|e| e.to_string())?;
    let mut histories = Vec::new();
    for run in ["run_a", "run_b"] {
        let out = dir.path().join(run);
        fs::create_dir(&out).unwrap();
        train(&tiny, &tc, &data[3..], &data[..3], Some(&out), &mut |_| {}).map_err(|e| e.to_string())?;
        histories.push(fs::read(out.join("history.csv")).unwrap());
    }
    ensure(histories[0] == histories[1], "history.csv differs between same-seed runs")?;
    Ok(format!("checkpoint {} bytes identical after reload; two same-seed runs wrote identical history.csv", bytes_a.len()))
}

fn parameter_accounting() -> Outcome {
    let mut parts = Vec::new();
    for base in [ModelConfig::desk(), ModelConfig::full_scale()] {
        let off = ModelConfig { iscf_stages: vec![], ..base.clone() };
        let on_count = model::param_count(&build(&base).map_err(|e| e.to_string())?);
        let off_count = model::param_count(&build(&off).map_err(|e| e.to_string())?);
        let closed = base.iscf_overhead().map_err(|e| e.to_string())?;
        ensure(on_count - off_count == closed, format!("store delta {} vs closed form {closed}", on_count - off_count))?;
        ensure(on_count == base.closed_form_param_count().map_err(|e| e.to_string())?, "total differs from closed form")?;
        parts.push(format!("{}x{} d1={}: {off_count} -> {on_count} (+{closed})", base.input_hw[0], base.input_hw[1], base.base_width));
    }
    Ok(format!("{}; published 22.31 M -> 23.43 M cited for context only", parts.join("; ")))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("efficient attention equals the explicit n x n grouping", attention_oracle),
        ("finite-difference gradient suite", gradient_suite),
        ("attention complexity scaling", complexity),
        ("identity-start ISCF", identity_start),
        ("224x224 shape pipeline", shape_pipeline),
        ("desk-scale learning reaches val DSC >= 0.85", desk_learning),
        ("ablation harness emits three rows", ablation_harness),
        ("metrics unit suite", metrics_suite),
        ("checkpoint round trip and training determinism", determinism),
        ("ISCF parameter accounting", parameter_accounting),
    ];
    let mut failures = Vec::new();
    for (i, &(name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS criterion {}: {name}: {detail}", i + 1),
            Err(why) => {
                println!("FAIL criterion {}: {name}: {why}", i + 1);
                failures.push(i + 1);
            }
        }
    }
    if failures.is_empty() {
        println!("acceptance: all {} criteria passed", criteria.len());
    } else {
        println!("acceptance: failed criteria {failures:?}");
        std::process::exit(1);
    }
}
