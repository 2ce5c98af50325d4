use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::ValueEnum;
use iscf_core::autodiff::OpKind;
use iscf_core::bench::{self, BenchConfig, Variant};
use iscf_core::data::{self, pnm, split_dataset, Sample};
use iscf_core::model::{self, load_checkpoint, ModelConfig};
use iscf_core::pipeline::{self, EpochRecord, Metrics};
use iscf_core::tensor::Tensor;
use iscf_core::verify::{self, Scope};
use serde::Serialize;

use crate::config::{stage_label, Overrides, RunConfig};
use crate::{Command, DataSource, Failure};

type Outcome = Result<(), Failure>;

/// Published ISIC 2018 DSC for the three stage sets, shown beside ablation
/// output as context only.
pub const REFERENCE_DSC: [(&str, f64); 3] = [("1", 0.9025), ("12", 0.9065), ("123", 0.9136)];

pub const ABLATION_HEADER: &str = "setting,dsc,se,sp,acc";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    All,
    Train,
    Val,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    Primitives,
    Blocks,
    Iscf,
    Model,
    All,
}

pub fn dispatch(cmd: Command) -> Outcome {
    match cmd {
        Command::Train { config, source, out, overrides } => train(config.as_deref(), &source, &out, &overrides),
        Command::Eval { ckpt, source, out, config, split, threshold, seed, synth_count, overlays } => {
            let opts = EvalOpts { split, threshold, seed, synth_count, overlays };
            eval(&ckpt, &source, &out, config.as_deref(), &opts)
        }
        Command::Infer { ckpt, image, out, overlay, threshold } => {
            infer(&ckpt, &image, &out, overlay.as_deref(), threshold)
        }
        Command::Gradcheck { scope, seed, inject_fault } => gradcheck(scope, seed, inject_fault.as_deref()),
        Command::BenchAttn { n_list, d, variants, out, min_time_ms, seed } => {
            bench_attn(n_list, d, &variants, &out, min_time_ms, seed)
        }
        Command::Ablate { config, source, scales, out, overrides } => {
            ablate(config.as_deref(), &source, &scales, &out, &overrides)
        }
        Command::SynthData { config, out, overrides } => synth_data(config.as_deref(), &out, &overrides),
    }
}

fn io_err(what: &str, path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Data(format!("{what} {}: {e}", path.display()))
}

fn create_dir(path: &Path) -> Outcome {
    fs::create_dir_all(path).map_err(|e| io_err("cannot create output directory", path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, contents).map_err(|e| io_err("cannot write", path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome {
    write_file(path, serde_json::to_string_pretty(value).expect("serializable") + "\n")
}

fn echo_config(value: &impl Serialize) {
    println!("effective config:\n{}", serde_json::to_string_pretty(value).expect("serializable"));
}

/// Sidecar config path for commands whose output is a single file.
fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".config.json");
    path.with_file_name(name)
}

fn resolve(config: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(config)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn load_samples(source: &DataSource, cfg: &RunConfig) -> Result<Vec<Sample>, Failure> {
    let [h, w] = cfg.model.input_hw;
    match &source.data {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(Failure::Data(format!("data directory {} does not exist", dir.display())));
            }
            let samples = data::load_dataset(dir, (h, w))
                .map_err(|e| Failure::Data(format!("loading {}: {e}", dir.display())))?;
            if samples.is_empty() {
                return Err(Failure::Data(format!("no <id>.ppm images found in {}", dir.display())));
            }
            Ok(samples)
        }
        None => Ok(data::synth_dataset(&cfg.synth)?),
    }
}

fn split(samples: Vec<Sample>, cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>), Failure> {
    if samples.len() < 2 {
        return Err(Failure::Data(format!("need at least two samples to split, got {}", samples.len())));
    }
    let val = cfg.train.val_count(samples.len());
    Ok(split_dataset(samples, val, cfg.train.seed)?)
}

fn metrics_line(m: &Metrics) -> String {
    format!("dsc {:.4} se {:.4} sp {:.4} acc {:.4}", m.dsc, m.se, m.sp, m.acc)
}

fn train(config: Option<&Path>, source: &DataSource, out: &Path, overrides: &Overrides) -> Outcome {
    let cfg = resolve(config, overrides)?;
    echo_config(&cfg);
    let samples = load_samples(source, &cfg)?;
    create_dir(out)?;
    write_json(&out.join("effective-config.json"), &cfg)?;
    let (tr, va) = split(samples, &cfg)?;
    println!("training on {} samples, validating on {}", tr.len(), va.len());
    let epochs = cfg.train.epochs;
    let mut log = |r: &EpochRecord| {
        println!("epoch {}/{epochs}  loss {:.5}  val {}", r.epoch, r.train_loss, metrics_line(&r.val));
    };
    let outcome = pipeline::train(&cfg.model, &cfg.train, &tr, &va, Some(out), &mut log)?;
    let best = outcome.best_record();
    println!("best epoch {}: val {}", best.epoch, metrics_line(&best.val));
    println!("wrote {}", out.display());
    Ok(())
}

struct EvalOpts {
    split: Split,
    threshold: Option<f64>,
    seed: Option<u64>,
    synth_count: Option<usize>,
    overlays: bool,
}

#[derive(Serialize)]
struct EvalRecord<'a> {
    checkpoint: &'a Path,
    data: Option<&'a Path>,
    split: Split,
    threshold: f64,
    run: &'a RunConfig,
}

fn load_model(ckpt: &Path) -> Result<(iscf_core::ModelParams, ModelConfig), Failure> {
    if !ckpt.is_file() {
        return Err(Failure::Data(format!("checkpoint {} does not exist", ckpt.display())));
    }
    load_checkpoint(ckpt).map_err(|e| Failure::Data(format!("checkpoint {}: {e}", ckpt.display())))
}

fn eval(ckpt: &Path, source: &DataSource, out: &Path, config: Option<&Path>, opts: &EvalOpts) -> Outcome {
    let (params, model_cfg) = load_model(ckpt)?;
    let mut run = RunConfig::load(config)?;
    let overrides = Overrides { seed: opts.seed, synth_count: opts.synth_count, threshold: opts.threshold, ..Overrides::default() };
    overrides.apply(&mut run);
    run.model = model_cfg.clone();
    run.synth.hw = model_cfg.input_hw;
    run.validate()?;
    let threshold = run.train.threshold;
    let record = EvalRecord { checkpoint: ckpt, data: source.data.as_deref(), split: opts.split, threshold, run: &run };
    echo_config(&record);

    let samples = load_samples(source, &run)?;
    let samples = match opts.split {
        Split::All => samples,
        Split::Train => split(samples, &run)?.0,
        Split::Val => split(samples, &run)?.1,
    };
    create_dir(out)?;
    write_json(&out.join("effective-config.json"), &record)?;
    let preds = pipeline::predict_masks(&params, &model_cfg, &samples, threshold, run.train.batch_size)?;
    let report = pipeline::score(&preds, &samples, threshold)?;
    write_json(&out.join("metrics.json"), &report)?;
    if opts.overlays {
        let dir = out.join("overlays");
        create_dir(&dir)?;
        for (s, p) in samples.iter().zip(&preds) {
            data::write_overlay(&s.image, &s.mask, p, &dir.join(format!("{}.ppm", s.id)))?;
        }
    }
    println!("{} samples  micro {}", samples.len(), metrics_line(&report.micro));
    println!("{} samples  per-sample mean {}", samples.len(), metrics_line(&report.per_sample_mean));
    println!("wrote {}", out.join("metrics.json").display());
    Ok(())
}

#[derive(Serialize)]
struct InferRecord<'a> {
    checkpoint: &'a Path,
    image: &'a Path,
    threshold: f64,
    model: &'a ModelConfig,
}

fn infer(ckpt: &Path, image: &Path, out: &Path, overlay: Option<&Path>, threshold: f64) -> Outcome {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Failure::Config(format!("threshold must lie in [0, 1], got {threshold}")));
    }
    let (params, cfg) = load_model(ckpt)?;
    let record = InferRecord { checkpoint: ckpt, image, threshold, model: &cfg };
    echo_config(&record);
    let [h, w] = cfg.input_hw;
    let (img, (oh, ow)) =
        data::load_image(image, (h, w)).map_err(|e| Failure::Data(format!("image {}: {e}", image.display())))?;
    let sample = Sample::new("infer", img, Tensor::zeros([1, h, w]))?;
    let pred = pipeline::predict_masks(&params, &cfg, std::slice::from_ref(&sample), threshold, 1)?.remove(0);

    let bytes: Vec<u8> = pred.data().iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect();
    let full = data::resize_nearest(&bytes, h, w, oh, ow);
    let mask = pnm::Pnm { kind: pnm::PnmKind::Gray, width: ow, height: oh, maxval: 255, data: full };
    pnm::write(out, &mask).map_err(|e| io_err("cannot write", out, e))?;
    write_json(&sidecar(out), &record)?;
    if let Some(path) = overlay {
        let empty = Tensor::zeros([1, h, w]);
        data::write_overlay(&sample.image, &empty, &pred, path).map_err(|e| io_err("cannot write", path, e))?;
    }
    let frac = pred.sum() / (h * w) as f64;
    println!("foreground fraction {frac:.4}; wrote {}", out.display());
    Ok(())
}

fn gradcheck(scope: ScopeArg, seed: u64, fault: Option<&str>) -> Outcome {
    let fault = match fault {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| {
            let known: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
            Failure::Config(format!("unknown op `{name}`; expected one of {}", known.join(", ")))
        })?),
    };
    let scopes: Vec<Scope> = match scope {
        ScopeArg::Primitives => vec![Scope::Primitives],
        ScopeArg::Blocks => vec![Scope::Blocks],
        ScopeArg::Iscf => vec![Scope::Iscf],
        ScopeArg::Model => vec![Scope::Model],
        ScopeArg::All => Scope::ALL.to_vec(),
    };
    println!(
        "effective config: scope {:?}, seed {seed}{}",
        scope,
        fault.map(|k| format!(", injected fault in `{}`", k.name())).unwrap_or_default()
    );
    let mut failed = Vec::new();
    for s in scopes {
        let report = verify::run_scope(s, seed, fault)?;
        for t in &report.targets {
            println!(
                "{:<10} {:<28} max_rel_err {:.3e}  threshold {:.0e}  coords {:>5}  {}",
                s.name(),
                t.name,
                t.check.max_rel_err,
                t.threshold,
                t.check.coordinates,
                if t.passed() { "PASS" } else { "FAIL" }
            );
        }
        failed.extend(report.failures().map(|t| format!("{}/{}", s.name(), t.name)));
    }
    if failed.is_empty() {
        return Ok(());
    }
    let culprit = fault.map(|k| format!(" (backward rule of `{}` was perturbed)", k.name())).unwrap_or_default();
    Err(Failure::Breach(format!("{}{culprit}", failed.join(", "))))
}

#[derive(Serialize)]
struct BenchRecord<'a> {
    n_list: &'a [usize],
    d: usize,
    variants: &'a [String],
    min_time_ms: u64,
    seed: u64,
}

fn bench_attn(n_list: Vec<usize>, d: usize, variants: &[String], out: &Path, min_time_ms: u64, seed: u64) -> Outcome {
    let record = BenchRecord { n_list: &n_list, d, variants, min_time_ms, seed };
    echo_config(&record);
    let parsed = variants
        .iter()
        .map(|v| Variant::from_name(v).ok_or_else(|| Failure::Config(format!("unknown variant `{v}`"))))
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = BenchConfig {
        n_list: n_list.clone(),
        d,
        variants: parsed,
        seed,
        min_time: Duration::from_millis(min_time_ms),
        ..BenchConfig::default()
    };
    let report = bench::run_bench(&cfg)?;
    println!("associativity oracle max rel err {:.3e}", report.oracle_max_rel);
    if !bench::counting_enabled() {
        println!("allocation counting is not active; byte columns are zero");
    }
    for r in &report.rows {
        println!(
            "{:<9} n {:>5}  {:>12} ns  {:>11} bytes  largest {:>10}",
            r.variant.name(),
            r.n,
            r.wall_ns,
            r.bytes_allocated,
            r.largest_alloc
        );
    }
    for (v, s) in &report.slopes {
        println!("{} log-log slope {s:.3}", v.name());
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(out, bench::bench_csv(&report.rows))?;
    write_json(&sidecar(out), &record)?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn ablation_csv(rows: &[(String, Metrics)]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for (s, m) in rows {
        out.push_str(&format!("{s},{:.6},{:.6},{:.6},{:.6}\n", m.dsc, m.se, m.sp, m.acc));
    }
    out
}

fn ablate(config: Option<&Path>, source: &DataSource, scales: &[String], out: &Path, overrides: &Overrides) -> Outcome {
    let base = resolve(config, overrides)?;
    let settings = scales
        .iter()
        .map(|s| crate::config::parse_stages(s).map_err(Failure::Config))
        .collect::<Result<Vec<_>, _>>()?;
    for s in &settings {
        RunConfig { model: ModelConfig { iscf_stages: s.clone(), ..base.model.clone() }, ..base.clone() }.validate()?;
    }
    echo_config(&base);
    let samples = load_samples(source, &base)?;
    create_dir(out)?;
    write_json(&out.join("effective-config.json"), &base)?;
    let (tr, va) = split(samples, &base)?;

    let mut rows = Vec::new();
    for stages in settings {
        let label = stage_label(&stages);
        let model_cfg = ModelConfig { iscf_stages: stages, ..base.model.clone() };
        let dir = out.join(format!("setting_{label}"));
        create_dir(&dir)?;
        write_json(&dir.join("effective-config.json"), &RunConfig { model: model_cfg.clone(), ..base.clone() })?;
        println!("setting {label}: {} parameters", model::param_count(&model::build(&model_cfg)?));
        let epochs = base.train.epochs;
        let mut log = |r: &EpochRecord| {
            println!("  [{label}] epoch {}/{epochs}  loss {:.5}  val {}", r.epoch, r.train_loss, metrics_line(&r.val));
        };
        let outcome = pipeline::train(&model_cfg, &base.train, &tr, &va, Some(&dir), &mut log)?;
        rows.push((label, outcome.best_record().val));
    }
    let csv = ablation_csv(&rows);
    write_file(&out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    let reference: Vec<String> = REFERENCE_DSC.iter().map(|(s, d)| format!("{s} -> {d}")).collect();
    println!("published ISIC 2018 reference DSC at 224x224 (context, not reproduced here): {}", reference.join(", "));
    println!("wrote {}", out.join("ablation.csv").display());
    Ok(())
}

fn synth_data(config: Option<&Path>, out: &Path, overrides: &Overrides) -> Outcome {
    let cfg = resolve(config, overrides)?;
    echo_config(&cfg.synth);
    let recorded = data::synth_dataset_recorded(&cfg.synth)?;
    create_dir(out)?;
    write_json(&out.join("effective-config.json"), &cfg.synth)?;
    let mut ellipses = serde_json::Map::new();
    for (s, e) in &recorded {
        data::save_sample(out, s).map_err(|err| io_err("cannot write sample into", out, err))?;
        ellipses.insert(s.id.clone(), serde_json::to_value(e).expect("serializable"));
    }
    write_json(&out.join("ellipses.json"), &ellipses)?;
    println!("wrote {} samples to {}", recorded.len(), out.display());
    Ok(())
}
