use std::fs;

use indexmap::IndexMap;
use iscf_core::model::{self, build, forward, load_checkpoint, load_checkpoint_for, predict_logits, save_checkpoint, ModelConfig};
use iscf_core::params::{init_tensor, Init};
use iscf_core::{Error, Tape, Tensor};

fn image(cfg: &ModelConfig, batch: usize, seed: u64) -> Tensor {
    let [h, w] = cfg.input_hw;
    init_tensor(&[batch, 3, h, w], Init::TruncNormal(0.5), seed, "img")
}

#[test]
fn token_pipeline_at_224() {
    // Width does not affect token counts; a narrow model keeps this quick.
    let cfg = ModelConfig { input_hw: [224, 224], base_width: 8, ..ModelConfig::desk() };
    let params = build(&cfg).unwrap();
    let mut tape = Tape::inference();
    let p = params.bind(&mut tape);
    let x = tape.constant(image(&cfg, 1, 0));
    let out = forward(&mut tape, &p, &cfg, x).unwrap();
    assert_eq!(out.token_counts, [3136, 784, 196, 49]);
    assert_eq!(tape.shape(out.bottleneck), &[1, 49, 64]);
    assert_eq!(tape.shape(out.logits), &[1, 1, 224, 224]);
    for (s, n) in [3136, 784, 196].into_iter().enumerate() {
        assert_eq!(tape.shape(out.taps.tap(s + 1).key_map), &[1, n, cfg.stage_widths()[s] / 2]);
    }
}

#[test]
fn desk_logits_match_input_extent() {
    let cfg = ModelConfig::desk();
    let logits = predict_logits(&build(&cfg).unwrap(), &cfg, &image(&cfg, 2, 1)).unwrap();
    assert_eq!(logits.shape(), &[2, 1, 64, 64]);
    assert!(logits.all_finite());
}

#[test]
fn zero_fusion_conv_makes_iscf_an_identity() {
    let on = ModelConfig::tiny();
    let off = ModelConfig { iscf_stages: vec![], ..on.clone() };
    let (p_on, p_off) = (build(&on).unwrap(), build(&off).unwrap());
    for seed in 0..3 {
        let img = image(&on, 1, seed);
        let a = predict_logits(&p_on, &on, &img).unwrap();
        let b = predict_logits(&p_off, &off, &img).unwrap();
        assert_eq!(a.data(), b.data(), "seed {seed}");
    }
}

#[test]
fn forward_is_deterministic() {
    let cfg = ModelConfig::tiny();
    let img = image(&cfg, 2, 4);
    let a = predict_logits(&build(&cfg).unwrap(), &cfg, &img).unwrap();
    let b = predict_logits(&build(&cfg).unwrap(), &cfg, &img).unwrap();
    assert_eq!(a, b);
}

/// Gradient of a BCE loss for every parameter, after replacing the zeroed
/// fusion convolution so that the ISCF branch carries signal.
fn all_gradients(cfg: &ModelConfig) -> IndexMap<String, Tensor> {
    let mut params = build(cfg).unwrap();
    if let Some(fuse) = params.get("iscf.fuse.weight") {
        let shape = fuse.value.shape().to_vec();
        params.set("iscf.fuse.weight", init_tensor(&shape, Init::TruncNormal(0.5), 1, "fuse")).unwrap();
    }
    let img = image(cfg, 2, 9);
    let [h, w] = cfg.input_hw;
    let target = Tensor::from_fn([2, 1, h, w], |i| ((i / w + i % w) % 3 == 0) as u8 as f64);
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let x = tape.constant(img);
    let out = forward(&mut tape, &p, cfg, x).unwrap();
    let loss = tape.bce_with_logits(out.logits, &target).unwrap();
    let grads = tape.backward(loss).unwrap();
    p.iter().map(|(name, v)| (name.to_owned(), grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros([1])))).collect()
}

// The tiny config's bottleneck is a single token, where the key softmax is
// constant and its projection legitimately gets zero gradient; the desk
// config has a 2x2 bottleneck.
#[test]
fn every_parameter_receives_gradient() {
    let grads = all_gradients(&ModelConfig::desk());
    let dead: Vec<&String> = grads.iter().filter(|(_, g)| g.max_abs() == 0.0).map(|(n, _)| n).collect();
    assert!(dead.is_empty(), "no gradient reaches {dead:?}");
}

#[test]
fn disabled_stages_have_no_parameters() {
    let cfg = ModelConfig { iscf_stages: vec![1], ..ModelConfig::desk() };
    let params = build(&cfg).unwrap();
    assert!(params.names().any(|n| n.starts_with("iscf.remap1")));
    assert!(!params.names().any(|n| n.contains("remap2") || n.contains("redist2") || n.contains("redist3")));
    let grads = all_gradients(&cfg);
    assert!(grads.iter().all(|(_, g)| g.max_abs() > 0.0));
}

#[test]
fn iscf_overhead_matches_store_difference() {
    for stages in [vec![1], vec![1, 2], vec![1, 2, 3], vec![2, 3]] {
        let on = ModelConfig { iscf_stages: stages.clone(), ..ModelConfig::desk() };
        let off = ModelConfig { iscf_stages: vec![], ..ModelConfig::desk() };
        let delta = model::param_count(&build(&on).unwrap()) - model::param_count(&build(&off).unwrap());
        assert_eq!(delta, on.iscf_overhead().unwrap(), "{stages:?}");
        assert!(delta > 0);
    }
    assert_eq!(model::param_count(&Default::default()), 0);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig { seed: 5, ..ModelConfig::tiny() };
    let params = build(&cfg).unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&params, &cfg, &a).unwrap();
    let (loaded, loaded_cfg) = load_checkpoint(&a).unwrap();
    assert_eq!(loaded_cfg, cfg);
    save_checkpoint(&loaded, &loaded_cfg, &b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    // The payload is 32-bit.
    for p in params.iter() {
        let rounded = p.value.map(|x| x as f32 as f64);
        assert_eq!(&loaded.get(&p.name).unwrap().value, &rounded, "{}", p.name);
    }
}

#[test]
fn checkpoint_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::tiny();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&build(&cfg).unwrap(), &cfg, &path).unwrap();

    let wider = ModelConfig { base_width: 16, ..cfg.clone() };
    match load_checkpoint_for(&path, &wider) {
        Err(Error::ShapeMismatch(msg)) => assert!(msg.contains("embed"), "{msg}"),
        other => panic!("expected a shape mismatch, got {other:?}"),
    }

    let bytes = fs::read(&path).unwrap();
    let cut = dir.path().join("cut.ckpt");
    fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(&cut), Err(Error::Format(_))));
    fs::write(&cut, b"PNG?").unwrap();
    assert!(matches!(load_checkpoint(&cut), Err(Error::Format(_))));
}
