//! Harness-level integration: config handling, training error paths,
//! checkpoint round-trips, evaluation invariants.

use ppp::error::Error;
use ppp::harness::{
    evaluate, load_checkpoint, load_data, train, DataSettings, EvalMode, RunConfig, RunMode,
};

fn tiny_config(mode: &str) -> RunConfig {
    RunConfig::from_toml(&format!(
        r#"
mode = "{mode}"
seed = 3
enroll_batch = 6

[model]
stage_widths = [8]
blocks_per_stage = 1
gate_hidden = 4

[data]
classes = 2
identities = 2
samples_per_identity = 32
noise_level = 0.3
seed = 5

[batch]
identities_per_batch = 2
samples_per_identity = 4

[optim]
epochs = 2
lr_network = 0.05
"#
    ))
    .unwrap()
}

#[test]
fn noreg_mode_forces_alpha_to_zero_with_all_else_equal() {
    let toml = r#"
mode = "noreg"
seed = 1

[loss]
alpha = 10.0
beta = 10.0
"#;
    let cfg = RunConfig::from_toml(toml).unwrap();
    assert_eq!(cfg.loss.alpha, 0.0, "noreg is a config transform: alpha := 0");
    assert_eq!(cfg.loss.beta, 10.0);
    let ppp = RunConfig::from_toml(&toml.replace("noreg", "ppp")).unwrap();
    assert_eq!(ppp.loss.alpha, 10.0);
}

#[test]
fn config_toml_roundtrip_is_stable() {
    let cfg = tiny_config("ppp");
    let again = RunConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(cfg, again);
}

#[test]
fn training_aborts_on_divergence_with_diagnostics() {
    let mut cfg = tiny_config("ppp");
    cfg.init_from = None;
    cfg.optim.lr_network = 1e6;
    cfg.optim.lr_gates = 1e6;
    let bundle = load_data(&cfg.data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    match train(&cfg, &bundle, &dir.path().join("x.ckpt"), None) {
        Err(Error::Divergence(msg)) => {
            assert!(msg.contains("step"), "diagnostics name the step: {msg}")
        }
        other => panic!("expected divergence, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn training_rejects_single_sample_identity_batches() {
    let mut cfg = tiny_config("ppp");
    cfg.batch.samples_per_identity = 1;
    let bundle = load_data(&cfg.data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    match train(&cfg, &bundle, &dir.path().join("x.ckpt"), None) {
        Err(Error::Config(_)) => {}
        other => panic!("expected configuration error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn checkpoint_roundtrip_and_vanilla_utilization_is_exactly_one() {
    let cfg = tiny_config("vanilla");
    let bundle = load_data(&cfg.data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt_path = dir.path().join("v.ckpt");
    let outcome = train(&cfg, &bundle, &ckpt_path, None).unwrap();
    assert_eq!(outcome.checkpoint_path, ckpt_path);
    assert!(outcome.epoch_gate_rates.is_empty(), "vanilla has no gates");
    let (ckpt, model) = load_checkpoint(&ckpt_path).unwrap();
    assert_eq!(ckpt.mode, RunMode::Vanilla);
    assert_eq!(ckpt.config, cfg);
    let report = evaluate(&ckpt, &model, &bundle, EvalMode::Vanilla).unwrap();
    assert_eq!(report.records.len(), 1);
    assert_eq!(report.records[0].util_propagated, 1.0);
    assert_eq!(report.records[0].util_output_only, 1.0);
    assert!(report.records[0].mean_dispersion.is_none());
    // report persists and reloads identically
    let rp = dir.path().join("r.json");
    report.save(&rp).unwrap();
    let back = ppp::harness::EvalReport::load(&rp).unwrap();
    assert_eq!(report, back);
}

#[test]
fn evaluation_is_deterministic_across_calls() {
    let vcfg = tiny_config("vanilla");
    let bundle = load_data(&vcfg.data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let vc = dir.path().join("v.ckpt");
    train(&vcfg, &bundle, &vc, None).unwrap();
    let mut pcfg = tiny_config("ppp");
    pcfg.init_from = Some(vc.to_str().unwrap().into());
    let pc = dir.path().join("p.ckpt");
    train(&pcfg, &bundle, &pc, None).unwrap();
    let (ckpt, model) = load_checkpoint(&pc).unwrap();
    let a = evaluate(&ckpt, &model, &bundle, EvalMode::Prototype).unwrap();
    let b = evaluate(&ckpt, &model, &bundle, EvalMode::Prototype).unwrap();
    assert_eq!(a.to_json(), b.to_json(), "byte-identical machine reports");
    let s = evaluate(&ckpt, &model, &bundle, EvalMode::Single).unwrap();
    assert_eq!(s.records[0].inference, "single");
    assert!(s.records[0].mean_dispersion.is_some());
}

#[test]
fn archive_bundles_keep_the_archive_test_division() {
    let dir = tempfile::tempdir().unwrap();
    // minimal fake CIFAR-10 layout
    for fi in 1..=5 {
        let mut bytes = Vec::new();
        for r in 0..20 {
            bytes.push((r % 10) as u8);
            bytes.extend(std::iter::repeat(((r * fi) % 255) as u8).take(3072));
        }
        std::fs::write(dir.path().join(format!("data_batch_{fi}.bin")), &bytes).unwrap();
    }
    let mut bytes = Vec::new();
    for r in 0..10 {
        bytes.push((r % 10) as u8);
        bytes.extend(std::iter::repeat(9u8).take(3072));
    }
    std::fs::write(dir.path().join("test_batch.bin"), &bytes).unwrap();
    let settings = DataSettings {
        kind: "cifar10".into(),
        path: Some(dir.path().to_str().unwrap().into()),
        ..Default::default()
    };
    let bundle = load_data(&settings).unwrap();
    assert_eq!(bundle.train_idx.len(), 100);
    assert_eq!(bundle.heldout_idx.len(), 10);
    assert_eq!(bundle.dataset.num_classes, 10);
}
