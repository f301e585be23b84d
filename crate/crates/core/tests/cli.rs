//! End-to-end CLI pipeline tests on a miniature configuration:
//! train -> enroll -> prune -> eval -> report, plus error handling.

use std::path::Path;
use std::process::Command;

fn ppp() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ppp"))
}

const TINY_DATA: &str = r#"
[data]
kind = "synthetic"
classes = 2
identities = 2
samples_per_identity = 32
noise_level = 0.3
seed = 5
"#;

fn tiny_vanilla_toml() -> String {
    format!(
        r#"
mode = "vanilla"
seed = 11

[model]
stage_widths = [8]
blocks_per_stage = 1
gate_hidden = 4
{TINY_DATA}
[batch]
identities_per_batch = 2
samples_per_identity = 4

[optim]
epochs = 2
lr_network = 0.05
"#
    )
}

fn tiny_ppp_toml(init: &str) -> String {
    format!(
        r#"
mode = "ppp"
seed = 11
init_from = "{init}"
enroll_batch = 6

[model]
stage_widths = [8]
blocks_per_stage = 1
gate_hidden = 4
{TINY_DATA}
[batch]
identities_per_batch = 2
samples_per_identity = 4

[optim]
epochs = 2
"#
    )
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn ppp");
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    let stderr = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(
        out.status.success(),
        "command failed\nstdout:\n{stdout}\nstderr:\n{stderr}"
    );
    stdout
}

fn train_tiny(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let vcfg = dir.join("vanilla.toml");
    std::fs::write(&vcfg, tiny_vanilla_toml()).unwrap();
    let vckpt = dir.join("vanilla.ckpt");
    run_ok(ppp()
        .arg("train")
        .arg("--config")
        .arg(&vcfg)
        .arg("--out")
        .arg(&vckpt));
    let pcfg = dir.join("ppp.toml");
    std::fs::write(&pcfg, tiny_ppp_toml(vckpt.to_str().unwrap())).unwrap();
    let pckpt = dir.join("ppp.ckpt");
    run_ok(ppp()
        .arg("train")
        .arg("--config")
        .arg(&pcfg)
        .arg("--out")
        .arg(&pckpt)
        .arg("--log")
        .arg(dir.join("train.jsonl")));
    (vckpt, pckpt)
}

#[test]
fn full_pipeline_train_enroll_prune_eval_report() {
    let dir = tempfile::tempdir().unwrap();
    let (vckpt, pckpt) = train_tiny(dir.path());

    // training log is valid JSONL with a loss breakdown per step
    let log = std::fs::read_to_string(dir.path().join("train.jsonl")).unwrap();
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["task"].is_f64() && v["prototype"].is_f64() && v["target"].is_f64());
    }

    // enroll
    let proto_path = dir.path().join("id1.prototype.json");
    let out = run_ok(ppp()
        .arg("enroll")
        .arg("--checkpoint")
        .arg(&pckpt)
        .arg("--identity")
        .arg("1")
        .arg("--out")
        .arg(&proto_path));
    assert!(out.contains("identity 1"));
    let proto = ppp::prototypes::Prototype::load(&proto_path).unwrap();
    assert_eq!(proto.identity, 1);
    assert_eq!(proto.layers.len(), 2);

    // prune prints the certificate
    let pruned_path = dir.path().join("id1.pruned.ppp");
    let out = run_ok(ppp()
        .arg("prune")
        .arg("--checkpoint")
        .arg(&pckpt)
        .arg("--prototype")
        .arg(&proto_path)
        .arg("--out")
        .arg(&pruned_path));
    assert!(out.contains("certificate"), "prune must print its certificate: {out}");
    assert!(pruned_path.exists());

    // eval in all three applicable modes
    let rv = dir.path().join("vanilla.report.json");
    run_ok(ppp()
        .arg("eval")
        .arg("--checkpoint")
        .arg(&vckpt)
        .arg("--mode")
        .arg("vanilla")
        .arg("--out")
        .arg(&rv));
    let rs = dir.path().join("single.report.json");
    run_ok(ppp()
        .arg("eval")
        .arg("--checkpoint")
        .arg(&pckpt)
        .arg("--mode")
        .arg("single")
        .arg("--out")
        .arg(&rs));
    let rp = dir.path().join("proto.report.json");
    run_ok(ppp()
        .arg("eval")
        .arg("--checkpoint")
        .arg(&pckpt)
        .arg("--mode")
        .arg("prototype")
        .arg("--out")
        .arg(&rp));

    // report merges and prints the full-scale reference rows
    let merged = dir.path().join("merged.json");
    let out = run_ok(ppp()
        .arg("report")
        .arg("--inputs")
        .arg(&rv)
        .arg(&rs)
        .arg(&rp)
        .arg("--out")
        .arg(&merged));
    assert!(out.contains("NOT reproducible"));
    assert!(out.contains("94.4"), "reference accuracy rows present");
    assert!(out.contains("vanilla") && out.contains("prototype"));
    assert!(merged.exists());
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let vcfg = dir.path().join("vanilla.toml");
    std::fs::write(&vcfg, tiny_vanilla_toml()).unwrap();
    let c1 = dir.path().join("a.ckpt");
    let c2 = dir.path().join("b.ckpt");
    run_ok(ppp().arg("train").arg("--config").arg(&vcfg).arg("--out").arg(&c1));
    run_ok(ppp().arg("train").arg("--config").arg(&vcfg).arg("--out").arg(&c2));
    assert_eq!(
        std::fs::read(&c1).unwrap(),
        std::fs::read(&c2).unwrap(),
        "identical config + seed must produce bitwise-identical checkpoints"
    );
    // and byte-identical machine-readable reports
    let r1 = dir.path().join("r1.json");
    let r2 = dir.path().join("r2.json");
    run_ok(ppp().arg("eval").arg("--checkpoint").arg(&c1).arg("--mode").arg("vanilla").arg("--out").arg(&r1));
    run_ok(ppp().arg("eval").arg("--checkpoint").arg(&c1).arg("--mode").arg("vanilla").arg("--out").arg(&r2));
    assert_eq!(std::fs::read(&r1).unwrap(), std::fs::read(&r2).unwrap());
}

#[test]
fn selftest_passes() {
    let out = run_ok(ppp().arg("selftest"));
    assert!(out.contains("PASS pruning-equivalence"));
    assert!(!out.contains("FAIL"));
}

#[test]
fn usage_errors_exit_2() {
    let out = ppp().arg("train").arg("--nonsense").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = ppp().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(
        &cfg,
        "mode = \"vanilla\"\nseed = 1\ntypo_key = 3\n",
    )
    .unwrap();
    let out = ppp()
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("x.ckpt"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("configuration-error"), "stderr: {stderr}");
}

#[test]
fn artifact_root_env_var_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("artifacts");
    std::fs::create_dir_all(&root).unwrap();
    std::fs::write(root.join("vanilla.toml"), tiny_vanilla_toml()).unwrap();
    run_ok(ppp()
        .env("PPP_ARTIFACT_DIR", &root)
        .arg("train")
        .arg("--config")
        .arg("vanilla.toml")
        .arg("--out")
        .arg("v.ckpt"));
    assert!(root.join("v.ckpt").exists());
}

#[test]
fn pruning_defect_maps_to_exit_code_3() {
    // the library-level mapping;the CLI propagates Error::exit_code
    let err = ppp::Error::PruningDefect("x".into());
    assert_eq!(err.exit_code(), 3);
    assert_eq!(err.class(), "pruning-defect");
    let err = ppp::Error::Config("x".into());
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn future_version_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (vckpt, _) = {
        let vcfg = dir.path().join("vanilla.toml");
        std::fs::write(&vcfg, tiny_vanilla_toml()).unwrap();
        let vckpt = dir.path().join("vanilla.ckpt");
        run_ok(ppp().arg("train").arg("--config").arg(&vcfg).arg("--out").arg(&vckpt));
        (vckpt, ())
    };
    let mut bytes = std::fs::read(&vckpt).unwrap();
    bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
    let future = dir.path().join("future.ckpt");
    std::fs::write(&future, bytes).unwrap();
    let out = ppp()
        .arg("eval")
        .arg("--checkpoint")
        .arg(&future)
        .arg("--mode")
        .arg("vanilla")
        .arg("--out")
        .arg(dir.path().join("r.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("format-error"), "stderr: {stderr}");
    assert!(stderr.contains("version"), "stderr: {stderr}");
}
