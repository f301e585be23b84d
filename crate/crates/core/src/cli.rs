//! Command-line interface.
//!
//! Subcommands: `train`, `enroll`, `prune`, `eval`, `report`, `selftest`.
//! Relative artifact paths resolve against `PPP_ARTIFACT_DIR` when that
//! variable is set. Exit codes: 0 success, 1 named error, 2 usage,
//! 3 pruning certificate failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::container::file_digest;
use crate::error::{Error, Result};
use crate::harness::{evaluate, load_checkpoint, load_data, train, EvalMode, RunConfig};
use crate::prototypes::{enroll, Prototype};
use crate::pruning::{build_plan, prune, Provenance};
use crate::report::{aggregate, render_reference, render_table};

#[derive(Parser)]
#[command(
    name = "ppp",
    about = "Prototype-based personalized pruning for channel-gated residual networks",
    long_about = "Train a channel-gated residual classifier whose gate patterns are\n\
                  regularized toward per-identity prototypes, enroll identities from a\n\
                  small batch, prune a personal model per identity without finetuning,\n\
                  and evaluate accuracy and utilization.\n\n\
                  Relative artifact paths resolve against PPP_ARTIFACT_DIR when set."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run-config file and write a checkpoint.
    Train {
        /// Run configuration (TOML; unknown keys are rejected)
        #[arg(long)]
        config: PathBuf,
        /// Output checkpoint path
        #[arg(long)]
        out: PathBuf,
        /// Optional JSONL training log (per-step loss breakdown)
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Compute an identity's prototype from its enrollment batch.
    Enroll {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Identity to enroll (1-based)
        #[arg(long)]
        identity: u32,
        /// Output prototype file (JSON)
        #[arg(long)]
        out: PathBuf,
        /// Enrollment batch size (defaults to the checkpoint's setting)
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Prune a checkpoint with a prototype into a compact personal model.
    Prune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Prototype file produced by `enroll`
        #[arg(long)]
        prototype: PathBuf,
        /// Output pruned-model file
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and write a machine-readable report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// single | prototype | vanilla
        #[arg(long)]
        mode: String,
        /// Output report path (JSON)
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge evaluation reports into one comparison table, with the
    /// published full-scale reference rows for orientation.
    Report {
        /// Report files produced by `eval`
        #[arg(long, num_args = 1..)]
        inputs: Vec<PathBuf>,
        /// Optional merged JSON output
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in property suite.
    Selftest,
}

fn artifact_path(p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match std::env::var_os("PPP_ARTIFACT_DIR") {
        Some(root) => PathBuf::from(root).join(p),
        None => p.to_path_buf(),
    }
}

fn cmd_train(config: &Path, out: &Path, log: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(&artifact_path(config))?;
    let bundle = load_data(&cfg.data)?;
    let out = artifact_path(out);
    let log = log.map(artifact_path);
    let outcome = train(&cfg, &bundle, &out, log.as_deref())?;
    println!(
        "checkpoint written to {} ({} steps, final train accuracy {:.2}%)",
        outcome.checkpoint_path.display(),
        outcome.steps,
        outcome.final_train_accuracy
    );
    if let Some(rate) = outcome.epoch_gate_rates.last() {
        println!("final epoch mean gate on-rate: {rate:.3}");
    }
    Ok(())
}

fn cmd_enroll(checkpoint: &Path, identity: u32, out: &Path, batch_size: Option<usize>) -> Result<()> {
    let (ckpt, model) = load_checkpoint(&artifact_path(checkpoint))?;
    if !model.spec.gated {
        return Err(Error::Config("enrollment needs a gated checkpoint".into()));
    }
    let bundle = load_data(&ckpt.config.data)?;
    let by_id = bundle.dataset.by_identity(&bundle.heldout_idx);
    let idxs = by_id.get(&identity).ok_or_else(|| {
        Error::Config(format!("identity {identity} has no held-out examples"))
    })?;
    let n = batch_size.unwrap_or(ckpt.config.enroll_batch).min(idxs.len());
    let (x, _, ids) = bundle.dataset.gather::<f32>(&idxs[..n]);
    let proto = enroll(&model, &x, &ids, ckpt.config.loss.tau)?;
    let out = artifact_path(out);
    proto.save(&out)?;
    let kept: usize = proto.layers.iter().map(|l| l.hard.iter().map(|&h| h as usize).sum::<usize>()).sum();
    let total: usize = proto.layers.iter().map(|l| l.hard.len()).sum();
    println!(
        "prototype for identity {identity} written to {} ({n} enrollment samples, {kept}/{total} channels kept)",
        out.display()
    );
    Ok(())
}

fn cmd_prune(checkpoint: &Path, prototype: &Path, out: &Path) -> Result<()> {
    let ckpt_path = artifact_path(checkpoint);
    let (ckpt, model) = load_checkpoint(&ckpt_path)?;
    let proto = Prototype::load(&artifact_path(prototype))?;
    let plan = build_plan(&model, &proto)?;
    let pruned = prune(
        &model,
        &plan,
        Provenance {
            source_digest: file_digest(&ckpt_path)?,
            identity: proto.identity,
            tau: proto.tau,
            target_rate: ckpt.config.loss.target_rate,
        },
    )?;
    let out = artifact_path(out);
    pruned.save(&out)?;
    let util = crate::pruning::utilization(&plan);
    println!(
        "pruned model written to {} (utilization {:.1}% propagated / {:.1}% output-only)",
        out.display(),
        100.0 * util.propagated,
        100.0 * util.output_only
    );
    println!(
        "certificate: max abs logit deviation {:e} over {} probes (tolerance {:e})",
        pruned.certificate.max_abs_deviation,
        pruned.certificate.probe_count,
        pruned.certificate.tolerance
    );
    Ok(())
}

fn cmd_eval(checkpoint: &Path, mode: &str, out: &Path) -> Result<()> {
    let (ckpt, model) = load_checkpoint(&artifact_path(checkpoint))?;
    let mode = match mode {
        "single" => EvalMode::Single,
        "prototype" => EvalMode::Prototype,
        "vanilla" => EvalMode::Vanilla,
        other => {
            return Err(Error::Config(format!(
                "unknown eval mode {other} (use single, prototype, or vanilla)"
            )))
        }
    };
    let bundle = load_data(&ckpt.config.data)?;
    let report = evaluate(&ckpt, &model, &bundle, mode)?;
    let out = artifact_path(out);
    report.save(&out)?;
    print!("{}", render_table(&report.records));
    println!("machine-readable report written to {}", out.display());
    Ok(())
}

fn cmd_report(inputs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::Config("report needs at least one input".into()));
    }
    let resolved: Vec<PathBuf> = inputs.iter().map(|p| artifact_path(p)).collect();
    let refs: Vec<&Path> = resolved.iter().map(|p| p.as_path()).collect();
    let merged = aggregate(&refs)?;
    print!("{}", render_table(&merged.records));
    println!();
    print!("{}", render_reference());
    if let Some(o) = out {
        let o = artifact_path(o);
        std::fs::write(
            &o,
            serde_json::to_string_pretty(&merged).expect("merged report serializes"),
        )?;
        println!("merged report written to {}", o.display());
    }
    Ok(())
}

/// Entry point used by both `main` and the CLI integration tests.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap prints its own message; usage errors exit 2
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result: Result<()> = match &cli.command {
        Command::Train { config, out, log } => cmd_train(config, out, log.as_deref()),
        Command::Enroll {
            checkpoint,
            identity,
            out,
            batch_size,
        } => cmd_enroll(checkpoint, *identity, out, *batch_size),
        Command::Prune {
            checkpoint,
            prototype,
            out,
        } => cmd_prune(checkpoint, prototype, out),
        Command::Eval {
            checkpoint,
            mode,
            out,
        } => cmd_eval(checkpoint, mode, out),
        Command::Report { inputs, out } => cmd_report(inputs, out.as_deref()),
        Command::Selftest => {
            let failures = crate::selfcheck::run_all();
            if failures == 0 {
                println!("selftest: all checks passed");
                return 0;
            }
            eprintln!("selftest: {failures} check(s) failed");
            return 1;
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}: {e}", e.class());
            e.exit_code()
        }
    }
}
