//! Fast runtime property suite backing the `selftest` subcommand.
//!
//! Each check re-verifies a core contract with an independent computation
//! (hand values, scalar re-implementations, Monte-Carlo draws). The unit and
//! acceptance test suites cover the same ground more exhaustively; this is
//! the in-binary smoke version.

use ndarray::{Array2, Array4};
use rand::Rng;

use crate::gating::{apply_gate, straight_through_grad_check, GateModule};
use crate::losses::{prototype_loss, target_loss, BatchGateRecord, LayerRecord};
use crate::model::{GatedModel, ModelSpec};
use crate::prototypes::{binarize, prototype_mean};
use crate::pruning::{build_plan, prune, Provenance, CERT_TOLERANCE};
use crate::rng::{normal, seeded, uniform};

type Check = (&'static str, fn() -> Result<(), String>);

fn record(zs: Vec<(usize, Vec<Vec<f64>>)>, identities: Vec<u32>) -> BatchGateRecord<f64> {
    let layers = zs
        .into_iter()
        .map(|(layer_id, rows)| {
            let m = rows[0].len();
            let b = rows.len();
            let mut z = Array2::<f64>::zeros((b, m));
            for (i, r) in rows.iter().enumerate() {
                for (c, &v) in r.iter().enumerate() {
                    z[[i, c]] = v;
                }
            }
            LayerRecord { layer_id, z }
        })
        .collect();
    BatchGateRecord { layers, identities }
}

fn check_loss_hand_values() -> Result<(), String> {
    let rec = record(vec![(0, vec![vec![1.0, 1.0], vec![0.0, 0.0]])], vec![1, 1]);
    let v = prototype_loss(&rec, 0.7).map_err(|e| e.to_string())?;
    if v != 1.0 {
        return Err(format!("prototype loss hand value: got {v}, want 1.0"));
    }
    let on = record(vec![(0, vec![vec![1.0; 5]])], vec![1]);
    let t = target_loss(&on, 0.6);
    if (t - 0.16).abs() > 1e-12 {
        return Err(format!("target loss all-on: got {t}, want 0.16"));
    }
    let off = record(vec![(0, vec![vec![0.0; 5]])], vec![1]);
    let t = target_loss(&off, 0.6);
    if (t - 0.36).abs() > 1e-12 {
        return Err(format!("target loss all-off: got {t}, want 0.36"));
    }
    let sixty = record(vec![(0, vec![vec![1.0, 1.0, 1.0, 0.0, 0.0]; 2])], vec![1, 2]);
    let t = target_loss(&sixty, 0.6);
    if t != 0.0 {
        return Err(format!("target loss at exact rate: got {t}, want 0"));
    }
    Ok(())
}

/// Independent scalar loop over layers, identities, samples.
fn check_loss_against_scalar_loops() -> Result<(), String> {
    for seed in 0..25u64 {
        let mut rng = seeded(seed ^ 0x10c4);
        let b = rng.gen_range(2..8usize);
        let ids: Vec<u32> = (0..b).map(|_| rng.gen_range(1..4u32)).collect();
        let n_layers = rng.gen_range(1..4usize);
        let zs: Vec<(usize, Vec<Vec<f64>>)> = (0..n_layers)
            .map(|l| {
                let m = rng.gen_range(1..6usize);
                (
                    l,
                    (0..b)
                        .map(|_| {
                            (0..m)
                                .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
                                .collect()
                        })
                        .collect(),
                )
            })
            .collect();
        let rec = record(zs.clone(), ids.clone());
        let got = prototype_loss(&rec, 0.7).map_err(|e| e.to_string())?;
        // scalar re-computation
        let mut want = 0.0f64;
        for (_, rows) in &zs {
            let m = rows[0].len();
            let mut layer = 0.0;
            let mut uniq = ids.clone();
            uniq.sort_unstable();
            uniq.dedup();
            for p in &uniq {
                let members: Vec<usize> =
                    (0..b).filter(|&i| ids[i] == *p).collect();
                for c in 0..m {
                    let mean: f64 =
                        members.iter().map(|&i| rows[i][c]).sum::<f64>() / members.len() as f64;
                    let s = if mean >= 0.7 { 1.0 } else { 0.0 };
                    for &i in &members {
                        layer += (rows[i][c] - s) * (rows[i][c] - s);
                    }
                }
            }
            want += layer / b as f64;
        }
        want /= zs.len() as f64;
        if (got - want).abs() / want.abs().max(1e-30) > 1e-10 {
            return Err(format!("seed {seed}: prototype loss {got} vs scalar {want}"));
        }
    }
    Ok(())
}

fn check_gate_monte_carlo() -> Result<(), String> {
    let mut rng = seeded(0xac);
    let mut gate =
        GateModule::<f64>::new("g", 0, 2, 3, 4, 1.0, 0.0, &mut rng).map_err(|e| e.to_string())?;
    gate.fc2.weight.value.fill(0.0);
    let diff = (0.7f64 / 0.3).ln();
    for c in 0..3 {
        gate.fc2.bias.value[2 * c] = 0.0;
        gate.fc2.bias.value[2 * c + 1] = diff;
    }
    let x = Array4::<f64>::zeros((1, 2, 2, 2));
    let mut draw_rng = seeded(0xface);
    let mut on = 0.0;
    let n = 3000;
    for _ in 0..n {
        let d = crate::gating::gate_forward(&x, &mut gate, crate::gating::GateMode::Train, &mut draw_rng)
            .map_err(|e| e.to_string())?;
        on += d.hard[[0, 0]];
    }
    let rate = on / n as f64;
    if (rate - 0.7).abs() > 0.05 {
        return Err(format!("train-mode on-rate {rate}, want 0.7 +- 0.05"));
    }
    Ok(())
}

fn check_gate_eval_contracts() -> Result<(), String> {
    let mut rng = seeded(3);
    let mut gate =
        GateModule::<f64>::new("g", 0, 2, 3, 4, 1.0, 0.0, &mut rng).map_err(|e| e.to_string())?;
    gate.fc2.weight.value.fill(0.0);
    gate.fc2.bias.value.fill(0.0);
    let x = Array4::<f64>::zeros((2, 2, 3, 3));
    let d = gate.forward_eval(&x).map_err(|e| e.to_string())?;
    for &s in d.soft.iter() {
        if s != 0.5 {
            return Err(format!("symmetric logits must give soft 0.5, got {s}"));
        }
    }
    for &h in d.hard.iter() {
        if h != 1.0 {
            return Err("tie at 0.5 must keep the channel".into());
        }
    }
    let d2 = gate.forward_eval(&x).map_err(|e| e.to_string())?;
    if d.hard != d2.hard || d.soft != d2.soft {
        return Err("eval-mode gate must be deterministic".into());
    }
    Ok(())
}

fn check_apply_gate_algebra() -> Result<(), String> {
    let mut rng = seeded(4);
    let x = Array4::<f64>::from_shape_fn((2, 3, 2, 2), |_| normal(&mut rng));
    let ones = Array2::<f64>::ones((2, 3));
    if apply_gate(&x, &ones).map_err(|e| e.to_string())? != x {
        return Err("all-ones mask must be the identity".into());
    }
    let zeros = Array2::<f64>::zeros((2, 3));
    if !apply_gate(&x, &zeros)
        .map_err(|e| e.to_string())?
        .iter()
        .all(|&v| v == 0.0)
    {
        return Err("all-zeros mask must annihilate".into());
    }
    let mut sel = Array2::<f64>::zeros((2, 3));
    sel[[0, 1]] = 1.0;
    sel[[1, 2]] = 1.0;
    let once = apply_gate(&x, &sel).map_err(|e| e.to_string())?;
    let twice = apply_gate(&once, &sel).map_err(|e| e.to_string())?;
    if once != twice {
        return Err("hard mask application must be idempotent".into());
    }
    Ok(())
}

fn check_binarize_and_mean() -> Result<(), String> {
    let out = binarize(&[0.70, 0.69, 1.0, 0.0], 0.7).map_err(|e| e.to_string())?;
    if out != vec![1, 0, 1, 0] {
        return Err(format!("binarize boundary: got {out:?}"));
    }
    let d = crate::gating::GateDecision {
        layer_id: 0,
        hard: ndarray::arr2(&[[1.0, 0.0], [0.0, 0.0], [1.0, 1.0]]),
        soft: ndarray::arr2(&[[1.0, 0.0], [0.0, 0.0], [1.0, 1.0]]),
    };
    let m = prototype_mean(&[d]).map_err(|e| e.to_string())?;
    if (m[0] - 2.0 / 3.0).abs() > 1e-12 || (m[1] - 1.0 / 3.0).abs() > 1e-12 {
        return Err(format!("prototype mean hand value: got {m:?}"));
    }
    Ok(())
}

fn check_straight_through_gradients() -> Result<(), String> {
    let mut rng = seeded(6);
    let mut gate =
        GateModule::<f64>::new("g", 0, 3, 4, 6, 1.0, 0.3, &mut rng).map_err(|e| e.to_string())?;
    let probe = Array4::<f64>::from_shape_fn((4, 3, 5, 5), |_| normal(&mut rng));
    let err = straight_through_grad_check(&mut gate, &probe, 77).map_err(|e| e.to_string())?;
    if err > 1e-3 {
        return Err(format!("gradient check error {err} > 1e-3"));
    }
    Ok(())
}

fn check_pruning_equivalence() -> Result<(), String> {
    let spec = ModelSpec {
        input_channels: 2,
        input_hw: (8, 8),
        num_classes: 3,
        stage_widths: vec![4, 6],
        blocks_per_stage: 1,
        gated: true,
        gate_hidden: 4,
        gate_temperature: 1.0,
        gate_open_bias: 0.5,
    };
    let model = GatedModel::<f32>::new(spec, 11).map_err(|e| e.to_string())?;
    let mut rng = seeded(12);
    let layers = model
        .layers
        .iter()
        .map(|l| {
            let soft: Vec<f64> = (0..l.out_channels)
                .map(|_| uniform(&mut rng, 0.0, 1.0))
                .collect();
            let hard = binarize(&soft, 0.7).unwrap();
            crate::prototypes::PrototypeLayer {
                layer_id: l.layer_id,
                soft,
                hard,
            }
        })
        .collect();
    let proto = crate::prototypes::Prototype {
        identity: 1,
        tau: 0.7,
        sample_count: 4,
        layers,
    };
    let plan = build_plan(&model, &proto).map_err(|e| e.to_string())?;
    let pruned = prune(
        &model,
        &plan,
        Provenance {
            source_digest: "selftest".into(),
            identity: 1,
            tau: 0.7,
            target_rate: 0.6,
        },
    )
    .map_err(|e| e.to_string())?;
    if pruned.certificate.max_abs_deviation > CERT_TOLERANCE {
        return Err(format!(
            "certificate deviation {}",
            pruned.certificate.max_abs_deviation
        ));
    }
    Ok(())
}

fn check_container_roundtrip() -> Result<(), String> {
    let dir = std::env::temp_dir().join(format!("ppp-selftest-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let path = dir.join("t.ppp");
    let mut c = crate::container::Container::new("checkpoint", serde_json::json!({"k": 1}));
    c.push("w".into(), vec![3], vec![1.0, 2.5, -3.75]);
    c.write(&path).map_err(|e| e.to_string())?;
    let back = crate::container::Container::read(&path).map_err(|e| e.to_string())?;
    let ok = back.tensors.len() == 1 && back.tensors[0].2 == vec![1.0, 2.5, -3.75];
    let _ = std::fs::remove_dir_all(&dir);
    if !ok {
        return Err("container round-trip mismatch".into());
    }
    Ok(())
}

pub fn all_checks() -> Vec<Check> {
    vec![
        ("loss-hand-values", check_loss_hand_values),
        ("loss-scalar-oracle", check_loss_against_scalar_loops),
        ("gate-monte-carlo", check_gate_monte_carlo),
        ("gate-eval-contracts", check_gate_eval_contracts),
        ("apply-gate-algebra", check_apply_gate_algebra),
        ("binarize-and-mean", check_binarize_and_mean),
        ("straight-through-gradients", check_straight_through_gradients),
        ("pruning-equivalence", check_pruning_equivalence),
        ("container-roundtrip", check_container_roundtrip),
    ]
}

/// Run every check, print one line each, return the failure count.
pub fn run_all() -> usize {
    let mut failures = 0;
    for (name, f) in all_checks() {
        match f() {
            Ok(()) => println!("PASS {name}"),
            Err(msg) => {
                failures += 1;
                println!("FAIL {name}: {msg}");
            }
        }
    }
    failures
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_selfcheck_passes() {
        for (name, f) in all_checks() {
            f().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }
}
