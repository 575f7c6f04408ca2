//! Contracts of the warmstarting operator on whole models: the lambda = 0
//! limit reproduces vanilla muP bit for bit, shrink-only warmstarts keep
//! exact sub-blocks with exactly zero padding, and the perturbation has the
//! advertised moments.

use muwarm_core::checkpoint::Checkpoint;
use muwarm_core::model::{Model, ModelConfig};
use muwarm_core::param::{abc_for, width_multiplier, LayerRole, RoleKind, Scheme};
use muwarm_core::rng::Rng;
use muwarm_core::train::{RunLedger, TrainConfig};
use muwarm_core::warmstart::{warmstart_layer, warmstart_model, WarmstartConfig};

fn base_cfg() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 4,
        head_size: 8,
        vocab_size: 256,
        block_size: 64,
    }
}

fn target_cfg() -> ModelConfig {
    ModelConfig {
        d_model: 64,
        n_heads: 8,
        ..base_cfg()
    }
}

fn base_checkpoint(scheme: &Scheme, seed: u64) -> Checkpoint {
    let mut model = Model::build(&base_cfg(), scheme, seed).unwrap();
    // displace weights away from init so sub-block checks are non-trivial
    let mut rng = Rng::new(777, 0);
    for p in model.params_mut() {
        for w in p.data.iter_mut() {
            *w += 0.05 * rng.normal() as f32;
        }
    }
    let tc = TrainConfig::new(0.03, 4, *scheme, seed);
    let ledger = RunLedger {
        step: 10,
        tokens_consumed: 2560,
        flops: 6 * model.param_count() * 2560,
        wall_time_s: 1.0,
        data_cursor_start: 0,
        data_cursor_end: 2560,
    };
    Checkpoint::from_model(&model, &tc, &ledger)
}

fn bits(model: &Model) -> Vec<(String, Vec<u32>)> {
    model
        .params()
        .map(|p| (p.name.clone(), p.data.iter().map(|w| w.to_bits()).collect()))
        .collect()
}

#[test]
fn lambda_zero_with_perturbation_recovers_vanilla_mup_bitwise() {
    for scheme in [Scheme::mup(32), Scheme::mup(32).with_zero_readout()] {
        let base = base_checkpoint(&scheme, 5);
        let seed = 91;
        let ws = WarmstartConfig::new(0.0, seed);
        let (warm, cursor) = warmstart_model(&base, &target_cfg(), &scheme, &ws).unwrap();
        let vanilla = Model::build(&target_cfg(), &scheme, seed).unwrap();
        assert_eq!(bits(&warm), bits(&vanilla));
        assert_eq!(cursor, 2560);
    }
}

#[test]
fn shrink_only_keeps_exact_subblocks_and_zero_padding() {
    let scheme = Scheme::mup(32);
    let base = base_checkpoint(&scheme, 6);
    let lambda = 0.4f32;
    let ws = WarmstartConfig {
        perturb: false,
        ..WarmstartConfig::new(lambda as f64, 17)
    };
    let (warm, _) = warmstart_model(&base, &target_cfg(), &scheme, &ws).unwrap();
    for bp in &base.params {
        let tp = warm.param(&bp.name).unwrap();
        if bp.role.kind == RoleKind::VectorLike {
            continue;
        }
        let (bm, bn) = (bp.shape[0], bp.shape[1]);
        let (_tp_rows, tq) = (tp.shape[0], tp.shape[1]);
        for r in 0..tp.shape[0] {
            for c in 0..tq {
                let got = tp.data[r * tq + c];
                if r < bm && c < bn {
                    let want = lambda * bp.data[r * bn + c];
                    assert_eq!(got.to_bits(), want.to_bits(), "{} ({r},{c})", bp.name);
                } else {
                    assert_eq!(got, 0.0, "{} padding ({r},{c})", bp.name);
                    assert_eq!(got.to_bits(), 0.0f32.to_bits());
                }
            }
        }
    }
}

#[test]
fn vector_like_lambda_zero_restores_exact_defaults() {
    let scheme = Scheme::mup(32);
    let base = base_checkpoint(&scheme, 8);
    let ws = WarmstartConfig::new(0.0, 3);
    let (warm, _) = warmstart_model(&base, &target_cfg(), &scheme, &ws).unwrap();
    for p in warm.params() {
        if p.role.kind != RoleKind::VectorLike {
            continue;
        }
        let want = if p.name.ends_with("gain") { 1.0f32 } else { 0.0 };
        assert!(
            p.data.iter().all(|&w| w == want),
            "{} not at default",
            p.name
        );
    }
}

#[test]
fn perturbation_moments_match_shrunk_base_mean() {
    // lambda = 0.4, sigma = 0.01: over many replays the per-entry mean sits
    // within 3 sigma / sqrt(trials) of 0.4 on the sub-block and 0 on padding
    let trials = 10_000;
    let sigma = 0.01;
    let lambda = 0.4;
    let role = LayerRole::new(RoleKind::Hidden, 2, 2);
    let scheme = Scheme {
        sigma0: sigma,
        ..Scheme::mup(32)
    };
    let ws = WarmstartConfig::new(lambda, 0);
    let base = vec![1.0f32; 4];
    let mut sums = vec![0.0f64; 16];
    for trial in 0..trials {
        let mut rng = Rng::new(trial as u64, 12345);
        // m = 1 keeps b_std = sigma exactly
        let out = warmstart_layer(&base, &[2, 2], &[4, 4], &role, &scheme, 1.0, &ws, &mut rng).unwrap();
        for (s, v) in sums.iter_mut().zip(&out) {
            *s += *v as f64;
        }
    }
    let bound = 3.0 * sigma / (trials as f64).sqrt();
    for r in 0..4 {
        for c in 0..4 {
            let mean = sums[r * 4 + c] / trials as f64;
            let want = if r < 2 && c < 2 { lambda } else { 0.0 };
            assert!(
                (mean - want).abs() < bound,
                "entry ({r},{c}): mean {mean}, want {want} +- {bound}"
            );
        }
    }
}

#[test]
fn base_weights_recoverable_by_replaying_the_perturbation_stream() {
    let scheme = Scheme::mup(32);
    let base = base_checkpoint(&scheme, 11);
    let lambda = 0.4;
    let seed = 23;
    let ws = WarmstartConfig::new(lambda, seed);
    let (warm, _) = warmstart_model(&base, &target_cfg(), &scheme, &ws).unwrap();
    let m = width_multiplier(&target_cfg(), &scheme).unwrap();
    for bp in &base.params {
        if bp.role.kind == RoleKind::VectorLike {
            continue;
        }
        let tp = warm.param(&bp.name).unwrap();
        let sigma = abc_for(&bp.role, &scheme, m).unwrap().b_std;
        let mut rng = Rng::for_name(seed, &bp.name);
        let noise = rng.gaussian(tp.len(), sigma);
        let (bn, tq) = (bp.shape[1], tp.shape[1]);
        for r in 0..bp.shape[0] {
            for c in 0..bn {
                let recovered =
                    (tp.data[r * tq + c] as f64 - noise[r * tq + c] as f32 as f64) / lambda;
                let want = bp.data[r * bn + c] as f64;
                assert!(
                    (recovered - want).abs() < 1e-6,
                    "{} ({r},{c}): {recovered} vs {want}",
                    bp.name
                );
            }
        }
    }
}

#[test]
fn warmstarted_widths_compose_down_the_ladder() {
    // 32 -> 64 -> identity-width 64 -> 64 plan also works (p = m case)
    let scheme = Scheme::mup(32);
    let base = base_checkpoint(&scheme, 4);
    let ws = WarmstartConfig::new(0.4, 9);
    let (mid, cursor) = warmstart_model(&base, &target_cfg(), &scheme, &ws).unwrap();
    assert_eq!(cursor, 2560);
    let tc = TrainConfig::new(0.03, 4, scheme, 9);
    let ledger = RunLedger {
        data_cursor_start: cursor,
        data_cursor_end: cursor + 1024,
        ..Default::default()
    };
    let mid_ckpt = Checkpoint::from_model(&mid, &tc, &ledger);
    let (same_width, cursor2) = warmstart_model(&mid_ckpt, &target_cfg(), &scheme, &ws).unwrap();
    assert_eq!(cursor2, cursor + 1024);
    assert_eq!(same_width.cfg.d_model, 64);
}
