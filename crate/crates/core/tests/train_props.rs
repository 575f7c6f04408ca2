//! Training-protocol properties: determinism, uniform-loss sanity at step 0,
//! ledger exactness, sub-epoch uniqueness across a warmstart chain, and
//! checkpoint persistence of real runs.

use muwarm_core::corpus::Corpus;
use muwarm_core::model::{Model, ModelConfig};
use muwarm_core::param::Scheme;
use muwarm_core::train::{evaluate, flops, token_budget, train, RunTags, TrainConfig};
use muwarm_core::warmstart::{warmstart_model, WarmstartConfig};

fn desk_cfg(width: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: width,
        n_heads: width / 8,
        head_size: 8,
        vocab_size: 256,
        block_size: 64,
    }
}

fn quick_tc(scheme: Scheme, seed: u64) -> TrainConfig {
    TrainConfig {
        tokens_per_param: 1.0,
        eval_tokens: Some(4096),
        ..TrainConfig::new(0.03, 8, scheme, seed)
    }
}

fn tags(id: &str) -> RunTags {
    RunTags {
        run_id: id.to_string(),
        lambda_shrink: None,
    }
}

#[test]
fn initial_val_loss_is_ln_vocab_with_zero_readout() {
    let corpus = Corpus::synthetic(1, 600_000);
    let scheme = Scheme::mup(32).with_zero_readout();
    let model = Model::build(&desk_cfg(32), &scheme, 3).unwrap();
    let loss = evaluate(&model, &corpus, 8192).unwrap();
    assert!(
        (loss - 256f64.ln()).abs() < 1e-3,
        "loss {loss} vs ln 256 = {}",
        256f64.ln()
    );
    // evaluating twice gives the identical value
    let again = evaluate(&model, &corpus, 8192).unwrap();
    assert_eq!(loss.to_bits(), again.to_bits());
}

#[test]
fn same_seed_runs_are_bit_identical_and_training_helps() {
    let corpus = Corpus::synthetic(2, 400_000);
    let scheme = Scheme::mup(32).with_zero_readout();
    let tc = quick_tc(scheme, 7);

    let mut m1 = Model::build(&desk_cfg(32), &scheme, 7).unwrap();
    let out1 = train(&mut m1, &corpus, 0, &tc, &tags("a")).unwrap();
    let mut m2 = Model::build(&desk_cfg(32), &scheme, 7).unwrap();
    let out2 = train(&mut m2, &corpus, 0, &tc, &tags("a")).unwrap();

    assert_eq!(out1.diverged_at, None);
    let l1: Vec<u64> = out1.metrics.iter().map(|m| m.val_loss.to_bits()).collect();
    let l2: Vec<u64> = out2.metrics.iter().map(|m| m.val_loss.to_bits()).collect();
    assert_eq!(l1, l2);

    // smoke oracle: trained model beats the untrained one on held-out data
    let first = out1.metrics.first().unwrap().val_loss;
    let last = out1.metrics.last().unwrap().val_loss;
    assert!(
        last < first - 0.2,
        "training did not help: {first} -> {last}"
    );
}

#[test]
fn ledger_flops_match_6nd_at_every_record() {
    let corpus = Corpus::synthetic(3, 400_000);
    let scheme = Scheme::mup(32);
    let tc = quick_tc(scheme, 1);
    let mut model = Model::build(&desk_cfg(32), &scheme, 1).unwrap();
    let n = model.param_count();
    let out = train(&mut model, &corpus, 0, &tc, &tags("ledger")).unwrap();
    assert!(out.metrics.len() >= 3);
    for rec in &out.metrics {
        assert_eq!(rec.flops, flops(n, rec.tokens), "step {}", rec.step);
        assert_eq!(rec.flops, 6 * n * rec.tokens);
    }
    let ledger = out.checkpoint.ledger;
    assert_eq!(ledger.flops, 6 * n * ledger.tokens_consumed);
    // budget rounds down to whole batches
    let budget = token_budget(&model.cfg, tc.tokens_per_param);
    let per_batch = (tc.batch_size * model.cfg.block_size) as u64;
    assert_eq!(ledger.tokens_consumed, (budget / per_batch) * per_batch);
}

#[test]
fn warmstart_chain_serves_disjoint_token_ranges() {
    let corpus = Corpus::synthetic(4, 2_000_000);
    let scheme = Scheme::mup(32).with_zero_readout();
    let tc_base = quick_tc(scheme, 5);
    let mut base = Model::build(&desk_cfg(32), &scheme, 5).unwrap();
    let base_out = train(&mut base, &corpus, 0, &tc_base, &tags("base")).unwrap();
    let base_ledger = base_out.checkpoint.ledger;
    assert!(base_ledger.tokens_consumed > 0);

    let ws = WarmstartConfig::new(0.4, 5);
    let (mut target, cursor) =
        warmstart_model(&base_out.checkpoint, &desk_cfg(64), &scheme, &ws).unwrap();
    assert_eq!(cursor, base_ledger.data_cursor_end);
    let tc_target = quick_tc(scheme, 5);
    let target_out = train(&mut target, &corpus, cursor, &tc_target, &tags("warm")).unwrap();
    let target_ledger = target_out.checkpoint.ledger;

    // the union of served offsets has no duplicates: ranges are disjoint
    assert_eq!(target_ledger.data_cursor_start, base_ledger.data_cursor_end);
    assert!(target_ledger.data_cursor_end > target_ledger.data_cursor_start);
    let ranges = [
        (base_ledger.data_cursor_start, base_ledger.data_cursor_end),
        (target_ledger.data_cursor_start, target_ledger.data_cursor_end),
    ];
    for (i, a) in ranges.iter().enumerate() {
        for b in ranges.iter().skip(i + 1) {
            assert!(a.1 <= b.0 || b.1 <= a.0, "ranges {a:?} and {b:?} overlap");
        }
    }
}

#[test]
fn data_exhaustion_fails_before_training_starts() {
    let corpus = Corpus::synthetic(5, 50_000);
    let scheme = Scheme::mup(32);
    // 20 tokens/param on width 32 needs ~0.9M tokens, corpus has 49k usable
    let tc = TrainConfig::new(0.03, 8, scheme, 1);
    let mut model = Model::build(&desk_cfg(32), &scheme, 1).unwrap();
    assert!(train(&mut model, &corpus, 0, &tc, &tags("x")).is_err());
}

#[test]
fn trained_checkpoint_round_trips_through_disk() {
    let corpus = Corpus::synthetic(6, 400_000);
    let scheme = Scheme::mup(32);
    let tc = quick_tc(scheme, 2);
    let mut model = Model::build(&desk_cfg(32), &scheme, 2).unwrap();
    let out = train(&mut model, &corpus, 0, &tc, &tags("ckpt")).unwrap();
    let dir = std::env::temp_dir().join("muwarm_train_props");
    let p1 = dir.join("run.ckpt");
    let p2 = dir.join("run2.ckpt");
    out.checkpoint.save(&p1).unwrap();
    let loaded = muwarm_core::checkpoint::Checkpoint::load(&p1).unwrap();
    loaded.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    // the reloaded model evaluates identically
    let reloaded = loaded.to_model().unwrap();
    let a = evaluate(&model, &corpus, 4096).unwrap();
    let b = evaluate(&reloaded, &corpus, 4096).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    std::fs::remove_file(&p1).ok();
    std::fs::remove_file(&p2).ok();
}

#[test]
fn metric_records_carry_schema_fields() {
    let corpus = Corpus::synthetic(7, 400_000);
    let scheme = Scheme::mup(32);
    let tc = quick_tc(scheme, 3);
    let mut model = Model::build(&desk_cfg(32), &scheme, 3).unwrap();
    let out = train(
        &mut model,
        &corpus,
        0,
        &tc,
        &RunTags {
            run_id: "schema".into(),
            lambda_shrink: Some(0.4),
        },
    )
    .unwrap();
    let rec = out.metrics.last().unwrap();
    let json = serde_json::to_value(rec).unwrap();
    for key in [
        "run_id",
        "step",
        "tokens",
        "flops",
        "train_loss",
        "val_loss",
        "per_layer_act_l1",
        "weight_l1",
        "weight_l2",
        "lr",
        "lambda_shrink",
        "scheme",
        "width",
    ] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    assert_eq!(json["scheme"], "muP");
    assert_eq!(json["width"], 32);
    assert_eq!(json["lambda_shrink"], 0.4);
    let acts = json["per_layer_act_l1"].as_object().unwrap();
    assert!(acts.contains_key("embed"));
    assert!(acts.contains_key("block0"));
    assert!(acts.contains_key("block1"));
    assert!(acts.contains_key("logits"));
}
