//! Training protocol: non-repeating token stream, bias-corrected Adam with
//! zero weight decay, constant LR (no warmup), token/FLOPs ledgers and
//! deterministic evaluation on the fixed held-out split.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

use crate::checkpoint::Checkpoint;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::activation_l1;
use crate::model::{param_count, Model, ModelConfig};
use crate::param::{abc_for, width_multiplier, Scheme};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const WEIGHT_DECAY: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Token budget as a multiple of the parameter count (Chinchilla-style).
    pub tokens_per_param: f64,
    pub seed: u64,
    pub scheme: Scheme,
    /// Steps between metric records; None picks budget/50.
    pub eval_interval: Option<u64>,
    /// Held-out tokens per evaluation; None picks 64 batches worth.
    pub eval_tokens: Option<u64>,
}

impl TrainConfig {
    pub fn new(learning_rate: f64, batch_size: usize, scheme: Scheme, seed: u64) -> Self {
        TrainConfig {
            learning_rate,
            batch_size,
            tokens_per_param: 20.0,
            seed,
            scheme,
            eval_interval: None,
            eval_tokens: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.tokens_per_param <= 0.0 {
            return Err(Error::Config("tokens_per_param must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.scheme.validate()
    }
}

/// Tokens, FLOPs and cursor accounting for one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct RunLedger {
    pub step: u64,
    pub tokens_consumed: u64,
    pub flops: u64,
    pub wall_time_s: f64,
    pub data_cursor_start: u64,
    pub data_cursor_end: u64,
}

/// One metrics record, serialized as a JSON line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub step: u64,
    pub tokens: u64,
    pub flops: u64,
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub per_layer_act_l1: BTreeMap<String, f64>,
    pub weight_l1: f64,
    pub weight_l2: f64,
    pub lr: f64,
    pub lambda_shrink: Option<f64>,
    pub scheme: String,
    pub width: usize,
}

/// Sequential non-repeating reader over the training region of a corpus.
#[derive(Debug)]
pub struct TokenStream<'a> {
    corpus: &'a Corpus,
    pub cursor: u64,
    pub block_size: usize,
    pub batch_size: usize,
    start: u64,
}

impl<'a> TokenStream<'a> {
    pub fn new(corpus: &'a Corpus, cursor: u64, batch_size: usize, block_size: usize) -> Self {
        TokenStream {
            corpus,
            cursor,
            block_size,
            batch_size,
            start: cursor,
        }
    }

    pub fn tokens_per_batch(&self) -> u64 {
        (self.batch_size * self.block_size) as u64
    }

    /// Unseen training tokens left ahead of the cursor (the +1 lookahead for
    /// targets must stay inside the training region).
    pub fn remaining(&self) -> u64 {
        (self.corpus.train_len() as u64).saturating_sub(self.cursor + 1)
    }

    /// Input/target id pair for the next batch; advances the cursor by
    /// batch_size * block_size so no offset is ever served twice.
    pub fn next_batch(&mut self) -> Result<(Vec<u32>, Vec<u32>)> {
        let need = self.tokens_per_batch();
        if self.remaining() < need {
            return Err(Error::DataExhausted {
                needed: need,
                available: self.remaining(),
            });
        }
        let lo = self.cursor as usize;
        let hi = lo + need as usize;
        let inputs: Vec<u32> = self.corpus.tokens[lo..hi].iter().map(|&t| t as u32).collect();
        let targets: Vec<u32> = self.corpus.tokens[lo + 1..hi + 1]
            .iter()
            .map(|&t| t as u32)
            .collect();
        self.cursor += need;
        Ok((inputs, targets))
    }

    /// Half-open range of offsets served so far by this stream.
    pub fn served_range(&self) -> (u64, u64) {
        (self.start, self.cursor)
    }
}

/// Per-tensor first/second moment state.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Bias-corrected Adam over named tensors with per-tensor effective LRs.
#[derive(Debug)]
pub struct Adam {
    pub step: u64,
    state: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(model: &Model) -> Self {
        let state = model
            .params()
            .map(|p| {
                (
                    p.name.clone(),
                    AdamState {
                        m: vec![0.0; p.len()],
                        v: vec![0.0; p.len()],
                    },
                )
            })
            .collect();
        Adam { step: 0, state }
    }

    /// One update over every tensor. `lr_for` maps a tensor name to its
    /// effective learning rate (base LR times the parameterization's C).
    pub fn step<F: Fn(&str) -> f64>(
        &mut self,
        model: &mut Model,
        grads: &BTreeMap<String, Vec<f32>>,
        lr_for: F,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step;
        let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
        for p in model.params_mut() {
            let g = grads
                .get(&p.name)
                .ok_or_else(|| Error::Config(format!("missing gradient for {}", p.name)))?;
            if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("gradient of {} ({bad})", p.name),
                    step: t,
                });
            }
            let lr = lr_for(&p.name);
            let st = self.state.get_mut(&p.name).expect("state init");
            for i in 0..p.data.len() {
                let gi = g[i] as f64;
                let m = ADAM_BETA1 * st.m[i] as f64 + (1.0 - ADAM_BETA1) * gi;
                let v = ADAM_BETA2 * st.v[i] as f64 + (1.0 - ADAM_BETA2) * gi * gi;
                st.m[i] = m as f32;
                st.v[i] = v as f32;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                // weight decay is exactly 0: a zero-gradient step from fresh
                // state must be an exact no-op
                let update = lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                p.data[i] = (p.data[i] as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

/// Whole-token budget for a config: floor(ratio * param_count).
pub fn token_budget(cfg: &ModelConfig, ratio: f64) -> u64 {
    (ratio * param_count(cfg) as f64).floor() as u64
}

/// Training FLOPs estimate, 6 * N * D.
pub fn flops(params: u64, tokens: u64) -> u64 {
    6 * params * tokens
}

/// Per-tensor effective LR map for a model under its scheme.
pub fn lr_scales(model: &Model) -> BTreeMap<String, f64> {
    let m = width_multiplier(&model.cfg, &model.scheme).expect("validated");
    model
        .params()
        .map(|p| {
            let c = abc_for(&p.role, &model.scheme, m).expect("validated").c_lr;
            (p.name.clone(), c)
        })
        .collect()
}

/// Mean cross-entropy over a fixed prefix of the held-out split.
pub fn evaluate(model: &Model, corpus: &Corpus, eval_tokens: u64) -> Result<f64> {
    Ok(eval_with_acts(model, corpus, eval_tokens, false)?.0)
}

/// Evaluation loss plus, optionally, per-layer mean-abs activations measured
/// on the first held-out batch.
pub fn eval_with_acts(
    model: &Model,
    corpus: &Corpus,
    eval_tokens: u64,
    want_acts: bool,
) -> Result<(f64, BTreeMap<String, f64>)> {
    let block = model.cfg.block_size;
    let batch = ((eval_tokens as usize / block).max(1)).min(64);
    let per_batch = batch * block;
    let n_batches = ((eval_tokens as usize).max(per_batch) / per_batch).max(1);
    let avail = corpus.eval_len().saturating_sub(1);
    if avail < per_batch {
        return Err(Error::DataExhausted {
            needed: per_batch as u64,
            available: avail as u64,
        });
    }
    let n_batches = n_batches.min(avail / per_batch);
    let mut total = 0.0;
    let mut acts = BTreeMap::new();
    for b in 0..n_batches {
        let lo = corpus.split_start + b * per_batch;
        let inputs: Vec<u32> = corpus.tokens[lo..lo + per_batch]
            .iter()
            .map(|&t| t as u32)
            .collect();
        let targets: Vec<u32> = corpus.tokens[lo + 1..lo + per_batch + 1]
            .iter()
            .map(|&t| t as u32)
            .collect();
        let mut g: Graph<f32> = Graph::new();
        let fwd = model.forward(&mut g, &inputs, batch, block, false)?;
        let loss = g.softmax_cross_entropy(fwd.logits, &targets)?;
        total += g.scalar_value(loss);
        if b == 0 && want_acts {
            acts = activation_l1(&g, &fwd.taps);
        }
    }
    Ok((total / n_batches as f64, acts))
}

/// Outcome of a training run. On divergence the checkpoint holds the last
/// finite parameter state and `diverged_at` records the failing step.
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRecord>,
    pub final_val_loss: Option<f64>,
    pub diverged_at: Option<u64>,
}

/// Identity tags copied into every metrics record of a run.
#[derive(Debug, Clone)]
pub struct RunTags {
    pub run_id: String,
    pub lambda_shrink: Option<f64>,
}

fn weight_means(model: &Model) -> (f64, f64) {
    let mut abs_sum = 0.0f64;
    let mut sq_sum = 0.0f64;
    let mut n = 0u64;
    for p in model.params() {
        for &w in &p.data {
            abs_sum += (w as f64).abs();
            sq_sum += (w as f64) * (w as f64);
        }
        n += p.len() as u64;
    }
    (abs_sum / n as f64, (sq_sum / n as f64).sqrt())
}

/// Run the full token budget: exactly `floor(budget / batch tokens)` batches,
/// metrics at every eval interval, deterministic given (seed, corpus).
pub fn train(
    model: &mut Model,
    corpus: &Corpus,
    start_cursor: u64,
    tc: &TrainConfig,
    tags: &RunTags,
) -> Result<TrainOutcome> {
    tc.validate()?;
    if tc.scheme != model.scheme {
        return Err(Error::Config(
            "train config scheme differs from model scheme".into(),
        ));
    }
    let t0 = Instant::now();
    let n_params = model.param_count();
    let budget = token_budget(&model.cfg, tc.tokens_per_param);
    let mut stream = TokenStream::new(corpus, start_cursor, tc.batch_size, model.cfg.block_size);
    let per_batch = stream.tokens_per_batch();
    let steps = budget / per_batch;
    if stream.remaining() < steps * per_batch {
        return Err(Error::DataExhausted {
            needed: steps * per_batch,
            available: stream.remaining(),
        });
    }
    let eval_interval = tc.eval_interval.unwrap_or_else(|| (steps / 50).max(1));
    let eval_tokens = tc
        .eval_tokens
        .unwrap_or(64 * per_batch)
        .min(corpus.eval_len() as u64);

    let scales = lr_scales(model);
    let lr_for = |name: &str| tc.learning_rate * scales[name];
    let mut adam = Adam::new(model);
    let mut metrics = Vec::new();
    let scheme_name = match model.scheme.name {
        crate::param::SchemeKind::MuP => "muP",
        crate::param::SchemeKind::Sp => "SP",
    };

    let record = |model: &Model,
                      step: u64,
                      tokens: u64,
                      train_loss: Option<f64>,
                      metrics: &mut Vec<MetricsRecord>|
     -> Result<f64> {
        let (val_loss, acts) = eval_with_acts(model, corpus, eval_tokens, true)?;
        let (w1, w2) = weight_means(model);
        metrics.push(MetricsRecord {
            run_id: tags.run_id.clone(),
            step,
            tokens,
            flops: flops(n_params, tokens),
            train_loss,
            val_loss,
            per_layer_act_l1: acts,
            weight_l1: w1,
            weight_l2: w2,
            lr: tc.learning_rate,
            lambda_shrink: tags.lambda_shrink,
            scheme: scheme_name.to_string(),
            width: model.cfg.d_model,
        });
        Ok(val_loss)
    };

    record(model, 0, 0, None, &mut metrics)?;

    let mut diverged_at = None;
    let mut last_train_loss = None;
    for step in 1..=steps {
        let (inputs, targets) = stream.next_batch()?;
        let mut g: Graph<f32> = Graph::new();
        let fwd = model.forward(&mut g, &inputs, tc.batch_size, model.cfg.block_size, true)?;
        let loss_id = g.softmax_cross_entropy(fwd.logits, &targets)?;
        let loss = g.scalar_value(loss_id);
        if !loss.is_finite() {
            diverged_at = Some(step);
            break;
        }
        last_train_loss = Some(loss);
        g.backward(loss_id);
        let mut grads = BTreeMap::new();
        for (name, id) in &fwd.param_ids {
            let grad = g
                .grad(*id)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; g.data(*id).len()]);
            grads.insert(name.clone(), grad);
        }
        drop(g);
        if let Err(e) = adam.step(model, &grads, &lr_for) {
            match e {
                Error::NonFinite { .. } => {
                    diverged_at = Some(step);
                    break;
                }
                other => return Err(other),
            }
        }
        if step % eval_interval == 0 || step == steps {
            record(model, step, step * per_batch, last_train_loss, &mut metrics)?;
        }
    }

    if diverged_at.is_some() && metrics.last().map(|m| m.step) != Some(adam.step) {
        // keep a final record at the last finite state
        record(model, adam.step, adam.step * per_batch, last_train_loss, &mut metrics)?;
    }

    let consumed = adam.step * per_batch;
    let ledger = RunLedger {
        step: adam.step,
        tokens_consumed: consumed,
        flops: flops(n_params, consumed),
        wall_time_s: t0.elapsed().as_secs_f64(),
        data_cursor_start: start_cursor,
        data_cursor_end: start_cursor + consumed,
    };
    let checkpoint = Checkpoint::from_model(model, tc, &ledger);
    let final_val_loss = metrics.last().map(|m| m.val_loss);
    Ok(TrainOutcome {
        checkpoint,
        metrics,
        final_val_loss: if diverged_at.is_some() { None } else { final_val_loss },
        diverged_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{LayerRole, ParamTensor, RoleKind};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            head_size: 8,
            vocab_size: 64,
            block_size: 16,
        }
    }

    #[test]
    fn token_budget_is_exact_multiplication() {
        // synthetic config check happens at the op level: 100_000 * 20
        let cfg = tiny_cfg();
        let n = param_count(&cfg);
        assert_eq!(token_budget(&cfg, 20.0), 20 * n);
        assert_eq!(token_budget(&cfg, 30.0), 30 * n);
    }

    #[test]
    fn flops_rule_6nd() {
        assert_eq!(flops(1_000_000, 20_000_000), 120_000_000_000_000);
        assert_eq!(flops(12345, 0), 0);
    }

    #[test]
    fn stream_serves_disjoint_offsets() {
        let corpus = Corpus::synthetic(1, 8192);
        let mut s = TokenStream::new(&corpus, 0, 2, 16);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..10 {
            let before = s.cursor;
            let _ = s.next_batch().unwrap();
            for off in before..s.cursor {
                assert!(seen.insert(off), "offset {off} served twice");
            }
        }
        assert_eq!(s.served_range(), (0, 320));
    }

    #[test]
    fn stream_exhaustion_is_an_error() {
        let corpus = Corpus::synthetic(1, 256);
        let mut s = TokenStream::new(&corpus, 0, 4, 64);
        // train_len = 250, one batch needs 256 tokens
        assert!(matches!(
            s.next_batch(),
            Err(Error::DataExhausted { .. })
        ));
    }

    fn scalar_model(theta: f32) -> (Model, BTreeMap<String, Vec<f32>>) {
        // wrap a single scalar into a Model-like shell via a real tiny model:
        // easier to test Adam directly on a hand-built parameter set
        let cfg = tiny_cfg();
        let mut model = Model::build(&cfg, &Scheme::mup(16), 0).unwrap();
        for p in model.params_mut() {
            for w in p.data.iter_mut() {
                *w = theta;
            }
        }
        let grads = model
            .params()
            .map(|p| (p.name.clone(), vec![0.0f32; p.len()]))
            .collect();
        (model, grads)
    }

    #[test]
    fn adam_first_step_closed_form() {
        let (mut model, mut grads) = scalar_model(0.0);
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v = 1.0;
            }
        }
        let mut adam = Adam::new(&model);
        adam.step(&mut model, &grads, |_| 0.1).unwrap();
        let want = -0.1 / (1.0 + 1e-8);
        for p in model.params() {
            for &w in &p.data {
                assert!((w as f64 - want).abs() < 1e-7, "got {w}, want {want}");
            }
        }
    }

    #[test]
    fn adam_zero_gradient_is_exact_noop() {
        let (mut model, grads) = scalar_model(0.37);
        let before: Vec<u32> = model
            .params()
            .flat_map(|p| p.data.iter().map(|w| w.to_bits()))
            .collect();
        let mut adam = Adam::new(&model);
        adam.step(&mut model, &grads, |_| 0.1).unwrap();
        let after: Vec<u32> = model
            .params()
            .flat_map(|p| p.data.iter().map(|w| w.to_bits()))
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn adam_nan_gradient_aborts() {
        let (mut model, mut grads) = scalar_model(0.0);
        grads.get_mut("wte").unwrap()[3] = f32::NAN;
        let mut adam = Adam::new(&model);
        assert!(matches!(
            adam.step(&mut model, &grads, |_| 0.1),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn adam_converges_on_scalar_quadratic() {
        // minimize (theta - 3)^2 through the same update rule
        let mut theta = 0.0f64;
        let mut m = 0.0f64;
        let mut v = 0.0f64;
        let lr = 0.05;
        for t in 1..=500u32 {
            let g = 2.0 * (theta - 3.0);
            m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g;
            v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m / (1.0 - ADAM_BETA1.powi(t as i32));
            let v_hat = v / (1.0 - ADAM_BETA2.powi(t as i32));
            theta -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        assert!((theta - 3.0).abs() < 0.01, "theta {theta}");
        // and the tensor implementation reproduces the same trajectory
        let (mut model, mut grads) = scalar_model(0.0);
        let mut adam = Adam::new(&model);
        for _ in 0..500 {
            let cur = model.param("wte").unwrap().data[0];
            for g in grads.values_mut() {
                for gv in g.iter_mut() {
                    *gv = 2.0 * (cur - 3.0);
                }
            }
            adam.step(&mut model, &grads, |_| 0.05).unwrap();
        }
        let got = model.param("wte").unwrap().data[0] as f64;
        assert!((got - 3.0).abs() < 0.01, "tensor path theta {got}");
    }

    #[test]
    fn vector_like_params_exist_and_are_updated_per_role_lr() {
        let cfg = ModelConfig {
            d_model: 32,
            n_heads: 4,
            ..tiny_cfg()
        };
        let model = Model::build(&cfg, &Scheme::mup(16), 0).unwrap();
        let scales = lr_scales(&model);
        assert_eq!(scales["blocks.0.attn.wq"], 0.5); // hidden: 1/m with m=2
        assert_eq!(scales["wte"], 1.0);
        assert_eq!(scales["readout"], 1.0);
        assert_eq!(scales["ln_f.gain"], 1.0);
    }

    #[test]
    fn roles_survive_param_reconstruction() {
        let p = ParamTensor {
            name: "x".into(),
            role: LayerRole::new(RoleKind::Hidden, 2, 2),
            shape: vec![2, 2],
            data: vec![0.0; 4],
        };
        assert_eq!(p.len(), 4);
    }
}
