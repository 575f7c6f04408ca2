//! Decoder-only GPT with pre-norm blocks, gelu MLP and an untied readout.
//!
//! The forward pass is parameterization-aware: stored weights stay raw and
//! the scheme's forward multipliers are applied at use time, so warmstarting
//! operates on raw weights across widths.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{AttnDims, Graph, TensorId};
use crate::param::{
    abc_for, attn_logit_scale, init_params, width_multiplier, LayerRole, ParamTensor, RoleKind,
    Scheme,
};
use crate::scalar::Scalar;

pub const LN_EPS: f64 = 1e-5;
const MLP_MULT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_size: usize,
    pub vocab_size: usize,
    pub block_size: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.head_size == 0 {
            return Err(Error::Config("all model extents must be positive".into()));
        }
        if self.d_model != self.n_heads * self.head_size {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} x head_size {}",
                self.d_model, self.n_heads, self.head_size
            )));
        }
        if self.block_size < 1 {
            return Err(Error::Config("block_size must be >= 1".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be >= 2".into()));
        }
        Ok(())
    }
}

/// Width ladder: configs identical except for n_heads (hence d_model).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaleLadder {
    pub configs: Vec<ModelConfig>,
}

impl ScaleLadder {
    /// Ladder over `widths` sharing everything but the head count.
    pub fn from_widths(shared: &ModelConfig, widths: &[usize]) -> Result<Self> {
        let mut configs = Vec::with_capacity(widths.len());
        for &w in widths {
            if w % shared.head_size != 0 {
                return Err(Error::Config(format!(
                    "width {w} not divisible by head_size {}",
                    shared.head_size
                )));
            }
            let cfg = ModelConfig {
                d_model: w,
                n_heads: w / shared.head_size,
                ..*shared
            };
            cfg.validate()?;
            configs.push(cfg);
        }
        let ladder = ScaleLadder { configs };
        ladder.validate()?;
        Ok(ladder)
    }

    pub fn validate(&self) -> Result<()> {
        if self.configs.is_empty() {
            return Err(Error::Config("ladder has no rungs".into()));
        }
        let first = &self.configs[0];
        for pair in self.configs.windows(2) {
            if pair[1].d_model <= pair[0].d_model {
                return Err(Error::Config("ladder widths must strictly increase".into()));
            }
        }
        for cfg in &self.configs {
            cfg.validate()?;
            if cfg.n_layers != first.n_layers
                || cfg.head_size != first.head_size
                || cfg.vocab_size != first.vocab_size
                || cfg.block_size != first.block_size
            {
                return Err(Error::Config(
                    "ladder rungs may differ only in n_heads / d_model".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn widths(&self) -> Vec<usize> {
        self.configs.iter().map(|c| c.d_model).collect()
    }
}

/// Name, shape and role of every trainable tensor of a config.
#[derive(Debug, Clone)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: LayerRole,
}

pub fn tensor_specs(cfg: &ModelConfig) -> Vec<TensorSpec> {
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    let h = d * MLP_MULT;
    let mut specs = vec![
        TensorSpec {
            name: "wte".into(),
            shape: vec![v, d],
            role: LayerRole::new(RoleKind::InputLike, v, d),
        },
        TensorSpec {
            name: "wpe".into(),
            shape: vec![cfg.block_size, d],
            role: LayerRole::new(RoleKind::InputLike, cfg.block_size, d),
        },
    ];
    for l in 0..cfg.n_layers {
        let p = format!("blocks.{l}");
        for (suffix, shape, role) in [
            ("ln1.gain", vec![d], LayerRole::new(RoleKind::VectorLike, d, d)),
            ("ln1.bias", vec![d], LayerRole::new(RoleKind::VectorLike, d, d)),
            ("attn.wq", vec![d, d], LayerRole::new(RoleKind::Hidden, d, d)),
            ("attn.wk", vec![d, d], LayerRole::new(RoleKind::Hidden, d, d)),
            ("attn.wv", vec![d, d], LayerRole::new(RoleKind::Hidden, d, d)),
            ("attn.wo", vec![d, d], LayerRole::new(RoleKind::Hidden, d, d)),
            ("ln2.gain", vec![d], LayerRole::new(RoleKind::VectorLike, d, d)),
            ("ln2.bias", vec![d], LayerRole::new(RoleKind::VectorLike, d, d)),
            ("mlp.fc1", vec![d, h], LayerRole::new(RoleKind::Hidden, d, h)),
            ("mlp.fc2", vec![h, d], LayerRole::new(RoleKind::Hidden, h, d)),
        ] {
            specs.push(TensorSpec {
                name: format!("{p}.{suffix}"),
                shape,
                role,
            });
        }
    }
    specs.push(TensorSpec {
        name: "ln_f.gain".into(),
        shape: vec![d],
        role: LayerRole::new(RoleKind::VectorLike, d, d),
    });
    specs.push(TensorSpec {
        name: "ln_f.bias".into(),
        shape: vec![d],
        role: LayerRole::new(RoleKind::VectorLike, d, d),
    });
    specs.push(TensorSpec {
        name: "readout".into(),
        shape: vec![d, v],
        role: LayerRole::new(RoleKind::OutputLike, d, v),
    });
    specs
}

/// Exact trainable-parameter count.
pub fn param_count(cfg: &ModelConfig) -> u64 {
    tensor_specs(cfg)
        .iter()
        .map(|s| s.shape.iter().product::<usize>() as u64)
        .sum()
}

/// A bound forward pass: logits, per-layer activation taps and the graph ids
/// of every leased parameter (for gradient extraction).
pub struct ForwardPass {
    pub logits: TensorId,
    pub taps: Vec<(String, TensorId)>,
    pub param_ids: BTreeMap<String, TensorId>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub scheme: Scheme,
    params: BTreeMap<String, ParamTensor>,
}

impl Model {
    /// Build with fresh parameters from `scheme` under `seed`.
    pub fn build(cfg: &ModelConfig, scheme: &Scheme, seed: u64) -> Result<Model> {
        let params = init_params(cfg, scheme, seed)?;
        Model::from_params(cfg, scheme, params)
    }

    /// Assemble from externally produced tensors (init or warmstart), checking
    /// that the role map is complete and shapes match the config.
    pub fn from_params(cfg: &ModelConfig, scheme: &Scheme, params: Vec<ParamTensor>) -> Result<Model> {
        cfg.validate()?;
        scheme.validate()?;
        let specs = tensor_specs(cfg);
        if specs.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        let mut map = BTreeMap::new();
        for p in params {
            map.insert(p.name.clone(), p);
        }
        for spec in &specs {
            let p = map
                .get(&spec.name)
                .ok_or_else(|| Error::Config(format!("missing tensor {}", spec.name)))?;
            if p.shape != spec.shape {
                return Err(Error::Config(format!(
                    "tensor {} has shape {:?}, want {:?}",
                    spec.name, p.shape, spec.shape
                )));
            }
            if p.role != spec.role {
                return Err(Error::Config(format!("tensor {} role mismatch", spec.name)));
            }
        }
        Ok(Model {
            cfg: *cfg,
            scheme: *scheme,
            params: map,
        })
    }

    pub fn width_multiplier(&self) -> f64 {
        width_multiplier(&self.cfg, &self.scheme).expect("validated")
    }

    /// Attention-logit scale actually applied in forward.
    pub fn attn_scale(&self) -> f64 {
        attn_logit_scale(&self.scheme, self.cfg.head_size)
    }

    /// Forward multiplier applied to the readout logits.
    pub fn output_mult(&self) -> f64 {
        let role = LayerRole::new(RoleKind::OutputLike, self.cfg.d_model, self.cfg.vocab_size);
        abc_for(&role, &self.scheme, self.width_multiplier())
            .expect("validated")
            .a_mult
    }

    pub fn param_count(&self) -> u64 {
        self.params.values().map(|p| p.len() as u64).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &ParamTensor> {
        self.params.values()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.params.values_mut()
    }

    pub fn param(&self, name: &str) -> Option<&ParamTensor> {
        self.params.get(name)
    }

    pub fn take_params(self) -> Vec<ParamTensor> {
        self.params.into_values().collect()
    }

    fn lease<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        requires_grad: bool,
    ) -> Result<BTreeMap<String, TensorId>> {
        let mut ids = BTreeMap::new();
        for p in self.params.values() {
            let data: Vec<S> = p.data.iter().map(|&x| S::from_f64(x as f64)).collect();
            let id = g.leaf(p.shape.clone(), data, requires_grad)?;
            ids.insert(p.name.clone(), id);
        }
        Ok(ids)
    }

    /// Run the model on `tokens` (row-major `[batch, seq]`), producing logits
    /// of shape `[batch*seq, vocab]` plus activation taps. With
    /// `requires_grad` the leased parameters accumulate gradients on
    /// `Graph::backward`.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        tokens: &[u32],
        batch: usize,
        seq: usize,
        requires_grad: bool,
    ) -> Result<ForwardPass> {
        if tokens.len() != batch * seq {
            return Err(Error::Input(format!(
                "token buffer has {} entries, want {}x{}",
                tokens.len(),
                batch,
                seq
            )));
        }
        if seq > self.cfg.block_size {
            return Err(Error::Input(format!(
                "sequence length {seq} exceeds block_size {}",
                self.cfg.block_size
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of vocab {}",
                self.cfg.vocab_size
            )));
        }
        let ids = self.lease(g, requires_grad)?;
        let at = |name: &str| ids[name];
        let mut taps = Vec::new();

        let positions: Vec<u32> = (0..batch * seq).map(|i| (i % seq) as u32).collect();
        let tok_emb = g.embedding_gather(at("wte"), tokens)?;
        let pos_emb = g.embedding_gather(at("wpe"), &positions)?;
        let mut x = g.add(tok_emb, pos_emb)?;
        taps.push(("embed".to_string(), x));

        let dims = AttnDims {
            batch,
            seq,
            heads: self.cfg.n_heads,
            head_size: self.cfg.head_size,
        };
        let attn_scale = self.attn_scale();
        for l in 0..self.cfg.n_layers {
            let p = |s: &str| at(&format!("blocks.{l}.{s}"));
            let normed = g.layer_norm(x, p("ln1.gain"), p("ln1.bias"), LN_EPS)?;
            let q = g.matmul(normed, p("attn.wq"))?;
            let k = g.matmul(normed, p("attn.wk"))?;
            let v = g.matmul(normed, p("attn.wv"))?;
            let mixed = g.causal_attention(q, k, v, dims, attn_scale)?;
            let attn_out = g.matmul(mixed, p("attn.wo"))?;
            x = g.add(x, attn_out)?;

            let normed2 = g.layer_norm(x, p("ln2.gain"), p("ln2.bias"), LN_EPS)?;
            let pre = g.matmul(normed2, p("mlp.fc1"))?;
            let act = g.gelu(pre);
            let mlp_out = g.matmul(act, p("mlp.fc2"))?;
            x = g.add(x, mlp_out)?;
            taps.push((format!("block{l}"), x));
        }

        let final_norm = g.layer_norm(x, at("ln_f.gain"), at("ln_f.bias"), LN_EPS)?;
        let raw_logits = g.matmul(final_norm, at("readout"))?;
        let logits = g.scale(raw_logits, self.output_mult());
        taps.push(("logits".to_string(), logits));

        Ok(ForwardPass {
            logits,
            taps,
            param_ids: ids,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            head_size: 8,
            vocab_size: 256,
            block_size: 128,
        }
    }

    #[test]
    fn table_one_shape_builds_and_reports_params() {
        let cfg = ModelConfig {
            n_layers: 6,
            d_model: 48,
            n_heads: 2,
            head_size: 24,
            vocab_size: 256,
            block_size: 128,
        };
        let model = Model::build(&cfg, &Scheme::mup(48), 1).unwrap();
        assert_eq!(model.param_count(), param_count(&cfg));
        // with a 50k-class tokenizer the same shape lands near the reported 5M
        let big_vocab = ModelConfig {
            vocab_size: 50_257,
            block_size: 1024,
            ..cfg
        };
        let n = param_count(&big_vocab);
        assert!(
            (4_500_000..=5_600_000).contains(&n),
            "param count {n} out of range"
        );
    }

    #[test]
    fn desk_base_builds() {
        let model = Model::build(&desk_cfg(), &Scheme::mup(32), 0).unwrap();
        assert!(model.param_count() > 0);
    }

    #[test]
    fn divisibility_violation_is_config_error() {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 50,
            n_heads: 2,
            head_size: 24,
            vocab_size: 256,
            block_size: 128,
        };
        assert!(Model::build(&cfg, &Scheme::mup(32), 0).is_err());
    }

    #[test]
    fn param_count_is_sum_of_tensor_sizes_and_grows_superlinearly() {
        let small = desk_cfg();
        let big = ModelConfig {
            d_model: 64,
            n_heads: 8,
            ..small
        };
        let n_small = param_count(&small);
        let n_big = param_count(&big);
        let by_sum: u64 = tensor_specs(&small)
            .iter()
            .map(|s| s.shape.iter().product::<usize>() as u64)
            .sum();
        assert_eq!(n_small, by_sum);
        assert!(n_big > 2 * n_small, "hidden terms are quadratic in width");
    }

    #[test]
    fn zero_readout_gives_uniform_loss() {
        let scheme = Scheme::mup(32).with_zero_readout();
        let model = Model::build(&desk_cfg(), &scheme, 5).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let tokens = vec![7u32; 4];
        let fwd = model.forward(&mut g, &tokens, 1, 4, false).unwrap();
        assert!(g.data(fwd.logits).iter().all(|&v| v == 0.0));
        let loss = g.softmax_cross_entropy(fwd.logits, &[1, 2, 3, 4]).unwrap();
        assert!((g.scalar_value(loss) - 256f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn causality_future_tokens_do_not_change_past_logits() {
        let model = Model::build(&desk_cfg(), &Scheme::mup(32), 5).unwrap();
        let mut base = vec![9u32, 17, 3, 250, 12, 9, 77, 1];
        let mut g1: Graph<f32> = Graph::new();
        let f1 = model.forward(&mut g1, &base, 1, 8, false).unwrap();
        // permute everything after position 2
        base[3..].reverse();
        let mut g2: Graph<f32> = Graph::new();
        let f2 = model.forward(&mut g2, &base, 1, 8, false).unwrap();
        let v = model.cfg.vocab_size;
        for pos in 0..3 {
            let a = &g1.data(f1.logits)[pos * v..(pos + 1) * v];
            let b = &g2.data(f2.logits)[pos * v..(pos + 1) * v];
            assert_eq!(
                a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                "logits at position {pos} changed"
            );
        }
    }

    #[test]
    fn attn_scale_follows_scheme() {
        let mup = Model::build(&desk_cfg(), &Scheme::mup(32), 0).unwrap();
        assert!((mup.attn_scale() - 1.0 / 8.0).abs() < 1e-15);
        let sp = Model::build(&desk_cfg(), &Scheme::sp(32), 0).unwrap();
        assert!((sp.attn_scale() - 1.0 / 8f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn taps_are_pure_observers() {
        let model = Model::build(&desk_cfg(), &Scheme::mup(32), 5).unwrap();
        let tokens = vec![1u32, 2, 3, 4, 5, 6, 7, 8];
        let mut g1: Graph<f32> = Graph::new();
        let f1 = model.forward(&mut g1, &tokens, 2, 4, false).unwrap();
        let mut g2: Graph<f32> = Graph::new();
        let f2 = model.forward(&mut g2, &tokens, 2, 4, false).unwrap();
        assert_eq!(f1.taps.len(), f2.taps.len());
        assert_eq!(
            g1.data(f1.logits).iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            g2.data(f2.logits).iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn overlong_sequence_and_bad_ids_error() {
        let model = Model::build(&desk_cfg(), &Scheme::mup(32), 0).unwrap();
        let mut g: Graph<f32> = Graph::new();
        let too_long = vec![0u32; 129];
        assert!(model.forward(&mut g, &too_long, 1, 129, false).is_err());
        let mut g: Graph<f32> = Graph::new();
        assert!(model.forward(&mut g, &[300u32, 0], 1, 2, false).is_err());
    }

    #[test]
    fn every_tensor_has_exactly_one_role() {
        let specs = tensor_specs(&desk_cfg());
        let model = Model::build(&desk_cfg(), &Scheme::mup(32), 0).unwrap();
        assert_eq!(specs.len(), model.params().count());
        for p in model.params() {
            // role audit: every trainable tensor carries a role consistent
            // with the spec table
            let spec = specs.iter().find(|s| s.name == p.name).unwrap();
            assert_eq!(spec.role, p.role, "{}", p.name);
        }
    }
}
