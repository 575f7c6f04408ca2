//! Warmstarting operator: theta_target = lambda * Pad0(theta_base) + N(0, sigma_muP^2).
//!
//! Base weights enter in raw (pre-multiplier) form and the target's own
//! forward multipliers apply afterwards, so the operator is purely an
//! initialization statement. Per-tensor RNG streams keyed by name make the
//! lambda = 0 limit reproduce a fresh muP initialization bit for bit.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{tensor_specs, Model, ModelConfig};
use crate::param::{abc_for, vector_default, width_multiplier, LayerRole, ParamTensor, RoleKind, Scheme};
use crate::rng::Rng;

/// Policy for VectorLike tensors, which Eq.-style padding would otherwise
/// zero out (dead-channel the new norm gains).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum VectorPolicy {
    /// New entries take their deterministic default; existing entries are
    /// shrunk toward the default: theta = default + lambda * (base - default).
    #[default]
    DefaultAnchored,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmstartConfig {
    pub lambda_shrink: f64,
    pub perturb: bool,
    #[serde(default)]
    pub vector_policy: VectorPolicy,
    pub seed: u64,
}

impl WarmstartConfig {
    pub fn new(lambda_shrink: f64, seed: u64) -> Self {
        WarmstartConfig {
            lambda_shrink,
            perturb: true,
            vector_policy: VectorPolicy::DefaultAnchored,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_shrink) {
            return Err(Error::Config(format!(
                "lambda_shrink must lie in [0, 1], got {}",
                self.lambda_shrink
            )));
        }
        Ok(())
    }
}

/// One tensor's base -> target shape mapping.
#[derive(Debug, Clone)]
pub struct PadPlanEntry {
    pub name: String,
    pub role: LayerRole,
    pub base_shape: Vec<usize>,
    pub target_shape: Vec<usize>,
}

/// Per-tensor mapping from a base config onto a wider target config.
#[derive(Debug, Clone)]
pub struct PadPlan {
    pub entries: Vec<PadPlanEntry>,
}

impl PadPlan {
    /// Base and target must share everything except width; embeddings pad the
    /// feature axis only, and the fixed head size keeps every base attention
    /// head inside one whole target head slot.
    pub fn build(base: &ModelConfig, target: &ModelConfig) -> Result<PadPlan> {
        base.validate()?;
        target.validate()?;
        if base.n_layers != target.n_layers
            || base.vocab_size != target.vocab_size
            || base.block_size != target.block_size
            || base.head_size != target.head_size
        {
            return Err(Error::Plan(format!(
                "base and target may differ only in width: {base:?} vs {target:?}"
            )));
        }
        if target.d_model < base.d_model {
            return Err(Error::Plan(format!(
                "target width {} smaller than base width {}",
                target.d_model, base.d_model
            )));
        }
        let base_specs = tensor_specs(base);
        let target_specs = tensor_specs(target);
        let mut entries = Vec::with_capacity(target_specs.len());
        for (b, t) in base_specs.iter().zip(&target_specs) {
            if b.name != t.name || b.role.kind != t.role.kind {
                return Err(Error::Plan(format!(
                    "role map mismatch between base {} and target {}",
                    b.name, t.name
                )));
            }
            if b.shape.len() != t.shape.len()
                || b.shape.iter().zip(&t.shape).any(|(bs, ts)| bs > ts)
            {
                return Err(Error::Plan(format!(
                    "tensor {}: base shape {:?} does not embed in target {:?}",
                    b.name, b.shape, t.shape
                )));
            }
            entries.push(PadPlanEntry {
                name: t.name.clone(),
                role: t.role,
                base_shape: b.shape.clone(),
                target_shape: t.shape.clone(),
            });
        }
        Ok(PadPlan { entries })
    }
}

/// Embed `w` (m x n) into the top-left block of a p x q zero matrix.
pub fn pad_zero(w: &[f32], m: usize, n: usize, p: usize, q: usize) -> Result<Vec<f32>> {
    if w.len() != m * n {
        return Err(Error::Shape(format!(
            "pad_zero: data length {} != {m}x{n}",
            w.len()
        )));
    }
    if p < m || q < n {
        return Err(Error::Shape(format!(
            "pad_zero: target {p}x{q} smaller than source {m}x{n}"
        )));
    }
    let mut out = vec![0.0f32; p * q];
    for r in 0..m {
        out[r * q..r * q + n].copy_from_slice(&w[r * n..(r + 1) * n]);
    }
    Ok(out)
}

/// Warmstart one matrix-like tensor onto `target_shape`.
///
/// `rng` must be the per-tensor stream that a fresh initialization of the
/// target tensor would use; that is what makes lambda = 0 with perturbation
/// reproduce vanilla muP exactly.
pub fn warmstart_layer(
    w_base: &[f32],
    base_shape: &[usize],
    target_shape: &[usize],
    role: &LayerRole,
    scheme: &Scheme,
    m_mult: f64,
    ws: &WarmstartConfig,
    rng: &mut Rng,
) -> Result<Vec<f32>> {
    ws.validate()?;
    let (bm, bn) = (base_shape[0], base_shape[1]);
    let (tp, tq) = (target_shape[0], target_shape[1]);
    let padded = pad_zero(w_base, bm, bn, tp, tq)?;
    if !ws.perturb {
        let lambda = ws.lambda_shrink as f32;
        return Ok(padded.iter().map(|&v| lambda * v).collect());
    }
    let sigma = abc_for(role, scheme, m_mult)?.b_std;
    let noise = rng.gaussian(tp * tq, sigma);
    if ws.lambda_shrink == 0.0 {
        // exactly the vanilla init sample for this stream
        return Ok(noise.into_iter().map(|z| z as f32).collect());
    }
    let lambda = ws.lambda_shrink as f32;
    Ok(padded
        .iter()
        .zip(noise)
        .map(|(&v, z)| lambda * v + z as f32)
        .collect())
}

/// Anchored policy for VectorLike tensors (no Gaussian perturbation).
fn warmstart_vector(
    base: &[f32],
    target_len: usize,
    name: &str,
    ws: &WarmstartConfig,
) -> Vec<f32> {
    let default = vector_default(name);
    if ws.lambda_shrink == 0.0 {
        return vec![default; target_len];
    }
    let lambda = ws.lambda_shrink as f32;
    let mut out = vec![default; target_len];
    for (o, &b) in out.iter_mut().zip(base) {
        *o = default + lambda * (b - default);
    }
    out
}

/// Warmstart a full model from a trained base checkpoint.
///
/// Optimizer state is never carried over; the returned cursor is where the
/// base run stopped consuming tokens, so a warmstarted run can keep the
/// stream sub-epoch.
pub fn warmstart_model(
    base: &Checkpoint,
    target_cfg: &ModelConfig,
    scheme: &Scheme,
    ws: &WarmstartConfig,
) -> Result<(Model, u64)> {
    ws.validate()?;
    if base.scheme != *scheme {
        return Err(Error::Plan(format!(
            "scheme mismatch: base {:?} vs target {:?}",
            base.scheme, scheme
        )));
    }
    let plan = PadPlan::build(&base.cfg, target_cfg)?;
    let m_mult = width_multiplier(target_cfg, scheme)?;
    let mut params = Vec::with_capacity(plan.entries.len());
    for entry in &plan.entries {
        let base_tensor = base
            .params
            .iter()
            .find(|p| p.name == entry.name)
            .ok_or_else(|| Error::Plan(format!("base checkpoint missing {}", entry.name)))?;
        let data = match entry.role.kind {
            RoleKind::VectorLike => warmstart_vector(
                &base_tensor.data,
                entry.target_shape[0],
                &entry.name,
                ws,
            ),
            _ => {
                let mut rng = Rng::for_name(ws.seed, &entry.name);
                warmstart_layer(
                    &base_tensor.data,
                    &entry.base_shape,
                    &entry.target_shape,
                    &entry.role,
                    scheme,
                    m_mult,
                    ws,
                    &mut rng,
                )?
            }
        };
        params.push(ParamTensor {
            name: entry.name.clone(),
            role: entry.role,
            shape: entry.target_shape.clone(),
            data,
        });
    }
    let model = Model::from_params(target_cfg, scheme, params)?;
    Ok((model, base.ledger.data_cursor_end))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_zero_hand_case() {
        let out = pad_zero(&[1.0, 2.0, 3.0, 4.0], 2, 2, 3, 3).unwrap();
        assert_eq!(out, vec![1.0, 2.0, 0.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pad_zero_identity_when_shapes_match() {
        let w = vec![0.5, -0.5, 1.5, 2.5];
        assert_eq!(pad_zero(&w, 2, 2, 2, 2).unwrap(), w);
    }

    #[test]
    fn pad_zero_rejects_shrinking() {
        assert!(pad_zero(&[0.0; 4], 2, 2, 1, 4).is_err());
    }

    #[test]
    fn shrink_only_leaves_exact_subblock() {
        let ws = WarmstartConfig {
            perturb: false,
            ..WarmstartConfig::new(0.4, 0)
        };
        let role = LayerRole::new(RoleKind::Hidden, 2, 2);
        let mut rng = Rng::for_name(0, "w");
        let out = warmstart_layer(
            &[1.0; 4],
            &[2, 2],
            &[3, 3],
            &role,
            &Scheme::mup(32),
            2.0,
            &ws,
            &mut rng,
        )
        .unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let want = if r < 2 && c < 2 { 0.4f32 } else { 0.0 };
                assert_eq!(out[r * 3 + c], want, "({r},{c})");
            }
        }
    }

    #[test]
    fn lambda_out_of_range_is_rejected() {
        assert!(WarmstartConfig::new(1.2, 0).validate().is_err());
        assert!(WarmstartConfig::new(-0.1, 0).validate().is_err());
        assert!(WarmstartConfig::new(0.0, 0).validate().is_ok());
        assert!(WarmstartConfig::new(1.0, 0).validate().is_ok());
    }

    #[test]
    fn vector_anchoring() {
        let ws = WarmstartConfig::new(0.5, 0);
        let out = warmstart_vector(&[3.0, 1.0], 4, "blocks.0.ln1.gain", &ws);
        // gain default 1: 1 + 0.5*(base - 1)
        assert_eq!(out, vec![2.0, 1.0, 1.0, 1.0]);
        let out = warmstart_vector(&[3.0], 2, "blocks.0.ln1.bias", &ws);
        assert_eq!(out, vec![1.5, 0.0]);
        // lambda = 0 restores exact defaults
        let ws0 = WarmstartConfig::new(0.0, 0);
        assert_eq!(warmstart_vector(&[9.0], 2, "ln_f.gain", &ws0), vec![1.0, 1.0]);
    }

    #[test]
    fn plan_rejects_depth_and_head_mismatch() {
        let base = ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            head_size: 8,
            vocab_size: 256,
            block_size: 64,
        };
        let deeper = ModelConfig { n_layers: 3, ..base };
        assert!(PadPlan::build(&base, &deeper).is_err());
        let fatter_heads = ModelConfig {
            head_size: 16,
            n_heads: 2,
            ..base
        };
        assert!(PadPlan::build(&base, &fatter_heads).is_err());
        let narrower = ModelConfig {
            d_model: 16,
            n_heads: 2,
            ..base
        };
        assert!(PadPlan::build(&base, &narrower).is_err());
        let wider = ModelConfig {
            d_model: 64,
            n_heads: 8,
            ..base
        };
        assert!(PadPlan::build(&base, &wider).is_ok());
    }

    #[test]
    fn head_blocks_stay_whole_under_padding() {
        let base = ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            head_size: 8,
            vocab_size: 16,
            block_size: 8,
        };
        let target = ModelConfig {
            d_model: 32,
            n_heads: 4,
            ..base
        };
        let plan = PadPlan::build(&base, &target).unwrap();
        let wq = plan
            .entries
            .iter()
            .find(|e| e.name == "blocks.0.attn.wq")
            .unwrap();
        // base head h occupies target columns [h*hs, (h+1)*hs): with a fixed
        // head size and heads appended on the right, the top-left embedding
        // maps base head h to target head h exactly.
        let hs = base.head_size;
        for h in 0..base.n_heads {
            let base_cols = (h * hs)..((h + 1) * hs);
            let target_head_of_start = base_cols.start / hs;
            let target_head_of_end = (base_cols.end - 1) / hs;
            assert_eq!(target_head_of_start, h);
            assert_eq!(target_head_of_end, h);
        }
        assert_eq!(wq.base_shape, vec![16, 16]);
        assert_eq!(wq.target_shape, vec![32, 32]);
    }
}
