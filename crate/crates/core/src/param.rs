//! abc-parameterization: per-role weight multiplier, init std and LR scale
//! as functions of the width multiplier, for standard parameterization (SP)
//! and muP with Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng::Rng;

/// How a trainable tensor participates in width scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoleKind {
    /// Embeddings: fan-in does not grow with width.
    InputLike,
    /// Attention and MLP matrices: both fans grow with width.
    Hidden,
    /// Unembedding / readout: fan-in grows, output stays fixed.
    OutputLike,
    /// Biases and norm gains: deterministic defaults, never sampled.
    VectorLike,
}

/// A tensor's role together with its fan dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRole {
    pub kind: RoleKind,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LayerRole {
    pub fn new(kind: RoleKind, fan_in: usize, fan_out: usize) -> Self {
        LayerRole {
            kind,
            fan_in,
            fan_out,
        }
    }
}

/// The (A, B, C) triple for one role at one width multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbcScales {
    /// Forward-time weight multiplier.
    pub a_mult: f64,
    /// Initialization standard deviation.
    pub b_std: f64,
    /// Per-tensor learning-rate scale.
    pub c_lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchemeKind {
    #[serde(rename = "SP")]
    Sp,
    #[serde(rename = "muP")]
    MuP,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttnScaling {
    #[serde(rename = "one_over_sqrt_d")]
    OneOverSqrtD,
    #[serde(rename = "one_over_d")]
    OneOverD,
}

/// Parameterization scheme anchored at a base width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scheme {
    pub name: SchemeKind,
    pub base_width: usize,
    pub sigma0: f64,
    pub attn_scaling: AttnScaling,
    /// Zero-initialize the readout (OutputLike b_std = 0).
    #[serde(default)]
    pub zero_readout: bool,
}

impl Scheme {
    pub fn mup(base_width: usize) -> Self {
        Scheme {
            name: SchemeKind::MuP,
            base_width,
            sigma0: 0.02,
            attn_scaling: AttnScaling::OneOverD,
            zero_readout: false,
        }
    }

    pub fn sp(base_width: usize) -> Self {
        Scheme {
            name: SchemeKind::Sp,
            base_width,
            sigma0: 0.02,
            attn_scaling: AttnScaling::OneOverSqrtD,
            zero_readout: false,
        }
    }

    pub fn with_zero_readout(mut self) -> Self {
        self.zero_readout = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::Config("scheme base_width must be positive".into()));
        }
        if self.sigma0 < 0.0 {
            return Err(Error::Config("sigma0 must be non-negative".into()));
        }
        let ok = match self.name {
            SchemeKind::MuP => self.attn_scaling == AttnScaling::OneOverD,
            SchemeKind::Sp => self.attn_scaling == AttnScaling::OneOverSqrtD,
        };
        if !ok {
            return Err(Error::Config(format!(
                "{:?} requires {:?} attention scaling",
                self.name,
                match self.name {
                    SchemeKind::MuP => AttnScaling::OneOverD,
                    SchemeKind::Sp => AttnScaling::OneOverSqrtD,
                }
            )));
        }
        Ok(())
    }
}

/// Width multiplier m = d_model / base_width.
pub fn width_multiplier(cfg_target: &ModelConfig, scheme: &Scheme) -> Result<f64> {
    if scheme.base_width == 0 {
        return Err(Error::Config("scheme base_width must be positive".into()));
    }
    Ok(cfg_target.d_model as f64 / scheme.base_width as f64)
}

/// (A, B, C) for a role at width multiplier `m`.
///
/// muP with Adam: hidden LR scales as 1/m, the readout forward multiplier as
/// 1/m, matrix-like init std as 1/sqrt(m); vector-like tensors keep their
/// deterministic defaults. SP keeps a global LR and multiplier 1 with plain
/// fan-in initialization.
pub fn abc_for(role: &LayerRole, scheme: &Scheme, m: f64) -> Result<AbcScales> {
    if m <= 0.0 {
        return Err(Error::Config(format!("width multiplier must be positive, got {m}")));
    }
    let s0 = scheme.sigma0;
    let scales = match scheme.name {
        SchemeKind::MuP => match role.kind {
            RoleKind::InputLike => AbcScales {
                a_mult: 1.0,
                b_std: s0,
                c_lr: 1.0,
            },
            RoleKind::Hidden => AbcScales {
                a_mult: 1.0,
                b_std: s0 / m.sqrt(),
                c_lr: 1.0 / m,
            },
            RoleKind::OutputLike => AbcScales {
                a_mult: 1.0 / m,
                b_std: if scheme.zero_readout { 0.0 } else { s0 / m.sqrt() },
                c_lr: 1.0,
            },
            RoleKind::VectorLike => AbcScales {
                a_mult: 1.0,
                b_std: 0.0,
                c_lr: 1.0,
            },
        },
        SchemeKind::Sp => {
            // standard fan-in init relative to the base scale's fans
            let fan_ratio = match role.kind {
                RoleKind::InputLike => 1.0,
                RoleKind::Hidden | RoleKind::OutputLike => m,
                RoleKind::VectorLike => 1.0,
            };
            let b = match role.kind {
                RoleKind::VectorLike => 0.0,
                RoleKind::OutputLike if scheme.zero_readout => 0.0,
                _ => s0 / fan_ratio.sqrt(),
            };
            AbcScales {
                a_mult: 1.0,
                b_std: b,
                c_lr: 1.0,
            }
        }
    };
    Ok(scales)
}

/// Attention-logit scale: 1/head_size under muP, 1/sqrt(head_size) under SP.
pub fn attn_logit_scale(scheme: &Scheme, head_size: usize) -> f64 {
    match scheme.attn_scaling {
        AttnScaling::OneOverD => 1.0 / head_size as f64,
        AttnScaling::OneOverSqrtD => 1.0 / (head_size as f64).sqrt(),
    }
}

/// A named weight with its role and raw (pre-multiplier) values.
#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub role: LayerRole,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ParamTensor {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Deterministic default for a VectorLike tensor (1 for gains, 0 otherwise).
pub fn vector_default(name: &str) -> f32 {
    if name.ends_with("gain") {
        1.0
    } else {
        0.0
    }
}

/// Sample every tensor of `cfg` under `scheme`.
///
/// Matrix-like tensors draw from N(0, b_std^2) on a per-tensor RNG stream
/// keyed by name, so results do not depend on enumeration order. VectorLike
/// tensors take their deterministic defaults.
pub fn init_params(cfg: &ModelConfig, scheme: &Scheme, seed: u64) -> Result<Vec<ParamTensor>> {
    cfg.validate()?;
    scheme.validate()?;
    let m = width_multiplier(cfg, scheme)?;
    let specs = crate::model::tensor_specs(cfg);
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let count: usize = spec.shape.iter().product();
        let data = if spec.role.kind == RoleKind::VectorLike {
            vec![vector_default(&spec.name); count]
        } else {
            let scales = abc_for(&spec.role, scheme, m)?;
            let mut rng = Rng::for_name(seed, &spec.name);
            rng.gaussian(count, scales.b_std)
                .into_iter()
                .map(|x| x as f32)
                .collect()
        };
        out.push(ParamTensor {
            name: spec.name,
            role: spec.role,
            shape: spec.shape,
            data,
        });
    }
    Ok(out)
}
