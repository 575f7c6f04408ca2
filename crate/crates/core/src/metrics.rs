//! Training-dynamics diagnostics: per-layer activation norms across a width
//! ladder (coordinate checks), weight-norm tracking, Gaussian smoothing and
//! slope fitting.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::checkpoint::Checkpoint;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::model::{Model, ScaleLadder};
use crate::param::Scheme;
use crate::scalar::Scalar;
use crate::train::{lr_scales, Adam, TokenStream};
use crate::warmstart::{warmstart_model, WarmstartConfig};

/// Coordinate-check pass bound: |slope| of log norm vs log width that muP-like
/// dynamics must stay under. Calibrated once on a pilot run, then frozen.
pub const COORD_SLOPE_PASS_BOUND: f64 = 0.25;
/// Slope at which a layer counts as blowing up with width.
pub const COORD_SLOPE_FAIL_BOUND: f64 = 0.5;

/// Mean absolute activation per tapped layer of one forward pass.
pub fn activation_l1<S: Scalar>(g: &Graph<S>, taps: &[(String, TensorId)]) -> BTreeMap<String, f64> {
    taps.iter()
        .map(|(name, id)| {
            let data = g.data(*id);
            let sum: f64 = data.iter().map(|&v| v.to_f64().abs()).sum();
            (name.clone(), sum / data.len() as f64)
        })
        .collect()
}

/// Per-tensor (mean |w|, sqrt(mean w^2)).
pub fn weight_norms(model: &Model) -> BTreeMap<String, (f64, f64)> {
    model
        .params()
        .map(|p| {
            let n = p.len() as f64;
            let l1 = p.data.iter().map(|&w| (w as f64).abs()).sum::<f64>() / n;
            let l2 = (p.data.iter().map(|&w| (w as f64) * (w as f64)).sum::<f64>() / n).sqrt();
            (p.name.clone(), (l1, l2))
        })
        .collect()
}

/// Least-squares slope of y over x.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

/// A raw series with its Gaussian-smoothed counterpart.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothedSeries {
    pub steps: Vec<u64>,
    pub raw: Vec<f64>,
    pub sigma: f64,
    pub smoothed: Vec<f64>,
}

impl SmoothedSeries {
    pub fn new(steps: Vec<u64>, raw: Vec<f64>, sigma: f64) -> Self {
        let smoothed = gaussian_smooth(&raw, sigma);
        SmoothedSeries {
            steps,
            raw,
            sigma,
            smoothed,
        }
    }

    pub fn default_sigma(len: usize) -> f64 {
        0.02 * len as f64
    }

    pub fn last_smoothed(&self) -> Option<f64> {
        self.smoothed.last().copied()
    }
}

/// Discrete Gaussian smoothing: kernel truncated at +-3 sigma and
/// renormalized to sum 1, symmetric reflection at the boundaries. sigma = 0
/// is the identity.
pub fn gaussian_smooth(series: &[f64], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 || series.len() <= 1 {
        return series.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut total = 0.0;
    for j in -radius..=radius {
        let w = (-(j as f64) * (j as f64) / (2.0 * sigma * sigma)).exp();
        kernel.push(w);
        total += w;
    }
    for w in &mut kernel {
        *w /= total;
    }
    let n = series.len() as isize;
    let reflect = |mut i: isize| -> usize {
        // symmetric reflection including the edge sample
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - 1 - i;
            } else {
                return i as usize;
            }
        }
    };
    (0..n)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .map(|(kj, &w)| w * series[reflect(i + kj as isize - radius)])
                .sum()
        })
        .collect()
}

/// How each width of a coordinate check is initialized.
pub enum CoordInit<'a> {
    Fresh,
    Warmstart {
        ws: WarmstartConfig,
        base: &'a Checkpoint,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoordCheckConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub seeds: Vec<u64>,
    /// Stream snapshot: every width trains on identical micro-batches
    /// starting at this cursor.
    pub stream_cursor: u64,
    pub slope_pass_bound: f64,
    pub slope_fail_bound: f64,
}

impl Default for CoordCheckConfig {
    fn default() -> Self {
        CoordCheckConfig {
            steps: 4,
            batch: 8,
            learning_rate: 0.03125,
            seeds: vec![1, 2, 3],
            stream_cursor: 0,
            slope_pass_bound: COORD_SLOPE_PASS_BOUND,
            slope_fail_bound: COORD_SLOPE_FAIL_BOUND,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoordFailure {
    pub width: usize,
    pub seed: u64,
    pub step: usize,
}

/// Activation norms and fitted slopes across a width ladder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoordCheckResult {
    pub widths: Vec<usize>,
    pub steps: usize,
    pub config: CoordCheckConfig,
    /// layer -> per step (0..=steps) -> per width: mean-abs activation,
    /// averaged over seeds.
    pub norms: BTreeMap<String, Vec<Vec<f64>>>,
    /// layer -> per step: slope of log norm vs log width, averaged over the
    /// seeds where it is defined. None when no seed produced usable values.
    pub slopes: BTreeMap<String, Vec<Option<f64>>>,
    /// Non-finite activations observed at (width, seed, step).
    pub failures: Vec<CoordFailure>,
}

impl CoordCheckResult {
    /// Largest |slope| over all layers and steps 1..=steps.
    pub fn max_abs_slope(&self) -> Option<f64> {
        self.slopes
            .values()
            .flat_map(|per_step| per_step.iter().skip(1).flatten())
            .map(|s| s.abs())
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
    }

    /// Largest signed slope over all layers and steps 1..=steps. Positive
    /// means activations grow with width.
    pub fn max_slope(&self) -> Option<f64> {
        self.slopes
            .values()
            .flat_map(|per_step| per_step.iter().skip(1).flatten())
            .copied()
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
    }

    /// True when every layer/step slope stays within `bound` in absolute
    /// value and no non-finite activation was recorded.
    pub fn passes(&self, bound: f64) -> bool {
        if !self.failures.is_empty() {
            return false;
        }
        self.slopes.values().all(|per_step| {
            per_step
                .iter()
                .skip(1)
                .all(|s| s.map(|v| v.abs() <= bound).unwrap_or(false))
        })
    }

    /// Stability gate for width scaling: no layer's activations may grow
    /// with width faster than `bound` at any step, and every slope must be
    /// defined and finite.
    ///
    /// Warmstarted models legitimately show *negative* slopes early on (the
    /// fixed-size base block dilutes as width grows), so only growth counts
    /// as instability here; a symmetric bound would flag the dilution
    /// geometry rather than bad training dynamics.
    pub fn passes_growth(&self, bound: f64) -> bool {
        if !self.failures.is_empty() {
            return false;
        }
        self.slopes.values().all(|per_step| {
            per_step
                .iter()
                .skip(1)
                .all(|s| s.map(|v| v <= bound).unwrap_or(false))
        })
    }

    pub fn slope(&self, layer: &str, step: usize) -> Option<f64> {
        self.slopes.get(layer).and_then(|v| v.get(step)).copied().flatten()
    }
}

/// Short trainings across a width ladder at the muTransferred LR, recording
/// per-layer mean-abs activations on a fixed held-out probe batch after each
/// optimizer step, then fitting log-log slopes against width.
pub fn coord_check(
    ladder: &ScaleLadder,
    scheme: &Scheme,
    init: CoordInit<'_>,
    ccfg: &CoordCheckConfig,
    corpus: &Corpus,
) -> Result<CoordCheckResult> {
    ladder.validate()?;
    if ladder.configs.len() < 3 {
        return Err(Error::Config(
            "coordinate checks need at least 3 ladder rungs".into(),
        ));
    }
    let widths = ladder.widths();
    let block = ladder.configs[0].block_size;
    let probe_len = ccfg.batch * block;
    if corpus.eval_len() < probe_len + 1 {
        return Err(Error::DataExhausted {
            needed: (probe_len + 1) as u64,
            available: corpus.eval_len() as u64,
        });
    }
    let probe: Vec<u32> = corpus.tokens[corpus.split_start..corpus.split_start + probe_len]
        .iter()
        .map(|&t| t as u32)
        .collect();

    // per seed -> layer -> [step][width] norms
    let mut per_seed: Vec<BTreeMap<String, Vec<Vec<f64>>>> = Vec::new();
    let mut failures = Vec::new();
    let mut layer_names: Vec<String> = Vec::new();

    for &seed in &ccfg.seeds {
        let mut seed_norms: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
        for (wi, cfg) in ladder.configs.iter().enumerate() {
            let mut model = match &init {
                CoordInit::Fresh => Model::build(cfg, scheme, seed)?,
                CoordInit::Warmstart { ws, base } => {
                    let ws = WarmstartConfig { seed, ..*ws };
                    warmstart_model(base, cfg, scheme, &ws)?.0
                }
            };
            let mut stream = TokenStream::new(corpus, ccfg.stream_cursor, ccfg.batch, block);
            let scales = lr_scales(&model);
            let mut adam = Adam::new(&model);
            for step in 0..=ccfg.steps {
                if step > 0 {
                    let (inputs, targets) = stream.next_batch()?;
                    let mut g: Graph<f32> = Graph::new();
                    let fwd = model.forward(&mut g, &inputs, ccfg.batch, block, true)?;
                    let loss_id = g.softmax_cross_entropy(fwd.logits, &targets)?;
                    let loss = g.scalar_value(loss_id);
                    if loss.is_finite() {
                        g.backward(loss_id);
                        let mut grads = BTreeMap::new();
                        for (name, id) in &fwd.param_ids {
                            grads.insert(
                                name.clone(),
                                g.grad(*id)
                                    .map(|s| s.to_vec())
                                    .unwrap_or_else(|| vec![0.0; g.data(*id).len()]),
                            );
                        }
                        drop(g);
                        let step_res = adam.step(&mut model, &grads, |n| {
                            ccfg.learning_rate * scales[n]
                        });
                        if step_res.is_err() {
                            failures.push(CoordFailure {
                                width: cfg.d_model,
                                seed,
                                step,
                            });
                        }
                    } else {
                        failures.push(CoordFailure {
                            width: cfg.d_model,
                            seed,
                            step,
                        });
                    }
                }
                let mut g: Graph<f32> = Graph::new();
                let fwd = model.forward(&mut g, &probe, ccfg.batch, block, false)?;
                let acts = activation_l1(&g, &fwd.taps);
                for (layer, value) in acts {
                    if !value.is_finite() {
                        failures.push(CoordFailure {
                            width: cfg.d_model,
                            seed,
                            step,
                        });
                    }
                    let entry = seed_norms
                        .entry(layer)
                        .or_insert_with(|| vec![vec![f64::NAN; widths.len()]; ccfg.steps + 1]);
                    entry[step][wi] = value;
                }
            }
        }
        if layer_names.is_empty() {
            layer_names = seed_norms.keys().cloned().collect();
        }
        per_seed.push(seed_norms);
    }

    // mean norms over seeds, slopes per seed then averaged
    let log_widths: Vec<f64> = widths.iter().map(|&w| (w as f64).ln()).collect();
    let mut norms: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    let mut slopes: BTreeMap<String, Vec<Option<f64>>> = BTreeMap::new();
    for layer in &layer_names {
        let mut mean_grid = vec![vec![0.0f64; widths.len()]; ccfg.steps + 1];
        for grid in per_seed.iter().map(|s| &s[layer]) {
            for (step, row) in grid.iter().enumerate() {
                for (wi, &v) in row.iter().enumerate() {
                    mean_grid[step][wi] += v / per_seed.len() as f64;
                }
            }
        }
        let mut layer_slopes = Vec::with_capacity(ccfg.steps + 1);
        for step in 0..=ccfg.steps {
            let mut seed_slopes = Vec::new();
            for grid in per_seed.iter().map(|s| &s[layer]) {
                let row = &grid[step];
                if row.iter().all(|&v| v.is_finite() && v > 0.0) {
                    let logs: Vec<f64> = row.iter().map(|&v| v.ln()).collect();
                    seed_slopes.push(fit_slope(&log_widths, &logs));
                }
            }
            if seed_slopes.is_empty() {
                layer_slopes.push(None);
            } else {
                layer_slopes.push(Some(
                    seed_slopes.iter().sum::<f64>() / seed_slopes.len() as f64,
                ));
            }
        }
        norms.insert(layer.clone(), mean_grid);
        slopes.insert(layer.clone(), layer_slopes);
    }

    Ok(CoordCheckResult {
        widths,
        steps: ccfg.steps,
        config: ccfg.clone(),
        norms,
        slopes,
        failures,
    })
}
