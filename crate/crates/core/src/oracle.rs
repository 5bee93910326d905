//! Dense-versus-dropped error measurement at a drop layer and through the
//! rest of its block.
//!
//! At the drop layer, a query row `j` and head `h` lose
//! `delta = sum_{i dropped} a_{j,i} v_i`, so `|delta| <= m_{j,h} * V_max`
//! where `m_{j,h}` is the dropped attention mass of that row. Averaged
//! over the query window and heads, the dropped mass is exactly one minus
//! the token-level covered fraction of the importance scores, which gives
//! the aggregate check `mean |delta| <= (1 - covered) * V_max`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::importance::{raw_scores_from_probe, summed_mass, ScoreConfig};
use crate::model::{AttentionProbe, LayerWeights, Model, SublayerKind};
use crate::selection::{top_p_select, Selection};
use crate::tensor::HiddenStates;
use crate::importance::{block_means, block_sums};

pub const BOUND_SLACK: f64 = 1e-5;

/// Per-head attention error of dropping the tokens outside `keep` for the
/// query rows `rows`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropLayerError {
    pub v_max: f64,
    /// Mean over rows and heads of the dropped attention mass.
    pub mean_dropped_mass: f64,
    /// Mean over rows and heads of `|delta|` without renormalization.
    pub mean_perturbation: f64,
    pub max_perturbation: f64,
    /// Largest `|delta| - m * V_max` over rows and heads; at most zero up to rounding.
    pub max_row_excess: f64,
    /// Largest `|delta_renorm| - 2 m V_max` for attention renormalized over the kept set.
    pub max_renormalized_excess: f64,
    pub max_renormalized_perturbation: f64,
}

/// Error of removing the non-kept keys from causal softmax attention, in f64.
pub fn attention_drop_error(
    q: &HiddenStates,
    k: &HiddenStates,
    v: &HiddenStates,
    heads: usize,
    keep: &[bool],
    rows: std::ops::Range<usize>,
) -> DropLayerError {
    let d = q.cols();
    let dk = d / heads;
    let n = k.rows();
    let scale = 1.0 / (dk as f64).sqrt();
    let v_max = (0..n)
        .flat_map(|i| (0..heads).map(move |h| (i, h)))
        .map(|(i, h)| norm(&v.row(i)[h * dk..(h + 1) * dk]))
        .fold(0.0, f64::max);
    let mut acc = DropLayerError {
        v_max,
        mean_dropped_mass: 0.0,
        mean_perturbation: 0.0,
        max_perturbation: 0.0,
        max_row_excess: f64::NEG_INFINITY,
        max_renormalized_excess: f64::NEG_INFINITY,
        max_renormalized_perturbation: 0.0,
    };
    let count = (rows.len() * heads) as f64;
    let mut logits = vec![0.0f64; n];
    for j in rows {
        for h in 0..heads {
            let qh = &q.row(j)[h * dk..(h + 1) * dk];
            let mut max = f64::NEG_INFINITY;
            for (i, l) in logits.iter_mut().enumerate().take(j + 1) {
                *l = dot64(qh, &k.row(i)[h * dk..(h + 1) * dk]) * scale;
                max = max.max(*l);
            }
            let z: f64 = logits[..=j].iter().map(|l| (l - max).exp()).sum();
            let mut dense = vec![0.0f64; dk];
            let mut kept = vec![0.0f64; dk];
            let mut kept_mass = 0.0;
            for i in 0..=j {
                let a = (logits[i] - max).exp() / z;
                let vi = &v.row(i)[h * dk..(h + 1) * dk];
                for t in 0..dk {
                    dense[t] += a * vi[t] as f64;
                }
                if keep[i] {
                    kept_mass += a;
                    for t in 0..dk {
                        kept[t] += a * vi[t] as f64;
                    }
                }
            }
            let dropped = (1.0 - kept_mass).max(0.0);
            let delta = dist(&dense, &kept);
            let renorm: Vec<f64> = kept.iter().map(|x| if kept_mass > 0.0 { x / kept_mass } else { 0.0 }).collect();
            let delta_r = dist(&dense, &renorm);
            acc.mean_dropped_mass += dropped / count;
            acc.mean_perturbation += delta / count;
            acc.max_perturbation = acc.max_perturbation.max(delta);
            acc.max_row_excess = acc.max_row_excess.max(delta - dropped * v_max);
            acc.max_renormalized_perturbation = acc.max_renormalized_perturbation.max(delta_r);
            acc.max_renormalized_excess = acc.max_renormalized_excess.max(delta_r - 2.0 * dropped * v_max);
        }
    }
    acc
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn norm(a: &[f32]) -> f64 {
    a.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBoundReport {
    pub drop_layer: usize,
    pub num_tokens: usize,
    pub retained: usize,
    /// Kept fraction of token importance mass.
    pub covered_mass: f64,
    /// Kept fraction of block-score mass as reported by the selector.
    pub block_covered_mass: f64,
    pub layer: DropLayerError,
    /// `(1 - covered_mass) * V_max`.
    pub bound: f64,
    pub bound_holds: bool,
    /// Per-sublayer amplification estimates after the drop layer, up to the block end.
    pub lipschitz: Vec<f64>,
    pub lipschitz_product: f64,
    /// Largest hidden-state difference over the query window at block end.
    pub block_end_error: Option<f64>,
    /// `(1 - covered_mass) * V_max * prod L_m`, reported only.
    pub block_bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorProbeOptions {
    pub lipschitz_trials: usize,
    pub extend_through_block: bool,
    pub seed: u64,
}

impl Default for ErrorProbeOptions {
    fn default() -> Self {
        Self {
            lipschitz_trials: 64,
            extend_through_block: true,
            seed: 0,
        }
    }
}

/// Drop-layer error with the block extension and Lipschitz estimates.
pub fn measure_drop_error(model: &Model, states: &HiddenStates, score: &ScoreConfig, drop_layer: usize) -> Result<ErrorBoundReport> {
    measure_drop_error_with(model, states, score, drop_layer, &ErrorProbeOptions::default())
}

/// `states` are the inputs to `drop_layer`, at positions `0..N`.
pub fn measure_drop_error_with(
    model: &Model,
    states: &HiddenStates,
    score: &ScoreConfig,
    drop_layer: usize,
    opts: &ErrorProbeOptions,
) -> Result<ErrorBoundReport> {
    let cfg = model.config();
    if cfg.layer_kind(drop_layer) != SublayerKind::FullAttention {
        return Err(config_err(format!("drop layer {drop_layer} is not full attention")));
    }
    let LayerWeights::Attention { norm, wq, wk, wv, .. } = model.layer_weights(drop_layer) else {
        unreachable!("full attention layer");
    };
    let n = states.rows();
    let positions: Vec<usize> = (0..n).collect();
    let (queries, keys, values) = model.qkv(states, norm, wq, wk, wv, Some(&positions));
    let probe = AttentionProbe { queries, keys, values };
    let raw = raw_scores_from_probe(&probe, &positions, cfg.num_heads, score)?;
    let mass = summed_mass(&raw, 0..cfg.num_heads)?;
    let block_scores = block_means(&block_sums(&mass, score.block_size_g));
    let sel = top_p_select(&block_scores, score, n)?;
    let total: f64 = mass.iter().sum();
    let kept: f64 = mass.iter().zip(&sel.keep_mask).filter(|(_, &k)| k).map(|(m, _)| m).sum();
    let covered = if total > 0.0 { (kept / total).min(1.0) } else { 1.0 };
    let window = n - score.effective_n(n)..n;
    let layer = attention_drop_error(&probe.queries, &probe.keys, &probe.values, cfg.num_heads, &sel.keep_mask, window);
    let bound = (1.0 - covered) * layer.v_max;
    let bound_holds = layer.mean_perturbation <= bound + BOUND_SLACK && layer.max_row_excess <= BOUND_SLACK;

    let (mut lipschitz, mut block_end_error) = (Vec::new(), None);
    if opts.extend_through_block {
        let (l, e) = through_block(model, states, drop_layer, &sel, score.effective_n(n), opts)?;
        lipschitz = l;
        block_end_error = Some(e);
    }
    let lipschitz_product: f64 = lipschitz.iter().product();
    Ok(ErrorBoundReport {
        drop_layer,
        num_tokens: n,
        retained: sel.num_retained(),
        covered_mass: covered,
        block_covered_mass: sel.covered_mass,
        bound,
        bound_holds,
        block_bound: bound * lipschitz_product,
        layer,
        lipschitz,
        lipschitz_product,
        block_end_error,
    })
}

/// Dense and compacted forwards from `drop_layer` to the end of its block.
fn through_block(
    model: &Model,
    states: &HiddenStates,
    drop_layer: usize,
    sel: &Selection,
    window: usize,
    opts: &ErrorProbeOptions,
) -> Result<(Vec<f64>, f64)> {
    let cfg = model.config();
    let per = cfg.layers_per_block();
    let end = (drop_layer / per + 1) * per;
    let n = states.rows();
    let all: Vec<usize> = (0..n).collect();

    let mut dense_cache = model.new_cache();
    let mut dense = states.clone();
    for l in drop_layer..end {
        dense = model.forward_sublayer(l, 0, &dense, &all, &mut dense_cache)?;
    }

    let mut cache = model.new_cache();
    let first = model.forward_sublayer(drop_layer, 0, states, &all, &mut cache)?;
    let mut h = first.select_rows(&sel.retained_indices);
    let pos = sel.retained_indices.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut lipschitz = Vec::new();
    for l in drop_layer + 1..end {
        lipschitz.push(estimate_lipschitz(model, l, &h, &pos, opts.lipschitz_trials, &mut rng)?);
        h = model.forward_sublayer(l, 0, &h, &pos, &mut cache)?;
    }
    let mut err = 0.0f64;
    for (r, &p) in pos.iter().enumerate() {
        if p >= n - window {
            let d: f64 = h
                .row(r)
                .iter()
                .zip(dense.row(p))
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            err = err.max(d);
        }
    }
    Ok((lipschitz, err))
}

/// Largest output/input perturbation ratio of one sublayer over random
/// unit directions scaled to a small step.
pub fn estimate_lipschitz(
    model: &Model,
    layer: usize,
    states: &HiddenStates,
    positions: &[usize],
    trials: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let run = |x: &HiddenStates| -> Result<HiddenStates> {
        let mut cache = model.new_cache();
        model.forward_sublayer(layer, 0, x, positions, &mut cache)
    };
    let base = run(states)?;
    let scale = (states.as_slice().iter().map(|x| x * x).sum::<f32>().sqrt() as f64).max(1.0);
    let eps = 1e-3 * scale;
    let mut best = 0.0f64;
    for _ in 0..trials {
        let mut u: Vec<f64> = (0..states.as_slice().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let un = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        u.iter_mut().for_each(|x| *x *= eps / un);
        let mut x = states.clone();
        for (a, d) in x.as_mut_slice().iter_mut().zip(&u) {
            *a += *d as f32;
        }
        let in_norm: f64 = x
            .as_slice()
            .iter()
            .zip(states.as_slice())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        let out = run(&x)?;
        let out_norm: f64 = out
            .as_slice()
            .iter()
            .zip(base.as_slice())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        if in_norm > 0.0 {
            best = best.max(out_norm / in_norm);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::random_states;

    fn panel(rows: usize, cols: usize, seed: u64) -> HiddenStates {
        random_states(rows, cols, seed)
    }

    #[test]
    fn keep_all_has_zero_error() {
        let (q, k, v) = (panel(20, 8, 1), panel(20, 8, 2), panel(20, 8, 3));
        let e = attention_drop_error(&q, &k, &v, 2, &[true; 20], 15..20);
        assert_eq!(e.mean_perturbation, 0.0);
        assert!(e.mean_dropped_mass.abs() < 1e-12);
    }

    #[test]
    fn uniform_attention_tenth_dropped() {
        // Zero queries attend uniformly; drop 2 of 20 keys for the last row.
        let q = HiddenStates::zeros(20, 4);
        let (k, v) = (panel(20, 4, 5), panel(20, 4, 6));
        let mut keep = [true; 20];
        keep[3] = false;
        keep[11] = false;
        let e = attention_drop_error(&q, &k, &v, 1, &keep, 19..20);
        assert!((e.mean_dropped_mass - 0.1).abs() < 1e-12);
        assert!(e.mean_perturbation <= 0.1 * e.v_max + 1e-12);
    }

    #[test]
    fn adversarial_value_among_dropped() {
        let q = HiddenStates::zeros(10, 4);
        let k = panel(10, 4, 7);
        let mut v = panel(10, 4, 8);
        v.row_mut(2).iter_mut().for_each(|x| *x *= 1000.0);
        let mut keep = [true; 10];
        keep[2] = false;
        let e = attention_drop_error(&q, &k, &v, 1, &keep, 9..10);
        assert!(e.max_perturbation > 10.0);
        assert!(e.max_row_excess <= 1e-9);
    }

    #[test]
    fn p_one_gives_zero_perturbation() {
        let model = Model::build(ModelConfig::pure_full(1, 16, 2, 4)).unwrap();
        let score = ScoreConfig {
            query_window_n: 8,
            block_size_g: 8,
            sink_count_a: 8,
            top_p: 1.0,
        };
        let r = measure_drop_error(&model, &panel(64, 16, 9), &score, 0).unwrap();
        assert_eq!(r.retained, 64);
        assert_eq!(r.layer.mean_perturbation, 0.0);
        assert_eq!(r.block_end_error, Some(0.0));
        assert!(r.bound_holds);
        assert_eq!(r.lipschitz.len(), 1);
    }

    #[test]
    fn bound_holds_when_dropping() {
        let model = Model::build(ModelConfig::pure_full(1, 16, 2, 4)).unwrap();
        let score = ScoreConfig {
            query_window_n: 8,
            block_size_g: 8,
            sink_count_a: 8,
            top_p: 0.5,
        };
        let r = measure_drop_error(&model, &panel(128, 16, 10), &score, 0).unwrap();
        assert!(r.retained < 128);
        assert!(r.bound_holds, "{r:?}");
        assert!(r.lipschitz.iter().all(|l| l.is_finite() && *l > 0.0));
    }
}
