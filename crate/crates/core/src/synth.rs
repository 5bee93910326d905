//! Synthetic prompt states: random, low-entropy (attention concentrated on
//! a few planted blocks), and needle prompts.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::model::{LayerWeights, Model, SublayerKind};
use crate::rng::CounterRng;
use crate::tensor::{self, HiddenStates, ROPE_BASE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentKind {
    Random,
    LowEntropy,
    Needle,
}

const STREAM_STATES: u64 = 0x51A7;
const STREAM_PICK: u64 = 0x51A8;
const STREAM_PAYLOAD: u64 = 0x51A9;

/// Rows of i.i.d. standard normals, matching the embedding scale.
pub fn random_states(rows: usize, cols: usize, seed: u64) -> HiddenStates {
    let data = CounterRng::new(seed, STREAM_STATES).normal_vec(rows * cols, 1.0);
    HiddenStates::from_vec(rows, cols, data).expect("shape")
}

pub fn random_tokens(len: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let rng = CounterRng::new(seed, STREAM_PICK);
    (0..len as u64).map(|i| (rng.uniform(i) * vocab as f64) as u32).collect()
}

fn rope_inverse(head: &mut [f32], position: usize) {
    let d = head.len();
    for i in 0..d / 2 {
        let theta = ROPE_BASE.powf(-((2 * i) as f64) / d as f64);
        let angle = -(position as f64) * theta;
        let (s, c) = (angle.sin() as f32, angle.cos() as f32);
        let (a, b) = (head[2 * i], head[2 * i + 1]);
        head[2 * i] = a * c - b * s;
        head[2 * i + 1] = a * s + b * c;
    }
}

/// For every position `i`, the unit-RMS direction `y` whose normalized key
/// at layer 0 maximizes the summed logit against the last `window` queries
/// of `base`. The direction is centered so layer norm keeps it.
pub fn query_alignment(model: &Model, base: &HiddenStates, window: usize) -> Result<HiddenStates> {
    let c = model.config();
    if c.layer_kind(0) != SublayerKind::FullAttention {
        return Err(config_err("layer 0 must be full attention"));
    }
    let LayerWeights::Attention { norm, wq, wk, wv, .. } = model.layer_weights(0) else {
        unreachable!("full attention layer");
    };
    let n = base.rows();
    let w = window.min(n);
    let positions: Vec<usize> = (0..n).collect();
    let tail = base.slice_rows(n - w, n);
    let (q, _, _) = model.qkv(&tail, norm, wq, wk, wv, Some(&positions[n - w..]));
    let (d, dk) = (c.hidden_dim, c.head_dim);
    let mut qsum = vec![0.0f32; d];
    for r in 0..w {
        for (s, x) in qsum.iter_mut().zip(q.row(r)) {
            *s += x;
        }
    }
    let mut out = HiddenStates::zeros(n, d);
    let mut r = vec![0.0f32; d];
    for i in 0..n {
        r.copy_from_slice(&qsum);
        for h in 0..c.num_heads {
            rope_inverse(&mut r[h * dk..(h + 1) * dk], i);
        }
        let row = out.row_mut(i);
        for (a, y) in row.iter_mut().enumerate() {
            *y = tensor::dot(&wk[a * d..(a + 1) * d], &r);
        }
        let mean = row.iter().sum::<f32>() / d as f32;
        row.iter_mut().for_each(|y| *y -= mean);
        let rms = (row.iter().map(|y| y * y).sum::<f32>() / d as f32).sqrt().max(1e-12);
        row.iter_mut().for_each(|y| *y /= rms);
    }
    Ok(out)
}

/// Copy row `start` over every later row so the query window is coherent.
fn shared_window(mut base: HiddenStates, start: usize) -> HiddenStates {
    if start < base.rows() {
        let shared = base.row(start).to_vec();
        for i in start..base.rows() {
            base.row_mut(i).copy_from_slice(&shared);
        }
    }
    base
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowEntropySpec {
    /// Fraction of non-forced blocks made attractive.
    pub hot_fraction: f64,
    pub block_size: usize,
    pub sinks: usize,
    pub window: usize,
    pub seed: u64,
}

/// Low-entropy prompt: sinks and a few random blocks point along the query
/// direction, every other non-window row points against it. Returns the
/// states and the planted block indices.
pub fn low_entropy_states(model: &Model, n: usize, spec: &LowEntropySpec) -> Result<(HiddenStates, Vec<usize>)> {
    let d = model.config().hidden_dim;
    let window_start = n.saturating_sub(spec.window);
    let base = shared_window(random_states(n, d, spec.seed), window_start);
    let dir = query_alignment(model, &base, spec.window)?;
    let g = spec.block_size.max(1);
    let candidates: Vec<usize> = (0..n.div_ceil(g))
        .filter(|&b| b * g >= spec.sinks && (b + 1) * g <= window_start)
        .collect();
    let want = ((candidates.len() as f64) * spec.hot_fraction).round() as usize;
    let rng = CounterRng::new(spec.seed, STREAM_PICK);
    let mut keyed: Vec<(u64, usize)> = candidates
        .iter()
        .map(|&b| ((rng.uniform(b as u64) * u64::MAX as f64) as u64, b))
        .collect();
    keyed.sort_unstable();
    let mut hot: Vec<usize> = keyed.into_iter().take(want).map(|(_, b)| b).collect();
    hot.sort_unstable();
    let mut states = base;
    for i in 0..window_start {
        let sign = if i < spec.sinks || hot.binary_search(&(i / g)).is_ok() { 1.0 } else { -1.0 };
        for (s, y) in states.row_mut(i).iter_mut().zip(dir.row(i)) {
            *s = sign * y;
        }
    }
    Ok((states, hot))
}

/// Needle prompt: filler rows point against the query direction, needle
/// rows point along it plus a seeded payload that carries the answer.
pub fn needle_states(model: &Model, n: usize, needles: &[usize], window: usize, payload_scale: f32, seed: u64) -> Result<HiddenStates> {
    needle_span_states(model, n, needles, 1, window, payload_scale, seed)
}

/// Like [`needle_states`], with each needle repeated over `span` rows.
pub fn needle_span_states(
    model: &Model,
    n: usize,
    needles: &[usize],
    span: usize,
    window: usize,
    payload_scale: f32,
    seed: u64,
) -> Result<HiddenStates> {
    let d = model.config().hidden_dim;
    if let Some(&p) = needles.iter().find(|&&p| p >= n) {
        return Err(config_err(format!("needle at {p} outside a prompt of {n}")));
    }
    let window_start = n.saturating_sub(window);
    let base = shared_window(random_states(n, d, seed), window_start);
    let dir = query_alignment(model, &base, window)?;
    let mut states = base;
    for i in 0..window_start {
        for (s, y) in states.row_mut(i).iter_mut().zip(dir.row(i)) {
            *s = -0.5 * y;
        }
    }
    for (k, &p) in needles.iter().enumerate() {
        let payload = CounterRng::new(seed ^ k as u64, STREAM_PAYLOAD).normal_vec(d, payload_scale);
        for r in p..(p + span.max(1)).min(window_start.max(p + 1)) {
            for ((s, y), e) in states.row_mut(r).iter_mut().zip(dir.row(r)).zip(&payload) {
                *s = y + e;
            }
        }
    }
    Ok(states)
}

/// Needle positions spread at fractional `depths` of a prompt of `n`.
pub fn needle_positions(n: usize, depths: &[f64]) -> Vec<usize> {
    depths
        .iter()
        .map(|&f| ((f.clamp(0.0, 1.0) * n as f64) as usize).min(n.saturating_sub(1)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::{ImportanceScores, ScoreConfig};
    use crate::model::ModelConfig;

    #[test]
    fn seeded_states_repeat() {
        assert_eq!(random_states(4, 3, 9), random_states(4, 3, 9));
        assert_ne!(random_states(4, 3, 9), random_states(4, 3, 10));
        assert!(random_tokens(100, 64, 1).iter().all(|&t| t < 64));
    }

    #[test]
    fn rope_inverse_undoes_rope() {
        let mut v = vec![0.3, -1.0, 2.0, 0.5];
        let orig = v.clone();
        tensor::rope_in_place(&mut v, 37);
        rope_inverse(&mut v, 37);
        for (a, b) in v.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn planted_blocks_attract_mass() {
        let mut cfg = ModelConfig::pure_full(1, 32, 4, 5);
        cfg.init_std = 0.25;
        let model = Model::build(cfg).unwrap();
        let score = ScoreConfig {
            query_window_n: 16,
            block_size_g: 16,
            sink_count_a: 16,
            top_p: 0.9,
        };
        let spec = LowEntropySpec {
            hot_fraction: 0.1,
            block_size: 16,
            sinks: 16,
            window: 16,
            seed: 2,
        };
        let (states, hot) = low_entropy_states(&model, 512, &spec).unwrap();
        assert!(!hot.is_empty());
        let LayerWeights::Attention { norm, wq, wk, wv, .. } = model.layer_weights(0) else { panic!() };
        let pos: Vec<usize> = (0..512).collect();
        let (queries, keys, values) = model.qkv(&states, norm, wq, wk, wv, Some(&pos));
        let probe = crate::model::AttentionProbe { queries, keys, values };
        let s = ImportanceScores::from_probe(&probe, &pos, 4, &score).unwrap();
        let mean_hot: f32 = hot.iter().map(|&b| s.block_scores[b]).sum::<f32>() / hot.len() as f32;
        let cold = (1..30).find(|b| !hot.contains(b)).unwrap();
        assert!(mean_hot > 10.0 * s.block_scores[cold], "{mean_hot} vs {}", s.block_scores[cold]);
    }
}
