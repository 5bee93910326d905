//! Token and block importance from the last `n` queries.
//!
//! The pipeline is partial GEMM (`Q[N-n:N] K^T / sqrt(d_k)` with inline
//! causal masking), a two-pass online softmax over the full key axis whose
//! rows are averaged over the window and summed over heads, then a mean
//! within fixed-size blocks. Accumulation is in f64 and only the final
//! vectors are rounded to f32, so regrouping heads (tensor-parallel shards)
//! reproduces the same f32 block scores.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract, Result};
use crate::model::AttentionProbe;
use crate::tensor::HiddenStates;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub query_window_n: usize,
    pub block_size_g: usize,
    pub sink_count_a: usize,
    pub top_p: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            query_window_n: 128,
            block_size_g: 64,
            sink_count_a: 128,
            top_p: 0.99,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if self.query_window_n == 0 {
            return Err(config_err("query_window_n must be positive"));
        }
        if self.block_size_g == 0 {
            return Err(config_err("block_size_g must be positive"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(config_err(format!("top_p must lie in (0, 1], got {}", self.top_p)));
        }
        Ok(())
    }

    pub fn effective_n(&self, num_tokens: usize) -> usize {
        self.query_window_n.min(num_tokens)
    }
}

/// Masked, scaled `n x N` score matrices, one per head.
#[derive(Debug, Clone)]
pub struct RawScores {
    pub heads: usize,
    pub rows: usize,
    pub keys: usize,
    /// Head-major `[h][j][i]`; masked entries are `-inf`.
    pub data: Vec<f32>,
}

impl RawScores {
    pub fn row(&self, head: usize, j: usize) -> &[f32] {
        let start = (head * self.rows + j) * self.keys;
        &self.data[start..start + self.keys]
    }
}

/// `S = Q K^T / sqrt(d_k)` for contiguous positions: query row `j` sits at
/// position `N - n + j`, key `i` at position `i`.
pub fn partial_scores(queries: &[HiddenStates], keys: &[HiddenStates]) -> Result<RawScores> {
    let n = queries.first().map_or(0, |q| q.rows());
    let total = keys.first().map_or(0, |k| k.rows());
    if n > total {
        return Err(contract(format!(
            "query window {n} exceeds sequence length {total}; clamp n first"
        )));
    }
    let qpos: Vec<usize> = (total - n..total).collect();
    let kpos: Vec<usize> = (0..total).collect();
    partial_scores_at(queries, &qpos, keys, &kpos)
}

/// Partial GEMM with explicit logical positions (compacted streams keep
/// their original positions).
pub fn partial_scores_at(
    queries: &[HiddenStates],
    qpos: &[usize],
    keys: &[HiddenStates],
    kpos: &[usize],
) -> Result<RawScores> {
    if queries.len() != keys.len() || queries.is_empty() {
        return Err(contract("queries and keys need the same nonzero head count"));
    }
    let (n, total) = (qpos.len(), kpos.len());
    if n > total {
        return Err(contract(format!(
            "query window {n} exceeds sequence length {total}; clamp n first"
        )));
    }
    let heads = queries.len();
    let dk = queries[0].cols();
    let scale = 1.0 / (dk as f32).sqrt();
    let mut data = vec![f32::NEG_INFINITY; heads * n * total];
    for h in 0..heads {
        let (q, k) = (&queries[h], &keys[h]);
        if q.rows() != n || k.rows() != total {
            return Err(contract("per-head matrix shapes disagree with positions"));
        }
        for j in 0..n {
            let row = &mut data[(h * n + j) * total..(h * n + j + 1) * total];
            let qr = q.row(j);
            for i in 0..total {
                if kpos[i] <= qpos[j] {
                    row[i] = crate::tensor::dot(qr, k.row(i)) * scale;
                }
            }
        }
    }
    Ok(RawScores {
        heads,
        rows: n,
        keys: total,
        data,
    })
}

/// Per-head token mass: the softmax of each window row, averaged over the
/// rows. Two passes per row: running max and rescaled exponential sum,
/// then normalized accumulation.
pub fn head_token_mass(raw: &RawScores, head: usize) -> Result<Vec<f64>> {
    let mut acc = vec![0.0f64; raw.keys];
    let inv_n = 1.0 / raw.rows as f64;
    for j in 0..raw.rows {
        let row = raw.row(head, j);
        let (mut max, mut sum) = (f64::NEG_INFINITY, 0.0f64);
        for &x in row {
            if x == f32::NEG_INFINITY {
                continue;
            }
            let x = x as f64;
            if x > max {
                sum = sum * (max - x).exp() + 1.0;
                max = x;
            } else {
                sum += (x - max).exp();
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(contract(format!("head {head} row {j} is fully masked")));
        }
        let inv = 1.0 / sum;
        for (a, &x) in acc.iter_mut().zip(row) {
            if x != f32::NEG_INFINITY {
                *a += ((x as f64 - max).exp() * inv) * inv_n;
            }
        }
    }
    Ok(acc)
}

/// Sum of per-head masses over `heads`, in the given order.
pub fn summed_mass(raw: &RawScores, heads: impl IntoIterator<Item = usize>) -> Result<Vec<f64>> {
    let mut total = vec![0.0f64; raw.keys];
    for h in heads {
        for (t, m) in total.iter_mut().zip(head_token_mass(raw, h)?) {
            *t += m;
        }
    }
    Ok(total)
}

/// Token importance: window-averaged softmax mass summed over heads.
pub fn online_softmax_reduce(raw: &RawScores) -> Result<Vec<f32>> {
    Ok(summed_mass(raw, 0..raw.heads)?.into_iter().map(|x| x as f32).collect())
}

pub fn num_blocks(num_tokens: usize, block_size: usize) -> usize {
    num_tokens.div_ceil(block_size)
}

/// Per-block sums and member counts.
pub fn block_sums(mass: &[f64], block_size: usize) -> Vec<(f64, usize)> {
    mass.chunks(block_size)
        .map(|c| (c.iter().sum::<f64>(), c.len()))
        .collect()
}

pub fn block_means(sums: &[(f64, usize)]) -> Vec<f32> {
    sums.iter().map(|&(s, c)| (s / c as f64) as f32).collect()
}

/// Mean token score per block; the ragged tail averages over its actual members.
pub fn block_reduce(token_scores: &[f32], block_size: usize) -> Vec<f32> {
    let mass: Vec<f64> = token_scores.iter().map(|&x| x as f64).collect();
    block_means(&block_sums(&mass, block_size))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    pub token_scores: Vec<f32>,
    pub block_scores: Vec<f32>,
    pub num_tokens: usize,
    pub effective_n: usize,
}

/// Split a `rows x (heads * d_k)` matrix into per-head panels.
pub fn split_heads(m: &HiddenStates, heads: usize, rows: std::ops::Range<usize>) -> Vec<HiddenStates> {
    let dk = m.cols() / heads;
    (0..heads)
        .map(|h| {
            let data: Vec<f32> = rows
                .clone()
                .flat_map(|r| m.row(r)[h * dk..(h + 1) * dk].iter().copied())
                .collect();
            HiddenStates::from_vec(rows.len(), dk, data).expect("panel shape")
        })
        .collect()
}

/// Raw scores for a probed attention call over an active set at `positions`.
pub fn raw_scores_from_probe(
    probe: &AttentionProbe,
    positions: &[usize],
    heads: usize,
    config: &ScoreConfig,
) -> Result<RawScores> {
    let total = positions.len();
    let n = config.effective_n(total);
    let q = split_heads(&probe.queries, heads, total - n..total);
    let k = split_heads(&probe.keys, heads, 0..total);
    partial_scores_at(&q, &positions[total - n..], &k, positions)
}

impl ImportanceScores {
    pub fn from_raw(raw: &RawScores, block_size: usize) -> Result<Self> {
        let mass = summed_mass(raw, 0..raw.heads)?;
        let block_scores = block_means(&block_sums(&mass, block_size));
        Ok(Self {
            token_scores: mass.iter().map(|&x| x as f32).collect(),
            block_scores,
            num_tokens: raw.keys,
            effective_n: raw.rows,
        })
    }

    pub fn from_probe(
        probe: &AttentionProbe,
        positions: &[usize],
        heads: usize,
        config: &ScoreConfig,
    ) -> Result<Self> {
        let raw = raw_scores_from_probe(probe, positions, heads, config)?;
        Self::from_raw(&raw, config.block_size_g)
    }
}
