//! Simulated tensor parallelism over attention heads.
//!
//! Shard `t` of `T` owns heads `[t*H/T, (t+1)*H/T)` and reduces its heads
//! to partial block scores. The partials are summed in ascending shard
//! order so every shard derives the same selection.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract, Result};
use crate::importance::{block_sums, raw_scores_from_probe, summed_mass, RawScores, ScoreConfig};
use crate::model::{LayerWeights, Model, SublayerKind};
use crate::tensor::HiddenStates;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardScores {
    pub shard: usize,
    pub num_shards: usize,
    pub heads: Range<usize>,
    /// Per-block mean over tokens of this shard's summed head mass.
    pub partial: Vec<f64>,
}

pub fn shard_heads(num_heads: usize, shards: usize) -> Result<Vec<Range<usize>>> {
    if shards == 0 || num_heads % shards != 0 {
        return Err(config_err(format!(
            "{num_heads} heads cannot be split evenly across {shards} shards"
        )));
    }
    let per = num_heads / shards;
    Ok((0..shards).map(|t| t * per..(t + 1) * per).collect())
}

pub fn shard_raw_scores(raw: &RawScores, block_size: usize, shards: usize) -> Result<Vec<ShardScores>> {
    shard_heads(raw.heads, shards)?
        .into_iter()
        .enumerate()
        .map(|(t, heads)| {
            let mass = summed_mass(raw, heads.clone())?;
            let partial = block_sums(&mass, block_size)
                .into_iter()
                .map(|(s, c)| s / c as f64)
                .collect();
            Ok(ShardScores {
                shard: t,
                num_shards: shards,
                heads,
                partial,
            })
        })
        .collect()
}

/// Partial block scores of `states` entering full-attention `layer`, split
/// across `shards` head groups. Projects q and k without touching a cache.
pub fn sharded_block_scores(
    model: &Model,
    layer: usize,
    states: &HiddenStates,
    positions: &[usize],
    config: &ScoreConfig,
    shards: usize,
) -> Result<Vec<ShardScores>> {
    if model.config().layer_kind(layer) != SublayerKind::FullAttention {
        return Err(config_err(format!("layer {layer} is not full attention")));
    }
    let LayerWeights::Attention { norm, wq, wk, wv, .. } = model.layer_weights(layer) else {
        unreachable!("attention layer carries attention weights");
    };
    let (queries, keys, values) = model.qkv(states, norm, wq, wk, wv, Some(positions));
    let probe = crate::model::AttentionProbe { queries, keys, values };
    let raw = raw_scores_from_probe(&probe, positions, model.config().num_heads, config)?;
    shard_raw_scores(&raw, config.block_size_g, shards)
}

/// Elementwise sum of all shards, accumulated in ascending shard id
/// regardless of the order they are passed in.
pub fn allreduce_scores(shards: &[ShardScores]) -> Result<Vec<f64>> {
    let Some(first) = shards.first() else {
        return Err(contract("allreduce over zero shards"));
    };
    let t = first.num_shards;
    let mut ordered: Vec<Option<&ShardScores>> = vec![None; t];
    for s in shards {
        if s.num_shards != t || s.shard >= t {
            return Err(contract(format!("shard {} of {} in a {t}-way reduction", s.shard, s.num_shards)));
        }
        if s.partial.len() != first.partial.len() {
            return Err(contract("shard partials have different lengths"));
        }
        if ordered[s.shard].replace(s).is_some() {
            return Err(contract(format!("shard {} reported twice", s.shard)));
        }
    }
    let mut out = vec![0.0f64; first.partial.len()];
    for (t, s) in ordered.iter().enumerate() {
        let s = s.ok_or_else(|| contract(format!("shard {t} missing from reduction")))?;
        for (o, p) in out.iter_mut().zip(&s.partial) {
            *o += p;
        }
    }
    Ok(out)
}

/// Reduced scores rounded to the f32 block vector the selector consumes.
pub fn reduced_block_scores(shards: &[ShardScores]) -> Result<Vec<f32>> {
    Ok(allreduce_scores(shards)?.into_iter().map(|x| x as f32).collect())
}
