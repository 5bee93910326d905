//! Toy hybrid transformer: configuration, deterministic weights and the
//! dense forward path.
//!
//! A model is `num_blocks` repetitions of `layer_pattern`; the first entry
//! of the pattern is always full attention. Every sublayer is pre-norm with
//! a residual add. Attention sublayers apply rotary embeddings at the
//! token's logical position and go through the paged cache; linear
//! attention keeps an unnormalized `S += k v^T, o = S q` state per request.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::kvcache::{PagedKVCache, RequestId, DEFAULT_KV_BLOCK_SIZE};
use crate::rng::CounterRng;
use crate::tensor::{self, layer_norm, matmul, HiddenStates};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SublayerKind {
    FullAttention,
    SlidingWindowAttention,
    LinearAttention,
    #[serde(rename = "FFN")]
    Ffn,
}

impl SublayerKind {
    pub fn uses_kv_cache(self) -> bool {
        matches!(self, Self::FullAttention | Self::SlidingWindowAttention)
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Self::FullAttention => "full",
            Self::SlidingWindowAttention => "swa",
            Self::LinearAttention => "linear",
            Self::Ffn => "ffn",
        }
    }
}

fn default_init_std() -> f32 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub sublayers_per_block: usize,
    /// Kinds of the `1 + sublayers_per_block` layers in one block.
    pub layer_pattern: Vec<SublayerKind>,
    pub hidden_dim: usize,
    pub head_dim: usize,
    pub num_heads: usize,
    pub window_size: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub seed: u64,
    /// Standard deviation of the projection weights.
    #[serde(default = "default_init_std")]
    pub init_std: f32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_blocks", self.num_blocks),
            ("hidden_dim", self.hidden_dim),
            ("head_dim", self.head_dim),
            ("num_heads", self.num_heads),
            ("window_size", self.window_size),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(config_err(format!("{name} must be positive")));
            }
        }
        if self.layer_pattern.is_empty() {
            return Err(config_err("layer_pattern is empty"));
        }
        if self.layer_pattern[0] != SublayerKind::FullAttention {
            return Err(config_err("layer_pattern[0] must be FullAttention"));
        }
        if self.layer_pattern.len() != 1 + self.sublayers_per_block {
            return Err(config_err(format!(
                "layer_pattern has {} entries but 1 + sublayers_per_block = {}",
                self.layer_pattern.len(),
                1 + self.sublayers_per_block
            )));
        }
        if self.num_heads * self.head_dim != self.hidden_dim {
            return Err(config_err(format!(
                "hidden_dim = num_heads x head_dim violated: {} x {} != {}",
                self.num_heads, self.head_dim, self.hidden_dim
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(config_err("head_dim must be even for rotary embeddings"));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(config_err("init_std must be positive and finite"));
        }
        Ok(())
    }

    pub fn layers_per_block(&self) -> usize {
        1 + self.sublayers_per_block
    }

    pub fn num_layers(&self) -> usize {
        self.num_blocks * self.layers_per_block()
    }

    pub fn layer_kind(&self, layer: usize) -> SublayerKind {
        self.layer_pattern[layer % self.layers_per_block()]
    }

    pub fn block_of(&self, layer: usize) -> usize {
        layer / self.layers_per_block()
    }

    pub fn is_block_start(&self, layer: usize) -> bool {
        layer % self.layers_per_block() == 0
    }

    pub fn full_attention_layers(&self) -> Vec<usize> {
        (0..self.num_layers())
            .filter(|&l| self.layer_kind(l) == SublayerKind::FullAttention)
            .collect()
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Stable fingerprint of the configuration, used to tie ledgers to a model.
    pub fn fingerprint(&self) -> u64 {
        let s = serde_json::to_string(self).expect("config serializes");
        s.bytes()
            .fold(0x84222325u64, |h, b| crate::rng::mix64(h ^ b as u64))
    }

    /// One full-attention layer followed by an FFN per block.
    pub fn pure_full(num_blocks: usize, hidden_dim: usize, num_heads: usize, seed: u64) -> Self {
        Self::with_pattern(
            num_blocks,
            vec![SublayerKind::FullAttention, SublayerKind::Ffn],
            hidden_dim,
            num_heads,
            seed,
        )
    }

    /// Three linear-attention layers per full-attention layer, each followed by an FFN.
    pub fn linear_hybrid(num_blocks: usize, hidden_dim: usize, num_heads: usize, seed: u64) -> Self {
        use SublayerKind::*;
        Self::with_pattern(
            num_blocks,
            vec![
                FullAttention, Ffn, LinearAttention, Ffn, LinearAttention, Ffn, LinearAttention, Ffn,
            ],
            hidden_dim,
            num_heads,
            seed,
        )
    }

    /// Five sliding-window layers per full-attention layer, each followed by an FFN.
    pub fn swa_hybrid(num_blocks: usize, hidden_dim: usize, num_heads: usize, seed: u64) -> Self {
        use SublayerKind::*;
        let mut pattern = vec![FullAttention, Ffn];
        for _ in 0..5 {
            pattern.push(SlidingWindowAttention);
            pattern.push(Ffn);
        }
        Self::with_pattern(num_blocks, pattern, hidden_dim, num_heads, seed)
    }

    pub fn with_pattern(
        num_blocks: usize,
        layer_pattern: Vec<SublayerKind>,
        hidden_dim: usize,
        num_heads: usize,
        seed: u64,
    ) -> Self {
        Self {
            num_blocks,
            sublayers_per_block: layer_pattern.len() - 1,
            layer_pattern,
            hidden_dim,
            head_dim: hidden_dim / num_heads,
            num_heads,
            window_size: 16,
            ffn_dim: 4 * hidden_dim,
            vocab_size: 64,
            seed,
            init_std: default_init_std(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum LayerWeights {
    Attention {
        norm: Vec<f32>,
        wq: Vec<f32>,
        wk: Vec<f32>,
        wv: Vec<f32>,
        wo: Vec<f32>,
    },
    Ffn {
        norm: Vec<f32>,
        w1: Vec<f32>,
        w2: Vec<f32>,
    },
}

/// Roped queries and keys plus values of one attention call, for scoring
/// and error analysis.
#[derive(Debug, Clone)]
pub struct AttentionProbe {
    pub queries: HiddenStates,
    pub keys: HiddenStates,
    pub values: HiddenStates,
}

/// Immutable model; safe to share across threads.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<LayerWeights>,
    embedding: Vec<f32>,
    final_norm: Vec<f32>,
    lm_head: Vec<f32>,
}

const STREAM_EMBED: u64 = 1;
const STREAM_HEAD: u64 = 2;

fn layer_stream(layer: usize, tensor: u64) -> u64 {
    1000 + layer as u64 * 16 + tensor
}

impl Model {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let std = config.init_std;
        let gen = |stream: u64, len: usize| CounterRng::new(config.seed, stream).normal_vec(len, std);
        let layers = (0..config.num_layers())
            .map(|l| match config.layer_kind(l) {
                SublayerKind::Ffn => LayerWeights::Ffn {
                    norm: vec![1.0; d],
                    w1: gen(layer_stream(l, 0), d * config.ffn_dim),
                    w2: gen(layer_stream(l, 1), config.ffn_dim * d),
                },
                _ => LayerWeights::Attention {
                    norm: vec![1.0; d],
                    wq: gen(layer_stream(l, 0), d * d),
                    wk: gen(layer_stream(l, 1), d * d),
                    wv: gen(layer_stream(l, 2), d * d),
                    wo: gen(layer_stream(l, 3), d * d),
                },
            })
            .collect();
        let embedding = CounterRng::new(config.seed, STREAM_EMBED).normal_vec(config.vocab_size * d, 1.0);
        let lm_head = gen(STREAM_HEAD, d * config.vocab_size);
        Ok(Self {
            final_norm: vec![1.0; d],
            layers,
            embedding,
            lm_head,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_weights(&self, layer: usize) -> &LayerWeights {
        &self.layers[layer]
    }

    /// Output projection, `hidden_dim x vocab_size` row-major.
    pub fn lm_head(&self) -> &[f32] {
        &self.lm_head
    }

    pub fn final_norm(&self) -> &[f32] {
        &self.final_norm
    }

    pub fn weight_checksum(&self) -> u64 {
        let mut h = tensor::bit_checksum(&self.embedding) ^ tensor::bit_checksum(&self.lm_head);
        for l in &self.layers {
            let parts: Vec<&Vec<f32>> = match l {
                LayerWeights::Attention { norm, wq, wk, wv, wo } => vec![norm, wq, wk, wv, wo],
                LayerWeights::Ffn { norm, w1, w2 } => vec![norm, w1, w2],
            };
            for p in parts {
                h = crate::rng::mix64(h ^ tensor::bit_checksum(p));
            }
        }
        h
    }

    /// Embedding row for a vocabulary id, used to feed generated tokens back.
    pub fn embed(&self, token: u32) -> &[f32] {
        let d = self.config.hidden_dim;
        let t = token as usize % self.config.vocab_size;
        &self.embedding[t * d..(t + 1) * d]
    }

    pub fn embeddings(&self, tokens: &[u32]) -> HiddenStates {
        let rows: Vec<&[f32]> = tokens.iter().map(|&t| self.embed(t)).collect();
        HiddenStates::from_rows(self.config.hidden_dim, &rows).expect("embedding width")
    }

    pub fn new_cache(&self) -> PagedKVCache {
        PagedKVCache::new(self.num_layers(), self.config.hidden_dim, DEFAULT_KV_BLOCK_SIZE)
    }

    /// Next-token logits for one final hidden state.
    pub fn logits(&self, hidden: &[f32]) -> Vec<f32> {
        let mut h = hidden.to_vec();
        tensor::layer_norm_row(&mut h, &self.final_norm);
        let x = HiddenStates::from_vec(1, h.len(), h).expect("row");
        matmul(&x, &self.lm_head, self.config.vocab_size).into_vec()
    }

    /// Run one sublayer for one request. `positions` are the rows' logical
    /// positions, strictly increasing and later than anything already
    /// cached for this request at this layer.
    pub fn forward_sublayer(
        &self,
        layer: usize,
        request: RequestId,
        states: &HiddenStates,
        positions: &[usize],
        cache: &mut PagedKVCache,
    ) -> Result<HiddenStates> {
        self.forward_sublayer_probed(layer, request, states, positions, cache, false)
            .map(|(h, _)| h)
    }

    pub fn forward_sublayer_probed(
        &self,
        layer: usize,
        request: RequestId,
        states: &HiddenStates,
        positions: &[usize],
        cache: &mut PagedKVCache,
        probe: bool,
    ) -> Result<(HiddenStates, Option<AttentionProbe>)> {
        if states.rows() != positions.len() {
            return Err(crate::error::contract(format!(
                "{} rows but {} positions",
                states.rows(),
                positions.len()
            )));
        }
        let kind = self.config.layer_kind(layer);
        match (&self.layers[layer], kind) {
            (LayerWeights::Ffn { norm, w1, w2 }, _) => Ok((self.ffn(states, norm, w1, w2), None)),
            (LayerWeights::Attention { norm, wq, wk, wv, wo }, SublayerKind::LinearAttention) => {
                let (q, k, v) = self.qkv(states, norm, wq, wk, wv, None);
                let mixed = self.linear_mix(layer, request, &q, &k, &v, cache);
                let out = residual(states, &matmul(&mixed, wo, self.config.hidden_dim));
                Ok((out, probe.then_some(AttentionProbe { queries: q, keys: k, values: v })))
            }
            (LayerWeights::Attention { norm, wq, wk, wv, wo }, _) => {
                let (q, k, v) = self.qkv(states, norm, wq, wk, wv, Some(positions));
                cache.write(layer, request, positions, k.as_slice(), v.as_slice())?;
                let (kpos, kc, vc) = cache.gather(layer, request)?;
                let window = (kind == SublayerKind::SlidingWindowAttention).then_some(self.config.window_size);
                let mixed = attend(&q, positions, &kpos, &kc, &vc, self.config.num_heads, window);
                let out = residual(states, &matmul(&mixed, wo, self.config.hidden_dim));
                Ok((out, probe.then_some(AttentionProbe { queries: q, keys: k, values: v })))
            }
        }
    }

    /// Normalized inputs projected to q, k, v; rotary applied when positions are given.
    pub fn qkv(
        &self,
        states: &HiddenStates,
        norm: &[f32],
        wq: &[f32],
        wk: &[f32],
        wv: &[f32],
        rope_positions: Option<&[usize]>,
    ) -> (HiddenStates, HiddenStates, HiddenStates) {
        let d = self.config.hidden_dim;
        let dk = self.config.head_dim;
        let y = layer_norm(states, norm);
        let mut q = matmul(&y, wq, d);
        let mut k = matmul(&y, wk, d);
        let v = matmul(&y, wv, d);
        if let Some(pos) = rope_positions {
            for (r, &p) in pos.iter().enumerate() {
                for h in 0..self.config.num_heads {
                    tensor::rope_in_place(&mut q.row_mut(r)[h * dk..(h + 1) * dk], p);
                    tensor::rope_in_place(&mut k.row_mut(r)[h * dk..(h + 1) * dk], p);
                }
            }
        }
        (q, k, v)
    }

    fn ffn(&self, states: &HiddenStates, norm: &[f32], w1: &[f32], w2: &[f32]) -> HiddenStates {
        let y = layer_norm(states, norm);
        let mut h = matmul(&y, w1, self.config.ffn_dim);
        h.as_mut_slice().iter_mut().for_each(|x| *x = tensor::silu(*x));
        residual(states, &matmul(&h, w2, self.config.hidden_dim))
    }

    fn linear_mix(
        &self,
        layer: usize,
        request: RequestId,
        q: &HiddenStates,
        k: &HiddenStates,
        v: &HiddenStates,
        cache: &mut PagedKVCache,
    ) -> HiddenStates {
        let (heads, dk) = (self.config.num_heads, self.config.head_dim);
        let state = cache.linear_state_mut(layer, request, heads * dk * dk);
        let mut out = HiddenStates::zeros(q.rows(), self.config.hidden_dim);
        for r in 0..q.rows() {
            for h in 0..heads {
                let s = &mut state[h * dk * dk..(h + 1) * dk * dk];
                let kr = &k.row(r)[h * dk..(h + 1) * dk];
                let vr = &v.row(r)[h * dk..(h + 1) * dk];
                // S[a][b] += v[a] * k[b]
                for a in 0..dk {
                    for b in 0..dk {
                        s[a * dk + b] += vr[a] * kr[b];
                    }
                }
                let qr = &q.row(r)[h * dk..(h + 1) * dk];
                let o = &mut out.row_mut(r)[h * dk..(h + 1) * dk];
                for a in 0..dk {
                    o[a] = tensor::dot(&s[a * dk..(a + 1) * dk], qr);
                }
            }
        }
        out
    }

    /// Reference prefill: every layer over every token, no dropping.
    pub fn dense_prefill(&self, tokens: &HiddenStates) -> Result<(HiddenStates, PagedKVCache)> {
        let mut cache = self.new_cache();
        let out = self.dense_prefill_into(0, tokens, &mut cache)?;
        Ok((out, cache))
    }

    pub fn dense_prefill_into(
        &self,
        request: RequestId,
        tokens: &HiddenStates,
        cache: &mut PagedKVCache,
    ) -> Result<HiddenStates> {
        if tokens.rows() == 0 {
            return Err(crate::error::contract("prefill needs at least one token"));
        }
        let positions: Vec<usize> = (0..tokens.rows()).collect();
        let mut h = tokens.clone();
        for layer in 0..self.num_layers() {
            h = self.forward_sublayer(layer, request, &h, &positions, cache)?;
        }
        Ok(h)
    }
}

fn residual(x: &HiddenStates, delta: &HiddenStates) -> HiddenStates {
    let mut out = x.clone();
    for (o, d) in out.as_mut_slice().iter_mut().zip(delta.as_slice()) {
        *o += d;
    }
    out
}

/// Causal (optionally windowed) softmax attention of query rows at
/// `qpos` over cached keys at sorted positions `kpos`.
pub fn attend(
    q: &HiddenStates,
    qpos: &[usize],
    kpos: &[usize],
    k: &[f32],
    v: &[f32],
    heads: usize,
    window: Option<usize>,
) -> HiddenStates {
    let d = q.cols();
    let dk = d / heads;
    let m = kpos.len();
    let scale = 1.0 / (dk as f32).sqrt();
    // Per-head contiguous key/value panels.
    let mut kh = vec![0.0f32; heads * m * dk];
    let mut vh = vec![0.0f32; heads * m * dk];
    for j in 0..m {
        for h in 0..heads {
            let src = j * d + h * dk;
            let dst = (h * m + j) * dk;
            kh[dst..dst + dk].copy_from_slice(&k[src..src + dk]);
            vh[dst..dst + dk].copy_from_slice(&v[src..src + dk]);
        }
    }
    let mut out = HiddenStates::zeros(q.rows(), d);
    let mut logits = vec![0.0f32; m];
    let mut acc = vec![0.0f32; dk];
    for (r, &p) in qpos.iter().enumerate() {
        let hi = kpos.partition_point(|&x| x <= p);
        let lo = match window {
            Some(w) if p + 1 > w => kpos.partition_point(|&x| x + w <= p),
            _ => 0,
        };
        if lo >= hi {
            continue;
        }
        for h in 0..heads {
            let qh = &q.row(r)[h * dk..(h + 1) * dk];
            let kp = &kh[h * m * dk..(h + 1) * m * dk];
            let vp = &vh[h * m * dk..(h + 1) * m * dk];
            let mut max = f32::NEG_INFINITY;
            for j in lo..hi {
                let s = tensor::dot(qh, &kp[j * dk..(j + 1) * dk]) * scale;
                logits[j] = s;
                max = max.max(s);
            }
            let mut sum = 0.0f32;
            acc.iter_mut().for_each(|a| *a = 0.0);
            for j in lo..hi {
                let w = (logits[j] - max).exp();
                sum += w;
                for (a, x) in acc.iter_mut().zip(&vp[j * dk..(j + 1) * dk]) {
                    *a += w * x;
                }
            }
            let inv = 1.0 / sum;
            for (o, a) in out.row_mut(r)[h * dk..(h + 1) * dk].iter_mut().zip(&acc) {
                *o = a * inv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> ModelConfig {
        ModelConfig::pure_full(2, 16, 2, seed)
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Model::build(small(0)).unwrap();
        let b = Model::build(small(0)).unwrap();
        assert_eq!(a.weight_checksum(), b.weight_checksum());
        let c = Model::build(small(1)).unwrap();
        assert_ne!(a.weight_checksum(), c.weight_checksum());
    }

    #[test]
    fn dims_are_validated() {
        let mut c = ModelConfig::pure_full(1, 64, 8, 0);
        assert!(c.validate().is_ok());
        c.head_dim = 16;
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("num_heads x head_dim"), "{err}");
        let mut c = ModelConfig::pure_full(1, 64, 8, 0);
        c.layer_pattern = vec![SublayerKind::Ffn, SublayerKind::FullAttention];
        assert!(c.validate().unwrap_err().to_string().contains("FullAttention"));
        c.layer_pattern.clear();
        assert!(c.validate().unwrap_err().to_string().contains("empty"));
    }

    #[test]
    fn config_json_field_names() {
        let json = r#"{"num_blocks":2,"sublayers_per_block":1,"layer_pattern":["FullAttention","FFN"],
            "hidden_dim":16,"head_dim":8,"num_heads":2,"window_size":4,"ffn_dim":32,"vocab_size":10,"seed":3}"#;
        let c = ModelConfig::from_json_str(json).unwrap();
        assert_eq!(c.num_layers(), 4);
        assert_eq!(c.init_std, 0.02);
        assert_eq!(c.layer_kind(3), SublayerKind::Ffn);
    }

    #[test]
    fn ffn_is_position_independent() {
        let m = Model::build(small(2)).unwrap();
        let row: Vec<f32> = (0..16).map(|i| (i as f32 * 0.37).sin()).collect();
        let mut cache = m.new_cache();
        let one = HiddenStates::from_rows(16, &[row.clone()]).unwrap();
        let a = m.forward_sublayer(1, 0, &one, &[0], &mut cache).unwrap();
        let three = HiddenStates::from_rows(16, &[row.clone(), row.clone(), row]).unwrap();
        let b = m.forward_sublayer(1, 1, &three, &[0, 5, 9], &mut cache).unwrap();
        for r in 0..3 {
            assert_eq!(b.row(r), a.row(0));
        }
    }

    #[test]
    fn single_key_attention_returns_value_plus_residual() {
        let m = Model::build(small(4)).unwrap();
        let row: Vec<f32> = (0..16).map(|i| (i as f32 * 0.61).cos()).collect();
        let x = HiddenStates::from_rows(16, &[row]).unwrap();
        let mut cache = m.new_cache();
        let out = m.forward_sublayer(0, 0, &x, &[0], &mut cache).unwrap();
        let LayerWeights::Attention { norm, wv, wo, .. } = m.layer_weights(0) else {
            unreachable!()
        };
        let y = layer_norm(&x, norm);
        let v = matmul(&y, wv, 16);
        let expect = residual(&x, &matmul(&v, wo, 16));
        assert_eq!(out, expect);
    }

    #[test]
    fn sliding_window_matches_masked_brute_force() {
        use SublayerKind::*;
        let mut cfg = ModelConfig::with_pattern(1, vec![FullAttention, SlidingWindowAttention], 16, 2, 9);
        cfg.window_size = 2;
        let m = Model::build(cfg).unwrap();
        let rows: Vec<Vec<f32>> = (0..4)
            .map(|t| (0..16).map(|i| ((t * 16 + i) as f32 * 0.13).sin()).collect())
            .collect();
        let x = HiddenStates::from_rows(16, &rows).unwrap();
        let mut cache = m.new_cache();
        let out = m.forward_sublayer(1, 0, &x, &[0, 1, 2, 3], &mut cache).unwrap();

        // Brute force for token 3 over keys {2, 3} only.
        let LayerWeights::Attention { norm, wq, wk, wv, wo } = m.layer_weights(1) else {
            unreachable!()
        };
        let (q, k, v) = m.qkv(&x, norm, wq, wk, wv, Some(&[0, 1, 2, 3]));
        let mut mixed = vec![0.0f32; 16];
        for h in 0..2 {
            let s = |j: usize| {
                let mut acc = 0.0f64;
                for c in 0..8 {
                    acc += q.row(3)[h * 8 + c] as f64 * k.row(j)[h * 8 + c] as f64;
                }
                acc / (8f64).sqrt()
            };
            let (s2, s3) = (s(2), s(3));
            let mx = s2.max(s3);
            let (e2, e3) = ((s2 - mx).exp(), (s3 - mx).exp());
            for c in 0..8 {
                mixed[h * 8 + c] =
                    ((e2 * v.row(2)[h * 8 + c] as f64 + e3 * v.row(3)[h * 8 + c] as f64) / (e2 + e3)) as f32;
            }
        }
        let mixed = HiddenStates::from_rows(16, &[mixed]).unwrap();
        let proj = matmul(&mixed, wo, 16);
        for c in 0..16 {
            let expect = x.row(3)[c] + proj.row(0)[c];
            assert!((out.row(3)[c] - expect).abs() < 1e-5);
        }
    }

    #[test]
    fn causality_exact_for_all_kinds() {
        use SublayerKind::*;
        let cfg = ModelConfig::with_pattern(
            1,
            vec![FullAttention, SlidingWindowAttention, LinearAttention, Ffn],
            16,
            2,
            5,
        );
        let m = Model::build(cfg).unwrap();
        let n = 12;
        let base: Vec<Vec<f32>> = (0..n)
            .map(|t| (0..16).map(|i| ((t * 31 + i * 7) as f32 * 0.11).sin()).collect())
            .collect();
        let mut perturbed = base.clone();
        perturbed[7][3] += 1.0;
        let a = m.dense_prefill(&HiddenStates::from_rows(16, &base).unwrap()).unwrap().0;
        let b = m.dense_prefill(&HiddenStates::from_rows(16, &perturbed).unwrap()).unwrap().0;
        for r in 0..7 {
            assert_eq!(a.row(r), b.row(r));
        }
        assert_ne!(a.row(7), b.row(7));
    }

    #[test]
    fn sliding_window_locality_on_pure_swa() {
        use SublayerKind::*;
        // Full attention is mandatory at the block start, so use a config
        // whose only full layer sees the perturbation after it is applied:
        // perturb the input of the SWA stack directly.
        let mut cfg = ModelConfig::with_pattern(
            1,
            vec![FullAttention, SlidingWindowAttention, SlidingWindowAttention],
            16,
            2,
            8,
        );
        cfg.window_size = 3;
        let m = Model::build(cfg).unwrap();
        let n = 16;
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|t| (0..16).map(|i| ((t * 17 + i * 3) as f32 * 0.21).cos()).collect())
            .collect();
        let x = HiddenStates::from_rows(16, &rows).unwrap();
        let mut xp = x.clone();
        xp.row_mut(4)[0] += 2.0;
        let pos: Vec<usize> = (0..n).collect();
        let run = |h: &HiddenStates| {
            let mut c = m.new_cache();
            let h1 = m.forward_sublayer(1, 0, h, &pos, &mut c).unwrap();
            m.forward_sublayer(2, 0, &h1, &pos, &mut c).unwrap()
        };
        let (a, b) = (run(&x), run(&xp));
        // Two SWA layers with w = 3 reach positions up to 4 + 2 * (3 - 1) = 8.
        for r in 9..n {
            assert_eq!(a.row(r), b.row(r), "row {r}");
        }
        assert_ne!(a.row(8), b.row(8));
    }
}
