//! Top-p block selection over packed `(score, index)` words.
//!
//! Scores are mapped through an order-preserving bitcast `phi` into the high
//! half of a `u64`; the low half holds the complement of the block index so
//! that a plain descending sort of the words orders by score descending and
//! then by index ascending. The smallest prefix of that order whose mass
//! fraction reaches `p` is kept, expanded to tokens, and sink and
//! query-window tokens are forced on.

use serde::Serialize;

use crate::error::{contract, Result};
use crate::importance::{num_blocks, ScoreConfig};

/// Order-preserving map from finite f32 to u32 under unsigned comparison.
pub fn phi_encode(x: f32) -> Result<u32> {
    if x.is_nan() {
        return Err(contract("phi_encode of NaN"));
    }
    Ok(phi_bits(x))
}

#[inline]
fn phi_bits(x: f32) -> u32 {
    let b = x.to_bits();
    if b & 0x8000_0000 == 0 {
        b ^ 0x8000_0000
    } else {
        b ^ 0xFFFF_FFFF
    }
}

#[inline]
fn phi_decode(u: u32) -> f32 {
    if u & 0x8000_0000 != 0 {
        f32::from_bits(u ^ 0x8000_0000)
    } else {
        f32::from_bits(u ^ 0xFFFF_FFFF)
    }
}

/// `(phi(score) << 32) | !index`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PackedScore(pub u64);

impl PackedScore {
    pub fn pack(score: f32, index: u32) -> Result<Self> {
        Ok(Self(((phi_encode(score)? as u64) << 32) | (!index) as u64))
    }

    pub fn score(self) -> f32 {
        phi_decode((self.0 >> 32) as u32)
    }

    pub fn index(self) -> u32 {
        !(self.0 as u32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    pub keep_mask: Vec<bool>,
    pub retained_indices: Vec<usize>,
    pub retention_ratio: f64,
    /// Number of score-ranked blocks kept before forced retention.
    pub cutoff_rank: usize,
    /// Kept fraction of block-score mass after forced retention; a block
    /// that is only partly forced on contributes its kept fraction.
    pub covered_mass: f64,
    /// Set when the scores carried no mass and everything was kept.
    pub degenerate: bool,
}

impl Selection {
    pub fn keep_all(num_tokens: usize) -> Self {
        Self {
            keep_mask: vec![true; num_tokens],
            retained_indices: (0..num_tokens).collect(),
            retention_ratio: 1.0,
            cutoff_rank: 0,
            covered_mass: 1.0,
            degenerate: false,
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.keep_mask.len()
    }

    pub fn num_retained(&self) -> usize {
        self.retained_indices.len()
    }

    pub fn keeps_all(&self) -> bool {
        self.retained_indices.len() == self.keep_mask.len()
    }

    /// Rebuild derived fields from a keep mask, e.g. after intersecting
    /// with an external constraint.
    pub fn from_mask(keep_mask: Vec<bool>, block_scores: &[f32], block_size: usize, cutoff_rank: usize) -> Self {
        let retained_indices: Vec<usize> = keep_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect();
        let n = keep_mask.len();
        let covered_mass = covered_fraction(&keep_mask, block_scores, block_size);
        Self {
            retention_ratio: retained_indices.len() as f64 / n as f64,
            retained_indices,
            keep_mask,
            cutoff_rank,
            covered_mass,
            degenerate: false,
        }
    }
}

fn covered_fraction(keep: &[bool], block_scores: &[f32], block_size: usize) -> f64 {
    let total: f64 = block_scores.iter().map(|&s| s as f64).sum();
    if total <= 0.0 {
        return 1.0;
    }
    let covered: f64 = keep
        .chunks(block_size)
        .zip(block_scores)
        .map(|(members, &s)| {
            let kept = members.iter().filter(|&&k| k).count();
            s as f64 * kept as f64 / members.len() as f64
        })
        .sum();
    covered / total
}

/// Token keep mask: block kept, or a sink (`i < sinks`), or in the query
/// window (`i >= N - window`).
pub fn expand_mask(block_mask: &[bool], block_size: usize, num_tokens: usize, sinks: usize, window: usize) -> Vec<bool> {
    debug_assert_eq!(block_mask.len(), num_blocks(num_tokens, block_size));
    let window_start = num_tokens.saturating_sub(window);
    (0..num_tokens)
        .map(|i| block_mask[i / block_size] || i < sinks || i >= window_start)
        .collect()
}

/// Block indices in descending score order, ties to the lower index.
pub fn ranked_blocks(block_scores: &[f32]) -> Result<Vec<usize>> {
    let mut words = block_scores
        .iter()
        .enumerate()
        .map(|(g, &s)| PackedScore::pack(s, g as u32))
        .collect::<Result<Vec<_>>>()?;
    words.sort_unstable_by(|a, b| b.cmp(a));
    Ok(words.into_iter().map(|w| w.index() as usize).collect())
}

/// Smallest `k` such that the first `k` ranked blocks hold at least `p` of
/// the total mass; `None` when the total is zero.
pub fn cutoff(block_scores: &[f32], order: &[usize], p: f64) -> Option<usize> {
    let total: f64 = block_scores.iter().map(|&s| s as f64).sum();
    if total <= 0.0 {
        return None;
    }
    if p >= 1.0 {
        return Some(order.len());
    }
    let mut cum = 0.0f64;
    for (k, &g) in order.iter().enumerate() {
        cum += block_scores[g] as f64;
        if cum / total >= p {
            return Some(k + 1);
        }
    }
    Some(order.len())
}

/// Top-p sort-and-threshold over block scores for a sequence of `num_tokens`.
pub fn top_p_select(block_scores: &[f32], config: &ScoreConfig, num_tokens: usize) -> Result<Selection> {
    let g = config.block_size_g;
    if g == 0 {
        return Err(contract("block size must be positive"));
    }
    if !(config.top_p > 0.0 && config.top_p <= 1.0) {
        return Err(contract(format!("top_p {} outside (0, 1]", config.top_p)));
    }
    if block_scores.len() != num_blocks(num_tokens, g) {
        return Err(contract(format!(
            "{} block scores for {num_tokens} tokens at block size {g}",
            block_scores.len()
        )));
    }
    if let Some(bad) = block_scores.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(contract(format!("block score {bad} is not a finite non-negative value")));
    }
    let order = ranked_blocks(block_scores)?;
    let Some(k) = cutoff(block_scores, &order, config.top_p) else {
        let mut sel = Selection::keep_all(num_tokens);
        sel.degenerate = true;
        sel.cutoff_rank = block_scores.len();
        return Ok(sel);
    };
    let mut block_mask = vec![false; block_scores.len()];
    for &b in &order[..k] {
        block_mask[b] = true;
    }
    let keep = expand_mask(
        &block_mask,
        g,
        num_tokens,
        config.sink_count_a,
        config.effective_n(num_tokens),
    );
    Ok(Selection::from_mask(keep, block_scores, g, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(p: f64, g: usize, a: usize, n: usize) -> ScoreConfig {
        ScoreConfig {
            query_window_n: n,
            block_size_g: g,
            sink_count_a: a,
            top_p: p,
        }
    }

    #[test]
    fn phi_reference_values() {
        assert_eq!(phi_encode(0.0).unwrap(), 0x8000_0000);
        assert_eq!(phi_encode(1.0).unwrap(), 0xBF80_0000);
        assert_eq!(phi_encode(-1.0).unwrap(), 0x407F_FFFF);
        assert!(phi_encode(f32::NAN).is_err());
    }

    #[test]
    fn packing_roundtrip() {
        for &(s, g) in &[(0.0f32, 0u32), (1.5, 7), (-2.25, 123_456), (f32::MAX, u32::MAX), (1e-42, 3)] {
            let w = PackedScore::pack(s, g).unwrap();
            assert_eq!(w.score().to_bits(), s.to_bits());
            assert_eq!(w.index(), g);
        }
    }

    #[test]
    fn hand_worked_threshold() {
        let s = top_p_select(&[0.5, 0.3, 0.15, 0.05], &cfg(0.9, 1, 0, 0), 4).unwrap();
        assert_eq!(s.retained_indices, vec![0, 1, 2]);
        assert_eq!(s.cutoff_rank, 3);
        assert!(s.covered_mass >= 0.9);
    }

    #[test]
    fn p_one_keeps_everything() {
        let s = top_p_select(&[0.7, 0.0, 0.3, 0.0], &cfg(1.0, 2, 0, 0), 8).unwrap();
        assert!(s.keeps_all());
        assert_eq!(s.retention_ratio, 1.0);
    }

    #[test]
    fn uniform_scores_keep_all_at_high_p() {
        let s = top_p_select(&[0.1; 10], &cfg(0.99, 1, 0, 0), 10).unwrap();
        assert!(s.keeps_all());
    }

    #[test]
    fn zero_mass_is_degenerate_keep_all() {
        let s = top_p_select(&[0.0; 5], &cfg(0.5, 2, 0, 1), 9).unwrap();
        assert!(s.degenerate && s.keeps_all());
    }

    #[test]
    fn sinks_and_window_cover_everything() {
        let s = top_p_select(&[1.0, 0.0, 0.0], &cfg(0.5, 2, 3, 3), 6).unwrap();
        assert!(s.keeps_all());
    }

    #[test]
    fn expand_examples() {
        assert_eq!(
            expand_mask(&[true, false, true], 2, 6, 0, 0),
            vec![true, true, false, false, true, true]
        );
        assert_eq!(
            expand_mask(&[false, false, false], 2, 6, 1, 1),
            vec![true, false, false, false, false, true]
        );
        assert_eq!(
            expand_mask(&[false, true, false], 2, 5, 0, 0),
            vec![false, false, true, true, false]
        );
    }

    #[test]
    fn concentrated_vs_uniform() {
        let s = top_p_select(&[0.01, 0.95, 0.02, 0.02], &cfg(0.9, 1, 0, 0), 4).unwrap();
        assert_eq!(s.cutoff_rank, 1);
        assert_eq!(s.retained_indices, vec![1]);
        let s = top_p_select(&[0.25; 4], &cfg(0.9, 1, 0, 0), 4).unwrap();
        assert_eq!(s.cutoff_rank, 4);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let s = top_p_select(&[0.2, 0.2, 0.2, 0.2, 0.2], &cfg(0.5, 1, 0, 0), 5).unwrap();
        assert_eq!(s.retained_indices, vec![0, 1, 2]);
    }

    fn finite_f32() -> impl Strategy<Value = f32> {
        prop_oneof![
            any::<u32>().prop_map(f32::from_bits).prop_filter("finite", |x| x.is_finite()),
            Just(0.0f32),
            Just(-0.0f32),
            Just(f32::MIN_POSITIVE),
            Just(-f32::MIN_POSITIVE),
            Just(f32::from_bits(1)),
            Just(f32::MAX),
            Just(f32::MIN),
        ]
    }

    proptest! {
        #[test]
        fn phi_is_monotone(x in finite_f32(), y in finite_f32()) {
            let (px, py) = (phi_encode(x).unwrap(), phi_encode(y).unwrap());
            if x < y { prop_assert!(px < py); }
            if x > y { prop_assert!(px > py); }
            // -0.0 == 0.0 but their encodings differ by one; only strictly
            // ordered pairs and bit-identical pairs are constrained.
            if x.to_bits() == y.to_bits() { prop_assert_eq!(px, py); }
        }

        #[test]
        fn packed_order_matches_pair_sort(scores in proptest::collection::vec(0u8..6, 1..40)) {
            let s: Vec<f32> = scores.iter().map(|&x| x as f32 * 0.25).collect();
            let mut pairs: Vec<(f32, usize)> = s.iter().copied().zip(0..).collect();
            pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let expect: Vec<usize> = pairs.into_iter().map(|p| p.1).collect();
            prop_assert_eq!(ranked_blocks(&s).unwrap(), expect);
        }

        #[test]
        fn scale_invariant(scores in proptest::collection::vec(0.0f32..10.0, 1..64), c in 0.125f32..8.0) {
            // Power-of-two scales are exact in binary floating point.
            let c = 2f32.powi(c.log2().round() as i32);
            let config = cfg(0.8, 4, 2, 3);
            let n = scores.len() * 4 - 1;
            let a = top_p_select(&scores, &config, n).unwrap();
            let scaled: Vec<f32> = scores.iter().map(|x| x * c).collect();
            let b = top_p_select(&scaled, &config, n).unwrap();
            prop_assert_eq!(a.keep_mask, b.keep_mask);
        }

        #[test]
        fn minimal_prefix(scores in proptest::collection::vec(0.001f32..1.0, 2..64), p in 0.05f64..0.99) {
            let config = cfg(p, 1, 0, 0);
            let s = top_p_select(&scores, &config, scores.len()).unwrap();
            let total: f64 = scores.iter().map(|&x| x as f64).sum();
            let order = ranked_blocks(&scores).unwrap();
            let kept: f64 = order[..s.cutoff_rank].iter().map(|&g| scores[g] as f64).sum();
            prop_assert!(kept / total >= p);
            let without_last: f64 = order[..s.cutoff_rank - 1].iter().map(|&g| scores[g] as f64).sum();
            prop_assert!(without_last / total < p);
            prop_assert!(s.covered_mass >= p - 1e-12);
        }
    }
}
