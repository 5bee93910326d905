//! Analytic FLOP counts per layer and the savings audit.
//!
//! Counting conventions (one multiply-add = 2 FLOPs):
//!
//! | layer            | count                                                   |
//! |------------------|---------------------------------------------------------|
//! | full attention   | `H * 2 * (2 n^2 d_k)` for `QK^T` and `AV`, plus `8 n d^2` |
//! | sliding window   | `H * 2 * (2 n min(n, w) d_k)`, plus `8 n d^2`            |
//! | linear attention | `H * 2 n d_k d_v` state update, plus `8 n d^2`           |
//! | FFN              | `4 n d f`                                                |
//!
//! Scoring overhead per drop event is `H * (2 n_q N d_k + 4 n_q N) + N` and
//! is kept out of the per-layer entries.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::model::{ModelConfig, SublayerKind};
use crate::propagation::DropHistory;

pub const COUNTING_CONVENTIONS: &str = "full: H*2*(2 n^2 d_k) + 8 n d^2; swa: H*2*(2 n min(n,w) d_k) + 8 n d^2; \
linear: H*2 n d_k d_v + 8 n d^2; ffn: 4 n d f; scoring per drop: H*(2 n_q N d_k + 4 n_q N) + N";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub hidden_dim: u64,
    pub head_dim: u64,
    pub num_heads: u64,
    pub window_size: u64,
    pub ffn_dim: u64,
}

impl From<&ModelConfig> for CostModel {
    fn from(c: &ModelConfig) -> Self {
        Self {
            hidden_dim: c.hidden_dim as u64,
            head_dim: c.head_dim as u64,
            num_heads: c.num_heads as u64,
            window_size: c.window_size as u64,
            ffn_dim: c.ffn_dim as u64,
        }
    }
}

impl CostModel {
    pub fn layer_flops(&self, kind: SublayerKind, tokens: usize) -> u64 {
        let n = tokens as u64;
        let (d, dk, h) = (self.hidden_dim, self.head_dim, self.num_heads);
        let proj = 8 * n * d * d;
        match kind {
            SublayerKind::FullAttention => h * 2 * (2 * n * n * dk) + proj,
            SublayerKind::SlidingWindowAttention => h * 2 * (2 * n * n.min(self.window_size) * dk) + proj,
            SublayerKind::LinearAttention => h * 2 * n * dk * dk + proj,
            SublayerKind::Ffn => 4 * n * d * self.ffn_dim,
        }
    }

    pub fn scoring_flops(&self, window: usize, tokens: usize) -> u64 {
        let (nq, n) = (window as u64, tokens as u64);
        self.num_heads * (2 * nq * n * self.head_dim + 4 * nq * n) + n
    }
}

/// FLOPs for one layer kind at `tokens_in` tokens under `config`'s dimensions.
pub fn layer_flops(kind: SublayerKind, tokens_in: usize, config: &ModelConfig) -> u64 {
    CostModel::from(config).layer_flops(kind, tokens_in)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub layer: usize,
    pub kind: SublayerKind,
    pub tokens: usize,
    pub flops: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropRecord {
    pub layer: usize,
    pub incoming: usize,
    pub retained: usize,
    pub retention_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunIdentity {
    pub config_fingerprint: u64,
    pub num_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsLedger {
    pub identity: RunIdentity,
    pub cost: CostModel,
    pub layers_per_block: usize,
    pub entries: Vec<LayerEntry>,
    pub drops: Vec<DropRecord>,
    pub scoring_flops: u64,
}

impl FlopsLedger {
    pub fn new(config: &ModelConfig, num_tokens: usize) -> Self {
        Self {
            identity: RunIdentity {
                config_fingerprint: config.fingerprint(),
                num_tokens,
            },
            cost: config.into(),
            layers_per_block: config.layers_per_block(),
            entries: Vec::new(),
            drops: Vec::new(),
            scoring_flops: 0,
        }
    }

    pub fn record_layer(&mut self, layer: usize, kind: SublayerKind, tokens: usize) {
        self.entries.push(LayerEntry {
            layer,
            kind,
            tokens,
            flops: self.cost.layer_flops(kind, tokens),
        });
    }

    pub fn record_drop(&mut self, layer: usize, incoming: usize, retained: usize, window: usize) {
        self.scoring_flops += self.cost.scoring_flops(window, incoming);
        self.drops.push(DropRecord {
            layer,
            incoming,
            retained,
            retention_ratio: retained as f64 / incoming as f64,
        });
    }

    /// Ledger of a run with no dropping.
    pub fn dense(config: &ModelConfig, num_tokens: usize) -> Self {
        let mut l = Self::new(config, num_tokens);
        for layer in 0..config.num_layers() {
            l.record_layer(layer, config.layer_kind(layer), num_tokens);
        }
        l
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.flops).sum()
    }

    pub fn total_with_scoring(&self) -> u64 {
        self.total() + self.scoring_flops
    }

    /// Per-layer token counts must agree with what the drop history implies.
    pub fn matches_history(&self, history: &DropHistory) -> bool {
        self.entries.iter().all(|e| e.tokens == history.tokens_at(e.layer))
            && self.drops.len() == history.events.len()
            && self
                .drops
                .iter()
                .zip(&history.events)
                .all(|(d, e)| d.layer == e.layer && d.retained == e.retained_length)
    }

    /// Savings predicted from the drop records: each drop at `l_k` taking
    /// the stream from `s_in` to `s_out` tokens saves
    /// `FLOPs_l(s_in) - FLOPs_l(s_out)` at every later layer of its block.
    /// For layers whose cost is linear in the token count this term equals
    /// `(1 - rho_k) * FLOPs_l(s_in)`.
    pub fn formula_savings(&self) -> u64 {
        let kinds: Vec<(usize, SublayerKind)> = self.entries.iter().map(|e| (e.layer, e.kind)).collect();
        let per = self.layers_per_block;
        self.drops
            .iter()
            .map(|d| {
                kinds
                    .iter()
                    .filter(|(l, _)| *l > d.layer && *l / per == d.layer / per)
                    .map(|&(_, k)| self.cost.layer_flops(k, d.incoming) - self.cost.layer_flops(k, d.retained))
                    .sum::<u64>()
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavingsReport {
    pub dense_total: u64,
    pub accelerated_total: u64,
    pub measured_savings: u64,
    pub formula_savings: u64,
    pub formula_matches: bool,
    pub scoring_overhead: u64,
    /// Net of scoring overhead; negative when scoring costs more than it saves.
    pub net_savings: i128,
    /// Single drop with uniform linear-cost downstream layers:
    /// `savings * N == (N - s) * layers_after * FLOPs(N)`.
    pub single_drop_linear_form: Option<bool>,
    /// `layers_after * N * d^2 / (N^2 * d_k)` for a single drop.
    pub gemm_to_attention_ratio: Option<f64>,
}

impl SavingsReport {
    pub fn passed(&self) -> bool {
        self.formula_matches && self.single_drop_linear_form != Some(false)
    }
}

/// Ratio of token-dropping GEMM savings to attention-only sparse savings.
pub fn gemm_to_attention_ratio(layers_after: usize, num_tokens: usize, hidden_dim: usize, head_dim: usize) -> f64 {
    let (l, n, d, dk) = (layers_after as f64, num_tokens as f64, hidden_dim as f64, head_dim as f64);
    (l * n * d * d) / (n * n * dk)
}

pub fn validate_savings(dense: &FlopsLedger, accel: &FlopsLedger) -> Result<SavingsReport> {
    if dense.identity != accel.identity || dense.cost != accel.cost {
        return Err(contract(format!(
            "ledgers belong to different runs: {:?} vs {:?}",
            dense.identity, accel.identity
        )));
    }
    let dense_total = dense.total();
    let accelerated_total = accel.total();
    if accelerated_total > dense_total {
        return Err(contract("accelerated run counted more FLOPs than dense"));
    }
    let measured = dense_total - accelerated_total;
    let formula = accel.formula_savings();

    let (mut linear_form, mut ratio) = (None, None);
    if let [d] = accel.drops.as_slice() {
        let after: Vec<&LayerEntry> = accel
            .entries
            .iter()
            .filter(|e| e.layer > d.layer && e.layer / accel.layers_per_block == d.layer / accel.layers_per_block)
            .collect();
        let n = d.incoming as u128;
        ratio = Some(gemm_to_attention_ratio(
            after.len(),
            d.incoming,
            accel.cost.hidden_dim as usize,
            accel.cost.head_dim as usize,
        ));
        let uniform_linear = after.first().is_some_and(|first| {
            after.iter().all(|e| e.kind == first.kind)
                && matches!(first.kind, SublayerKind::Ffn | SublayerKind::LinearAttention)
        });
        if uniform_linear {
            let per_layer = accel.cost.layer_flops(after[0].kind, d.incoming) as u128;
            let lhs = measured as u128 * n;
            let rhs = (n - d.retained as u128) * after.len() as u128 * per_layer;
            linear_form = Some(lhs == rhs);
        }
    }
    Ok(SavingsReport {
        dense_total,
        accelerated_total,
        measured_savings: measured,
        formula_savings: formula,
        formula_matches: measured == formula,
        scoring_overhead: accel.scoring_flops,
        net_savings: measured as i128 - accel.scoring_flops as i128,
        single_drop_linear_form: linear_form,
        gemm_to_attention_ratio: ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SublayerKind::*;

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::with_pattern(1, vec![FullAttention, Ffn, Ffn, Ffn], 64, 8, 0);
        c.ffn_dim = 256;
        c
    }

    #[test]
    fn layer_flops_examples() {
        let c = cfg();
        assert_eq!(layer_flops(Ffn, 0, &c), 0);
        assert_eq!(layer_flops(FullAttention, 0, &c), 0);
        assert_eq!(layer_flops(Ffn, 10, &c), 655_360);
        assert_eq!(layer_flops(Ffn, 20, &c), 2 * layer_flops(Ffn, 10, &c));
        let quad = |n| layer_flops(FullAttention, n, &c) - 8 * n as u64 * 64 * 64;
        assert_eq!(quad(20), 4 * quad(10));
    }

    #[test]
    fn swa_is_capped_by_window() {
        let mut c = cfg();
        c.window_size = 4;
        let attn = |n| layer_flops(SlidingWindowAttention, n, &c) - 8 * n as u64 * 64 * 64;
        assert_eq!(attn(100), 8 * 2 * 2 * 100 * 4 * 8);
        assert_eq!(attn(3), 8 * 2 * 2 * 3 * 3 * 8);
    }

    #[test]
    fn no_drops_no_savings() {
        let c = cfg();
        let r = validate_savings(&FlopsLedger::dense(&c, 100), &FlopsLedger::dense(&c, 100)).unwrap();
        assert_eq!(r.measured_savings, 0);
        assert!(r.passed());
    }

    #[test]
    fn single_drop_half_retention() {
        let c = cfg();
        let n = 100;
        let mut accel = FlopsLedger::new(&c, n);
        accel.record_layer(0, FullAttention, n);
        accel.record_drop(0, n, 50, 16);
        for l in 1..4 {
            accel.record_layer(l, Ffn, 50);
        }
        let dense = FlopsLedger::dense(&c, n);
        let r = validate_savings(&dense, &accel).unwrap();
        let per_layer = layer_flops(Ffn, n, &c);
        assert_eq!(r.measured_savings, per_layer * 3 / 2);
        assert!(r.formula_matches);
        assert_eq!(r.single_drop_linear_form, Some(true));
    }

    #[test]
    fn gemm_ratio_example() {
        let r = gemm_to_attention_ratio(7, 4096, 64, 8);
        assert!((r - 0.875).abs() < 1e-12);
    }

    #[test]
    fn mismatched_identity_rejected() {
        let c = cfg();
        assert!(validate_savings(&FlopsLedger::dense(&c, 10), &FlopsLedger::dense(&c, 11)).is_err());
    }
}
