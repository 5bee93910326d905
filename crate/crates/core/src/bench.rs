//! Prefill throughput grid over context lengths, batch sizes and modes.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::importance::ScoreConfig;
use crate::model::{Model, ModelConfig, SublayerKind};
use crate::pipeline::{run_batch, DropPolicy, Mode, SegmentInput};
use crate::scheduler::Phase;
use crate::synth::ContentKind;
use crate::workload::{materialize, WorkloadItem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub model: ModelConfig,
    pub score: ScoreConfig,
    pub lengths: Vec<usize>,
    pub batches: Vec<usize>,
    pub modes: Vec<Mode>,
    #[serde(default = "default_reps")]
    pub repetitions: usize,
    pub content: ContentKind,
    #[serde(default)]
    pub seed: u64,
    /// Cells whose estimated footprint exceeds this are skipped.
    #[serde(default = "default_max_bytes")]
    pub max_cell_bytes: usize,
}

fn default_reps() -> usize {
    3
}

fn default_max_bytes() -> usize {
    2 << 30
}

impl BenchConfig {
    /// Single-block, all-full-attention model on low-entropy prompts.
    pub fn desk_default() -> Self {
        Self {
            model: bench_model_config(),
            score: ScoreConfig {
                query_window_n: 128,
                block_size_g: 64,
                sink_count_a: 128,
                top_p: 0.9,
            },
            lengths: vec![512, 1024, 2048, 4096, 8192],
            batches: vec![1, 4, 16],
            modes: vec![Mode::Dense, Mode::Accelerated],
            repetitions: 3,
            content: ContentKind::LowEntropy,
            seed: 0,
            max_cell_bytes: default_max_bytes(),
        }
    }
}

pub fn bench_model_config() -> ModelConfig {
    use SublayerKind::FullAttention;
    let mut c = ModelConfig::with_pattern(1, vec![FullAttention; 4], 32, 4, 7);
    c.init_std = 0.3;
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellStatus {
    Completed {
        seconds: Vec<f64>,
        median_seconds: f64,
        tokens_per_second: f64,
        flops: u64,
        scoring_flops: u64,
        mean_retention: f64,
    },
    Skipped {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub length: usize,
    pub batch: usize,
    pub mode: Mode,
    #[serde(flatten)]
    pub status: CellStatus,
    /// Throughput relative to the dense cell of the same shape.
    pub speedup: Option<f64>,
}

impl BenchCell {
    pub fn tokens_per_second(&self) -> Option<f64> {
        match &self.status {
            CellStatus::Completed { tokens_per_second, .. } => Some(*tokens_per_second),
            CellStatus::Skipped { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub cells: Vec<BenchCell>,
}

impl BenchReport {
    pub fn cell(&self, length: usize, batch: usize, mode: Mode) -> Option<&BenchCell> {
        self.cells
            .iter()
            .find(|c| c.length == length && c.batch == batch && c.mode == mode)
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>7} {:>6} {:>11} {:>12} {:>14} {:>8} {:>8}",
            "length", "batch", "mode", "median_s", "tok/s", "rho", "speedup"
        );
        for c in &self.cells {
            match &c.status {
                CellStatus::Completed {
                    median_seconds,
                    tokens_per_second,
                    mean_retention,
                    ..
                } => {
                    let _ = writeln!(
                        s,
                        "{:>7} {:>6} {:>11} {:>12.4} {:>14.1} {:>8.3} {:>7}",
                        c.length,
                        c.batch,
                        c.mode.name(),
                        median_seconds,
                        tokens_per_second,
                        mean_retention,
                        c.speedup.map_or("-".to_string(), |x| format!("{x:.2}x"))
                    );
                }
                CellStatus::Skipped { reason } => {
                    let _ = writeln!(s, "{:>7} {:>6} {:>11}   skipped: {reason}", c.length, c.batch, c.mode.name());
                }
            }
        }
        s
    }
}

/// Rough peak bytes of one cell: states, KV pages for every layer, and a
/// per-head key/value panel.
pub fn estimate_cell_bytes(model: &ModelConfig, length: usize, batch: usize) -> usize {
    let d = model.hidden_dim;
    let tokens = length * batch;
    let states = 6 * tokens * d * 4;
    let kv = model.num_layers() * tokens * 2 * d * 4 * 2;
    let panels = 2 * length * d * 4;
    states + kv + panels
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Time one cell: `batch` prompts of `length` rows prefilled together.
pub fn run_cell(model: &Model, cfg: &BenchConfig, length: usize, batch: usize, mode: Mode) -> Result<CellStatus> {
    let need = estimate_cell_bytes(model.config(), length, batch);
    if need > cfg.max_cell_bytes {
        return Ok(CellStatus::Skipped {
            reason: format!("needs ~{} MiB, limit {} MiB", need >> 20, cfg.max_cell_bytes >> 20),
        });
    }
    let prompts = (0..batch)
        .map(|i| {
            let item = WorkloadItem {
                arrival_step: 0,
                prompt_length: length,
                max_new_tokens: 1,
                content_kind: cfg.content,
                seed: Some(cfg.seed.wrapping_add(i as u64)),
                needle_depths: Some(vec![0.5]),
            };
            materialize(model, &item, i, &cfg.score)
        })
        .collect::<Result<Vec<_>>>()?;
    let policy = DropPolicy::new(cfg.score);
    let mut seconds = Vec::with_capacity(cfg.repetitions);
    let (mut flops, mut scoring, mut retention) = (0u64, 0u64, 1.0f64);
    for _ in 0..cfg.repetitions.max(1) {
        let segments: Vec<SegmentInput> = prompts
            .iter()
            .enumerate()
            .map(|(i, p)| SegmentInput {
                request: i as u64,
                phase: Phase::Prefill,
                states: p.clone(),
                positions: (0..length).collect(),
                history: None,
            })
            .collect();
        let mut cache = model.new_cache();
        let start = Instant::now();
        let out = run_batch(model, &mut cache, (mode == Mode::Accelerated).then_some(&policy), segments)?;
        seconds.push(start.elapsed().as_secs_f64());
        let ledgers: Vec<_> = out.segments.iter().filter_map(|s| s.ledger.as_ref()).collect();
        flops = ledgers.iter().map(|l| l.total()).sum();
        scoring = ledgers.iter().map(|l| l.scoring_flops).sum();
        let ratios: Vec<f64> = ledgers
            .iter()
            .flat_map(|l| l.drops.iter().map(|d| d.retention_ratio))
            .collect();
        retention = if ratios.is_empty() {
            1.0
        } else {
            ratios.iter().sum::<f64>() / ratios.len() as f64
        };
    }
    let median_seconds = median(&seconds);
    Ok(CellStatus::Completed {
        tokens_per_second: (length * batch) as f64 / median_seconds,
        median_seconds,
        seconds,
        flops,
        scoring_flops: scoring,
        mean_retention: retention,
    })
}

pub fn bench_grid(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.lengths.is_empty() || cfg.batches.is_empty() || cfg.modes.is_empty() {
        return Err(config_err("bench grid needs lengths, batches and modes"));
    }
    let model = Model::build(cfg.model.clone())?;
    let mut cells = Vec::new();
    for &length in &cfg.lengths {
        for &batch in &cfg.batches {
            for &mode in &cfg.modes {
                cells.push(BenchCell {
                    length,
                    batch,
                    mode,
                    status: run_cell(&model, cfg, length, batch, mode)?,
                    speedup: None,
                });
            }
        }
    }
    let dense: Vec<(usize, usize, Option<f64>)> = cells
        .iter()
        .filter(|c| c.mode == Mode::Dense)
        .map(|c| (c.length, c.batch, c.tokens_per_second()))
        .collect();
    for c in &mut cells {
        let base = dense
            .iter()
            .find(|(l, b, _)| *l == c.length && *b == c.batch)
            .and_then(|d| d.2);
        c.speedup = match (c.tokens_per_second(), base) {
            (Some(t), Some(b)) => Some(t / b),
            _ => None,
        };
    }
    Ok(BenchReport { config: cfg.clone(), cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BenchConfig {
        BenchConfig {
            model: ModelConfig::pure_full(1, 16, 2, 1),
            score: ScoreConfig {
                query_window_n: 8,
                block_size_g: 8,
                sink_count_a: 8,
                top_p: 0.9,
            },
            lengths: vec![64],
            batches: vec![1],
            modes: vec![Mode::Dense],
            repetitions: 3,
            content: ContentKind::Random,
            seed: 0,
            max_cell_bytes: default_max_bytes(),
        }
    }

    #[test]
    fn dense_self_baseline() {
        let r = bench_grid(&tiny()).unwrap();
        assert_eq!(r.cells.len(), 1);
        assert_eq!(r.cells[0].speedup, Some(1.0));
        assert!(r.render_table().contains("1.00x"));
    }

    #[test]
    fn counts_repeat_across_runs() {
        let mut cfg = tiny();
        cfg.modes = vec![Mode::Dense, Mode::Accelerated];
        let flops = |r: &BenchReport| -> Vec<u64> {
            r.cells
                .iter()
                .map(|c| match &c.status {
                    CellStatus::Completed { flops, .. } => *flops,
                    CellStatus::Skipped { .. } => 0,
                })
                .collect()
        };
        assert_eq!(flops(&bench_grid(&cfg).unwrap()), flops(&bench_grid(&cfg).unwrap()));
    }

    #[test]
    fn oversized_cell_is_skipped() {
        let mut cfg = tiny();
        cfg.max_cell_bytes = 1;
        let r = bench_grid(&cfg).unwrap();
        assert!(matches!(r.cells[0].status, CellStatus::Skipped { .. }));
        assert_eq!(r.cells[0].speedup, None);
    }

    #[test]
    fn median_of_three() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    }
}
