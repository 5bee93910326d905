//! Workload runs and their JSON / plain-text reports.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::flops::{validate_savings, FlopsLedger, SavingsReport, COUNTING_CONVENTIONS};
use crate::importance::ScoreConfig;
use crate::kvcache::LayerCacheStats;
use crate::model::{Model, ModelConfig};
use crate::pipeline::{DropPolicy, Mode};
use crate::scheduler::{RequestState, Scheduler, SchedulerConfig, SeqUsedAudit};
use crate::workload::{build_requests, WorkloadItem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineEcho {
    pub model: ModelConfig,
    pub score: ScoreConfig,
    pub mode: Mode,
    pub tp: usize,
    pub token_budget: usize,
    pub weight_checksum: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropSummary {
    pub layer: usize,
    pub incoming: usize,
    pub retained: usize,
    pub retention_ratio: f64,
    /// Kept fraction of block-score mass at this drop.
    pub covered_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: u64,
    pub prompt_length: usize,
    pub arrival_step: usize,
    pub first_token_step: usize,
    pub ttft_steps: usize,
    pub ttft_seconds: f64,
    pub finish_step: usize,
    pub latency_seconds: f64,
    pub generated: Vec<u32>,
    pub tokens_per_second: f64,
    pub drops: Vec<DropSummary>,
    pub flops_dense: u64,
    pub flops_accelerated: u64,
    pub flops_scoring: u64,
}

impl RequestRecord {
    pub fn total_tokens(&self) -> usize {
        self.prompt_length + self.generated.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub requests: usize,
    pub prompt_tokens: usize,
    pub generated_tokens: usize,
    pub mean_ttft_steps: f64,
    pub mean_ttft_seconds: f64,
    pub mean_retention: f64,
    pub flops_dense: u64,
    pub flops_accelerated: u64,
    pub flops_scoring: u64,
    /// Smallest kept score mass over every drop event; 1 without drops.
    pub min_covered_mass: f64,
    pub by_length: Vec<LengthAggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthAggregate {
    pub prompt_length: usize,
    pub requests: usize,
    pub mean_ttft_steps: f64,
    pub mean_tokens_per_second: f64,
    pub mean_retention: f64,
}

fn mean_or(xs: impl Iterator<Item = f64>, empty: f64) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        empty
    } else {
        sum / n as f64
    }
}

impl Aggregate {
    pub fn from_records(records: &[RequestRecord]) -> Self {
        let n = records.len().max(1) as f64;
        let drops: Vec<f64> = records
            .iter()
            .flat_map(|r| r.drops.iter().map(|d| d.retention_ratio))
            .collect();
        Self {
            requests: records.len(),
            prompt_tokens: records.iter().map(|r| r.prompt_length).sum(),
            generated_tokens: records.iter().map(|r| r.generated.len()).sum(),
            mean_ttft_steps: records.iter().map(|r| r.ttft_steps as f64).sum::<f64>() / n,
            mean_ttft_seconds: records.iter().map(|r| r.ttft_seconds).sum::<f64>() / n,
            mean_retention: if drops.is_empty() {
                1.0
            } else {
                drops.iter().sum::<f64>() / drops.len() as f64
            },
            flops_dense: records.iter().map(|r| r.flops_dense).sum(),
            flops_accelerated: records.iter().map(|r| r.flops_accelerated).sum(),
            flops_scoring: records.iter().map(|r| r.flops_scoring).sum(),
            min_covered_mass: records
                .iter()
                .flat_map(|r| r.drops.iter().map(|d| d.covered_mass))
                .fold(1.0, f64::min),
            by_length: by_length(records),
        }
    }
}

fn by_length(records: &[RequestRecord]) -> Vec<LengthAggregate> {
    let mut lengths: Vec<usize> = records.iter().map(|r| r.prompt_length).collect();
    lengths.sort_unstable();
    lengths.dedup();
    lengths
        .into_iter()
        .map(|len| {
            let group = || records.iter().filter(move |r| r.prompt_length == len);
            LengthAggregate {
                prompt_length: len,
                requests: group().count(),
                mean_ttft_steps: mean_or(group().map(|r| r.ttft_steps as f64), 0.0),
                mean_tokens_per_second: mean_or(group().map(|r| r.tokens_per_second), 0.0),
                mean_retention: mean_or(group().flat_map(|r| r.drops.iter().map(|d| d.retention_ratio)), 1.0),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub engine: EngineEcho,
    pub flops_conventions: String,
    pub requests: Vec<RequestRecord>,
    pub aggregate: Aggregate,
    pub wall_seconds: f64,
    pub throughput_tokens_per_second: f64,
    pub steps: usize,
    pub flops_audit: Option<Vec<SavingsReport>>,
    pub seqused: SeqUsedAudit,
    pub cache: Vec<LayerCacheStats>,
    pub pages_allocated: usize,
    pub events: Vec<crate::scheduler::StepEvent>,
}

impl RunReport {
    /// Aggregates match a recomputation from the per-request records.
    pub fn aggregates_consistent(&self) -> bool {
        Aggregate::from_records(&self.requests) == self.aggregate
    }

    /// Every audit the run performed passed.
    pub fn audits_passed(&self) -> bool {
        self.seqused.failures.is_empty()
            && self.aggregates_consistent()
            && self
                .flops_audit
                .as_ref()
                .is_none_or(|a| a.iter().all(SavingsReport::passed))
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "mode={} tp={} requests={} steps={} wall={:.3}s throughput={:.1} tok/s",
            self.engine.mode.name(),
            self.engine.tp,
            self.aggregate.requests,
            self.steps,
            self.wall_seconds,
            self.throughput_tokens_per_second
        );
        let _ = writeln!(s, "flops: {}", self.flops_conventions);
        let _ = writeln!(
            s,
            "{:>4} {:>7} {:>7} {:>9} {:>10} {:>8} {:>10} {:>14} {:>14}",
            "id", "prompt", "arrive", "ttft_stp", "ttft_ms", "gen", "tok/s", "flops_dense", "flops_accel"
        );
        for r in &self.requests {
            let _ = writeln!(
                s,
                "{:>4} {:>7} {:>7} {:>9} {:>10.2} {:>8} {:>10.1} {:>14} {:>14}",
                r.id,
                r.prompt_length,
                r.arrival_step,
                r.ttft_steps,
                r.ttft_seconds * 1e3,
                r.generated.len(),
                r.tokens_per_second,
                r.flops_dense,
                r.flops_accelerated
            );
            for d in &r.drops {
                let _ = writeln!(
                    s,
                    "       drop layer {:>3}: {:>6} -> {:>6} (rho {:.3})",
                    d.layer, d.incoming, d.retained, d.retention_ratio
                );
            }
        }
        let a = &self.aggregate;
        let _ = writeln!(
            s,
            "total prompt={} generated={} mean_ttft={:.2} steps / {:.2} ms mean_rho={:.3} flops {} -> {} (+{} scoring)",
            a.prompt_tokens,
            a.generated_tokens,
            a.mean_ttft_steps,
            a.mean_ttft_seconds * 1e3,
            a.mean_retention,
            a.flops_dense,
            a.flops_accelerated,
            a.flops_scoring
        );
        let _ = writeln!(s, "min covered score mass over drops: {:.4}", a.min_covered_mass);
        for c in &a.by_length {
            let _ = writeln!(
                s,
                "  length {:>6}: {} requests, mean ttft {:.2} steps, {:.1} tok/s, rho {:.3}",
                c.prompt_length, c.requests, c.mean_ttft_steps, c.mean_tokens_per_second, c.mean_retention
            );
        }
        if let Some(audit) = &self.flops_audit {
            let ok = audit.iter().filter(|r| r.passed()).count();
            let _ = writeln!(s, "flops audit: {ok}/{} requests match the savings formula", audit.len());
        }
        let _ = writeln!(
            s,
            "seqused audit: {} checks, {} failures",
            self.seqused.checks,
            self.seqused.failures.len()
        );
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub mode: Mode,
    pub tp: usize,
    pub token_budget: usize,
    pub flops_audit: bool,
    pub max_steps: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Accelerated,
            tp: 1,
            token_budget: 8192,
            flops_audit: false,
            max_steps: 1_000_000,
        }
    }
}

fn record(r: &RequestState, model: &ModelConfig) -> RequestRecord {
    let dense = FlopsLedger::dense(model, r.prompt_len);
    let ttft_seconds = r.ttft.map_or(0.0, |d| d.as_secs_f64());
    let latency = r.latency.map_or(0.0, |d| d.as_secs_f64());
    let first = r.first_token_step.unwrap_or(r.arrival_step);
    RequestRecord {
        id: r.id,
        prompt_length: r.prompt_len,
        arrival_step: r.arrival_step,
        first_token_step: first,
        ttft_steps: first + 1 - r.arrival_step,
        ttft_seconds,
        finish_step: r.finish_step.unwrap_or(first),
        latency_seconds: latency,
        generated: r.generated.clone(),
        tokens_per_second: if latency > 0.0 {
            (r.prompt_len + r.generated.len()) as f64 / latency
        } else {
            0.0
        },
        drops: r
            .selections
            .iter()
            .map(|e| DropSummary {
                layer: e.layer,
                incoming: e.positions.len(),
                retained: e.selection.num_retained(),
                retention_ratio: e.selection.retention_ratio,
                covered_mass: e.selection.covered_mass,
            })
            .collect(),
        flops_dense: dense.total(),
        flops_accelerated: r.ledger.as_ref().map_or(dense.total(), FlopsLedger::total),
        flops_scoring: r.ledger.as_ref().map_or(0, |l| l.scoring_flops),
    }
}

/// Run a workload to completion under the continuous-batching scheduler.
pub fn run_workload(model: &Model, items: &[WorkloadItem], score: &ScoreConfig, opts: &RunOptions) -> Result<RunReport> {
    let requests = build_requests(model, items, score)?;
    let policy = (opts.mode == Mode::Accelerated).then(|| DropPolicy::new(*score).with_tp(opts.tp));
    if opts.mode == Mode::Dense {
        crate::tp_sim::shard_heads(model.config().num_heads, opts.tp)?;
    }
    let config = SchedulerConfig {
        token_budget: opts.token_budget,
        policy,
    };
    let mut sched = Scheduler::new(model, config, requests)?;
    let start = Instant::now();
    sched.run_to_completion(opts.max_steps)?;
    let wall = start.elapsed().as_secs_f64();
    let steps = sched.current_step();
    let seqused = sched.seqused_audit().clone();
    let cache = sched.cache().stats();
    let pages = sched.cache().pages_allocated();
    let events = sched.events().to_vec();
    let finished = sched.into_finished();

    let flops_audit = if opts.flops_audit {
        let mut out = Vec::new();
        for r in &finished {
            let dense = FlopsLedger::dense(model.config(), r.prompt_len);
            let accel = r.ledger.clone().unwrap_or_else(|| dense.clone());
            let mut rep = validate_savings(&dense, &accel)?;
            if let Some(h) = &r.history {
                rep.formula_matches &= accel.matches_history(h);
            }
            out.push(rep);
        }
        Some(out)
    } else {
        None
    };
    let records: Vec<RequestRecord> = finished.iter().map(|r| record(r, model.config())).collect();
    let aggregate = Aggregate::from_records(&records);
    let total_tokens: usize = records.iter().map(RequestRecord::total_tokens).sum();
    Ok(RunReport {
        engine: EngineEcho {
            model: model.config().clone(),
            score: *score,
            mode: opts.mode,
            tp: opts.tp,
            token_budget: opts.token_budget,
            weight_checksum: model.weight_checksum(),
        },
        flops_conventions: COUNTING_CONVENTIONS.to_string(),
        requests: records,
        aggregate,
        wall_seconds: wall,
        throughput_tokens_per_second: if wall > 0.0 { total_tokens as f64 / wall } else { 0.0 },
        steps,
        flops_audit,
        seqused,
        cache,
        pages_allocated: pages,
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::ContentKind;

    fn items() -> Vec<WorkloadItem> {
        (0..3)
            .map(|i| WorkloadItem {
                arrival_step: i,
                prompt_length: 48 + 16 * i,
                max_new_tokens: 3,
                content_kind: ContentKind::Random,
                seed: Some(i as u64),
                needle_depths: None,
            })
            .collect()
    }

    fn score() -> ScoreConfig {
        ScoreConfig {
            query_window_n: 8,
            block_size_g: 8,
            sink_count_a: 8,
            top_p: 0.8,
        }
    }

    #[test]
    fn report_aggregates_recompute() {
        let model = Model::build(ModelConfig::pure_full(2, 16, 2, 1)).unwrap();
        let opts = RunOptions {
            flops_audit: true,
            ..Default::default()
        };
        let r = run_workload(&model, &items(), &score(), &opts).unwrap();
        assert_eq!(r.requests.len(), 3);
        assert!(r.aggregates_consistent());
        assert!(r.audits_passed(), "{}", r.render_table());
        assert!(r.aggregate.flops_accelerated <= r.aggregate.flops_dense);
        let table = r.render_table();
        assert!(table.contains("flops audit: 3/3"));
        let json = serde_json::to_string(&r).unwrap();
        let back: RunReport = serde_json::from_str(&json).unwrap();
        assert!(back.aggregates_consistent());
    }

    #[test]
    fn dense_mode_saves_nothing() {
        let model = Model::build(ModelConfig::pure_full(1, 16, 2, 1)).unwrap();
        let opts = RunOptions {
            mode: Mode::Dense,
            flops_audit: true,
            ..Default::default()
        };
        let r = run_workload(&model, &items(), &score(), &opts).unwrap();
        assert_eq!(r.aggregate.flops_dense, r.aggregate.flops_accelerated);
        assert!(r.requests.iter().all(|q| q.drops.is_empty()));
    }
}
