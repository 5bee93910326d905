//! Workload files: request lists with arrival steps, and a seeded generator.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::importance::ScoreConfig;
use crate::model::Model;
use crate::scheduler::Request;
use crate::synth::{self, ContentKind, LowEntropySpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadItem {
    pub arrival_step: usize,
    pub prompt_length: usize,
    pub max_new_tokens: usize,
    pub content_kind: ContentKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub needle_depths: Option<Vec<f64>>,
}

pub fn load_workload(path: impl AsRef<Path>) -> Result<Vec<WorkloadItem>> {
    let items: Vec<WorkloadItem> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    validate(&items)?;
    Ok(items)
}

pub fn validate(items: &[WorkloadItem]) -> Result<()> {
    for (i, w) in items.iter().enumerate() {
        if w.prompt_length == 0 || w.max_new_tokens == 0 {
            return Err(config_err(format!("workload item {i} needs a prompt and at least one new token")));
        }
        if w.content_kind == ContentKind::Needle && w.needle_depths.as_ref().is_none_or(|d| d.is_empty()) {
            return Err(config_err(format!("workload item {i} is a needle prompt without needle_depths")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArrivalPattern {
    /// Exponential inter-arrival gaps with `rate` requests per step.
    Poisson { rate: f64 },
    Fixed { interval: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub seed: u64,
    pub num_requests: usize,
    pub arrival: ArrivalPattern,
    /// Each request draws one length uniformly from this list.
    pub prompt_lengths: Vec<usize>,
    pub max_new_tokens: usize,
    /// Each request draws one kind uniformly from this list.
    pub content_kinds: Vec<ContentKind>,
    #[serde(default)]
    pub needle_depths: Vec<f64>,
}

pub fn gen_workload(spec: &WorkloadSpec) -> Result<Vec<WorkloadItem>> {
    if spec.prompt_lengths.is_empty() || spec.content_kinds.is_empty() {
        return Err(config_err("prompt_lengths and content_kinds must be non-empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gap = match spec.arrival {
        ArrivalPattern::Poisson { rate } => {
            Some(Exp::new(rate).map_err(|e| config_err(format!("poisson rate {rate}: {e}")))?)
        }
        ArrivalPattern::Fixed { .. } => None,
    };
    let mut clock = 0.0f64;
    let mut items = Vec::with_capacity(spec.num_requests);
    for i in 0..spec.num_requests {
        let arrival_step = match (&gap, spec.arrival) {
            (Some(exp), _) => {
                if i > 0 {
                    clock += exp.sample(&mut rng);
                }
                clock as usize
            }
            (None, ArrivalPattern::Fixed { interval }) => i * interval,
            (None, _) => unreachable!("poisson always has a gap distribution"),
        };
        let prompt_length = spec.prompt_lengths[rng.gen_range(0..spec.prompt_lengths.len())];
        let content_kind = spec.content_kinds[rng.gen_range(0..spec.content_kinds.len())];
        let needle = content_kind == ContentKind::Needle;
        if needle && spec.needle_depths.is_empty() {
            return Err(config_err("needle content requires needle_depths"));
        }
        items.push(WorkloadItem {
            arrival_step,
            prompt_length,
            max_new_tokens: spec.max_new_tokens,
            content_kind,
            seed: Some(rng.gen()),
            needle_depths: needle.then(|| spec.needle_depths.clone()),
        });
    }
    Ok(items)
}

pub fn to_json(items: &[WorkloadItem]) -> Result<String> {
    Ok(serde_json::to_string_pretty(items)? + "\n")
}

/// Prompt states for a workload item. Low-entropy and needle prompts are
/// aligned with the first layer's query window.
pub fn materialize(model: &Model, item: &WorkloadItem, index: usize, score: &ScoreConfig) -> Result<crate::tensor::HiddenStates> {
    let seed = item.seed.unwrap_or(index as u64);
    let n = item.prompt_length;
    match item.content_kind {
        ContentKind::Random => Ok(synth::random_states(n, model.config().hidden_dim, seed)),
        ContentKind::LowEntropy => {
            let spec = LowEntropySpec {
                hot_fraction: 0.05,
                block_size: score.block_size_g,
                sinks: score.sink_count_a,
                window: score.query_window_n,
                seed,
            };
            Ok(synth::low_entropy_states(model, n, &spec)?.0)
        }
        ContentKind::Needle => {
            let depths = item.needle_depths.as_deref().unwrap_or(&[0.5]);
            let pos = synth::needle_positions(n, depths);
            synth::needle_states(model, n, &pos, score.query_window_n, 1.0, seed)
        }
    }
}

pub fn build_requests(model: &Model, items: &[WorkloadItem], score: &ScoreConfig) -> Result<Vec<Request>> {
    items
        .iter()
        .enumerate()
        .map(|(i, w)| {
            Ok(Request {
                id: i as u64,
                arrival_step: w.arrival_step,
                prompt: materialize(model, w, i, score)?,
                max_new_tokens: w.max_new_tokens,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> WorkloadSpec {
        WorkloadSpec {
            seed,
            num_requests: 4,
            arrival: ArrivalPattern::Poisson { rate: 0.5 },
            prompt_lengths: vec![64, 128],
            max_new_tokens: 3,
            content_kinds: vec![ContentKind::Random, ContentKind::Needle],
            needle_depths: vec![0.25],
        }
    }

    #[test]
    fn fixed_seed_is_byte_identical() {
        let a = to_json(&gen_workload(&spec(7)).unwrap()).unwrap();
        let b = to_json(&gen_workload(&spec(7)).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, to_json(&gen_workload(&spec(8)).unwrap()).unwrap());
    }

    #[test]
    fn poisson_arrivals_are_reproducible_and_sorted() {
        let w = gen_workload(&spec(3)).unwrap();
        assert_eq!(w.len(), 4);
        assert_eq!(w[0].arrival_step, 0);
        assert!(w.windows(2).all(|p| p[0].arrival_step <= p[1].arrival_step));
        let again: Vec<usize> = gen_workload(&spec(3)).unwrap().iter().map(|i| i.arrival_step).collect();
        assert_eq!(again, w.iter().map(|i| i.arrival_step).collect::<Vec<_>>());
    }

    #[test]
    fn needle_items_carry_depths() {
        let w = gen_workload(&spec(5)).unwrap();
        for i in &w {
            assert_eq!(i.needle_depths.is_some(), i.content_kind == ContentKind::Needle);
        }
        validate(&w).unwrap();
    }

    #[test]
    fn roundtrip_json() {
        let w = gen_workload(&spec(1)).unwrap();
        let back: Vec<WorkloadItem> = serde_json::from_str(&to_json(&w).unwrap()).unwrap();
        assert_eq!(back, w);
    }
}
