//! Packed batches and the continuous-batching scheduler.

use std::collections::VecDeque;
use std::ops::Range;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{contract, EngineError, Result};
use crate::flops::FlopsLedger;
use crate::kvcache::{decode_seqused, PagedKVCache, RequestId};
use crate::model::Model;
use crate::pipeline::{run_batch, DropPolicy, SegmentInput};
use crate::propagation::DropHistory;
use crate::selection::Selection;
use crate::tensor::HiddenStates;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Prefill,
    Decode,
    Finished,
}

/// Batch layout as seen by one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMeta {
    pub layer: usize,
    pub query_start_loc: Vec<usize>,
    pub seq_lens: Vec<usize>,
    pub num_actual_tokens: usize,
}

/// Variable-length packed rows of several requests, indexed by `cu_seqlens`.
#[derive(Debug, Clone)]
pub struct PackedBatch {
    pub states: HiddenStates,
    /// Logical position of every row.
    pub positions: Vec<usize>,
    pub cu_seqlens: Vec<usize>,
    pub requests: Vec<RequestId>,
    pub phases: Vec<Phase>,
    pub layer_meta: Vec<LayerMeta>,
}

impl PackedBatch {
    pub fn pack<'a>(segments: impl IntoIterator<Item = (RequestId, Phase, &'a HiddenStates, &'a [usize])>) -> Result<Self> {
        let mut parts = Vec::new();
        let (mut requests, mut phases) = (Vec::new(), Vec::new());
        for (r, ph, s, p) in segments {
            if ph == Phase::Finished {
                return Err(contract(format!("request {r} is finished")));
            }
            requests.push(r);
            phases.push(ph);
            parts.push((s, p));
        }
        let Some(cols) = parts.first().map(|(s, _)| s.cols()) else {
            return Err(contract("packing zero segments"));
        };
        let mut cu = vec![0];
        let mut positions = Vec::new();
        for (s, p) in &parts {
            if s.rows() == 0 || s.rows() != p.len() || s.cols() != cols {
                return Err(contract("segment shape mismatch"));
            }
            cu.push(cu.last().unwrap() + s.rows());
            positions.extend_from_slice(p);
        }
        let states = HiddenStates::concat(cols, &parts.iter().map(|(s, _)| *s).collect::<Vec<_>>());
        Ok(Self {
            states,
            positions,
            cu_seqlens: cu,
            requests,
            phases,
            layer_meta: Vec::new(),
        })
    }

    pub fn num_requests(&self) -> usize {
        self.requests.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.states.rows()
    }

    pub fn segment_range(&self, r: usize) -> Range<usize> {
        self.cu_seqlens[r]..self.cu_seqlens[r + 1]
    }

    pub fn segment_len(&self, r: usize) -> usize {
        self.cu_seqlens[r + 1] - self.cu_seqlens[r]
    }

    pub fn segment_states(&self, r: usize) -> HiddenStates {
        let s = self.segment_range(r);
        self.states.slice_rows(s.start, s.end)
    }

    pub fn segment_positions(&self, r: usize) -> &[usize] {
        &self.positions[self.segment_range(r)]
    }

    pub fn write_segment(&mut self, r: usize, rows: &HiddenStates) -> Result<()> {
        let s = self.segment_range(r);
        if rows.rows() != s.len() {
            return Err(contract(format!("segment {r} holds {} rows, got {}", s.len(), rows.rows())));
        }
        let c = self.states.cols();
        self.states.as_mut_slice()[s.start * c..s.end * c].copy_from_slice(rows.as_slice());
        Ok(())
    }

    /// Snapshot the current layout as `layer`'s metadata.
    pub fn record_layer(&mut self, layer: usize) {
        self.layer_meta.push(LayerMeta {
            layer,
            query_start_loc: self.cu_seqlens.clone(),
            seq_lens: (0..self.num_requests()).map(|r| self.segment_len(r)).collect(),
            num_actual_tokens: self.num_tokens(),
        });
    }

    pub fn check_metadata(&self) -> Result<()> {
        let cu = &self.cu_seqlens;
        if cu.first() != Some(&0) || cu.windows(2).any(|w| w[0] >= w[1]) || *cu.last().unwrap() != self.num_tokens() {
            return Err(EngineError::Audit(format!("bad cu_seqlens {cu:?}")));
        }
        for m in &self.layer_meta {
            let sum: usize = m.seq_lens.iter().sum();
            if sum != m.num_actual_tokens || m.query_start_loc.last() != Some(&m.num_actual_tokens) {
                return Err(EngineError::Audit(format!("inconsistent metadata at layer {}", m.layer)));
            }
        }
        Ok(())
    }

    /// Rebuild rows and offsets from new per-segment contents.
    pub fn replace_segments(&mut self, parts: Vec<(HiddenStates, Vec<usize>)>) -> Result<()> {
        if parts.len() != self.num_requests() {
            return Err(contract("segment count changed"));
        }
        let cols = self.states.cols();
        let mut cu = vec![0];
        let mut positions = Vec::new();
        for (s, p) in &parts {
            cu.push(cu.last().unwrap() + s.rows());
            positions.extend_from_slice(p);
        }
        self.states = HiddenStates::concat(cols, &parts.iter().map(|(s, _)| s).collect::<Vec<_>>());
        self.positions = positions;
        self.cu_seqlens = cu;
        Ok(())
    }
}

/// Compact the rows of prefill segments that drop at `layer` and recompute
/// the offsets. `selections[r]` is `None` for segments left untouched.
pub fn patch_metadata(batch: PackedBatch, selections: &[Option<Selection>], layer: usize) -> Result<PackedBatch> {
    if selections.len() != batch.num_requests() {
        return Err(contract(format!(
            "{} selections for {} requests at layer {layer}",
            selections.len(),
            batch.num_requests()
        )));
    }
    let mut rows = Vec::with_capacity(batch.num_tokens());
    let mut cu = vec![0];
    for (r, sel) in selections.iter().enumerate() {
        let range = batch.segment_range(r);
        match sel {
            None => rows.extend(range),
            Some(s) => {
                if batch.phases[r] != Phase::Prefill {
                    return Err(contract(format!("drop at layer {layer} on a decode segment")));
                }
                if s.num_tokens() != range.len() {
                    return Err(contract(format!(
                        "selection over {} tokens for a segment of {}",
                        s.num_tokens(),
                        range.len()
                    )));
                }
                rows.extend(s.retained_indices.iter().map(|&i| range.start + i));
            }
        }
        cu.push(rows.len());
    }
    Ok(PackedBatch {
        states: batch.states.select_rows(&rows),
        positions: rows.iter().map(|&i| batch.positions[i]).collect(),
        cu_seqlens: cu,
        requests: batch.requests,
        phases: batch.phases,
        layer_meta: batch.layer_meta,
    })
}

/// Greedy token: argmax with ties to the lowest id.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best as u32
}

#[derive(Debug, Clone)]
pub struct Request {
    pub id: RequestId,
    pub arrival_step: usize,
    pub prompt: HiddenStates,
    pub max_new_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEvent {
    pub request: RequestId,
    pub step: usize,
    pub token: u32,
    pub phase: Phase,
}

#[derive(Debug, Clone)]
pub struct RequestState {
    pub id: RequestId,
    pub prompt_len: usize,
    pub phase: Phase,
    pub history: Option<DropHistory>,
    pub generated: Vec<u32>,
    pub arrival_step: usize,
    pub max_new_tokens: usize,
    /// Logits behind every generated token.
    pub logits: Vec<Vec<f32>>,
    pub ledger: Option<FlopsLedger>,
    pub selections: Vec<crate::pipeline::SelectionEvent>,
    pub first_token_step: Option<usize>,
    pub finish_step: Option<usize>,
    pub ttft: Option<Duration>,
    pub latency: Option<Duration>,
    prompt: Option<HiddenStates>,
    arrived_at: Option<Instant>,
}

impl RequestState {
    fn new(r: Request) -> Self {
        Self {
            id: r.id,
            prompt_len: r.prompt.rows(),
            phase: Phase::Prefill,
            history: None,
            generated: Vec::new(),
            arrival_step: r.arrival_step,
            max_new_tokens: r.max_new_tokens,
            logits: Vec::new(),
            ledger: None,
            selections: Vec::new(),
            first_token_step: None,
            finish_step: None,
            ttft: None,
            latency: None,
            prompt: Some(r.prompt),
            arrived_at: None,
        }
    }

    fn advance(&mut self, to: Phase) -> Result<()> {
        let ok = matches!(
            (self.phase, to),
            (Phase::Prefill, Phase::Decode) | (Phase::Prefill, Phase::Finished) | (Phase::Decode, Phase::Finished)
        );
        if !ok {
            return Err(contract(format!("request {}: {:?} -> {:?}", self.id, self.phase, to)));
        }
        self.phase = to;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SchedulerConfig {
    pub token_budget: usize,
    /// `None` runs dense prefill.
    pub policy: Option<DropPolicy>,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            token_budget: 8192,
            policy: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct StepOutput {
    pub step: usize,
    pub events: Vec<StepEvent>,
    pub batch_tokens: usize,
    pub prefills: usize,
    pub decodes: usize,
}

/// Outcome of the per-(layer, request, step) KV length audit.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqUsedAudit {
    pub checks: usize,
    pub failures: Vec<String>,
}

pub struct Scheduler<'m> {
    model: &'m Model,
    config: SchedulerConfig,
    cache: PagedKVCache,
    step: usize,
    pending: VecDeque<Request>,
    waiting: VecDeque<RequestState>,
    running: Vec<RequestState>,
    finished: Vec<RequestState>,
    events: Vec<StepEvent>,
    audit: SeqUsedAudit,
}

impl<'m> Scheduler<'m> {
    pub fn new(model: &'m Model, config: SchedulerConfig, mut requests: Vec<Request>) -> Result<Self> {
        if config.token_budget == 0 {
            return Err(crate::error::config_err("token budget must be positive"));
        }
        if let Some(p) = &config.policy {
            p.resolve(model)?;
        }
        for r in &requests {
            if r.max_new_tokens == 0 || r.prompt.rows() == 0 {
                return Err(crate::error::config_err(format!(
                    "request {} needs a prompt and at least one new token",
                    r.id
                )));
            }
        }
        requests.sort_by_key(|r| (r.arrival_step, r.id));
        Ok(Self {
            model,
            config,
            cache: model.new_cache(),
            step: 0,
            pending: requests.into(),
            waiting: VecDeque::new(),
            running: Vec::new(),
            finished: Vec::new(),
            events: Vec::new(),
            audit: SeqUsedAudit::default(),
        })
    }

    pub fn current_step(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.pending.is_empty() && self.waiting.is_empty() && self.running.is_empty()
    }

    pub fn cache(&self) -> &PagedKVCache {
        &self.cache
    }

    pub fn events(&self) -> &[StepEvent] {
        &self.events
    }

    pub fn seqused_audit(&self) -> &SeqUsedAudit {
        &self.audit
    }

    pub fn finished(&self) -> &[RequestState] {
        &self.finished
    }

    pub fn into_finished(mut self) -> Vec<RequestState> {
        self.finished.sort_by_key(|r| r.id);
        self.finished
    }

    /// One engine step: admit arrivals, pack decodes then FCFS prefills
    /// within the token budget, and run every layer once.
    pub fn step(&mut self) -> Result<StepOutput> {
        let now = Instant::now();
        while self.pending.front().is_some_and(|r| r.arrival_step <= self.step) {
            let mut s = RequestState::new(self.pending.pop_front().unwrap());
            s.arrived_at = Some(now);
            self.waiting.push_back(s);
        }
        let step = self.step;
        self.step += 1;
        let mut out = StepOutput {
            step,
            ..Default::default()
        };
        if self.waiting.is_empty() && self.running.is_empty() {
            return Ok(out);
        }

        let mut budget = self.config.token_budget;
        let mut segments = Vec::new();
        let mut decode_ids = Vec::new();
        for s in &self.running {
            if budget == 0 {
                break;
            }
            budget -= 1;
            let last = *s.generated.last().expect("decoding request has a token");
            let pos = s.prompt_len + s.generated.len() - 1;
            segments.push(SegmentInput {
                request: s.id,
                phase: Phase::Decode,
                states: HiddenStates::from_rows(self.model.config().hidden_dim, &[self.model.embed(last)])?,
                positions: vec![pos],
                history: s.history.clone(),
            });
            decode_ids.push(s.id);
        }
        let mut prefills = Vec::new();
        while let Some(front) = self.waiting.front() {
            let fits = front.prompt_len <= budget;
            let alone = segments.is_empty() && prefills.is_empty();
            if !fits && !alone {
                break;
            }
            let mut s = self.waiting.pop_front().unwrap();
            budget = budget.saturating_sub(s.prompt_len);
            let prompt = s.prompt.take().expect("prompt present before prefill");
            segments.push(SegmentInput {
                request: s.id,
                phase: Phase::Prefill,
                positions: (0..prompt.rows()).collect(),
                states: prompt,
                history: None,
            });
            prefills.push(s);
        }
        out.batch_tokens = segments.iter().map(|s| s.states.rows()).sum();
        out.prefills = prefills.len();
        out.decodes = decode_ids.len();

        let result = run_batch(self.model, &mut self.cache, self.config.policy.as_ref(), segments)?;
        if self.cache.audit().unwritten_reads > 0 {
            return Err(EngineError::Audit(format!(
                "{} reads of never-written KV slots",
                self.cache.audit().unwritten_reads
            )));
        }
        let done_at = Instant::now();
        let mut prefills = prefills.into_iter();
        for seg in result.segments {
            let last = seg.states.row(seg.states.rows() - 1);
            let logits = self.model.logits(last);
            let token = argmax(&logits);
            let state = match seg.phase {
                Phase::Prefill => {
                    let mut s = prefills.next().expect("prefill order preserved");
                    s.history = seg.history;
                    s.ledger = seg.ledger;
                    s.selections = seg.selections;
                    s.first_token_step = Some(step);
                    s.ttft = s.arrived_at.map(|t| done_at - t);
                    s.advance(Phase::Decode)?;
                    self.running.push(s);
                    self.running.last_mut().unwrap()
                }
                _ => {
                    let s = self
                        .running
                        .iter_mut()
                        .find(|s| s.id == seg.request)
                        .expect("decode segment of a running request");
                    if let Some(h) = s.history.as_mut() {
                        h.decode_appended += 1;
                    }
                    s
                }
            };
            state.generated.push(token);
            state.logits.push(logits);
            self.events.push(StepEvent {
                request: state.id,
                step,
                token,
                phase: seg.phase,
            });
            out.events.push(self.events.last().unwrap().clone());
            audit_seqused(&self.cache, self.model, state, step, &mut self.audit);
        }
        let mut i = 0;
        while i < self.running.len() {
            if self.running[i].generated.len() >= self.running[i].max_new_tokens {
                let mut s = self.running.remove(i);
                s.advance(Phase::Finished)?;
                s.finish_step = Some(step);
                s.latency = s.arrived_at.map(|t| done_at - t);
                self.finished.push(s);
            } else {
                i += 1;
            }
        }
        Ok(out)
    }

    /// Step until every request finishes; errors past `max_steps`.
    pub fn run_to_completion(&mut self, max_steps: usize) -> Result<()> {
        while !self.is_done() {
            if self.step >= max_steps {
                return Err(contract(format!("requests still running after {max_steps} steps")));
            }
            self.step()?;
        }
        Ok(())
    }

    pub fn events_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.events {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// Greedy continuation of a single prompt.
#[derive(Debug, Clone)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub logits: Vec<Vec<f32>>,
    pub history: Option<DropHistory>,
    pub selections: Vec<crate::pipeline::SelectionEvent>,
    pub ledger: Option<FlopsLedger>,
}

pub fn greedy_generate(model: &Model, prompt: &HiddenStates, new_tokens: usize, policy: Option<&DropPolicy>) -> Result<Generation> {
    let config = SchedulerConfig {
        token_budget: prompt.rows().max(1),
        policy: policy.cloned(),
    };
    let req = Request {
        id: 0,
        arrival_step: 0,
        prompt: prompt.clone(),
        max_new_tokens: new_tokens,
    };
    let mut s = Scheduler::new(model, config, vec![req])?;
    s.run_to_completion(new_tokens + 1)?;
    if let Some(f) = s.seqused_audit().failures.first() {
        return Err(EngineError::Audit(f.clone()));
    }
    let r = s.into_finished().pop().expect("one request");
    Ok(Generation {
        tokens: r.generated,
        logits: r.logits,
        history: r.history,
        selections: r.selections,
        ledger: r.ledger,
    })
}

/// Compare every KV layer's visible length for `state` against the
/// drop-history formula, after this step's writes.
fn audit_seqused(cache: &PagedKVCache, model: &Model, state: &RequestState, step: usize, audit: &mut SeqUsedAudit) {
    let Some(h) = &state.history else { return };
    // A token produced this step is not yet in the cache.
    let mut expect = h.clone();
    expect.decode_appended = state.generated.len() - 1;
    for layer in 0..model.num_layers() {
        if !model.config().layer_kind(layer).uses_kv_cache() {
            continue;
        }
        audit.checks += 1;
        let want = decode_seqused(&expect, layer);
        let got = cache.visible_len(layer, state.id);
        if want != got {
            audit.failures.push(format!(
                "step {step} request {} layer {layer}: seqused {want}, cache holds {got}",
                state.id
            ));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::ScoreConfig;
    use crate::model::ModelConfig;

    fn batch(lens: &[(usize, Phase)]) -> PackedBatch {
        let segs: Vec<(HiddenStates, Vec<usize>)> = lens
            .iter()
            .map(|&(n, _)| {
                let rows: Vec<Vec<f32>> = (0..n).map(|i| vec![i as f32]).collect();
                (HiddenStates::from_rows(1, &rows).unwrap(), (0..n).collect())
            })
            .collect();
        PackedBatch::pack(
            segs.iter()
                .zip(lens)
                .enumerate()
                .map(|(i, ((s, p), &(_, ph)))| (i as u64, ph, s, p.as_slice())),
        )
        .unwrap()
    }

    fn keep(n: usize, k: &[usize]) -> Selection {
        let mut m = vec![false; n];
        k.iter().for_each(|&i| m[i] = true);
        Selection::from_mask(m, &vec![1.0; n], 1, k.len())
    }

    #[test]
    fn keep_all_leaves_offsets() {
        let b = batch(&[(8, Phase::Prefill), (8, Phase::Prefill)]);
        let p = patch_metadata(b.clone(), &[Some(Selection::keep_all(8)), None], 0).unwrap();
        assert_eq!(p.cu_seqlens, b.cu_seqlens);
        assert_eq!(p.states, b.states);
    }

    #[test]
    fn two_prefills_first_keeps_four() {
        let b = batch(&[(8, Phase::Prefill), (8, Phase::Prefill)]);
        let p = patch_metadata(b, &[Some(keep(8, &[0, 1, 6, 7])), Some(Selection::keep_all(8))], 0).unwrap();
        assert_eq!(p.cu_seqlens, vec![0, 4, 12]);
        assert_eq!(&p.positions[..4], &[0, 1, 6, 7]);
    }

    #[test]
    fn mixed_batch_offsets() {
        let b = batch(&[(8, Phase::Prefill), (1, Phase::Decode)]);
        let p = patch_metadata(b, &[Some(keep(8, &[0, 1, 2, 7])), None], 0).unwrap();
        assert_eq!(p.cu_seqlens, vec![0, 4, 5]);
    }

    #[test]
    fn decode_segments_never_drop() {
        let b = batch(&[(8, Phase::Prefill), (1, Phase::Decode)]);
        assert!(patch_metadata(b, &[None, Some(Selection::keep_all(1))], 0).is_err());
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0]), 0);
    }

    #[test]
    fn phase_transitions_forward_only() {
        let mut s = RequestState::new(Request {
            id: 0,
            arrival_step: 0,
            prompt: HiddenStates::zeros(1, 1),
            max_new_tokens: 1,
        });
        s.advance(Phase::Decode).unwrap();
        assert!(s.advance(Phase::Prefill).is_err());
        s.advance(Phase::Finished).unwrap();
        assert!(s.advance(Phase::Decode).is_err());
    }

    #[test]
    fn scheduler_finishes_and_audits() {
        let model = Model::build(ModelConfig::pure_full(2, 16, 2, 3)).unwrap();
        let reqs = (0..3)
            .map(|i| Request {
                id: i,
                arrival_step: i as usize,
                prompt: model.embeddings(&(0..40 + i as u32 * 7).map(|t| t % 64).collect::<Vec<_>>()),
                max_new_tokens: 4,
            })
            .collect();
        let score = ScoreConfig {
            query_window_n: 4,
            block_size_g: 4,
            sink_count_a: 4,
            top_p: 0.5,
        };
        let cfg = SchedulerConfig {
            token_budget: 64,
            policy: Some(DropPolicy::new(score)),
        };
        let mut s = Scheduler::new(&model, cfg, reqs).unwrap();
        s.run_to_completion(100).unwrap();
        assert!(s.seqused_audit().failures.is_empty(), "{:?}", s.seqused_audit().failures);
        assert!(s.seqused_audit().checks > 0);
        let done = s.into_finished();
        assert_eq!(done.len(), 3);
        assert!(done.iter().all(|r| r.generated.len() == 4 && r.phase == Phase::Finished));
    }
}
