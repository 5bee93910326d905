//! Sparsity propagation: compact the token stream at a drop event, carry
//! dropped states forward untouched, and reconstitute the full sequence at
//! the next block boundary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::flops::FlopsLedger;
use crate::importance::ScoreConfig;
use crate::kvcache::PagedKVCache;
use crate::model::Model;
use crate::pipeline::{self, DropPolicy, SegmentInput};
use crate::scheduler::Phase;
use crate::selection::Selection;
use crate::tensor::HiddenStates;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropEvent {
    pub layer: usize,
    pub retained_length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropHistory {
    pub events: Vec<DropEvent>,
    pub original_length: usize,
    /// Tokens appended by decode since prefill.
    pub decode_appended: usize,
    /// Block length in layers; drop events never reach past their block.
    pub layers_per_block: Option<usize>,
}

impl DropHistory {
    pub fn new(original_length: usize, layers_per_block: Option<usize>) -> Self {
        Self {
            events: Vec::new(),
            original_length,
            decode_appended: 0,
            layers_per_block,
        }
    }

    /// Token count entering each event, i.e. the count at the previous event
    /// in the same block or the full length at the block start.
    pub fn incoming_length(&self, index: usize) -> usize {
        let e = self.events[index];
        match index.checked_sub(1).map(|i| self.events[i]) {
            Some(prev) if self.same_block(prev.layer, e.layer) => prev.retained_length,
            _ => self.original_length,
        }
    }

    pub fn retention_ratio(&self, index: usize) -> f64 {
        self.events[index].retained_length as f64 / self.incoming_length(index) as f64
    }

    pub fn same_block(&self, a: usize, b: usize) -> bool {
        self.layers_per_block.map_or(true, |per| a / per == b / per)
    }

    /// Tokens processed at `layer` during prefill.
    pub fn tokens_at(&self, layer: usize) -> usize {
        self.events
            .iter()
            .rev()
            .find(|e| e.layer < layer && self.same_block(e.layer, layer))
            .map_or(self.original_length, |e| e.retained_length)
    }
}

/// One request's token stream during prefill.
#[derive(Debug, Clone)]
pub struct TokenStream {
    pub active_states: HiddenStates,
    pub logical_positions: Vec<usize>,
    /// Dropped position -> the state it held when it was dropped.
    pub parked_states: BTreeMap<usize, Vec<f32>>,
    pub original_length: usize,
    pub history: DropHistory,
}

impl TokenStream {
    pub fn new(states: HiddenStates, layers_per_block: Option<usize>) -> Self {
        let n = states.rows();
        Self {
            active_states: states,
            logical_positions: (0..n).collect(),
            parked_states: BTreeMap::new(),
            original_length: n,
            history: DropHistory::new(n, layers_per_block),
        }
    }

    pub fn num_active(&self) -> usize {
        self.logical_positions.len()
    }

    /// Park the rows `selection` drops and compact the rest in position
    /// order. The selection indexes the current active set.
    pub fn apply_drop(&mut self, selection: &Selection, layer_index: usize) -> Result<()> {
        if selection.num_tokens() != self.num_active() {
            return Err(contract(format!(
                "selection over {} tokens applied to a stream of {}",
                selection.num_tokens(),
                self.num_active()
            )));
        }
        if let Some(last) = self.history.events.last() {
            if last.layer >= layer_index {
                return Err(contract(format!(
                    "drop at layer {layer_index} after a drop at layer {}",
                    last.layer
                )));
            }
        }
        for (i, &keep) in selection.keep_mask.iter().enumerate() {
            if !keep {
                self.parked_states
                    .insert(self.logical_positions[i], self.active_states.row(i).to_vec());
            }
        }
        if !selection.keeps_all() {
            self.active_states = self.active_states.select_rows(&selection.retained_indices);
            self.logical_positions = selection
                .retained_indices
                .iter()
                .map(|&i| self.logical_positions[i])
                .collect();
        }
        self.history.events.push(DropEvent {
            layer: layer_index,
            retained_length: self.num_active(),
        });
        Ok(())
    }

    /// Merge active and parked rows back into the full sequence.
    pub fn reconstitute(&mut self) {
        if self.parked_states.is_empty() {
            return;
        }
        let cols = self.active_states.cols();
        let mut out = HiddenStates::zeros(self.original_length, cols);
        for (i, &p) in self.logical_positions.iter().enumerate() {
            out.row_mut(p).copy_from_slice(self.active_states.row(i));
        }
        for (&p, row) in &self.parked_states {
            out.row_mut(p).copy_from_slice(row);
        }
        self.active_states = out;
        self.logical_positions = (0..self.original_length).collect();
        self.parked_states.clear();
    }

    /// Positions never dropped so far.
    pub fn is_parked(&self, position: usize) -> bool {
        self.parked_states.contains_key(&position)
    }
}

#[derive(Debug, Clone)]
pub struct AcceleratedPrefill {
    /// Full-length states after the last block, dropped rows carrying their
    /// parked values.
    pub states: HiddenStates,
    pub cache: PagedKVCache,
    pub history: DropHistory,
    pub ledger: FlopsLedger,
    pub selections: Vec<pipeline::SelectionEvent>,
}

impl AcceleratedPrefill {
    pub fn last_logits(&self, model: &Model) -> Vec<f32> {
        model.logits(self.states.row(self.states.rows() - 1))
    }
}

/// Prefill with score, select and drop at `drop_layers` (every
/// full-attention layer when `None`).
pub fn accelerated_prefill(
    model: &Model,
    tokens: &HiddenStates,
    score_config: &ScoreConfig,
    drop_layers: Option<&[usize]>,
) -> Result<AcceleratedPrefill> {
    let mut policy = DropPolicy::new(*score_config);
    if let Some(layers) = drop_layers {
        policy = policy.with_drop_layers(layers.iter().copied());
    }
    accelerated_prefill_with(model, tokens, &policy)
}

pub fn accelerated_prefill_with(
    model: &Model,
    tokens: &HiddenStates,
    policy: &DropPolicy,
) -> Result<AcceleratedPrefill> {
    let mut cache = model.new_cache();
    let seg = SegmentInput {
        request: 0,
        phase: Phase::Prefill,
        states: tokens.clone(),
        positions: (0..tokens.rows()).collect(),
        history: None,
    };
    let out = pipeline::run_batch(model, &mut cache, Some(policy), vec![seg])?;
    let mut seg = out.segments.into_iter().next().expect("one segment");
    Ok(AcceleratedPrefill {
        states: seg.states,
        cache,
        history: seg.history.take().expect("prefill history"),
        ledger: seg.ledger.take().expect("prefill ledger"),
        selections: seg.selections,
    })
}
