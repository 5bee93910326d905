//! One forward pass over a packed batch of prefill and decode segments,
//! with score/select/drop at the configured layers of prefill segments.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract, Result};
use crate::flops::FlopsLedger;
use crate::importance::{raw_scores_from_probe, ScoreConfig};
use crate::kvcache::{PagedKVCache, RequestId};
use crate::model::{AttentionProbe, Model, SublayerKind};
use crate::propagation::{DropEvent, DropHistory};
use crate::scheduler::{patch_metadata, PackedBatch, Phase};
use crate::selection::{top_p_select, Selection};
use crate::tensor::HiddenStates;
use crate::tp_sim;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropPolicy {
    pub score: ScoreConfig,
    /// Layers that score and drop; every full-attention layer when `None`.
    pub drop_layers: Option<BTreeSet<usize>>,
    /// Simulated tensor-parallel degree used for scoring.
    pub tp: usize,
    /// Whether a token dropped in one block may be selected again later.
    pub readmit: bool,
}

impl DropPolicy {
    pub fn new(score: ScoreConfig) -> Self {
        Self {
            score,
            drop_layers: None,
            tp: 1,
            readmit: true,
        }
    }

    pub fn with_drop_layers(mut self, layers: impl IntoIterator<Item = usize>) -> Self {
        self.drop_layers = Some(layers.into_iter().collect());
        self
    }

    pub fn with_tp(mut self, tp: usize) -> Self {
        self.tp = tp;
        self
    }

    pub fn with_readmit(mut self, readmit: bool) -> Self {
        self.readmit = readmit;
        self
    }

    /// Resolved drop layers after validation against `model`.
    pub fn resolve(&self, model: &Model) -> Result<BTreeSet<usize>> {
        let c = model.config();
        self.score.validate()?;
        tp_sim::shard_heads(c.num_heads, self.tp)?;
        let layers: BTreeSet<usize> = match &self.drop_layers {
            Some(l) => l.clone(),
            None => c.full_attention_layers().into_iter().collect(),
        };
        for &l in &layers {
            if l >= c.num_layers() || c.layer_kind(l) != SublayerKind::FullAttention {
                return Err(config_err(format!("drop layer {l} is not a full-attention layer")));
            }
        }
        Ok(layers)
    }
}

/// Prefill mode of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "dense")]
    Dense,
    /// Token-dropping prefill; spelled `uniprefill` on the command line.
    #[serde(rename = "uniprefill", alias = "accelerated")]
    Accelerated,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Dense => "dense",
            Mode::Accelerated => "uniprefill",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = crate::error::EngineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Mode::Dense),
            "uniprefill" | "accelerated" => Ok(Mode::Accelerated),
            other => Err(config_err(format!("unknown mode {other:?}; expected dense or uniprefill"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SegmentInput {
    pub request: RequestId,
    pub phase: Phase,
    pub states: HiddenStates,
    pub positions: Vec<usize>,
    /// Prefill history of a decoding request; unused by the forward itself.
    pub history: Option<DropHistory>,
}

/// One drop decision with the logical positions it was made over.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionEvent {
    pub layer: usize,
    pub positions: Vec<usize>,
    pub selection: Selection,
}

impl SelectionEvent {
    pub fn retained_positions(&self) -> Vec<usize> {
        self.selection.retained_indices.iter().map(|&i| self.positions[i]).collect()
    }

    /// Whether `position` was active and kept; `None` when it was not active.
    pub fn kept(&self, position: usize) -> Option<bool> {
        self.positions
            .binary_search(&position)
            .ok()
            .map(|i| self.selection.keep_mask[i])
    }
}

#[derive(Debug, Clone)]
pub struct SegmentOutput {
    pub request: RequestId,
    pub phase: Phase,
    /// Prefill: all `N` rows with parked rows restored. Decode: the input rows.
    pub states: HiddenStates,
    pub positions: Vec<usize>,
    pub history: Option<DropHistory>,
    pub ledger: Option<FlopsLedger>,
    pub selections: Vec<SelectionEvent>,
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub segments: Vec<SegmentOutput>,
    /// Final batch with the metadata recorded at every layer.
    pub batch: PackedBatch,
}

struct Track {
    parked: BTreeMap<usize, Vec<f32>>,
    original_length: usize,
    ever_dropped: BTreeSet<usize>,
    history: Option<DropHistory>,
    ledger: Option<FlopsLedger>,
    selections: Vec<SelectionEvent>,
}

pub fn run_batch(
    model: &Model,
    cache: &mut PagedKVCache,
    policy: Option<&DropPolicy>,
    inputs: Vec<SegmentInput>,
) -> Result<BatchOutput> {
    let config = model.config();
    let drop_layers = match policy {
        Some(p) => p.resolve(model)?,
        None => BTreeSet::new(),
    };
    if inputs.is_empty() {
        return Err(contract("empty batch"));
    }
    let per_block = config.layers_per_block();
    let mut tracks = Vec::with_capacity(inputs.len());
    for s in &inputs {
        if s.states.rows() == 0 || s.states.rows() != s.positions.len() {
            return Err(contract(format!("segment for request {} has mismatched rows", s.request)));
        }
        let prefill = s.phase == Phase::Prefill;
        if prefill && s.positions.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(contract("prefill segments must cover positions 0..N"));
        }
        let n = s.states.rows();
        tracks.push(Track {
            parked: BTreeMap::new(),
            original_length: n,
            ever_dropped: BTreeSet::new(),
            history: if prefill {
                Some(DropHistory::new(n, Some(per_block)))
            } else {
                s.history.clone()
            },
            ledger: prefill.then(|| FlopsLedger::new(config, n)),
            selections: Vec::new(),
        });
    }
    let mut batch = PackedBatch::pack(
        inputs
            .iter()
            .map(|s| (s.request, s.phase, &s.states, s.positions.as_slice())),
    )?;
    drop(inputs);

    for layer in 0..model.num_layers() {
        if layer > 0 && config.is_block_start(layer) {
            reconstitute(&mut batch, &mut tracks)?;
        }
        batch.record_layer(layer);
        let kind = config.layer_kind(layer);
        for (r, t) in tracks.iter_mut().enumerate() {
            if let Some(l) = t.ledger.as_mut() {
                l.record_layer(layer, kind, batch.segment_len(r));
            }
        }
        if kind == SublayerKind::Ffn {
            let positions = batch.positions.clone();
            batch.states = model.forward_sublayer(layer, 0, &batch.states, &positions, cache)?;
            continue;
        }
        let dropping = drop_layers.contains(&layer);
        let mut selections: Vec<Option<Selection>> = vec![None; batch.num_requests()];
        for r in 0..batch.num_requests() {
            let input = batch.segment_states(r);
            let positions = batch.segment_positions(r).to_vec();
            let probe = dropping && batch.phases[r] == Phase::Prefill;
            let (out, probe) =
                model.forward_sublayer_probed(layer, batch.requests[r], &input, &positions, cache, probe)?;
            if let (Some(probe), Some(policy)) = (probe, policy) {
                let sel = select(model, policy, &probe, &positions, &tracks[r])?;
                let t = &mut tracks[r];
                for (i, &keep) in sel.keep_mask.iter().enumerate() {
                    if !keep {
                        t.parked.insert(positions[i], input.row(i).to_vec());
                        t.ever_dropped.insert(positions[i]);
                    }
                }
                let window = policy.score.effective_n(positions.len());
                if let Some(l) = t.ledger.as_mut() {
                    l.record_drop(layer, positions.len(), sel.num_retained(), window);
                }
                if let Some(h) = t.history.as_mut() {
                    h.events.push(DropEvent {
                        layer,
                        retained_length: sel.num_retained(),
                    });
                }
                t.selections.push(SelectionEvent {
                    layer,
                    positions: positions.clone(),
                    selection: sel.clone(),
                });
                selections[r] = Some(sel);
            }
            batch.write_segment(r, &out)?;
        }
        if selections.iter().any(Option::is_some) {
            batch = patch_metadata(batch, &selections, layer)?;
        }
    }
    reconstitute(&mut batch, &mut tracks)?;
    batch.check_metadata()?;

    let segments = tracks
        .into_iter()
        .enumerate()
        .map(|(r, t)| SegmentOutput {
            request: batch.requests[r],
            phase: batch.phases[r],
            states: batch.segment_states(r),
            positions: batch.segment_positions(r).to_vec(),
            history: t.history,
            ledger: t.ledger,
            selections: t.selections,
        })
        .collect();
    Ok(BatchOutput { segments, batch })
}

fn select(model: &Model, policy: &DropPolicy, probe: &AttentionProbe, positions: &[usize], track: &Track) -> Result<Selection> {
    let score = &policy.score;
    let raw = raw_scores_from_probe(probe, positions, model.config().num_heads, score)?;
    let shards = tp_sim::shard_raw_scores(&raw, score.block_size_g, policy.tp)?;
    let block_scores = tp_sim::reduced_block_scores(&shards)?;
    let n = positions.len();
    let sel = top_p_select(&block_scores, score, n)?;
    if policy.readmit || track.ever_dropped.is_empty() {
        return Ok(sel);
    }
    let window_start = n - score.effective_n(n);
    let mask = sel
        .keep_mask
        .iter()
        .enumerate()
        .map(|(i, &k)| i < score.sink_count_a || i >= window_start || (k && !track.ever_dropped.contains(&positions[i])))
        .collect();
    Ok(Selection::from_mask(mask, &block_scores, score.block_size_g, sel.cutoff_rank))
}

/// Restore every prefill segment to its full length, parked rows in place.
fn reconstitute(batch: &mut PackedBatch, tracks: &mut [Track]) -> Result<()> {
    if tracks.iter().all(|t| t.parked.is_empty()) {
        return Ok(());
    }
    let cols = batch.states.cols();
    let mut parts = Vec::with_capacity(tracks.len());
    for (r, t) in tracks.iter_mut().enumerate() {
        let states = batch.segment_states(r);
        let positions = batch.segment_positions(r).to_vec();
        if t.parked.is_empty() {
            parts.push((states, positions));
            continue;
        }
        let mut full = HiddenStates::zeros(t.original_length, cols);
        for (i, &p) in positions.iter().enumerate() {
            full.row_mut(p).copy_from_slice(states.row(i));
        }
        for (p, row) in std::mem::take(&mut t.parked) {
            full.row_mut(p).copy_from_slice(&row);
        }
        parts.push((full, (0..t.original_length).collect()));
    }
    batch.replace_segments(parts)
}
