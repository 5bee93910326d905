//! Paged KV cache with one block table per layer.
//!
//! Physical pages come from a single pool shared by every layer, so distinct
//! `(layer, request, logical page)` triples always land on distinct pages. A
//! token's slot is `table[request, pos / B] * B + pos % B`; retained tokens
//! keep their logical positions after a drop, which leaves pages sparsely
//! populated. Every write and read is logged against a written-slot bitmap
//! so decode can be audited for reads of slots that were never filled.

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{contract, EngineError, Result};
use crate::propagation::DropHistory;

pub type RequestId = u64;

pub const DEFAULT_KV_BLOCK_SIZE: usize = 16;

/// Logical page -> physical page mapping for one layer.
#[derive(Debug, Clone, Default)]
pub struct BlockTable {
    entries: HashMap<(RequestId, usize), usize>,
}

impl BlockTable {
    pub fn insert(&mut self, request: RequestId, logical_page: usize, physical_page: usize) {
        self.entries.insert((request, logical_page), physical_page);
    }

    pub fn get(&self, request: RequestId, logical_page: usize) -> Option<usize> {
        self.entries.get(&(request, logical_page)).copied()
    }

    pub fn pages_for(&self, request: RequestId) -> usize {
        self.entries.keys().filter(|(r, _)| *r == request).count()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `table[r, p / B] * B + p % B`, or an allocation miss error.
    pub fn slot_for(
        &self,
        layer: usize,
        request: RequestId,
        position: usize,
        block_size: usize,
    ) -> Result<usize> {
        let page = position / block_size;
        let physical = self.get(request, page).ok_or(EngineError::AllocationMiss {
            layer,
            request,
            page,
        })?;
        Ok(physical * block_size + position % block_size)
    }
}

/// Per-(layer, request) record of what prefill and decode wrote.
#[derive(Debug, Clone, Default)]
struct LayerRequest {
    /// Logical positions written, strictly increasing.
    positions: Vec<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct AuditLog {
    pub writes: u64,
    pub reads: u64,
    pub unwritten_reads: u64,
    pub overwrites: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayerCacheStats {
    pub layer: usize,
    pub pages: usize,
    pub written_slots: usize,
    /// Written slots over allocated slot capacity.
    pub occupancy: f64,
}

#[derive(Debug, Clone)]
pub struct PagedKVCache {
    kv_block_size: usize,
    width: usize,
    tables: Vec<BlockTable>,
    written: Vec<HashMap<RequestId, LayerRequest>>,
    keys: Vec<f32>,
    values: Vec<f32>,
    slot_written: Vec<bool>,
    next_page: usize,
    linear_states: HashMap<(usize, RequestId), Vec<f32>>,
    audit: AuditLog,
}

impl PagedKVCache {
    pub fn new(num_layers: usize, width: usize, kv_block_size: usize) -> Self {
        assert!(kv_block_size > 0, "kv block size must be positive");
        Self {
            kv_block_size,
            width,
            tables: vec![BlockTable::default(); num_layers],
            written: vec![HashMap::new(); num_layers],
            keys: Vec::new(),
            values: Vec::new(),
            slot_written: Vec::new(),
            next_page: 0,
            linear_states: HashMap::new(),
            audit: AuditLog::default(),
        }
    }

    pub fn kv_block_size(&self) -> usize {
        self.kv_block_size
    }

    pub fn num_layers(&self) -> usize {
        self.tables.len()
    }

    pub fn block_table(&self, layer: usize) -> &BlockTable {
        &self.tables[layer]
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    fn allocate_page(&mut self) -> usize {
        let page = self.next_page;
        self.next_page += 1;
        let slots = self.next_page * self.kv_block_size;
        self.keys.resize(slots * self.width, 0.0);
        self.values.resize(slots * self.width, 0.0);
        self.slot_written.resize(slots, false);
        page
    }

    fn ensure_page(&mut self, layer: usize, request: RequestId, position: usize) -> usize {
        let page = position / self.kv_block_size;
        match self.tables[layer].get(request, page) {
            Some(p) => p,
            None => {
                let p = self.allocate_page();
                self.tables[layer].insert(request, page, p);
                p
            }
        }
    }

    pub fn slot_for(&self, layer: usize, request: RequestId, position: usize) -> Result<usize> {
        self.tables[layer].slot_for(layer, request, position, self.kv_block_size)
    }

    /// Write-slot lists for `layers` covering exactly `positions`, allocating
    /// pages on demand. Positions are logical and never renumbered.
    pub fn recompute_slots_after_drop(
        &mut self,
        layers: Range<usize>,
        request: RequestId,
        positions: &[usize],
    ) -> Vec<Vec<usize>> {
        layers
            .map(|layer| {
                positions
                    .iter()
                    .map(|&p| {
                        let page = self.ensure_page(layer, request, p);
                        page * self.kv_block_size + p % self.kv_block_size
                    })
                    .collect()
            })
            .collect()
    }

    /// Store one K and V row per position. Positions must extend the
    /// request's written list in increasing order.
    pub fn write(
        &mut self,
        layer: usize,
        request: RequestId,
        positions: &[usize],
        keys: &[f32],
        values: &[f32],
    ) -> Result<()> {
        let w = self.width;
        debug_assert_eq!(keys.len(), positions.len() * w);
        let last = self.written[layer]
            .get(&request)
            .and_then(|lr| lr.positions.last().copied());
        if let (Some(last), Some(&first)) = (last, positions.first()) {
            if first <= last {
                return Err(contract(format!(
                    "layer {layer} request {request}: write at position {first} after {last}"
                )));
            }
        }
        for (i, &p) in positions.iter().enumerate() {
            self.ensure_page(layer, request, p);
            let slot = self.slot_for(layer, request, p)?;
            if self.slot_written[slot] {
                self.audit.overwrites += 1;
            }
            self.keys[slot * w..(slot + 1) * w].copy_from_slice(&keys[i * w..(i + 1) * w]);
            self.values[slot * w..(slot + 1) * w].copy_from_slice(&values[i * w..(i + 1) * w]);
            self.slot_written[slot] = true;
            self.audit.writes += 1;
        }
        self.written[layer]
            .entry(request)
            .or_default()
            .positions
            .extend_from_slice(positions);
        Ok(())
    }

    /// Every entry visible to `(layer, request)`: positions and the
    /// corresponding K and V rows, read through the block table.
    pub fn gather(&mut self, layer: usize, request: RequestId) -> Result<(Vec<usize>, Vec<f32>, Vec<f32>)> {
        let positions = self.written[layer]
            .get(&request)
            .map(|lr| lr.positions.clone())
            .unwrap_or_default();
        let w = self.width;
        let mut k = Vec::with_capacity(positions.len() * w);
        let mut v = Vec::with_capacity(positions.len() * w);
        for &p in &positions {
            let slot = self
                .slot_for(layer, request, p)
                .map_err(|_| EngineError::CacheBounds {
                    layer,
                    request,
                    position: p,
                })?;
            self.audit.reads += 1;
            if !self.slot_written[slot] {
                self.audit.unwritten_reads += 1;
            }
            k.extend_from_slice(&self.keys[slot * w..(slot + 1) * w]);
            v.extend_from_slice(&self.values[slot * w..(slot + 1) * w]);
        }
        Ok((positions, k, v))
    }

    /// Number of KV entries a decode step at `layer` attends over.
    pub fn visible_len(&self, layer: usize, request: RequestId) -> usize {
        self.written[layer]
            .get(&request)
            .map_or(0, |lr| lr.positions.len())
    }

    pub fn written_positions(&self, layer: usize, request: RequestId) -> &[usize] {
        self.written[layer]
            .get(&request)
            .map_or(&[], |lr| lr.positions.as_slice())
    }

    /// Recurrent state of a linear-attention layer for one request.
    pub fn linear_state_mut(&mut self, layer: usize, request: RequestId, len: usize) -> &mut Vec<f32> {
        self.linear_states
            .entry((layer, request))
            .or_insert_with(|| vec![0.0; len])
    }

    pub fn stats(&self) -> Vec<LayerCacheStats> {
        (0..self.tables.len())
            .map(|layer| {
                let pages = self.tables[layer].len();
                let written_slots: usize =
                    self.written[layer].values().map(|lr| lr.positions.len()).sum();
                let capacity = pages * self.kv_block_size;
                LayerCacheStats {
                    layer,
                    pages,
                    written_slots,
                    occupancy: if capacity == 0 {
                        0.0
                    } else {
                        written_slots as f64 / capacity as f64
                    },
                }
            })
            .collect()
    }

    pub fn pages_allocated(&self) -> usize {
        self.next_page
    }
}

/// Effective KV length at `layer` during decode: the retained length after
/// the last drop event before `layer` (or the prompt length when none
/// precedes it) plus the tokens appended since prefill.
///
/// When the history carries a block length, drop events in earlier blocks
/// are not considered, because those tokens were reconstituted at the block
/// boundary and written again.
pub fn decode_seqused(history: &DropHistory, layer: usize) -> usize {
    let same_block = |l: usize| match history.layers_per_block {
        Some(per) => l / per == layer / per,
        None => true,
    };
    let base = history
        .events
        .iter()
        .rev()
        .find(|e| e.layer < layer && same_block(e.layer))
        .map_or(history.original_length, |e| e.retained_length);
    base + history.decode_appended
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propagation::DropEvent;

    #[test]
    fn slot_formula_examples() {
        let mut t = BlockTable::default();
        t.insert(1, 0, 5);
        assert_eq!(t.slot_for(0, 1, 7, 16).unwrap(), 87);
        let mut t = BlockTable::default();
        t.insert(1, 0, 0);
        assert_eq!(t.slot_for(0, 1, 0, 16).unwrap(), 0);
        t.insert(1, 1, 3);
        assert_eq!(t.slot_for(0, 1, 16, 16).unwrap(), 48);
    }

    #[test]
    fn unallocated_page_is_a_miss() {
        let t = BlockTable::default();
        assert!(matches!(
            t.slot_for(2, 9, 40, 16),
            Err(EngineError::AllocationMiss { layer: 2, request: 9, page: 2 })
        ));
    }

    #[test]
    fn slots_after_drop_are_sparse_and_cover_retained_only() {
        let mut c = PagedKVCache::new(3, 4, 16);
        let keep: Vec<usize> = (0..8).chain(24..32).collect();
        let lists = c.recompute_slots_after_drop(1..3, 7, &keep);
        assert_eq!(lists.len(), 2);
        for (i, list) in lists.iter().enumerate() {
            let layer = i + 1;
            assert_eq!(list.len(), 16);
            let p0 = c.block_table(layer).get(7, 0).unwrap();
            let p1 = c.block_table(layer).get(7, 1).unwrap();
            let expect: Vec<usize> = (0..8)
                .map(|p| p0 * 16 + p)
                .chain((24..32).map(|p| p1 * 16 + p % 16))
                .collect();
            assert_eq!(list, &expect);
        }
        // Distinct tables per layer: the same logical position lands on
        // different physical slots.
        assert_ne!(lists[0][0], lists[1][0]);
    }

    #[test]
    fn keep_all_slots_unchanged() {
        let mut c = PagedKVCache::new(2, 4, 16);
        let all: Vec<usize> = (0..20).collect();
        let a = c.recompute_slots_after_drop(1..2, 0, &all);
        let b = c.recompute_slots_after_drop(1..2, 0, &all);
        assert_eq!(a, b);
    }

    #[test]
    fn write_gather_roundtrip_and_audit() {
        let mut c = PagedKVCache::new(1, 2, 4);
        let pos = [0usize, 1, 5, 9];
        let k: Vec<f32> = (0..8).map(|x| x as f32).collect();
        let v: Vec<f32> = (0..8).map(|x| -(x as f32)).collect();
        c.write(0, 3, &pos, &k, &v).unwrap();
        let (p, kk, vv) = c.gather(0, 3).unwrap();
        assert_eq!(p, pos);
        assert_eq!(kk, k);
        assert_eq!(vv, v);
        assert_eq!(c.audit().unwritten_reads, 0);
        assert_eq!(c.visible_len(0, 3), 4);
        assert!(c.write(0, 3, &[9], &[0.0; 2], &[0.0; 2]).is_err());
    }

    fn history(events: &[(usize, usize)], orig: usize, delta: usize) -> DropHistory {
        DropHistory {
            events: events
                .iter()
                .map(|&(layer, retained_length)| DropEvent {
                    layer,
                    retained_length,
                })
                .collect(),
            original_length: orig,
            decode_appended: delta,
            layers_per_block: None,
        }
    }

    #[test]
    fn seqused_examples() {
        let h = history(&[(4, 900)], 1000, 3);
        assert_eq!(decode_seqused(&h, 10), 903);
        assert_eq!(decode_seqused(&h, 2), 1003);
        let h = history(&[(4, 900), (12, 700)], 1000, 0);
        assert_eq!(decode_seqused(&h, 13), 700);
        // The drop layer itself still sees the pre-drop length.
        assert_eq!(decode_seqused(&h, 12), 900);
    }

    #[test]
    fn seqused_resets_at_block_boundary() {
        let mut h = history(&[(0, 300), (4, 200)], 1000, 2);
        h.layers_per_block = Some(4);
        assert_eq!(decode_seqused(&h, 3), 302);
        assert_eq!(decode_seqused(&h, 4), 1002);
        assert_eq!(decode_seqused(&h, 5), 202);
    }
}
