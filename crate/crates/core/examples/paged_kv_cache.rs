//! Paged KV cache after a drop: slots are recomputed from surviving
//! positions and decode reads only what was written.

use prefill_engine::kvcache::{decode_seqused, PagedKVCache};
use prefill_engine::propagation::{DropEvent, DropHistory};

fn main() -> prefill_engine::Result<()> {
    let width = 4;
    let mut cache = PagedKVCache::new(2, width, 4);
    let all: Vec<usize> = (0..12).collect();
    let row = |p: &usize| vec![*p as f32; width];
    let kv: Vec<f32> = all.iter().flat_map(row).collect();
    // Layer 0 is the drop layer and sees every token.
    cache.write(0, 7, &all, &kv, &kv)?;
    let kept = [0usize, 1, 2, 3, 8, 9, 10, 11];
    let slots = cache.recompute_slots_after_drop(1..2, 7, &kept);
    println!("layer 1 write slots after drop: {:?}", slots[0]);
    let kv: Vec<f32> = kept.iter().flat_map(row).collect();
    cache.write(1, 7, &kept, &kv, &kv)?;

    let mut history = DropHistory::new(12, None);
    history.events.push(DropEvent {
        layer: 0,
        retained_length: kept.len(),
    });
    for layer in 0..2 {
        let (pos, _, _) = cache.gather(layer, 7)?;
        println!(
            "layer {layer}: seqused {} / visible {} positions {pos:?}",
            decode_seqused(&history, layer),
            cache.visible_len(layer, 7)
        );
    }
    println!("audit: {:?}", cache.audit());
    println!("pages: {}", cache.pages_allocated());
    Ok(())
}
