//! Top-p selection over packed (score, index) words, with forced sinks and
//! query window.

use prefill_engine::selection::{phi_encode, top_p_select, PackedScore};
use prefill_engine::ScoreConfig;

fn main() -> prefill_engine::Result<()> {
    for x in [-1.5f32, -0.0, 0.0, 1e-40, 2.0] {
        println!("phi({x:>8e}) = {:#010x}", phi_encode(x)?);
    }
    let w = PackedScore::pack(0.25, 7)?;
    println!("packed {:#018x} -> score {} index {}", w.0, w.score(), w.index());

    let scores = [0.30f32, 0.05, 0.05, 0.40, 0.0, 0.10, 0.05, 0.05];
    let cfg = ScoreConfig {
        query_window_n: 4,
        block_size_g: 4,
        sink_count_a: 4,
        top_p: 0.8,
    };
    let sel = top_p_select(&scores, &cfg, 32)?;
    println!(
        "kept {} of 32 tokens (rho {:.3}), {} ranked blocks before forcing, covered mass {:.3}",
        sel.num_retained(),
        sel.retention_ratio,
        sel.cutoff_rank,
        sel.covered_mass
    );
    println!("retained: {:?}", sel.retained_indices);
    Ok(())
}
