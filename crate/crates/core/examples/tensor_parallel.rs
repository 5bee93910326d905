//! Simulated tensor-parallel scoring: each shard scores its head group, an
//! allreduce sums the partials, and selection runs on the reduced scores.

use prefill_engine::selection::top_p_select;
use prefill_engine::synth::random_states;
use prefill_engine::tp_sim::{reduced_block_scores, sharded_block_scores};
use prefill_engine::{Model, ModelConfig, ScoreConfig};

fn main() -> prefill_engine::Result<()> {
    let model = Model::build(ModelConfig::pure_full(1, 64, 8, 4))?;
    let score = ScoreConfig {
        query_window_n: 16,
        block_size_g: 16,
        sink_count_a: 16,
        top_p: 0.9,
    };
    let n = 256;
    let states = random_states(n, 64, 9);
    let positions: Vec<usize> = (0..n).collect();
    let mut reference = None;
    for t in [1, 2, 4, 8] {
        let mut shards = sharded_block_scores(&model, 0, &states, &positions, &score, t)?;
        // Arrival order of the partials does not matter.
        shards.reverse();
        let scores = reduced_block_scores(&shards)?;
        let sel = top_p_select(&scores, &score, n)?;
        let same = reference.get_or_insert_with(|| sel.clone()) == &sel;
        println!("T={t}: heads per shard {}, retained {}, same selection as T=1: {same}", 8 / t, sel.num_retained());
    }
    Ok(())
}
