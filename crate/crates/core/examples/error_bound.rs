//! Measured drop-layer perturbation against the mass-times-V_max bound, with
//! Lipschitz estimates through the rest of the block.

use prefill_engine::oracle::measure_drop_error;
use prefill_engine::synth::random_states;
use prefill_engine::{Model, ModelConfig, ScoreConfig};

fn main() -> prefill_engine::Result<()> {
    let model = Model::build(ModelConfig::linear_hybrid(1, 32, 4, 8))?;
    for p in [0.9, 0.99, 1.0] {
        let score = ScoreConfig {
            query_window_n: 16,
            block_size_g: 8,
            sink_count_a: 8,
            top_p: p,
        };
        let r = measure_drop_error(&model, &random_states(256, 32, 1), &score, 0)?;
        println!(
            "p={p}: kept {}/{}, covered {:.4}, mean |dh| {:.3e} <= bound {:.3e}: {}, prod L {:.3}, block-end error {:?}",
            r.retained,
            r.num_tokens,
            r.covered_mass,
            r.layer.mean_perturbation,
            r.bound,
            r.bound_holds,
            r.lipschitz_product,
            r.block_end_error
        );
    }
    Ok(())
}
