//! Prefill one prompt densely and with token dropping on each layer-pattern
//! archetype, then compare last-token logits and FLOPs.

use prefill_engine::propagation::accelerated_prefill;
use prefill_engine::synth::{low_entropy_states, LowEntropySpec};
use prefill_engine::{Model, ModelConfig, ScoreConfig};

fn main() -> prefill_engine::Result<()> {
    let score = ScoreConfig {
        query_window_n: 32,
        block_size_g: 16,
        sink_count_a: 16,
        top_p: 0.9,
    };
    let configs = [
        ("full", ModelConfig::pure_full(2, 32, 4, 1)),
        ("linear 3:1", ModelConfig::linear_hybrid(2, 32, 4, 1)),
        ("swa 5:1", ModelConfig::swa_hybrid(2, 32, 4, 1)),
    ];
    for (name, mut cfg) in configs {
        cfg.init_std = 0.3;
        let model = Model::build(cfg)?;
        let spec = LowEntropySpec {
            hot_fraction: 0.1,
            block_size: 16,
            sinks: 16,
            window: 32,
            seed: 3,
        };
        let (prompt, _) = low_entropy_states(&model, 512, &spec)?;
        let (dense, _) = model.dense_prefill(&prompt)?;
        let fast = accelerated_prefill(&model, &prompt, &score, None)?;
        let a = model.logits(dense.row(511));
        let b = fast.last_logits(&model);
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        let dense_flops = prefill_engine::flops::FlopsLedger::dense(model.config(), 512).total();
        println!(
            "{name:>10}: retained {:?}, max |logit diff| {diff:.4}, flops {} -> {} ({:.1}% saved)",
            fast.history.events.iter().map(|e| e.retained_length).collect::<Vec<_>>(),
            dense_flops,
            fast.ledger.total(),
            100.0 * (1.0 - fast.ledger.total() as f64 / dense_flops as f64)
        );
    }
    Ok(())
}
