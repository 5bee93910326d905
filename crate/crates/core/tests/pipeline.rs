//! End-to-end prefill pipeline checks.

use prefill_engine::propagation::accelerated_prefill;
use prefill_engine::synth::{low_entropy_states, random_states, LowEntropySpec};
use prefill_engine::{Model, ModelConfig, ScoreConfig, SublayerKind};

#[test]
fn keep_all_is_bitwise_dense_at_64() {
    for cfg in [
        ModelConfig::pure_full(2, 32, 4, 1),
        ModelConfig::linear_hybrid(2, 32, 4, 2),
        ModelConfig::swa_hybrid(2, 32, 4, 3),
    ] {
        let model = Model::build(cfg).unwrap();
        let x = random_states(64, 32, 5);
        let score = ScoreConfig {
            query_window_n: 4,
            block_size_g: 8,
            sink_count_a: 4,
            top_p: 1.0,
        };
        let run = accelerated_prefill(&model, &x, &score, None).unwrap();
        let (dense, _) = model.dense_prefill(&x).unwrap();
        assert!(dense.as_slice().iter().zip(run.states.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(run.history.events.iter().all(|e| e.retained_length == 64));
    }
}

#[test]
fn near_zero_p_leaves_only_forced_tokens_downstream() {
    let mut cfg = ModelConfig::with_pattern(
        1,
        vec![
            SublayerKind::FullAttention,
            SublayerKind::Ffn,
            SublayerKind::LinearAttention,
            SublayerKind::FullAttention,
        ],
        32,
        4,
        8,
    );
    cfg.init_std = 0.3;
    let model = Model::build(cfg).unwrap();
    let score = ScoreConfig {
        query_window_n: 8,
        block_size_g: 8,
        sink_count_a: 8,
        top_p: 1e-9,
    };
    // No planted blocks: the top-scoring block is one of the sinks.
    let spec = LowEntropySpec {
        hot_fraction: 0.0,
        block_size: 8,
        sinks: 8,
        window: 8,
        seed: 4,
    };
    let (x, _) = low_entropy_states(&model, 256, &spec).unwrap();
    let run = accelerated_prefill(&model, &x, &score, Some(&[0])).unwrap();
    assert_eq!(run.history.events.len(), 1);
    assert_eq!(run.history.events[0].retained_length, 16);
    let tokens: Vec<usize> = run.ledger.entries.iter().map(|e| e.tokens).collect();
    assert_eq!(tokens, vec![256, 16, 16, 16]);
}
