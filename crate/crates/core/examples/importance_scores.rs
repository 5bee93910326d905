//! Block importance from the last query rows of a full-attention layer.

use prefill_engine::importance::ImportanceScores;
use prefill_engine::model::{AttentionProbe, LayerWeights};
use prefill_engine::synth::{low_entropy_states, LowEntropySpec};
use prefill_engine::{Model, ModelConfig, ScoreConfig};

fn main() -> prefill_engine::Result<()> {
    let mut cfg = ModelConfig::pure_full(1, 32, 4, 5);
    cfg.init_std = 0.3;
    let model = Model::build(cfg)?;
    let score = ScoreConfig {
        query_window_n: 16,
        block_size_g: 16,
        sink_count_a: 16,
        top_p: 0.9,
    };
    let spec = LowEntropySpec {
        hot_fraction: 0.1,
        block_size: 16,
        sinks: 16,
        window: 16,
        seed: 2,
    };
    let n = 256;
    let (states, hot) = low_entropy_states(&model, n, &spec)?;
    let LayerWeights::Attention { norm, wq, wk, wv, .. } = model.layer_weights(0) else {
        unreachable!()
    };
    let positions: Vec<usize> = (0..n).collect();
    let (queries, keys, values) = model.qkv(&states, norm, wq, wk, wv, Some(&positions));
    let probe = AttentionProbe { queries, keys, values };
    let s = ImportanceScores::from_probe(&probe, &positions, 4, &score)?;
    println!("planted blocks: {hot:?}");
    for (b, v) in s.block_scores.iter().enumerate() {
        let mark = if hot.contains(&b) { " <- planted" } else { "" };
        println!("block {b:>2}: {v:.5} {}{mark}", "#".repeat((v * 400.0).min(60.0) as usize));
    }
    Ok(())
}
