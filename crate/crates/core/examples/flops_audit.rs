//! FLOPs ledger for one accelerated prefill, checked against the savings
//! formula evaluated from the drop history.

use prefill_engine::flops::{gemm_to_attention_ratio, validate_savings, FlopsLedger, COUNTING_CONVENTIONS};
use prefill_engine::propagation::accelerated_prefill;
use prefill_engine::synth::{low_entropy_states, LowEntropySpec};
use prefill_engine::{Model, ModelConfig, ScoreConfig};

fn main() -> prefill_engine::Result<()> {
    let mut cfg = ModelConfig::swa_hybrid(1, 32, 4, 2);
    cfg.init_std = 0.3;
    let model = Model::build(cfg)?;
    let n = 1024;
    let spec = LowEntropySpec {
        hot_fraction: 0.05,
        block_size: 32,
        sinks: 32,
        window: 32,
        seed: 1,
    };
    let (prompt, _) = low_entropy_states(&model, n, &spec)?;
    let score = ScoreConfig {
        query_window_n: 32,
        block_size_g: 32,
        sink_count_a: 32,
        top_p: 0.9,
    };
    let run = accelerated_prefill(&model, &prompt, &score, None)?;
    let dense = FlopsLedger::dense(model.config(), n);
    let report = validate_savings(&dense, &run.ledger)?;
    println!("conventions: {COUNTING_CONVENTIONS}");
    println!("{}", serde_json::to_string_pretty(&report)?);
    println!("ledger matches drop history: {}", run.ledger.matches_history(&run.history));
    let c = model.config();
    println!(
        "GEMM-to-attention cost ratio after the drop layer: {:.3}",
        gemm_to_attention_ratio(c.num_layers() - 1, n, c.hidden_dim, c.head_dim)
    );
    Ok(())
}
