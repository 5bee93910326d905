//! Seeded workload generation and a dense-vs-dropping run of it.

use prefill_engine::pipeline::Mode;
use prefill_engine::report::{run_workload, RunOptions};
use prefill_engine::synth::ContentKind;
use prefill_engine::workload::{gen_workload, ArrivalPattern, WorkloadSpec};
use prefill_engine::{Model, ModelConfig, ScoreConfig};

fn main() -> prefill_engine::Result<()> {
    let spec = WorkloadSpec {
        seed: 5,
        num_requests: 6,
        arrival: ArrivalPattern::Poisson { rate: 0.7 },
        prompt_lengths: vec![128, 256],
        max_new_tokens: 4,
        content_kinds: vec![ContentKind::LowEntropy, ContentKind::Needle],
        needle_depths: vec![0.5],
    };
    let items = gen_workload(&spec)?;
    let mut cfg = ModelConfig::linear_hybrid(2, 32, 4, 3);
    cfg.init_std = 0.3;
    let model = Model::build(cfg)?;
    let score = ScoreConfig {
        query_window_n: 16,
        block_size_g: 16,
        sink_count_a: 16,
        top_p: 0.9,
    };
    for mode in [Mode::Dense, Mode::Accelerated] {
        let opts = RunOptions {
            mode,
            flops_audit: true,
            ..Default::default()
        };
        let report = run_workload(&model, &items, &score, &opts)?;
        print!("{}", report.render_table());
    }
    Ok(())
}
