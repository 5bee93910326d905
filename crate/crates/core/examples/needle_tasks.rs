//! Calibrate a small needle-retrieval suite on the dense path and compare
//! accuracy with token dropping.

use prefill_engine::pipeline::Mode;
use prefill_engine::tasks::{accuracy_table, calibrate, run_task_suite, CalibrationConfig, TaskKind, TaskTemplate};
use prefill_engine::{Model, ModelConfig, ScoreConfig};

fn main() -> prefill_engine::Result<()> {
    let mut cfg = ModelConfig::pure_full(2, 32, 4, 21);
    cfg.init_std = 0.2;
    let model = Model::build(cfg)?;
    let templates: Vec<TaskTemplate> = (0..8)
        .map(|s| TaskTemplate {
            kind: if s % 2 == 0 { TaskKind::NeedleRetrieval } else { TaskKind::MultiNeedle },
            prompt_length: 128 << (s % 2),
            depths: vec![0.3, 0.6],
            seed: s,
            answer_len: 4,
        })
        .collect();
    let cal = CalibrationConfig {
        needle_span: 4,
        ..Default::default()
    };
    let suite = calibrate(&model, &templates, &cal)?;
    println!("kept {} tasks, rejected {}", suite.tasks.len(), suite.rejected.len());
    let score = ScoreConfig {
        query_window_n: 16,
        block_size_g: 8,
        sink_count_a: 8,
        top_p: 0.99,
    };
    let mut results = run_task_suite(&model, &suite.tasks, Mode::Dense, &score)?;
    results.extend(run_task_suite(&model, &suite.tasks, Mode::Accelerated, &score)?);
    for row in accuracy_table(&results) {
        println!("{:?} len {} {}: {}/{}", row.kind, row.prompt_length, row.mode.name(), row.correct, row.tasks);
    }
    Ok(())
}
