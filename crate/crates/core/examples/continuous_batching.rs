//! Continuous batching: staggered arrivals, mixed prefill and decode steps,
//! with the per-step event log and the seqused audit.

use prefill_engine::pipeline::DropPolicy;
use prefill_engine::scheduler::{Request, Scheduler, SchedulerConfig};
use prefill_engine::synth::random_states;
use prefill_engine::{Model, ModelConfig, ScoreConfig};

fn main() -> prefill_engine::Result<()> {
    let model = Model::build(ModelConfig::linear_hybrid(2, 32, 4, 11))?;
    let score = ScoreConfig {
        query_window_n: 8,
        block_size_g: 8,
        sink_count_a: 8,
        top_p: 0.9,
    };
    let requests = (0..4)
        .map(|i| Request {
            id: i,
            arrival_step: 2 * i as usize,
            prompt: random_states(64 + 32 * i as usize, 32, i),
            max_new_tokens: 4,
        })
        .collect();
    let config = SchedulerConfig {
        token_budget: 256,
        policy: Some(DropPolicy::new(score)),
    };
    let mut sched = Scheduler::new(&model, config, requests)?;
    while !sched.is_done() {
        let out = sched.step()?;
        println!(
            "step {:>2}: {} prefill, {} decode, {} tokens",
            out.step, out.prefills, out.decodes, out.batch_tokens
        );
    }
    let audit = sched.seqused_audit().clone();
    println!("seqused audit: {} checks, {} failures", audit.checks, audit.failures.len());
    println!("cache audit: {:?}", sched.cache().audit());
    for r in sched.into_finished() {
        println!("request {}: {:?}", r.id, r.generated);
    }
    Ok(())
}
