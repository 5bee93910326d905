//! Continuous batching against isolated single-request runs.

use prefill_engine::pipeline::DropPolicy;
use prefill_engine::propagation::accelerated_prefill;
use prefill_engine::scheduler::{greedy_generate, Request, Scheduler, SchedulerConfig};
use prefill_engine::synth::random_states;
use prefill_engine::{Model, ModelConfig, ScoreConfig};

fn model() -> Model {
    let mut cfg = ModelConfig::linear_hybrid(2, 32, 4, 11);
    cfg.init_std = 0.3;
    Model::build(cfg).unwrap()
}

fn score() -> ScoreConfig {
    ScoreConfig {
        query_window_n: 8,
        block_size_g: 8,
        sink_count_a: 8,
        top_p: 0.9,
    }
}

fn max_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn single_prefill_matches_accelerated_prefill() {
    let model = model();
    let x = random_states(96, 32, 1);
    let policy = DropPolicy::new(score());
    let cfg = SchedulerConfig {
        token_budget: 8192,
        policy: Some(policy),
    };
    let req = Request {
        id: 0,
        arrival_step: 0,
        prompt: x.clone(),
        max_new_tokens: 1,
    };
    let mut s = Scheduler::new(&model, cfg, vec![req]).unwrap();
    s.run_to_completion(4).unwrap();
    let done = s.into_finished();
    let direct = accelerated_prefill(&model, &x, &score(), None).unwrap();
    assert_eq!(done[0].logits[0], direct.last_logits(&model));
    assert_eq!(done[0].history.as_ref(), Some(&direct.history));
}

#[test]
fn two_prefills_batched_match_separate_runs() {
    let model = model();
    let prompts = [random_states(100, 32, 2), random_states(50, 32, 3)];
    for policy in [None, Some(DropPolicy::new(score()))] {
        let requests: Vec<Request> = prompts
            .iter()
            .enumerate()
            .map(|(i, p)| Request {
                id: i as u64,
                arrival_step: 0,
                prompt: p.clone(),
                max_new_tokens: 1,
            })
            .collect();
        let cfg = SchedulerConfig {
            token_budget: 8192,
            policy: policy.clone(),
        };
        let mut s = Scheduler::new(&model, cfg, requests).unwrap();
        let first = s.step().unwrap();
        assert_eq!(first.prefills, 2);
        assert_eq!(first.batch_tokens, 150);
        s.run_to_completion(4).unwrap();
        for r in s.into_finished() {
            let alone = greedy_generate(&model, &prompts[r.id as usize], 1, policy.as_ref()).unwrap();
            assert!(max_diff(&r.logits[0], &alone.logits[0]) <= 1e-5);
        }
    }
}

#[test]
fn decodes_unaffected_by_coscheduled_prefill() {
    let model = model();
    let prompts: Vec<_> = (0..4).map(|i| random_states(40 + 20 * i, 32, 10 + i as u64)).collect();
    // Three requests are decoding by step 2, when the fourth arrives.
    let requests: Vec<Request> = prompts
        .iter()
        .enumerate()
        .map(|(i, p)| Request {
            id: i as u64,
            arrival_step: if i == 3 { 2 } else { 0 },
            prompt: p.clone(),
            max_new_tokens: 5,
        })
        .collect();
    let policy = DropPolicy::new(score());
    let cfg = SchedulerConfig {
        token_budget: 8192,
        policy: Some(policy.clone()),
    };
    let mut s = Scheduler::new(&model, cfg, requests).unwrap();
    let mut mixed = false;
    while !s.is_done() {
        let out = s.step().unwrap();
        mixed |= out.prefills == 1 && out.decodes == 3;
    }
    assert!(mixed, "no step mixed one prefill with three decodes");
    for r in s.into_finished() {
        let alone = greedy_generate(&model, &prompts[r.id as usize], 5, Some(&policy)).unwrap();
        assert_eq!(r.generated, alone.tokens);
        for (a, b) in r.logits.iter().zip(&alone.logits) {
            assert!(max_diff(a, b) <= 1e-5);
        }
    }
}
