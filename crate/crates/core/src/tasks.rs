//! Planted-needle retrieval tasks with a dense calibration filter.
//!
//! A task's prompt has filler rows pointing away from the query direction
//! and needle rows pointing along it plus a seeded payload. The expected
//! answer is the dense model's greedy continuation; a task is kept only if
//! removing the needles changes that answer and every answer token wins by a
//! minimum logit margin.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::importance::ScoreConfig;
use crate::model::{Model, ModelConfig};
use crate::pipeline::{DropPolicy, Mode};
use crate::scheduler::greedy_generate;
use crate::synth::{needle_positions, needle_span_states};
use crate::tensor::HiddenStates;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    NeedleRetrieval,
    MultiNeedle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTemplate {
    pub kind: TaskKind,
    pub prompt_length: usize,
    /// Needle depths as fractions of the prompt.
    pub depths: Vec<f64>,
    pub seed: u64,
    #[serde(default = "default_answer_len")]
    pub answer_len: usize,
}

fn default_answer_len() -> usize {
    4
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub min_margin: f32,
    pub payload_scale: f32,
    /// Query rows the needle direction is aligned with.
    pub window: usize,
    /// Consecutive rows each needle occupies.
    #[serde(default = "default_span")]
    pub needle_span: usize,
}

fn default_span() -> usize {
    1
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            min_margin: 0.05,
            payload_scale: 1.0,
            window: 16,
            needle_span: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub id: usize,
    pub kind: TaskKind,
    pub prompt_length: usize,
    pub needle_positions: Vec<usize>,
    pub expected: Vec<u32>,
    pub seed: u64,
    pub margin: f32,
    pub payload_scale: f32,
    pub window: usize,
    #[serde(default = "default_span")]
    pub needle_span: usize,
}

impl SyntheticTask {
    pub fn prompt(&self, model: &Model) -> Result<HiddenStates> {
        needle_span_states(
            model,
            self.prompt_length,
            &self.needle_positions,
            self.needle_span,
            self.window,
            self.payload_scale,
            self.seed,
        )
    }
}

/// Suite file for the `tasks` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSuite {
    pub model: ModelConfig,
    pub score: ScoreConfig,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    pub tasks: Vec<TaskTemplate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub template: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedSuite {
    pub tasks: Vec<SyntheticTask>,
    pub rejected: Vec<Rejection>,
}

fn top_two_margin(logits: &[f32]) -> f32 {
    let mut s: Vec<f32> = logits.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    s[0] - s.get(1).copied().unwrap_or(f32::NEG_INFINITY)
}

/// Build every template, keep the ones whose dense answer depends on the
/// needles and wins every step by a clear logit margin.
pub fn calibrate(model: &Model, templates: &[TaskTemplate], cal: &CalibrationConfig) -> Result<CalibratedSuite> {
    let mut out = CalibratedSuite {
        tasks: Vec::new(),
        rejected: Vec::new(),
    };
    for (i, t) in templates.iter().enumerate() {
        let needed = match t.kind {
            TaskKind::NeedleRetrieval => 1,
            TaskKind::MultiNeedle => 2,
        };
        if t.depths.len() < needed || t.answer_len == 0 || t.prompt_length == 0 {
            return Err(config_err(format!("task template {i} is malformed")));
        }
        let positions = needle_positions(t.prompt_length, &t.depths);
        let span = cal.needle_span;
        let with = needle_span_states(model, t.prompt_length, &positions, span, cal.window, cal.payload_scale, t.seed)?;
        let without = needle_span_states(model, t.prompt_length, &[], span, cal.window, cal.payload_scale, t.seed)?;
        let answer = greedy_generate(model, &with, t.answer_len, None)?;
        let control = greedy_generate(model, &without, t.answer_len, None)?;
        let margin = answer.logits.iter().map(|l| top_two_margin(l)).fold(f32::INFINITY, f32::min);
        let reject = |reason: &str| Rejection {
            template: i,
            reason: reason.to_string(),
        };
        if answer.tokens == control.tokens {
            out.rejected.push(reject("answer does not depend on the needles"));
        } else if margin < cal.min_margin {
            out.rejected.push(reject("answer margin below threshold"));
        } else {
            out.tasks.push(SyntheticTask {
                id: i,
                kind: t.kind,
                prompt_length: t.prompt_length,
                needle_positions: positions,
                expected: answer.tokens,
                seed: t.seed,
                margin,
                payload_scale: cal.payload_scale,
                window: cal.window,
                needle_span: span,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: usize,
    pub kind: TaskKind,
    pub prompt_length: usize,
    pub mode: Mode,
    pub answer: Vec<u32>,
    pub expected: Vec<u32>,
    pub correct: bool,
    /// Every needle was kept at every drop where it was active.
    pub needles_retained: bool,
    pub mean_retention: f64,
}

pub fn run_task_suite(model: &Model, tasks: &[SyntheticTask], mode: Mode, score: &ScoreConfig) -> Result<Vec<TaskResult>> {
    let policy = DropPolicy::new(*score);
    tasks
        .iter()
        .map(|t| {
            let prompt = t.prompt(model)?;
            let p = (mode == Mode::Accelerated).then_some(&policy);
            let g = greedy_generate(model, &prompt, t.expected.len(), p)?;
            let needles_retained = t
                .needle_positions
                .iter()
                .all(|&n| g.selections.iter().all(|e| e.kept(n) != Some(false)));
            let mean_retention = if g.selections.is_empty() {
                1.0
            } else {
                g.selections.iter().map(|e| e.selection.retention_ratio).sum::<f64>() / g.selections.len() as f64
            };
            Ok(TaskResult {
                task_id: t.id,
                kind: t.kind,
                prompt_length: t.prompt_length,
                mode,
                correct: g.tokens == t.expected,
                answer: g.tokens,
                expected: t.expected.clone(),
                needles_retained,
                mean_retention,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub kind: TaskKind,
    pub prompt_length: usize,
    pub mode: Mode,
    pub tasks: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Accuracy per (task kind, prompt length, mode).
pub fn accuracy_table(results: &[TaskResult]) -> Vec<AccuracyRow> {
    let mut cells: BTreeMap<(TaskKind, usize, Mode), (usize, usize)> = BTreeMap::new();
    for r in results {
        let c = cells.entry((r.kind, r.prompt_length, r.mode)).or_default();
        c.0 += 1;
        c.1 += r.correct as usize;
    }
    cells
        .into_iter()
        .map(|((kind, prompt_length, mode), (tasks, correct))| AccuracyRow {
            kind,
            prompt_length,
            mode,
            tasks,
            correct,
            accuracy: correct as f64 / tasks as f64,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        let mut c = ModelConfig::pure_full(2, 32, 4, 21);
        c.init_std = 0.2;
        Model::build(c).unwrap()
    }

    fn templates() -> Vec<TaskTemplate> {
        (0..6)
            .map(|s| TaskTemplate {
                kind: if s % 2 == 0 { TaskKind::NeedleRetrieval } else { TaskKind::MultiNeedle },
                prompt_length: 96,
                depths: vec![0.3, 0.6],
                seed: s,
                answer_len: 3,
            })
            .collect()
    }

    fn score(p: f64) -> ScoreConfig {
        ScoreConfig {
            query_window_n: 16,
            block_size_g: 8,
            sink_count_a: 8,
            top_p: p,
        }
    }

    #[test]
    fn dense_accuracy_is_total_on_calibrated_tasks() {
        let m = model();
        let suite = calibrate(&m, &templates(), &CalibrationConfig::default()).unwrap();
        assert_eq!(suite.tasks.len() + suite.rejected.len(), 6);
        let r = run_task_suite(&m, &suite.tasks, Mode::Dense, &score(0.9)).unwrap();
        assert!(r.iter().all(|t| t.correct));
    }

    #[test]
    fn p_one_matches_dense() {
        let m = model();
        let suite = calibrate(&m, &templates(), &CalibrationConfig::default()).unwrap();
        let dense = run_task_suite(&m, &suite.tasks, Mode::Dense, &score(1.0)).unwrap();
        let acc = run_task_suite(&m, &suite.tasks, Mode::Accelerated, &score(1.0)).unwrap();
        for (a, b) in dense.iter().zip(&acc) {
            assert_eq!(a.answer, b.answer);
        }
    }

    #[test]
    fn sink_needle_is_retained() {
        let m = model();
        let t = TaskTemplate {
            kind: TaskKind::NeedleRetrieval,
            prompt_length: 128,
            depths: vec![0.02],
            seed: 4,
            answer_len: 2,
        };
        let positions = needle_positions(128, &t.depths);
        assert!(positions[0] < 8);
        let task = SyntheticTask {
            id: 0,
            kind: t.kind,
            prompt_length: 128,
            needle_positions: positions,
            expected: vec![0, 0],
            seed: 4,
            margin: 0.0,
            payload_scale: 1.0,
            window: 16,
            needle_span: 1,
        };
        let r = run_task_suite(&m, &[task], Mode::Accelerated, &score(0.99)).unwrap();
        assert!(r[0].needles_retained);
    }

    #[test]
    fn accuracy_groups_cells() {
        let mk = |len, correct| TaskResult {
            task_id: 0,
            kind: TaskKind::NeedleRetrieval,
            prompt_length: len,
            mode: Mode::Dense,
            answer: vec![],
            expected: vec![],
            correct,
            needles_retained: true,
            mean_retention: 1.0,
        };
        let t = accuracy_table(&[mk(10, true), mk(10, false), mk(20, true)]);
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].accuracy, 0.5);
        assert_eq!(t[1].accuracy, 1.0);
    }
}
