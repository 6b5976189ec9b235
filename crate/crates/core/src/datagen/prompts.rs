//! Fixed-template instruction tokens.
//!
//! Templates are `[MODE, TASK, HORIZON, PAD...]` over a small prompt
//! vocabulary; the instruction-following and track-following prompts for one
//! task differ in exactly the mode token.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simenv::TaskSpec;

pub const PROMPT_PAD: u16 = 0;
pub const PROMPT_MODE_INSTRUCTION: u16 = 1;
pub const PROMPT_MODE_TRACK: u16 = 2;
const TASK_BASE: u16 = 3;
const MAX_TASKS: u16 = 16;
const HORIZON_BASE: u16 = TASK_BASE + MAX_TASKS;
const MAX_HORIZON: u16 = 16;

pub const PROMPT_LEN: usize = 6;
pub const PROMPT_VOCAB: usize = (HORIZON_BASE + MAX_HORIZON) as usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Instruction,
    Track,
}

pub fn make_prompts(task: &TaskSpec, mode: PromptMode, horizon: usize) -> Result<Vec<u16>> {
    if task.task_id >= MAX_TASKS as u32 {
        return Err(Error::config(format!("task id {} exceeds prompt vocabulary", task.task_id)));
    }
    if horizon == 0 || horizon > MAX_HORIZON as usize {
        return Err(Error::config(format!("horizon {horizon} exceeds prompt vocabulary")));
    }
    let mode_tok = match mode {
        PromptMode::Instruction => PROMPT_MODE_INSTRUCTION,
        PromptMode::Track => PROMPT_MODE_TRACK,
    };
    let mut tokens = vec![PROMPT_PAD; PROMPT_LEN];
    tokens[0] = mode_tok;
    tokens[1] = TASK_BASE + task.task_id as u16;
    tokens[2] = HORIZON_BASE + (horizon as u16 - 1);
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(id: u32) -> TaskSpec {
        TaskSpec {
            task_id: id,
            target_object: id % 2,
            goal_anchor: [0.5, 0.5],
            tolerance: 0.05,
        }
    }

    #[test]
    fn modes_differ_in_exactly_one_position() {
        let a = make_prompts(&task(3), PromptMode::Instruction, 8).unwrap();
        let b = make_prompts(&task(3), PromptMode::Track, 8).unwrap();
        let diffs = a.iter().zip(&b).filter(|(x, y)| x != y).count();
        assert_eq!(diffs, 1);
        assert_eq!(a.len(), PROMPT_LEN);
        assert_eq!(b.len(), PROMPT_LEN);
    }

    #[test]
    fn distinct_tasks_give_distinct_sequences() {
        let mut seen = std::collections::HashSet::new();
        for id in 0..8 {
            let p = make_prompts(&task(id), PromptMode::Instruction, 8).unwrap();
            assert_eq!(p.len(), PROMPT_LEN);
            assert!(seen.insert(p));
        }
    }

    #[test]
    fn tokens_stay_in_vocabulary() {
        for id in 0..8 {
            for mode in [PromptMode::Instruction, PromptMode::Track] {
                let p = make_prompts(&task(id), mode, 8).unwrap();
                assert!(p.iter().all(|&t| (t as usize) < PROMPT_VOCAB));
            }
        }
    }
}
