//! Synthetic string-transformation tasks with mechanically checkable answers.
//! These supply the gold corpus: every response is a deterministic function
//! of the prompt, so judges and tests can verify correctness exactly.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

const ALPHABET: &[u8] = b"abcdefghij";
const MIN_LEN: usize = 3;
const MAX_LEN: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// "reverse: abc" -> "cba"
    Reverse,
    /// "upper: abc" -> "ABC"
    Upper,
    /// "copy2: ab" -> "abab", "copy3: ab" -> "ababab"
    Copy(u8),
}

impl TaskKind {
    pub fn parse(name: &str) -> Result<TaskKind> {
        match name {
            "reverse" => Ok(TaskKind::Reverse),
            "upper" => Ok(TaskKind::Upper),
            "copy2" => Ok(TaskKind::Copy(2)),
            "copy3" => Ok(TaskKind::Copy(3)),
            other => Err(Error::config(format!("unknown task '{other}'"))),
        }
    }

    pub fn name(&self) -> String {
        match self {
            TaskKind::Reverse => "reverse".into(),
            TaskKind::Upper => "upper".into(),
            TaskKind::Copy(n) => format!("copy{n}"),
        }
    }

    fn apply(&self, arg: &str) -> String {
        match self {
            TaskKind::Reverse => arg.chars().rev().collect(),
            TaskKind::Upper => arg.to_ascii_uppercase(),
            TaskKind::Copy(n) => arg.repeat(*n as usize),
        }
    }
}

pub const DEFAULT_MIX: [TaskKind; 3] = [TaskKind::Reverse, TaskKind::Upper, TaskKind::Copy(2)];

/// Deterministically generate `n_pairs` (prompt, gold response) pairs,
/// cycling through `mix` and drawing arguments from a seeded stream.
pub fn generate(mix: &[TaskKind], n_pairs: usize, seed: u64) -> Result<Vec<(String, String)>> {
    if mix.is_empty() {
        return Err(Error::config("task mix must be nonempty"));
    }
    if n_pairs == 0 {
        return Err(Error::config("n_pairs must be >= 1"));
    }
    let mut out = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let task = mix[i % mix.len()];
        let mut rng = rng::stream(seed, Purpose::Corpus, i as u64, 0);
        let len = rng.gen_range(MIN_LEN..=MAX_LEN);
        let arg: String = (0..len)
            .map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())] as char)
            .collect();
        let prompt = format!("{}: {}", task.name(), arg);
        let response = task.apply(&arg);
        out.push((prompt, response));
    }
    Ok(out)
}

/// Parse a task prompt back into (task, argument).
pub fn parse_prompt(prompt: &str) -> Option<(TaskKind, &str)> {
    let (name, arg) = prompt.split_once(": ")?;
    let task = TaskKind::parse(name).ok()?;
    Some((task, arg))
}

/// True when `response` is exactly the gold answer for `prompt`.
pub fn check(prompt: &str, response: &str) -> bool {
    match parse_prompt(prompt) {
        Some((task, arg)) => task.apply(arg) == response,
        None => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&DEFAULT_MIX, 100, 1).unwrap();
        let b = generate(&DEFAULT_MIX, 100, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        let c = generate(&DEFAULT_MIX, 100, 2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn every_gold_response_passes_the_checker() {
        for (prompt, response) in generate(&DEFAULT_MIX, 200, 9).unwrap() {
            assert!(check(&prompt, &response), "{prompt} -> {response}");
            assert!(!check(&prompt, &format!("{response}x")));
        }
    }

    #[test]
    fn single_task_mix_produces_only_that_task() {
        let pairs = generate(&[TaskKind::Upper], 30, 3).unwrap();
        assert!(pairs.iter().all(|(p, _)| p.starts_with("upper: ")));
    }

    #[test]
    fn task_semantics() {
        assert_eq!(TaskKind::Reverse.apply("abc"), "cba");
        assert_eq!(TaskKind::Upper.apply("abc"), "ABC");
        assert_eq!(TaskKind::Copy(2).apply("ab"), "abab");
        assert_eq!(TaskKind::Copy(3).apply("ab"), "ababab");
    }

    #[test]
    fn unknown_task_name_is_config_error() {
        assert!(TaskKind::parse("rot13").is_err());
        assert!(TaskKind::parse("reverse").is_ok());
    }

    #[test]
    fn checker_rejects_malformed_prompts() {
        assert!(!check("no separator", "x"));
        assert!(!check("rot13: abc", "abc"));
    }
}
