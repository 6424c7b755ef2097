//! Closed vocabulary of the templated task strings.

use crate::error::{Result, WorldError};
use crate::scene::{Shape, COLORS};

pub const ROBOT: &str = "robot";
const FUNCTION_WORDS: [&str; 3] = ["put", "the", "on"];

pub fn words() -> Vec<&'static str> {
    let mut w = vec![ROBOT];
    w.extend(FUNCTION_WORDS);
    w.extend(COLORS.iter().map(|c| c.0));
    w.extend(Shape::ALL.iter().map(|s| s.noun()));
    w
}

pub fn vocab_size() -> usize {
    words().len()
}

/// Longest task string the templates produce.
pub const MAX_WORDS: usize = 9;

pub fn tokenize(task: &str) -> Result<Vec<usize>> {
    let w = words();
    task.split_whitespace()
        .map(|t| {
            w.iter()
                .position(|x| *x == t)
                .ok_or_else(|| WorldError::UnknownWord(t.to_string()))
        })
        .collect()
}

/// `[robot] put the {color} {shape} on the {color} {shape}`.
pub fn task_string(src: (&str, &str), dst: (&str, &str), robot: bool) -> String {
    let body = format!("put the {} {} on the {} {}", src.0, src.1, dst.0, dst.1);
    if robot {
        format!("{ROBOT} {body}")
    } else {
        body
    }
}

pub fn mentions(task: &str, noun: &str) -> bool {
    task.split_whitespace().any(|w| w == noun)
}
