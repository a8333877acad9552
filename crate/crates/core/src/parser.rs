//! Parsing of model Thought/Action replies into validated decisions.
//!
//! The parser is total: any input string yields either a decision or a
//! typed error, never a panic. Markers (`Thought:`, `Action:`,
//! `Final Answer`) are matched case-insensitively at line starts, and the
//! last occurrence wins, since models sometimes restate the format. A
//! `Final Answer` line after the last thought stops the episode even when
//! a stray action line follows it; a casual "final answer" mention inside
//! a thought sentence does not.

use std::collections::BTreeSet;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("response contains no Action or Final Answer line")]
    MissingAction,
    #[error("Action line carries no token")]
    EmptyActionToken,
    #[error("viewpoint `{token}` is not among the navigable candidates {candidates:?}")]
    HallucinatedViewpoint {
        token: String,
        candidates: Vec<String>,
    },
}

/// The decision extracted from a reply: either move to a viewpoint or stop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    MoveTo(String),
    Stop(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedDecision {
    /// The last reasoning block; empty when the reply carried none.
    pub thought: String,
    pub action: Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MarkerKind {
    Thought,
    Action,
    FinalAnswer,
}

fn starts_with_ci(text: &str, prefix: &str) -> bool {
    text.len() >= prefix.len()
        && text.as_bytes()[..prefix.len()].eq_ignore_ascii_case(prefix.as_bytes())
}

/// Classify a line as a marker line and return its payload (the text after
/// the marker on the same line).
fn line_marker(line: &str) -> Option<(MarkerKind, &str)> {
    let t = line.trim_start();
    if starts_with_ci(t, "thought:") {
        Some((MarkerKind::Thought, &t["thought:".len()..]))
    } else if starts_with_ci(t, "action:") {
        Some((MarkerKind::Action, &t["action:".len()..]))
    } else if starts_with_ci(t, "final answer") {
        let payload = t["final answer".len()..].trim_start_matches([':', ' ', '\t']);
        Some((MarkerKind::FinalAnswer, payload))
    } else {
        None
    }
}

fn strip_decorations(token: &str) -> &str {
    token.trim_matches(|c: char| {
        matches!(
            c,
            '"' | '\'' | '`' | '.' | ',' | ';' | ':' | '!' | '?' | '(' | ')' | '[' | ']' | '{'
                | '}' | '<' | '>' | '*'
        )
    })
}

/// Extract the last Thought block and the decision from a raw reply.
///
/// The thought is the payload of the last `Thought:` line plus following
/// lines up to the next marker line. The decision is the last
/// `Final Answer` line after that thought when one exists, otherwise the
/// last `Action:` line; its target is the first whitespace-delimited token
/// after the marker, stripped of surrounding quotes and punctuation, with
/// any further content on the line ignored.
pub fn parse_response(raw: &str) -> Result<ParsedDecision, ParseError> {
    let lines: Vec<&str> = raw.lines().collect();
    let markers: Vec<(usize, MarkerKind, &str)> = lines
        .iter()
        .enumerate()
        .filter_map(|(i, line)| line_marker(line).map(|(k, p)| (i, k, p)))
        .collect();

    let last_thought = markers
        .iter()
        .rev()
        .find(|(_, k, _)| *k == MarkerKind::Thought);

    let thought = match last_thought {
        None => String::new(),
        Some(&(line_idx, _, first)) => {
            let mut parts = vec![first.trim()];
            for line in lines.iter().skip(line_idx + 1) {
                if line_marker(line).is_some() {
                    break;
                }
                parts.push(line.trim());
            }
            parts.join("\n").trim().to_string()
        }
    };

    let thought_line = last_thought.map(|&(i, _, _)| i);
    let stop = markers
        .iter()
        .rev()
        .find(|(i, k, _)| *k == MarkerKind::FinalAnswer && thought_line.is_none_or(|t| *i > t));
    if let Some(&(_, _, payload)) = stop {
        return Ok(ParsedDecision {
            thought,
            action: Action::Stop(payload.trim().to_string()),
        });
    }

    let action = markers
        .iter()
        .rev()
        .find(|(_, k, _)| *k == MarkerKind::Action);
    let Some(&(_, _, payload)) = action else {
        return Err(ParseError::MissingAction);
    };
    let token = payload
        .split_whitespace()
        .next()
        .map(strip_decorations)
        .unwrap_or("");
    if token.is_empty() {
        return Err(ParseError::EmptyActionToken);
    }
    Ok(ParsedDecision {
        thought,
        action: Action::MoveTo(token.to_string()),
    })
}

/// Enforce that a move target is one of the navigable candidates. The
/// comparison is exact after trimming (the parser already strips
/// decorations); stopping is always valid.
pub fn validate_action(
    decision: ParsedDecision,
    candidates: &BTreeSet<String>,
) -> Result<ParsedDecision, ParseError> {
    match &decision.action {
        Action::Stop(_) => Ok(decision),
        Action::MoveTo(token) => {
            if candidates.contains(token.trim()) {
                Ok(decision)
            } else {
                Err(ParseError::HallucinatedViewpoint {
                    token: token.clone(),
                    candidates: candidates.iter().cloned().collect(),
                })
            }
        }
    }
}
