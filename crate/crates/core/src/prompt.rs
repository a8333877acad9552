//! Prompt assembly: the navigation system principle, the per-step prompt
//! with summarized history, and the auxiliary summarizer, instruction
//! generation and map drawing prompts.
//!
//! Templates are versioned text assets compiled into the binary; the CLI
//! `prompts` subcommand dumps them for audit. Template fill is single pass:
//! placeholder syntax inside substituted values is never re-expanded.

use thiserror::Error;

use crate::agent::HistoryBuffer;

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("template `{template}`: {problem}")]
    Template { template: String, problem: String },
    #[error("expected exactly {expected} captions, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("history is empty")]
    EmptyHistory,
}

/// A named body with `{placeholder}` slots. Every required placeholder
/// occurs in the body exactly once.
#[derive(Debug, Clone, Copy)]
pub struct PromptTemplate {
    pub name: &'static str,
    pub body: &'static str,
    pub required_placeholders: &'static [&'static str],
}

pub const SYSTEM_PRINCIPLE_TEMPLATE: PromptTemplate = PromptTemplate {
    name: "system_principle",
    body: include_str!("../assets/system_principle.txt"),
    required_placeholders: &["instruction", "init_observation"],
};

pub const DIRECTION_SUMMARY_TEMPLATE: PromptTemplate = PromptTemplate {
    name: "direction_summary",
    body: include_str!("../assets/direction_summary.txt"),
    required_placeholders: &["description"],
};

pub const VIEWPOINT_SUMMARY_TEMPLATE: PromptTemplate = PromptTemplate {
    name: "viewpoint_summary",
    body: include_str!("../assets/viewpoint_summary.txt"),
    required_placeholders: &["description"],
};

pub const INSTRUCTION_GENERATION_TEMPLATE: PromptTemplate = PromptTemplate {
    name: "instruction_generation",
    body: include_str!("../assets/instruction_generation.txt"),
    required_placeholders: &["trajectory"],
};

pub const MAP_DRAWING_TEMPLATE: PromptTemplate = PromptTemplate {
    name: "map_drawing",
    body: include_str!("../assets/map_drawing.txt"),
    required_placeholders: &["history"],
};

/// Every shipped template, for audit dumps.
pub fn templates() -> [&'static PromptTemplate; 5] {
    [
        &SYSTEM_PRINCIPLE_TEMPLATE,
        &DIRECTION_SUMMARY_TEMPLATE,
        &VIEWPOINT_SUMMARY_TEMPLATE,
        &INSTRUCTION_GENERATION_TEMPLATE,
        &MAP_DRAWING_TEMPLATE,
    ]
}

impl PromptTemplate {
    /// Substitute `{name}` slots from `bindings` in a single pass. Fails on
    /// a placeholder with no binding; substituted values are inserted
    /// verbatim and never re-expanded.
    pub fn fill(&self, bindings: &[(&str, &str)]) -> Result<String, PromptError> {
        let mut out = String::with_capacity(self.body.len());
        let mut rest = self.body;
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let close = after.find('}').ok_or_else(|| PromptError::Template {
                template: self.name.to_string(),
                problem: "unclosed `{` in template body".to_string(),
            })?;
            let key = &after[..close];
            let value = bindings
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| PromptError::Template {
                    template: self.name.to_string(),
                    problem: format!("placeholder `{key}` is unbound"),
                })?;
            out.push_str(value);
            rest = &after[close + 1..];
        }
        out.push_str(rest);
        Ok(out)
    }

    /// Count occurrences of `{name}` in the body.
    pub fn placeholder_count(&self, name: &str) -> usize {
        let token = format!("{{{name}}}");
        self.body.matches(&token).count()
    }
}

/// A fully assembled per-step prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPrompt {
    pub full_text: String,
    /// Crude length heuristic (4 characters per token), for budget
    /// warnings only; history summarization is the length control.
    pub token_estimate: usize,
}

/// 4-characters-per-token estimate, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}

/// Fill the frozen navigation principle with the instruction and the
/// rendered observation of the starting viewpoint. Both must be nonempty.
pub fn build_system_principle(
    instruction: &str,
    init_observation: &str,
) -> Result<String, PromptError> {
    if instruction.trim().is_empty() {
        return Err(PromptError::Template {
            template: SYSTEM_PRINCIPLE_TEMPLATE.name.to_string(),
            problem: "instruction is empty".to_string(),
        });
    }
    if init_observation.trim().is_empty() {
        return Err(PromptError::Template {
            template: SYSTEM_PRINCIPLE_TEMPLATE.name.to_string(),
            problem: "initial observation is empty".to_string(),
        });
    }
    SYSTEM_PRINCIPLE_TEMPLATE.fill(&[
        ("instruction", instruction),
        ("init_observation", init_observation),
    ])
}

/// Concatenate the principle, the summarized history triples in
/// chronological order, the full rendering of the current observation, and
/// a trailing cue requesting the next Thought/Action.
pub fn build_step_prompt(
    principle: &str,
    history: &HistoryBuffer,
    current_observation: &str,
) -> StepPrompt {
    let mut text = String::new();
    text.push_str(principle);
    text.push_str("\n\n");
    for entry in history.entries() {
        text.push_str(&format!(
            "Observation {}: {}\n",
            entry.step, entry.observation_summary
        ));
        text.push_str(&format!("Thought {}: {}\n", entry.step, entry.thought));
        text.push_str(&format!("Action {}: {}\n", entry.step, entry.action));
        text.push('\n');
    }
    let step = history.len();
    text.push_str(&format!("Observation {step}:\n{current_observation}\n"));
    text.push_str(&format!(
        "Reply now with your Thought and Action for step {step}."
    ));
    let token_estimate = estimate_tokens(&text);
    StepPrompt {
        full_text: text,
        token_estimate,
    }
}

/// The verbatim one-sentence viewpoint summarization prompt. The filled
/// text always ends with "The scene from the viewpoint is a".
pub fn build_viewpoint_summary_prompt(full_observation: &str) -> String {
    VIEWPOINT_SUMMARY_TEMPLATE
        .fill(&[("description", full_observation)])
        .expect("the description placeholder is always bound")
}

/// The verbatim per-direction summarization prompt. Takes exactly three
/// captions, in top/down/middle order, joined by newlines.
pub fn build_direction_summary_prompt(captions: &[String]) -> Result<String, PromptError> {
    if captions.len() != 3 {
        return Err(PromptError::Arity {
            expected: 3,
            got: captions.len(),
        });
    }
    let description = captions.join("\n");
    DIRECTION_SUMMARY_TEMPLATE.fill(&[("description", &description)])
}

/// Prompt asking for a navigation instruction that describes the traversed
/// trajectory. Includes only summarized observations and actions; the
/// reasoning traces are stripped so the generated instruction cannot leak
/// them.
pub fn build_instruction_generation_prompt(history: &HistoryBuffer) -> Result<String, PromptError> {
    if history.is_empty() {
        return Err(PromptError::EmptyHistory);
    }
    let mut block = String::new();
    for entry in history.entries() {
        block.push_str(&format!(
            "Observation {}: {}\n",
            entry.step, entry.observation_summary
        ));
        block.push_str(&format!("Action {}: {}\n", entry.step, entry.action));
    }
    INSTRUCTION_GENERATION_TEMPLATE.fill(&[("trajectory", &block)])
}

/// Prompt asking for a top-down plot of the visited viewpoints, fed with
/// the entire history including reasoning, turning angles, and step
/// distances.
pub fn build_map_drawing_prompt(history: &HistoryBuffer) -> Result<String, PromptError> {
    if history.is_empty() {
        return Err(PromptError::EmptyHistory);
    }
    let mut block = String::new();
    for entry in history.entries() {
        block.push_str(&format!(
            "Observation {}: {}\n",
            entry.step, entry.observation_summary
        ));
        block.push_str(&format!("Thought {}: {}\n", entry.step, entry.thought));
        block.push_str(&format!("Action {}: {}\n", entry.step, entry.action));
    }
    MAP_DRAWING_TEMPLATE.fill(&[("history", &block)])
}

/// One history triple recovered from a step prompt by [`scan_history_triples`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScannedTriple {
    pub step: usize,
    pub observation: String,
    pub thought: String,
    pub action: String,
}

/// Line scanner over a step prompt: recovers the complete
/// observation/thought/action triples in order. The current-observation
/// block at the tail has no thought or action and is not returned. Field
/// text runs until the next labeled marker line, so multi-line values
/// survive as long as they do not themselves start a line with a marker.
pub fn scan_history_triples(prompt_text: &str) -> Vec<ScannedTriple> {
    #[derive(PartialEq)]
    enum Kind {
        Observation,
        Thought,
        Action,
    }
    fn marker(line: &str) -> Option<(Kind, usize, &str)> {
        for (prefix, kind) in [
            ("Observation ", Kind::Observation),
            ("Thought ", Kind::Thought),
            ("Action ", Kind::Action),
        ] {
            if let Some(rest) = line.strip_prefix(prefix) {
                if let Some(colon) = rest.find(':') {
                    if let Ok(step) = rest[..colon].parse::<usize>() {
                        return Some((kind, step, rest[colon + 1..].trim_start()));
                    }
                }
            }
        }
        None
    }

    let mut fields: Vec<(Kind, usize, String)> = Vec::new();
    for line in prompt_text.lines() {
        match marker(line) {
            Some((kind, step, first)) => fields.push((kind, step, first.to_string())),
            None => {
                if let Some((_, _, text)) = fields.last_mut() {
                    if !text.is_empty() {
                        text.push('\n');
                    }
                    text.push_str(line);
                }
            }
        }
    }

    let mut triples = Vec::new();
    let mut i = 0;
    while i + 2 < fields.len() {
        if fields[i].0 == Kind::Observation
            && fields[i + 1].0 == Kind::Thought
            && fields[i + 2].0 == Kind::Action
            && fields[i].1 == fields[i + 1].1
            && fields[i].1 == fields[i + 2].1
        {
            triples.push(ScannedTriple {
                step: fields[i].1,
                observation: fields[i].2.trim_end().to_string(),
                thought: fields[i + 1].2.trim_end().to_string(),
                action: fields[i + 2].2.trim_end().to_string(),
            });
            i += 3;
        } else {
            i += 1;
        }
    }
    triples
}
