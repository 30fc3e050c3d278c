//! Prompt rendering and reply parsing.
//!
//! A rendered prompt is, in order: the rules, the inventory as a
//! comma-separated list, the trial history (one `a + b -> result` or
//! `a + b -> failure` line per trial, most recent last) and the reply
//! instruction. Blocks are separated by one blank line.

use serde::{Deserialize, Serialize};

use super::AgentError;
use crate::engine::{SessionState, TrialRecord};
use crate::recipes::{normalize_name, RecipeGraph};

pub const SYSTEM_PROMPT: &str = include_str!("../../assets/prompts/system_v1.txt");
pub const INSTRUCTION: &str = include_str!("../../assets/prompts/instruction_v1.txt");
pub const ENGINEERED_PASSAGE: &str = include_str!("../../assets/prompts/engineered_v1.txt");

/// History lines kept when the full history exceeds the character budget.
pub const FALLBACK_WINDOW: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    #[default]
    Baseline,
    Engineered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryWindow {
    #[default]
    Full,
    Last(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle {
    pub system: String,
    pub inventory_block: String,
    pub history_block: String,
    pub instruction: String,
    pub variant: PromptVariant,
}

impl PromptBundle {
    pub fn build(state: &SessionState, variant: PromptVariant, window: HistoryWindow) -> Self {
        let history = state.history();
        let shown = match window {
            HistoryWindow::Full => history,
            HistoryWindow::Last(w) => &history[history.len().saturating_sub(w.max(1))..],
        };
        let omitted = history.len() - shown.len();
        Self::assemble(state, variant, shown, omitted)
    }

    fn assemble(state: &SessionState, variant: PromptVariant, shown: &[TrialRecord], omitted: usize) -> Self {
        let graph = state.graph();
        let inventory_block = format!("Current inventory: {}", state.inventory_names().join(", "));
        let mut lines = Vec::with_capacity(shown.len() + 2);
        lines.push("Trial history:".to_string());
        if omitted > 0 {
            let found: Vec<String> = state.inventory_names().into_iter().skip(graph.initial_elements().len()).collect();
            let found = if found.is_empty() { "none".to_string() } else { found.join(", ") };
            lines.push(format!("{omitted} prior trials omitted; discoveries so far: {found}"));
        }
        if shown.is_empty() && omitted == 0 {
            lines.push("(no trials yet)".to_string());
        }
        lines.extend(shown.iter().map(|r| history_line(graph, r)));
        let mut instruction = String::new();
        if variant == PromptVariant::Engineered {
            instruction.push_str(ENGINEERED_PASSAGE.trim_end());
            instruction.push('\n');
        }
        instruction.push_str(INSTRUCTION.trim_end());
        PromptBundle {
            system: SYSTEM_PROMPT.trim_end().to_string(),
            inventory_block,
            history_block: lines.join("\n"),
            instruction,
            variant,
        }
    }

    /// The per-trial user message (everything except the rules).
    pub fn user_message(&self) -> String {
        format!("{}\n\n{}\n\n{}", self.inventory_block, self.history_block, self.instruction)
    }

    pub fn render(&self) -> String {
        format!("{}\n\n{}\n", self.system, self.user_message())
    }
}

pub fn history_line(graph: &RecipeGraph, r: &TrialRecord) -> String {
    let outcome = if r.success {
        r.results.iter().map(|e| graph.name(*e)).collect::<Vec<_>>().join(", ")
    } else {
        "failure".to_string()
    };
    format!("{} + {} -> {}", r.proposed.0, r.proposed.1, outcome)
}

/// Renders the prompt; with `char_budget` set and the full history too
/// long, falls back to the last [`FALLBACK_WINDOW`] trials plus a summary
/// line.
pub fn render_prompt(
    state: &SessionState,
    variant: PromptVariant,
    window: HistoryWindow,
    char_budget: Option<usize>,
) -> PromptBundle {
    let bundle = PromptBundle::build(state, variant, window);
    match (window, char_budget) {
        (HistoryWindow::Full, Some(budget)) if bundle.render().len() > budget => {
            PromptBundle::build(state, variant, HistoryWindow::Last(FALLBACK_WINDOW))
        }
        _ => bundle,
    }
}

fn is_name_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\'' || c == '-' || c == '_'
}

/// Words of a maximal run of name characters and single spaces/tabs.
fn word_run(s: &str, from_end: bool) -> Vec<&str> {
    let trimmed = if from_end { s.trim_end() } else { s.trim_start() };
    let mut words = Vec::new();
    let mut rest = trimmed;
    loop {
        let word = if from_end {
            let start = rest.char_indices().rev().take_while(|(_, c)| is_name_char(*c)).last().map(|(i, _)| i);
            start.map(|i| {
                let w = &rest[i..];
                rest = &rest[..i];
                w
            })
        } else {
            let end = rest.char_indices().take_while(|(_, c)| is_name_char(*c)).last().map(|(i, c)| i + c.len_utf8());
            end.map(|i| {
                let w = &rest[..i];
                rest = &rest[i..];
                w
            })
        };
        let Some(word) = word else { break };
        words.push(word);
        // continue only across horizontal whitespace
        let ws_len = if from_end {
            rest.len() - rest.trim_end_matches([' ', '\t']).len()
        } else {
            rest.len() - rest.trim_start_matches([' ', '\t']).len()
        };
        if ws_len == 0 {
            break;
        }
        rest = if from_end { &rest[..rest.len() - ws_len] } else { &rest[ws_len..] };
    }
    if from_end {
        words.reverse();
    }
    words
}

/// Picks the longest known element name adjacent to the `+`, falling back
/// to the single adjacent word.
fn pick_name(words: &[&str], graph: Option<&RecipeGraph>, from_end: bool) -> String {
    let n = words.len();
    if let Some(g) = graph {
        for len in (1..=n).rev() {
            let slice = if from_end { &words[n - len..] } else { &words[..len] };
            let candidate = normalize_name(&slice.join(" "));
            if g.id_of(&candidate).is_some() {
                return candidate;
            }
        }
    }
    let word = if from_end { words[n - 1] } else { words[0] };
    normalize_name(word)
}

/// Finds the last `A + B` in the reply and returns both names lowercased.
/// Validity is left to the engine.
pub fn parse_reply(text: &str, graph: Option<&RecipeGraph>) -> Result<(String, String), AgentError> {
    // emphasis and quoting marks around names
    let cleaned: String = text.chars().map(|c| if matches!(c, '*' | '`' | '"' | '“' | '”') { ' ' } else { c }).collect();
    let text = cleaned.as_str();
    for (pos, _) in text.match_indices('+').collect::<Vec<_>>().into_iter().rev() {
        let left = word_run(&text[..pos], true);
        let right = word_run(&text[pos + 1..], false);
        if left.is_empty() || right.is_empty() {
            continue;
        }
        return Ok((pick_name(&left, graph, true), pick_name(&right, graph, false)));
    }
    Err(AgentError::UnparseableReply(text.chars().take(200).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::SessionConfig;
    use crate::synthetic::g4;
    use std::sync::Arc;

    fn session() -> SessionState {
        SessionState::new(Arc::new(g4()), 0, SessionConfig::default())
    }

    #[test]
    fn fresh_prompt_layout() {
        let text = PromptBundle::build(&session(), PromptVariant::Baseline, HistoryWindow::Full).render();
        let expected = format!(
            "{}\n\nCurrent inventory: water, fire, earth, air\n\nTrial history:\n(no trials yet)\n\n{}\n",
            SYSTEM_PROMPT.trim_end(),
            INSTRUCTION.trim_end()
        );
        assert_eq!(text, expected);
    }

    #[test]
    fn window_keeps_most_recent_last() {
        let mut s = session();
        s.apply_combination("water", "fire").unwrap();
        s.apply_combination("air", "air").unwrap();
        s.apply_combination("water", "earth").unwrap();
        let b = PromptBundle::build(&s, PromptVariant::Baseline, HistoryWindow::Last(2));
        assert_eq!(
            b.history_block,
            "Trial history:\n1 prior trials omitted; discoveries so far: steam, mud\nair + air -> failure\nwater + earth -> mud"
        );
        assert!(b.inventory_block.ends_with("steam, mud"));
    }

    #[test]
    fn engineered_variant_adds_guidance() {
        let text = PromptBundle::build(&session(), PromptVariant::Engineered, HistoryWindow::Full).render();
        assert!(text.contains("Exploration strategy:"));
        assert!(text.contains("Avoid repetition"));
        let base = PromptBundle::build(&session(), PromptVariant::Baseline, HistoryWindow::Full).render();
        assert!(!base.contains("Avoid repetition"));
    }

    #[test]
    fn budget_fallback_truncates_long_histories() {
        let mut s = session();
        for _ in 0..300 {
            s.apply_combination("air", "air").unwrap();
        }
        let full = render_prompt(&s, PromptVariant::Baseline, HistoryWindow::Full, None);
        assert_eq!(full.history_block.lines().count(), 301);
        let cut = render_prompt(&s, PromptVariant::Baseline, HistoryWindow::Full, Some(4000));
        let lines: Vec<&str> = cut.history_block.lines().collect();
        assert_eq!(lines.len(), 2 + FALLBACK_WINDOW);
        assert_eq!(lines[1], "100 prior trials omitted; discoveries so far: none");
    }

    #[test]
    fn parses_simple_and_last_match() {
        assert_eq!(parse_reply("water + fire", None).unwrap(), ("water".into(), "fire".into()));
        let g = g4();
        let r = parse_reply("I considered mud + air, but I'll try: water + earth", Some(&g)).unwrap();
        assert_eq!(r, ("water".into(), "earth".into()));
        assert_eq!(parse_reply("**Water** + **Fire**.", None).unwrap(), ("water".into(), "fire".into()));
        assert!(matches!(parse_reply("I give up", None), Err(AgentError::UnparseableReply(_))));
        assert!(parse_reply("1 + ", None).is_err());
    }

    #[test]
    fn multi_word_names_resolve_against_graph() {
        let mut file = crate::synthetic::g4_file();
        file.elements.push(crate::recipes::ElementEntry { id: 8, name: "big bang".into(), initial: false, category: None });
        let g = crate::recipes::RecipeGraph::from_file_repr(file).unwrap();
        let r = parse_reply("Let me try Big Bang + water now", Some(&g)).unwrap();
        assert_eq!(r, ("big bang".into(), "water".into()));
        // without the graph only the adjacent word is taken
        assert_eq!(parse_reply("try Big Bang + water", None).unwrap(), ("bang".into(), "water".into()));
    }
}
