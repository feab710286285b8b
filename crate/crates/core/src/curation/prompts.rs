//! Prompt templates for the extract / identify / verify calls.
//!
//! Templates use `{name}` placeholders and are substituted in a single pass,
//! so placeholder-like text inside the substituted values is left alone.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const DEFAULT_PROMPTS: &str = include_str!("prompts.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompts {
    #[serde(default)]
    pub system: String,
    /// Placeholders: `{solution}`.
    pub extract: String,
    /// Placeholders: `{answer}`, `{cot}`, `{feedback}`.
    pub identify: String,
    /// Placeholders: `{span}`, `{answer}`.
    pub verify: String,
    /// Appended to the feedback once per rejected span. Placeholder: `{span}`.
    pub feedback: String,
}

impl Default for Prompts {
    fn default() -> Self {
        toml::from_str(DEFAULT_PROMPTS).expect("bundled prompts parse")
    }
}

impl Prompts {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
        toml::from_str(&text).map_err(|e| e.to_string())
    }

    pub fn extract_prompt(&self, solution: &str) -> String {
        render(&self.extract, &[("solution", solution)])
    }

    pub fn identify_prompt(&self, answer: &str, cot: &str, rejected: &[String]) -> String {
        let feedback: String = rejected
            .iter()
            .map(|span| render(&self.feedback, &[("span", span)]))
            .collect();
        render(
            &self.identify,
            &[("answer", answer), ("cot", cot), ("feedback", &feedback)],
        )
    }

    pub fn verify_prompt(&self, span: &str, answer: &str) -> String {
        render(&self.verify, &[("span", span), ("answer", answer)])
    }
}

/// Single-pass `{name}` substitution. Unknown placeholders are kept verbatim.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let vars: HashMap<&str, &str> = vars.iter().copied().collect();
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if vars.contains_key(&after[..close]) => {
                out.push_str(vars[&after[..close]]);
                rest = &after[close + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pass_substitution() {
        assert_eq!(render("a {x} b {y}", &[("x", "{y}"), ("y", "2")]), "a {y} b 2");
        assert_eq!(render("{unknown} {x}", &[("x", "1")]), "{unknown} 1");
        assert_eq!(render("\\boxed{x}", &[("x", "7")]), "\\boxed7");
    }

    #[test]
    fn bundled_templates() {
        let p = Prompts::default();
        assert_eq!(p.extract_prompt("S"), "Extract the final answer from: S");
        assert_eq!(p.verify_prompt("D", "A"), "Does D contain A?");
        let id = p.identify_prompt("A", "R", &["d1".into(), "d2".into()]);
        assert!(id.starts_with("Find first occurrence of A in: R"));
        assert!(id.ends_with(
            "\n Previous span d1 was incorrect, try again\n Previous span d2 was incorrect, try again"
        ));
    }
}
