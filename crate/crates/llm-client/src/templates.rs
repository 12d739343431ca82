//! Prompt templates and the numbered-list reply parser.

use serde::{Deserialize, Serialize};

use crate::ClientError;

/// Templates with `{name}` placeholders. Every placeholder must be filled
/// before a prompt is sent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptTemplateSet {
    pub decompose: String,
    pub recombine: String,
    pub self_instruct: String,
    pub negate: String,
    pub substitute: String,
}

impl Default for PromptTemplateSet {
    fn default() -> Self {
        Self {
            decompose: "Decompose the following instruction into its individual atomic \
                        constraints. The first item must be the core task. Reply with a \
                        numbered list, one constraint per line, and nothing else.\n\n\
                        Instruction:\n{instruction}"
                .into(),
            recombine: "Rewrite the following constraints as one fluent instruction. Keep \
                        every constraint, add nothing, and reply with the instruction \
                        only.\n\nConstraints:\n{constraints}"
                .into(),
            self_instruct: "Write {n} diverse constraints that a response to the task below \
                            could be asked to satisfy. Reply with a numbered list.\n\n\
                            Task:\n{task}"
                .into(),
            negate: "Rewrite the constraint below so that it requires the opposite. Reply \
                     with a numbered list holding the single rewritten constraint.\n\n\
                     Constraint:\n{constraint}"
                .into(),
            substitute: "Replace the constraint below with a different constraint of the \
                         same kind that conflicts with it. Reply with a numbered list \
                         holding the single new constraint.\n\nConstraint:\n{constraint}"
                .into(),
        }
    }
}

/// Substitutes `{name}` slots. Fails if the template has a slot with no
/// value; braces inside the values are left alone.
pub fn fill(template: &str, values: &[(&str, &str)]) -> Result<String, ClientError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some((start, name)) = next_slot(rest) {
        out.push_str(&rest[..start]);
        match values.iter().find(|(n, _)| *n == name) {
            Some((_, v)) => out.push_str(v),
            None => return Err(ClientError::UnfilledPlaceholder(name.to_string())),
        }
        rest = &rest[start + name.len() + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Byte offset and name of the first `{identifier}` slot.
fn next_slot(s: &str) -> Option<(usize, &str)> {
    let mut from = 0;
    while let Some(off) = s[from..].find('{') {
        let start = from + off;
        let tail = &s[start + 1..];
        if let Some(len) = tail.find('}') {
            let name = &tail[..len];
            if !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Some((start, name));
            }
        }
        from = start + 1;
    }
    None
}

/// Renders items as `1. first` lines.
pub fn numbered(items: &[String]) -> String {
    items.iter().enumerate().map(|(i, s)| format!("{}. {s}\n", i + 1)).collect()
}

/// Extracts the items of a numbered list (`1.` or `1)` markers). Text outside
/// list items is ignored; a reply without any item is a parse failure that
/// keeps the raw reply.
pub fn parse_numbered_list(reply: &str) -> Result<Vec<String>, ClientError> {
    let mut items = Vec::new();
    for line in reply.lines() {
        let t = line.trim_start();
        let digits = t.chars().take_while(|c| c.is_ascii_digit()).count();
        if digits == 0 {
            continue;
        }
        let rest = &t[digits..];
        if let Some(body) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            let body = body.trim();
            if !body.is_empty() {
                items.push(body.to_string());
            }
        }
    }
    if items.is_empty() {
        return Err(ClientError::Parse { raw: reply.to_string() });
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_numbered_lists() {
        let reply = "Sure:\n1. Write a poem\n2) Use at most 20 words\n  3. Mention the sea\nThanks";
        assert_eq!(
            parse_numbered_list(reply).unwrap(),
            vec!["Write a poem", "Use at most 20 words", "Mention the sea"]
        );
        match parse_numbered_list("no list here") {
            Err(ClientError::Parse { raw }) => assert_eq!(raw, "no list here"),
            other => panic!("{other:?}"),
        }
        assert!(parse_numbered_list("2024 was a year").is_err());
    }

    #[test]
    fn fill_requires_every_slot() {
        let t = PromptTemplateSet::default();
        assert!(fill(&t.decompose, &[("instruction", "x")]).unwrap().contains("x"));
        match fill(&t.self_instruct, &[("n", "3")]) {
            Err(ClientError::UnfilledPlaceholder(s)) => assert_eq!(s, "task"),
            other => panic!("{other:?}"),
        }
        // braces that are not slots pass through
        assert_eq!(fill("json {\"a\": 1} {x}", &[("x", "y")]).unwrap(), "json {\"a\": 1} y");
        // values are inserted verbatim, even when they look like slots
        assert_eq!(fill("<{x}>", &[("x", "{task}")]).unwrap(), "<{task}>");
    }

    #[test]
    fn numbered_round_trip() {
        let items = vec!["a".to_string(), "b c".to_string()];
        assert_eq!(parse_numbered_list(&numbered(&items)).unwrap(), items);
    }
}
