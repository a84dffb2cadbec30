//! Versioned prompt templates.
//!
//! A template file starts with `#` header lines documenting the expected reply
//! format, followed by `[system]` and `[user]` sections. Placeholders are
//! written `{{name}}`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EXTRACT_ENTITIES: &str = "extract_entities";
pub const COUNTERFACTUAL: &str = "counterfactual";
pub const COT: &str = "cot";
pub const ICL: &str = "icl";

const V1: &[(&str, &str)] = &[
    (EXTRACT_ENTITIES, include_str!("../templates/v1/extract_entities.txt")),
    (COUNTERFACTUAL, include_str!("../templates/v1/counterfactual.txt")),
    (COT, include_str!("../templates/v1/cot.txt")),
    (ICL, include_str!("../templates/v1/icl.txt")),
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TemplateError {
    #[error("unknown template `{id}` (version {version})")]
    Unknown { id: String, version: String },
    #[error("template `{id}` is missing its [{section}] section")]
    MissingSection { id: String, section: &'static str },
    #[error("template `{id}` needs variable `{var}`")]
    MissingVariable { id: String, var: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub id: String,
    pub version: String,
    pub header: String,
    system: String,
    user: String,
}

impl Template {
    pub fn parse(id: &str, version: &str, text: &str) -> Result<Self, TemplateError> {
        let mut header = Vec::new();
        let mut system = Vec::new();
        let mut user = Vec::new();
        let mut section = 0u8;
        for line in text.lines() {
            match line.trim_end() {
                "[system]" => section = 1,
                "[user]" => section = 2,
                l if section == 0 && l.starts_with('#') => header.push(l.trim_start_matches('#').trim()),
                _ => match section {
                    1 => system.push(line),
                    2 => user.push(line),
                    _ => {}
                },
            }
        }
        if user.is_empty() {
            return Err(TemplateError::MissingSection {
                id: id.to_string(),
                section: "user",
            });
        }
        Ok(Template {
            id: id.to_string(),
            version: version.to_string(),
            header: header.join("\n"),
            system: system.join("\n").trim().to_string(),
            user: user.join("\n").trim().to_string(),
        })
    }

    /// Built-in template by id and version.
    pub fn builtin(id: &str, version: &str) -> Result<Self, TemplateError> {
        let table = match version {
            "v1" => V1,
            _ => &[],
        };
        let text = table
            .iter()
            .find(|(k, _)| *k == id)
            .map(|(_, t)| *t)
            .ok_or_else(|| TemplateError::Unknown {
                id: id.to_string(),
                version: version.to_string(),
            })?;
        Self::parse(id, version, text)
    }

    pub fn render(&self, vars: &BTreeMap<String, String>) -> Result<Vec<Message>, TemplateError> {
        let mut out = Vec::new();
        if !self.system.is_empty() {
            out.push(Message {
                role: "system".into(),
                content: fill(&self.id, &self.system, vars)?,
            });
        }
        out.push(Message {
            role: "user".into(),
            content: fill(&self.id, &self.user, vars)?,
        });
        Ok(out)
    }
}

fn fill(id: &str, text: &str, vars: &BTreeMap<String, String>) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let Some(end) = after.find("}}") else {
            out.push_str(&rest[start..]);
            return Ok(out);
        };
        let name = after[..end].trim();
        let value = vars.get(name).ok_or_else(|| TemplateError::MissingVariable {
            id: id.to_string(),
            var: name.to_string(),
        })?;
        out.push_str(value);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

pub fn vars<const N: usize>(pairs: [(&str, String); N]) -> BTreeMap<String, String> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse_and_render() {
        for id in [EXTRACT_ENTITIES, COUNTERFACTUAL, COT, ICL] {
            let t = Template::builtin(id, "v1").unwrap();
            assert!(!t.header.is_empty());
        }
        let t = Template::builtin(COT, "v1").unwrap();
        let msgs = t
            .render(&vars([("question", "Q?".into()), ("knowledge", "K.".into())]))
            .unwrap();
        assert_eq!(msgs.len(), 2);
        assert!(msgs[1].content.contains("Q?"));
        assert!(msgs[1].content.contains("K."));
        assert!(!msgs[1].content.contains("{{"));
    }

    #[test]
    fn missing_variable_is_reported() {
        let t = Template::builtin(COT, "v1").unwrap();
        assert_eq!(
            t.render(&vars([("question", "Q".into())])),
            Err(TemplateError::MissingVariable {
                id: COT.into(),
                var: "knowledge".into()
            })
        );
        assert!(matches!(
            Template::builtin(COT, "v9"),
            Err(TemplateError::Unknown { .. })
        ));
    }

    #[test]
    fn rendering_is_pure() {
        let t = Template::builtin(ICL, "v1").unwrap();
        let v = vars([("question", "a".into()), ("knowledge", "b".into())]);
        assert_eq!(t.render(&v).unwrap(), t.render(&v).unwrap());
    }
}
