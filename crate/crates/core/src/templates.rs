//! Prompt templates with `{name}` placeholders.
//!
//! Rendering is a single left-to-right pass: a placeholder is replaced only
//! when its name is supplied, so literal braces (JSON examples) survive and
//! substituted values are never re-scanned.

use std::collections::BTreeMap;
use std::path::Path;

pub const HOST_PLAN: &str = "host_plan";
pub const HOST_FINALIZE: &str = "host_finalize";
pub const MANAGER_DECOMPOSE: &str = "manager_decompose";
pub const MANAGER_REFLECT: &str = "manager_reflect";
pub const MANAGER_AGGREGATE: &str = "manager_aggregate";
pub const WORKER: &str = "worker";

pub const NAMES: [&str; 6] = [
    HOST_PLAN,
    HOST_FINALIZE,
    MANAGER_DECOMPOSE,
    MANAGER_REFLECT,
    MANAGER_AGGREGATE,
    WORKER,
];

fn builtin(name: &str) -> &'static str {
    match name {
        HOST_PLAN => include_str!("../templates/host_plan.txt"),
        HOST_FINALIZE => include_str!("../templates/host_finalize.txt"),
        MANAGER_DECOMPOSE => include_str!("../templates/manager_decompose.txt"),
        MANAGER_REFLECT => include_str!("../templates/manager_reflect.txt"),
        MANAGER_AGGREGATE => include_str!("../templates/manager_aggregate.txt"),
        WORKER => include_str!("../templates/worker.txt"),
        other => panic!("no built-in template `{other}`"),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    texts: BTreeMap<&'static str, String>,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            texts: NAMES.iter().map(|n| (*n, builtin(n).to_string())).collect(),
        }
    }
}

impl Templates {
    /// Built-ins, overridden by any `<name>.txt` found in `dir`.
    pub fn from_dir(dir: &Path) -> std::io::Result<Self> {
        let mut t = Self::default();
        for name in NAMES {
            let path = dir.join(format!("{name}.txt"));
            if path.is_file() {
                t.texts.insert(name, std::fs::read_to_string(path)?);
            }
        }
        Ok(t)
    }

    pub fn get(&self, name: &str) -> &str {
        self.texts.get(name).map(String::as_str).unwrap_or_else(|| builtin(name))
    }

    pub fn set(&mut self, name: &'static str, text: impl Into<String>) {
        self.texts.insert(name, text.into());
    }

    pub fn render(&self, name: &str, vars: &[(&str, &str)]) -> String {
        render(self.get(name), vars)
    }
}

pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let name_len = after
            .char_indices()
            .find(|(_, c)| !(c.is_ascii_alphanumeric() || *c == '_'))
            .map(|(i, _)| i)
            .unwrap_or(after.len());
        let name = &after[..name_len];
        let closes = after[name_len..].starts_with('}');
        match vars.iter().find(|(k, _)| *k == name) {
            Some((_, value)) if closes && name_len > 0 => {
                out.push_str(value);
                rest = &after[name_len + 1..];
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
