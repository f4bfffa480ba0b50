//! Flat `key = value` documents with `[section]` headers and `#` comments.
//!
//! Both architecture and training configuration use this format. Every key
//! and value remembers where it came from so that errors can point at the
//! offending text.

use std::str::FromStr;

use crate::error::SpecError;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
    /// Column of the key (1-based).
    pub key_col: usize,
    /// Column of the value (1-based).
    pub value_col: usize,
}

impl Entry {
    fn err(&self, message: impl Into<String>) -> SpecError {
        SpecError::new(self.line, self.value_col, message)
    }

    pub fn parse<V: FromStr>(&self) -> Result<V, SpecError> {
        self.value
            .parse()
            .map_err(|_| self.err(format!("invalid value {:?} for `{}`", self.value, self.key)))
    }

    pub fn parse_bool(&self) -> Result<bool, SpecError> {
        match self.value.as_str() {
            "true" | "yes" | "on" => Ok(true),
            "false" | "no" | "off" => Ok(false),
            other => Err(self.err(format!("expected true or false for `{}`, got {other:?}", self.key))),
        }
    }

    /// Comma-separated list.
    pub fn parse_list<V: FromStr>(&self) -> Result<Vec<V>, SpecError> {
        let mut col = self.value_col;
        let mut out = Vec::new();
        for part in self.value.split(',') {
            let lead = part.len() - part.trim_start().len();
            let item = part.trim();
            out.push(item.parse().map_err(|_| {
                SpecError::new(self.line, col + lead, format!("invalid list item {item:?} for `{}`", self.key))
            })?);
            col += part.len() + 1;
        }
        Ok(out)
    }

    pub fn positive<V: FromStr + PartialOrd + Default>(&self) -> Result<V, SpecError> {
        let v: V = self.parse()?;
        if v <= V::default() {
            return Err(self.err(format!("`{}` must be positive", self.key)));
        }
        Ok(v)
    }

    /// Error positioned at the value, for semantic checks done by callers.
    pub fn invalid(&self, message: impl Into<String>) -> SpecError {
        self.err(message)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    /// Empty for keys before the first header.
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

impl Section {
    pub fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    /// Rejects keys outside `allowed`.
    pub fn expect_keys(&self, allowed: &[&str]) -> Result<(), SpecError> {
        for e in &self.entries {
            if !allowed.contains(&e.key.as_str()) {
                let within = if self.name.is_empty() {
                    String::from("top level")
                } else {
                    format!("[{}]", self.name)
                };
                return Err(SpecError::new(e.line, e.key_col, format!("unknown key `{}` in {within}", e.key)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Document {
    pub sections: Vec<Section>,
}

impl Document {
    pub fn parse(text: &str) -> Result<Self, SpecError> {
        let mut sections = vec![Section {
            name: String::new(),
            line: 0,
            entries: Vec::new(),
        }];
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let content = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            };
            let trimmed = content.trim();
            if trimmed.is_empty() {
                continue;
            }
            let indent = content.len() - content.trim_start().len();
            if let Some(rest) = trimmed.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| SpecError::new(line_no, indent + 1, "unterminated section header"))?
                    .trim();
                if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
                    return Err(SpecError::new(line_no, indent + 2, format!("invalid section name {name:?}")));
                }
                if sections.iter().any(|s| s.name == name) {
                    return Err(SpecError::new(line_no, indent + 2, format!("duplicate section [{name}]")));
                }
                sections.push(Section {
                    name: name.to_string(),
                    line: line_no,
                    entries: Vec::new(),
                });
                continue;
            }
            let eq = content
                .find('=')
                .ok_or_else(|| SpecError::new(line_no, indent + 1, "expected `key = value`"))?;
            let key = content[..eq].trim();
            if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(SpecError::new(line_no, indent + 1, format!("invalid key {key:?}")));
            }
            let after = &content[eq + 1..];
            let value = after.trim();
            if value.is_empty() {
                return Err(SpecError::new(line_no, eq + 2, format!("missing value for `{key}`")));
            }
            let value_col = eq + 2 + (after.len() - after.trim_start().len());
            let section = sections.last_mut().expect("top-level section always present");
            if section.get(key).is_some() {
                return Err(SpecError::new(line_no, indent + 1, format!("duplicate key `{key}`")));
            }
            section.entries.push(Entry {
                key: key.to_string(),
                value: value.to_string(),
                line: line_no,
                key_col: indent + 1,
                value_col,
            });
        }
        Ok(Document { sections })
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn top(&self) -> &Section {
        &self.sections[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_positions() {
        let doc = Document::parse("a = 1 # c\n\n[decoder]\n  widths = 4, 5 ,6\n").unwrap();
        assert_eq!(doc.top().get("a").unwrap().parse::<u32>().unwrap(), 1);
        let e = doc.section("decoder").unwrap().get("widths").unwrap();
        assert_eq!((e.line, e.key_col, e.value_col), (4, 3, 12));
        assert_eq!(e.parse_list::<usize>().unwrap(), vec![4, 5, 6]);
    }

    #[test]
    fn error_positions() {
        let err = Document::parse("x = 1\ny\n").unwrap_err();
        assert_eq!((err.line, err.column), (2, 1));
        let err = Document::parse("[decoder\n").unwrap_err();
        assert_eq!((err.line, err.column), (1, 1));
        let doc = Document::parse("w = 1, x, 3\n").unwrap();
        let err = doc.top().get("w").unwrap().parse_list::<usize>().unwrap_err();
        assert_eq!((err.line, err.column), (1, 8));
        let err = Document::parse("a = 1\na = 2\n").unwrap_err();
        assert_eq!(err.line, 2);
    }
}
