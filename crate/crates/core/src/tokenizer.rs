//! Character-level tokenizer over a fixed alphabet.
//!
//! Alphabet files hold one character per line; the line index is the token
//! id. `\n`, `\t`, `\r` and `\\` are written as escapes.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Alphabet {
    pub fn new(chars: Vec<char>) -> Result<Self> {
        if chars.is_empty() {
            return Err(Error::Empty("alphabet"));
        }
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(Error::Config(format!("duplicate alphabet entry {c:?}")));
            }
        }
        Ok(Self { chars, index })
    }

    /// Sorted distinct characters of `text`.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut chars: Vec<char> = text.chars().collect();
        chars.sort_unstable();
        chars.dedup();
        Self::new(chars)
    }

    pub fn parse(contents: &str) -> Result<Self> {
        let mut chars = Vec::new();
        for (n, line) in contents.split('\n').enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            let c = match line {
                "" => continue,
                "\\n" => '\n',
                "\\t" => '\t',
                "\\r" => '\r',
                "\\\\" => '\\',
                _ => {
                    let mut it = line.chars();
                    let c = it.next().expect("non-empty");
                    if it.next().is_some() {
                        return Err(Error::Config(format!(
                            "alphabet line {} holds more than one character: {line:?}",
                            n + 1
                        )));
                    }
                    c
                }
            };
            chars.push(c);
        }
        Self::new(chars)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for &c in &self.chars {
            match c {
                '\n' => s.push_str("\\n"),
                '\t' => s.push_str("\\t"),
                '\r' => s.push_str("\\r"),
                '\\' => s.push_str("\\\\"),
                c => s.push(c),
            }
            s.push('\n');
        }
        s
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| self.id(c).ok_or(Error::UnknownChar(c)))
            .collect()
    }

    pub fn token(&self, id: usize) -> Result<char> {
        self.chars.get(id).copied().ok_or(Error::TokenOutOfRange {
            id,
            vocab: self.chars.len(),
        })
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter().map(|&id| self.token(id)).collect()
    }
}
