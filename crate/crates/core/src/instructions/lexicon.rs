//! Keyword lexicon: which words name which attribute, and which words select
//! which change token. Loaded from a TOML document; the default ships in
//! `assets/lexicon.toml`.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use serde::Deserialize;
use std::sync::LazyLock;

use super::{AttributeKind, InstructionError};

static DEFAULT: LazyLock<Lexicon> =
    LazyLock::new(|| Lexicon::from_toml(include_str!("../../assets/lexicon.toml")).expect("bundled lexicon is valid"));

#[derive(Deserialize)]
struct LexiconFile {
    keywords: BTreeMap<AttributeKind, Vec<String>>,
    changes: BTreeMap<AttributeKind, Vec<String>>,
    #[serde(default)]
    synonyms: BTreeMap<AttributeKind, BTreeMap<String, Vec<String>>>,
}

#[derive(Clone, Debug)]
pub struct Lexicon {
    keywords: HashMap<String, AttributeKind>,
    changes: BTreeMap<AttributeKind, Vec<String>>,
    /// (kind, word) -> change token
    selectors: HashMap<(AttributeKind, String), String>,
}

impl Lexicon {
    /// The lexicon bundled with the crate.
    pub fn default_ref() -> &'static Lexicon {
        &DEFAULT
    }

    pub fn from_toml(text: &str) -> Result<Self, InstructionError> {
        let file: LexiconFile = toml::from_str(text).map_err(|e| InstructionError::Registry(e.to_string()))?;
        let mut keywords = HashMap::new();
        for kind in AttributeKind::ALL {
            let words = file
                .keywords
                .get(&kind)
                .filter(|w| !w.is_empty())
                .ok_or_else(|| InstructionError::Registry(format!("no keywords for {kind}")))?;
            for word in words {
                let word = word.to_ascii_lowercase();
                if let Some(prev) = keywords.insert(word.clone(), kind) {
                    if prev != kind {
                        return Err(InstructionError::Registry(format!(
                            "keyword {word:?} registered for both {prev} and {kind}"
                        )));
                    }
                }
            }
        }
        let mut selectors = HashMap::new();
        for kind in AttributeKind::ALL {
            let tokens = file
                .changes
                .get(&kind)
                .filter(|t| !t.is_empty())
                .ok_or_else(|| InstructionError::Registry(format!("no change vocabulary for {kind}")))?;
            for token in tokens {
                selectors.insert((kind, token.to_ascii_lowercase()), token.clone());
            }
        }
        for (kind, by_token) in &file.synonyms {
            for (token, words) in by_token {
                if !file.changes[kind].contains(token) {
                    return Err(InstructionError::Registry(format!(
                        "synonyms given for unregistered change {kind}:{token}"
                    )));
                }
                for word in words {
                    selectors.insert((*kind, word.to_ascii_lowercase()), token.clone());
                }
            }
        }
        Ok(Self {
            keywords,
            changes: file.changes,
            selectors,
        })
    }

    /// Change vocabulary of `kind`, in registry order.
    pub fn changes(&self, kind: AttributeKind) -> &[String] {
        &self.changes[&kind]
    }

    pub fn is_change(&self, kind: AttributeKind, token: &str) -> bool {
        self.changes(kind).iter().any(|t| t == token)
    }

    /// Total number of registered (kind, change) pairs.
    pub fn state_count(&self) -> usize {
        self.changes.values().map(Vec::len).sum()
    }

    /// Attribute kinds named in `text`, in first-occurrence order, deduplicated.
    pub fn detect_attributes(&self, text: &str) -> Vec<AttributeKind> {
        let mut found = Vec::new();
        for (word, _) in tokens(text) {
            if let Some(&kind) = self.keywords.get(&word) {
                if !found.contains(&kind) {
                    found.push(kind);
                }
            }
        }
        found
    }

    /// The change token of `kind` requested by `text`. When several are
    /// mentioned the last one wins ("turn the woman into a man" selects male).
    pub fn detect_change(&self, kind: AttributeKind, text: &str) -> Option<&str> {
        tokens(text)
            .filter_map(|(word, _)| self.selectors.get(&(kind, word)))
            .last()
            .map(String::as_str)
    }

    /// Splits `text` into clauses at "," ";" "and" "then", then merges every
    /// clause that names no attribute into its predecessor (or, for a leading
    /// clause, into its successor). Returned spans index into `text`.
    pub fn attribute_clauses(&self, text: &str) -> Vec<Range<usize>> {
        let raw = split_clauses(text);
        let mut merged: Vec<(Range<usize>, bool)> = Vec::new();
        let mut pending: Option<usize> = None;
        for span in raw {
            let named = !self.detect_attributes(&text[span.clone()]).is_empty();
            if named {
                let start = pending.take().unwrap_or(span.start);
                merged.push((start..span.end, true));
            } else if let Some((last, _)) = merged.last_mut() {
                last.end = span.end;
            } else if pending.is_none() {
                pending = Some(span.start);
            }
        }
        merged.into_iter().map(|(span, _)| span).collect()
    }
}

/// Lowercased alphanumeric words with their byte offsets.
pub(crate) fn tokens(text: &str) -> impl Iterator<Item = (String, usize)> + '_ {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            start.get_or_insert(i);
        } else if let Some(s) = start.take() {
            out.push((text[s..i].to_lowercase(), s));
        }
    }
    if let Some(s) = start {
        out.push((text[s..].to_lowercase(), s));
    }
    out.into_iter()
}

/// Top-level clause spans, trimmed, empty ones dropped.
pub(crate) fn split_clauses(text: &str) -> Vec<Range<usize>> {
    let mut cuts: Vec<Range<usize>> = Vec::new();
    for (i, c) in text.char_indices() {
        if c == ',' || c == ';' {
            cuts.push(i..i + 1);
        }
    }
    for (word, at) in tokens(text) {
        if word == "and" || word == "then" {
            cuts.push(at..at + word.len());
        }
    }
    cuts.sort_by_key(|r| r.start);

    let mut spans = Vec::new();
    let mut from = 0;
    for cut in cuts.into_iter().chain(std::iter::once(text.len()..text.len())) {
        if cut.start >= from {
            let piece = &text[from..cut.start];
            let lead = piece.len() - piece.trim_start().len();
            let trimmed = piece.trim();
            if !trimmed.is_empty() {
                spans.push(from + lead..from + lead + trimmed.len());
            }
            from = cut.end;
        }
    }
    spans
}
