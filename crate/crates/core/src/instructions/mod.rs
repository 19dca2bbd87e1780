//! Attribute taxonomy, instruction types, templating and compound
//! instruction composition.

mod lexicon;
mod templates;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub(crate) use lexicon::tokens;
pub use lexicon::Lexicon;
pub use templates::{render_instruction, TemplateRegistry, TemplateSet, CHANGE_PLACEHOLDER};

/// Most attributes a compound instruction may touch (one per kind).
pub const MAX_EDITS: usize = 9;

#[derive(Debug, Error)]
pub enum InstructionError {
    #[error("unknown attribute kind {0:?}")]
    UnknownKind(String),
    #[error("{change:?} is not a registered change for {kind}")]
    UnknownChange { kind: AttributeKind, change: String },
    #[error("no template for {kind} in language {language:?}")]
    NoTemplateForKind { kind: AttributeKind, language: String },
    #[error("attribute {0} appears more than once")]
    DuplicateAttribute(AttributeKind),
    #[error("a compound instruction needs at least one edit")]
    EmptyEditList,
    #[error("at most {MAX_EDITS} edits are allowed, got {0}")]
    TooManyEdits(usize),
    #[error("instruction text is empty")]
    EmptyText,
    #[error("instruction chain has no steps")]
    EmptyChain,
    #[error("registry: {0}")]
    Registry(String),
}

/// The nine editable face attributes, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeKind {
    Hair,
    Skin,
    Eyes,
    Age,
    Gender,
    Anime,
    Beard,
    Glasses,
    Expression,
}

impl AttributeKind {
    pub const ALL: [AttributeKind; 9] = [
        AttributeKind::Hair,
        AttributeKind::Skin,
        AttributeKind::Eyes,
        AttributeKind::Age,
        AttributeKind::Gender,
        AttributeKind::Anime,
        AttributeKind::Beard,
        AttributeKind::Glasses,
        AttributeKind::Expression,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttributeKind::Hair => "hair",
            AttributeKind::Skin => "skin",
            AttributeKind::Eyes => "eyes",
            AttributeKind::Age => "age",
            AttributeKind::Gender => "gender",
            AttributeKind::Anime => "anime",
            AttributeKind::Beard => "beard",
            AttributeKind::Glasses => "glasses",
            AttributeKind::Expression => "expression",
        }
    }

    /// Position in [`AttributeKind::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for AttributeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttributeKind {
    type Err = InstructionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AttributeKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| InstructionError::UnknownKind(s.to_string()))
    }
}

/// One requested attribute change, validated against the default lexicon.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawEdit")]
pub struct AttributeEdit {
    pub kind: AttributeKind,
    pub change: String,
}

#[derive(Deserialize)]
struct RawEdit {
    kind: AttributeKind,
    change: String,
}

impl TryFrom<RawEdit> for AttributeEdit {
    type Error = InstructionError;

    fn try_from(raw: RawEdit) -> Result<Self, Self::Error> {
        AttributeEdit::new(raw.kind, raw.change)
    }
}

impl AttributeEdit {
    pub fn new(kind: AttributeKind, change: impl Into<String>) -> Result<Self, InstructionError> {
        let change = change.into();
        if !Lexicon::default_ref().is_change(kind, &change) {
            return Err(InstructionError::UnknownChange { kind, change });
        }
        Ok(Self { kind, change })
    }
}

impl fmt::Display for AttributeEdit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.change)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SingleAttributeInstruction {
    pub text: String,
    /// Ground truth, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit: Option<AttributeEdit>,
}

impl SingleAttributeInstruction {
    pub fn new(text: impl Into<String>) -> Result<Self, InstructionError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(InstructionError::EmptyText);
        }
        Ok(Self { text, edit: None })
    }

    /// Builds a step and fills `edit` when the text names exactly one
    /// attribute and a change token for it.
    pub fn inferred(text: impl Into<String>) -> Result<Self, InstructionError> {
        let mut step = Self::new(text)?;
        let lex = Lexicon::default_ref();
        if let [kind] = lex.detect_attributes(&step.text)[..] {
            if let Some(change) = lex.detect_change(kind, &step.text) {
                step.edit = Some(AttributeEdit {
                    kind,
                    change: change.to_string(),
                });
            }
        }
        Ok(step)
    }

    pub fn kinds(&self) -> Vec<AttributeKind> {
        detect_attributes(&self.text)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiAttributeInstruction {
    pub text: String,
    pub edits: Vec<AttributeEdit>,
}

impl MultiAttributeInstruction {
    pub fn new(text: impl Into<String>, edits: Vec<AttributeEdit>) -> Result<Self, InstructionError> {
        check_edit_list(&edits)?;
        Ok(Self {
            text: text.into(),
            edits,
        })
    }

    /// Instruction whose ground truth is unknown; `edits` is inferred from
    /// the text, one entry per detected attribute that names a change.
    pub fn from_text(text: impl Into<String>) -> Self {
        let text = text.into();
        let lex = Lexicon::default_ref();
        let mut edits = Vec::new();
        for span in lex.attribute_clauses(&text) {
            let clause = &text[span];
            if let Some(&kind) = lex.detect_attributes(clause).first() {
                if let Some(change) = lex.detect_change(kind, clause) {
                    if !edits.iter().any(|e: &AttributeEdit| e.kind == kind) {
                        edits.push(AttributeEdit {
                            kind,
                            change: change.to_string(),
                        });
                    }
                }
            }
        }
        Self { text, edits }
    }

    pub fn kinds(&self) -> Vec<AttributeKind> {
        self.edits.iter().map(|e| e.kind).collect()
    }
}

fn check_edit_list(edits: &[AttributeEdit]) -> Result<(), InstructionError> {
    if edits.is_empty() {
        return Err(InstructionError::EmptyEditList);
    }
    if edits.len() > MAX_EDITS {
        return Err(InstructionError::TooManyEdits(edits.len()));
    }
    for (i, edit) in edits.iter().enumerate() {
        if edits[..i].iter().any(|e| e.kind == edit.kind) {
            return Err(InstructionError::DuplicateAttribute(edit.kind));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainProvenance {
    Llm,
    RuleBased,
    Manual,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionChain {
    pub steps: Vec<SingleAttributeInstruction>,
    pub provenance: ChainProvenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
}

impl InstructionChain {
    pub fn new(steps: Vec<SingleAttributeInstruction>, provenance: ChainProvenance) -> Result<Self, InstructionError> {
        if steps.is_empty() {
            return Err(InstructionError::EmptyChain);
        }
        Ok(Self {
            steps,
            provenance,
            raw_response: None,
        })
    }

    /// A one-step chain holding the text verbatim.
    pub fn single(text: impl Into<String>, provenance: ChainProvenance) -> Result<Self, InstructionError> {
        Self::new(vec![SingleAttributeInstruction::inferred(text)?], provenance)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Canonical text form: an "Output:" line followed by "k. <step>" lines.
    pub fn to_canonical(&self) -> String {
        let mut out = String::from("Output:");
        for (i, step) in self.steps.iter().enumerate() {
            out.push_str(&format!("\n{}. {}", i + 1, step.text));
        }
        out
    }
}

/// Attribute kinds named in `text` according to the default lexicon, in
/// first-occurrence order.
pub fn detect_attributes(text: &str) -> Vec<AttributeKind> {
    Lexicon::default_ref().detect_attributes(text)
}

/// Joins one rendered clause per edit into a single sentence: clauses are
/// separated by commas with "and" before the last one.
pub fn compose_multi(
    edits: &[AttributeEdit],
    phrasing_seed: u64,
) -> Result<MultiAttributeInstruction, InstructionError> {
    check_edit_list(edits)?;
    let set = TemplateSet::default_ref();
    let clauses = edits
        .iter()
        .enumerate()
        .map(|(i, edit)| templates::render_with_set(edit, set, phrasing_seed.wrapping_add(i as u64)).map(|s| s.text))
        .collect::<Result<Vec<_>, _>>()?;
    let text = match clauses.split_last() {
        Some((last, [])) => last.clone(),
        Some((last, init)) => format!("{} and {}", init.join(", "), last),
        None => unreachable!("edit list checked non-empty"),
    };
    MultiAttributeInstruction::new(text, edits.to_vec())
}
