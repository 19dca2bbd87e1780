//! Instruction templates used to phrase single-attribute edits.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use std::sync::LazyLock;

use super::{AttributeEdit, AttributeKind, InstructionError, SingleAttributeInstruction};

pub const CHANGE_PLACEHOLDER: &str = "{change}";

static DEFAULT: LazyLock<TemplateSet> = LazyLock::new(|| {
    TemplateSet::from_toml(include_str!("../../assets/templates.toml")).expect("bundled templates are valid")
});

/// Templates for one language.
#[derive(Clone, Debug, Deserialize)]
pub struct TemplateSet {
    pub language: String,
    templates: BTreeMap<AttributeKind, Vec<String>>,
    #[serde(default)]
    surface: BTreeMap<AttributeKind, BTreeMap<String, String>>,
}

impl TemplateSet {
    pub fn default_ref() -> &'static TemplateSet {
        &DEFAULT
    }

    pub fn from_toml(text: &str) -> Result<Self, InstructionError> {
        let set: TemplateSet = toml::from_str(text).map_err(|e| InstructionError::Registry(e.to_string()))?;
        for (kind, list) in &set.templates {
            if let Some(bad) = list.iter().find(|t| !t.contains(CHANGE_PLACEHOLDER)) {
                return Err(InstructionError::Registry(format!(
                    "{kind} template {bad:?} lacks {CHANGE_PLACEHOLDER}"
                )));
            }
        }
        Ok(set)
    }

    pub fn templates(&self, kind: AttributeKind) -> &[String] {
        self.templates.get(&kind).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Text substituted for `change` in templates of `kind`.
    pub fn surface<'a>(&'a self, kind: AttributeKind, change: &'a str) -> &'a str {
        self.surface
            .get(&kind)
            .and_then(|m| m.get(change))
            .map(String::as_str)
            .unwrap_or(change)
    }
}

/// Template sets keyed by language tag.
#[derive(Clone, Debug)]
pub struct TemplateRegistry {
    sets: BTreeMap<String, TemplateSet>,
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        Self::new(vec![TemplateSet::default_ref().clone()])
    }
}

impl TemplateRegistry {
    pub fn new(sets: Vec<TemplateSet>) -> Self {
        Self {
            sets: sets.into_iter().map(|s| (s.language.clone(), s)).collect(),
        }
    }

    pub fn get(&self, language: &str) -> Option<&TemplateSet> {
        self.sets.get(language)
    }
}

/// Phrases `edit` with a template picked by `seed` from the set registered
/// for `language`.
pub fn render_instruction(
    edit: &AttributeEdit,
    registry: &TemplateRegistry,
    language: &str,
    seed: u64,
) -> Result<SingleAttributeInstruction, InstructionError> {
    let set = registry.get(language).ok_or(InstructionError::NoTemplateForKind {
        kind: edit.kind,
        language: language.to_string(),
    })?;
    render_with_set(edit, set, seed)
}

pub(crate) fn render_with_set(
    edit: &AttributeEdit,
    set: &TemplateSet,
    seed: u64,
) -> Result<SingleAttributeInstruction, InstructionError> {
    let candidates = set.templates(edit.kind);
    if candidates.is_empty() {
        return Err(InstructionError::NoTemplateForKind {
            kind: edit.kind,
            language: set.language.clone(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ edit_salt(edit));
    let template = &candidates[rng.random_range(0..candidates.len())];
    let text = template.replace(CHANGE_PLACEHOLDER, set.surface(edit.kind, &edit.change));
    Ok(SingleAttributeInstruction {
        text,
        edit: Some(edit.clone()),
    })
}

fn edit_salt(edit: &AttributeEdit) -> u64 {
    // FNV-1a over "kind:change"; stable across platforms and releases.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in edit.kind.as_str().bytes().chain(*b":").chain(edit.change.bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instructions::{detect_attributes, Lexicon};

    fn one_template_set(kind: &str, template: &str, surface: &str) -> TemplateSet {
        TemplateSet::from_toml(&format!(
            "language = \"en\"\n[templates]\n{kind} = [{template:?}]\n{surface}"
        ))
        .unwrap()
    }

    #[test]
    fn direct_substitution() {
        let set = one_template_set("hair", "change the hair to {change}", "");
        let reg = TemplateRegistry::new(vec![set]);
        let edit = AttributeEdit::new(AttributeKind::Hair, "red").unwrap();
        let out = render_instruction(&edit, &reg, "en", 0).unwrap();
        assert_eq!(out.text, "change the hair to red");
        assert_eq!(out.edit, Some(edit));
    }

    #[test]
    fn surface_map_substitution() {
        let set = one_template_set("beard", "{change} the beard", "[surface.beard]\nremove = \"remove\"");
        let reg = TemplateRegistry::new(vec![set]);
        let edit = AttributeEdit::new(AttributeKind::Beard, "remove").unwrap();
        assert_eq!(
            render_instruction(&edit, &reg, "en", 3).unwrap().text,
            "remove the beard"
        );
    }

    #[test]
    fn deterministic_per_seed() {
        let reg = TemplateRegistry::default();
        let edit = AttributeEdit::new(AttributeKind::Expression, "fear").unwrap();
        for seed in 0..20 {
            let a = render_instruction(&edit, &reg, "en", seed).unwrap();
            let b = render_instruction(&edit, &reg, "en", seed).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn missing_kind_or_language() {
        let set = one_template_set("hair", "make the hair {change}", "");
        let reg = TemplateRegistry::new(vec![set]);
        let edit = AttributeEdit::new(AttributeKind::Eyes, "blue").unwrap();
        assert!(matches!(
            render_instruction(&edit, &reg, "en", 0),
            Err(InstructionError::NoTemplateForKind {
                kind: AttributeKind::Eyes,
                ..
            })
        ));
        let hair = AttributeEdit::new(AttributeKind::Hair, "red").unwrap();
        assert!(render_instruction(&hair, &reg, "de", 0).is_err());
    }

    #[test]
    fn placeholder_required() {
        let doc = "language = \"en\"\n[templates]\nhair = [\"make the hair nice\"]";
        assert!(TemplateSet::from_toml(doc).is_err());
    }

    /// Every template phrased with every change token names its own kind
    /// first and carries a recoverable change token.
    #[test]
    fn templates_agree_with_lexicon() {
        let set = TemplateSet::default_ref();
        let lex = Lexicon::default_ref();
        for kind in AttributeKind::ALL {
            assert!(!set.templates(kind).is_empty(), "{kind}");
            for template in set.templates(kind) {
                for change in lex.changes(kind) {
                    let text = template.replace(CHANGE_PLACEHOLDER, set.surface(kind, change));
                    assert_eq!(detect_attributes(&text).first(), Some(&kind), "{text}");
                    assert_eq!(lex.detect_change(kind, &text), Some(change.as_str()), "{text}");
                    assert!(text.contains(set.surface(kind, change)));
                    assert_eq!(lex.attribute_clauses(&text).len(), 1, "{text}");
                }
            }
        }
    }
}
