use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KktError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeTriple {
    pub relation: String,
    pub head: String,
    pub tail: String,
    pub weight: f64,
}

/// A triple rendered as a sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fact {
    pub text: String,
    pub source: KnowledgeTriple,
}

/// Relation id to the phrase used between head and tail. Keys compare
/// case-insensitively.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SurfaceTable {
    phrases: HashMap<String, String>,
}

impl SurfaceTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Phrasings for common commonsense relations.
    pub fn builtin() -> Self {
        let mut t = Self::new();
        for (rel, phrase) in [
            ("atlocation", "is found at"),
            ("causes", "causes"),
            ("isa", "is a"),
            ("partof", "is part of"),
            ("usedfor", "is used for"),
            ("relatedto", "is related to"),
            ("hasproperty", "is"),
            ("capableof", "can"),
            ("desires", "desires"),
            ("hasa", "has a"),
            ("madeof", "is made of"),
        ] {
            t.insert(rel, phrase);
        }
        t
    }

    pub fn insert(&mut self, relation: &str, phrase: &str) {
        self.phrases.insert(relation.to_lowercase(), phrase.to_string());
    }

    pub fn get(&self, relation: &str) -> Option<&str> {
        self.phrases.get(&relation.to_lowercase()).map(String::as_str)
    }

    pub fn phrases(&self) -> impl Iterator<Item = &str> {
        self.phrases.values().map(String::as_str)
    }

    /// `relation<TAB>surface phrase` lines; `#` comments allowed.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut t = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('\t') {
                Some((rel, phrase)) if !rel.is_empty() && !phrase.trim().is_empty() => t.insert(rel, phrase.trim()),
                _ => {
                    return Err(KktError::Parse {
                        path: source.to_string(),
                        line: i + 1,
                        msg: "expected relation<TAB>phrase".into(),
                    })
                }
            }
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| KktError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_tsv(&self) -> String {
        let mut rows: Vec<_> = self.phrases.iter().collect();
        rows.sort();
        rows.iter().map(|(r, p)| format!("{r}\t{p}\n")).collect()
    }
}

/// `head surface(relation) tail`; an unknown relation is used verbatim.
pub fn rewrite_triple(t: &KnowledgeTriple, surface: &SurfaceTable) -> Fact {
    let phrase = surface.get(&t.relation).unwrap_or(&t.relation);
    Fact {
        text: format!("{} {} {}", t.head, phrase, t.tail),
        source: t.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triple(r: &str, h: &str, t: &str) -> KnowledgeTriple {
        KnowledgeTriple {
            relation: r.into(),
            head: h.into(),
            tail: t.into(),
            weight: 1.0,
        }
    }

    #[test]
    fn rewrites_with_surface_phrases() {
        let mut s = SurfaceTable::new();
        s.insert("atlocation", "is found on");
        s.insert("IsA", "is a");
        assert_eq!(
            rewrite_triple(&triple("causes", "virus", "disease"), &s).text,
            "virus causes disease"
        );
        assert_eq!(
            rewrite_triple(&triple("atlocation", "bike", "street"), &s).text,
            "bike is found on street"
        );
        assert_eq!(
            rewrite_triple(&triple("IsA", "cat", "animal"), &s).text,
            "cat is a animal"
        );
    }

    #[test]
    fn surface_table_parse_errors_carry_line() {
        let err = SurfaceTable::parse("isa\tis a\nbroken\n", "t.tsv").unwrap_err();
        assert!(matches!(err, KktError::Parse { line: 2, .. }));
    }
}
