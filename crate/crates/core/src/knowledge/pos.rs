use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::tokenize;
use crate::error::{KktError, Result};

const BUILTIN_LEXICON: &str = include_str!("../../data/lexicon.tsv");
const SUFFIX_RULES: &str = include_str!("../../data/suffix_rules.tsv");
const FUNCTION_WORDS: &str = include_str!("../../data/function_words.txt");

const AUXILIARIES: [&str; 8] = ["am", "is", "are", "was", "were", "be", "been", "being"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pos {
    Noun,
    Verb,
    Adj,
    Other,
}

impl Pos {
    fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "NOUN" => Some(Pos::Noun),
            "VERB" => Some(Pos::Verb),
            "ADJ" => Some(Pos::Adj),
            "OTHER" => Some(Pos::Other),
            _ => None,
        }
    }

    pub fn is_content(self) -> bool {
        self != Pos::Other
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Condition {
    Any,
    AfterAux,
    NotAfterAux,
}

#[derive(Clone, Debug)]
struct SuffixRule {
    suffix: String,
    condition: Condition,
    pos: Pos,
}

/// Lexicon tagger with ordered suffix fallbacks, used to pick the noun, verb
/// and adjective tokens that drive knowledge retrieval.
#[derive(Clone, Debug)]
pub struct PosTagger {
    lexicon: HashMap<String, Pos>,
    function_words: HashSet<String>,
    rules: Vec<SuffixRule>,
}

impl Default for PosTagger {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PosTagger {
    /// Tagger over the bundled lexicon.
    pub fn builtin() -> Self {
        let lexicon = parse_lexicon(BUILTIN_LEXICON, "builtin lexicon").expect("bundled lexicon parses");
        Self::with_lexicon(lexicon)
    }

    pub fn with_lexicon(lexicon: HashMap<String, Pos>) -> Self {
        Self {
            lexicon,
            function_words: FUNCTION_WORDS.lines().map(|l| l.trim().to_string()).collect(),
            rules: parse_rules(SUFFIX_RULES).expect("bundled suffix rules parse"),
        }
    }

    /// Reads a `word<TAB>{NOUN|VERB|ADJ}` lexicon.
    pub fn from_lexicon_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| KktError::io(path, e))?;
        Ok(Self::with_lexicon(parse_lexicon(&text, &path.display().to_string())?))
    }

    pub fn tag(&self, text: &str) -> Vec<(String, Pos)> {
        let tokens = tokenize(text);
        let mut out = Vec::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            let prev = if i > 0 { Some(tokens[i - 1].as_str()) } else { None };
            out.push((tok.clone(), self.tag_token(tok, prev)));
        }
        out
    }

    pub fn content_words(&self, text: &str) -> Vec<String> {
        self.tag(text)
            .into_iter()
            .filter(|(_, p)| p.is_content())
            .map(|(w, _)| w)
            .collect()
    }

    fn tag_token(&self, tok: &str, prev: Option<&str>) -> Pos {
        if let Some(&p) = self.lexicon.get(tok) {
            return p;
        }
        if !tok.chars().all(char::is_alphabetic) || self.function_words.contains(tok) || tok.chars().count() < 3 {
            return Pos::Other;
        }
        let after_aux = prev.is_some_and(|p| AUXILIARIES.contains(&p));
        for r in &self.rules {
            if !tok.ends_with(&r.suffix) {
                continue;
            }
            let ok = match r.condition {
                Condition::Any => true,
                Condition::AfterAux => after_aux,
                Condition::NotAfterAux => !after_aux,
            };
            if ok {
                return r.pos;
            }
        }
        Pos::Noun
    }
}

fn parse_lexicon(text: &str, source: &str) -> Result<HashMap<String, Pos>> {
    let mut lex = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t');
        let (Some(word), Some(tag), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(parse_err(source, i, "expected word<TAB>tag"));
        };
        let pos = match Pos::parse(tag) {
            Some(p @ (Pos::Noun | Pos::Verb | Pos::Adj)) => p,
            _ => return Err(parse_err(source, i, &format!("unknown tag {tag:?}"))),
        };
        lex.insert(word.trim().to_lowercase(), pos);
    }
    Ok(lex)
}

fn parse_rules(text: &str) -> Result<Vec<SuffixRule>> {
    let mut rules = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let [suffix, cond, tag] = cols[..] else {
            return Err(parse_err("suffix rules", i, "expected 3 columns"));
        };
        let condition = match cond {
            "any" => Condition::Any,
            "after-aux" => Condition::AfterAux,
            "not-after-aux" => Condition::NotAfterAux,
            _ => return Err(parse_err("suffix rules", i, "bad condition")),
        };
        let pos = Pos::parse(tag).ok_or_else(|| parse_err("suffix rules", i, "bad tag"))?;
        rules.push(SuffixRule {
            suffix: suffix.to_string(),
            condition,
            pos,
        });
    }
    Ok(rules)
}

fn parse_err(source: &str, line: usize, msg: &str) -> KktError {
    KktError::Parse {
        path: source.to_string(),
        line: line + 1,
        msg: msg.to_string(),
    }
}
