use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pos::PosTagger;
use super::triple::{rewrite_triple, Fact, KnowledgeTriple, SurfaceTable};
use crate::attention::{tokenize, Vocab};
use crate::error::{KktError, Result};

/// Position of a triple inside a [`KnowledgeStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TripleId(pub usize);

/// Weighted triples that survived the weight threshold and the vocabulary
/// filter, with their rewritten facts and a word index over heads and tails.
#[derive(Clone, Debug)]
pub struct KnowledgeStore {
    triples: Vec<KnowledgeTriple>,
    facts: Vec<Fact>,
    words: Vec<BTreeSet<String>>,
    index: BTreeMap<String, Vec<TripleId>>,
    threshold: f64,
}

/// One retrieval hit.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Retrieved {
    pub id: TripleId,
    pub weight: f64,
    /// Distinct query content words found among the head and tail words.
    pub matched: usize,
    pub fact: String,
}

pub fn load_kg(path: &Path, threshold: f64, vocab: Option<&Vocab>, surface: &SurfaceTable) -> Result<KnowledgeStore> {
    let text = fs::read_to_string(path).map_err(|e| KktError::io(path, e))?;
    KnowledgeStore::parse(&text, &path.display().to_string(), threshold, vocab, surface)
}

fn entity_words(s: &str) -> Vec<String> {
    tokenize(s)
        .into_iter()
        .filter(|t| t.chars().any(char::is_alphanumeric))
        .collect()
}

impl KnowledgeStore {
    /// Parses `relation<TAB>head<TAB>tail<TAB>weight` lines. Triples with
    /// weight below `threshold`, or with a head or tail word missing from
    /// `vocab`, are dropped.
    pub fn parse(
        text: &str,
        source: &str,
        threshold: f64,
        vocab: Option<&Vocab>,
        surface: &SurfaceTable,
    ) -> Result<Self> {
        let err = |line: usize, msg: String| KktError::Parse {
            path: source.to_string(),
            line,
            msg,
        };
        let mut kept = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let [relation, head, tail, weight] = cols[..] else {
                return Err(err(
                    i + 1,
                    format!("expected 4 tab-separated columns, got {}", cols.len()),
                ));
            };
            if relation.trim().is_empty() || head.trim().is_empty() || tail.trim().is_empty() {
                return Err(err(i + 1, "empty relation, head or tail".into()));
            }
            let weight: f64 = weight
                .trim()
                .parse()
                .map_err(|_| err(i + 1, format!("bad weight {weight:?}")))?;
            if !weight.is_finite() {
                return Err(err(i + 1, format!("non-finite weight {weight}")));
            }
            if weight < 0.0 {
                return Err(KktError::Validation(format!(
                    "{source}:{}: negative weight {weight}",
                    i + 1
                )));
            }
            kept.push(KnowledgeTriple {
                relation: relation.to_string(),
                head: head.to_string(),
                tail: tail.to_string(),
                weight,
            });
        }
        Ok(Self::from_triples(kept, threshold, vocab, surface))
    }

    pub fn from_triples(
        triples: Vec<KnowledgeTriple>,
        threshold: f64,
        vocab: Option<&Vocab>,
        surface: &SurfaceTable,
    ) -> Self {
        let mut store = Self {
            triples: Vec::new(),
            facts: Vec::new(),
            words: Vec::new(),
            index: BTreeMap::new(),
            threshold,
        };
        for t in triples {
            if t.weight < threshold {
                continue;
            }
            let head_words = entity_words(&t.head);
            let tail_words = entity_words(&t.tail);
            if head_words.is_empty() || tail_words.is_empty() {
                continue;
            }
            if let Some(v) = vocab {
                if !head_words.iter().chain(&tail_words).all(|w| v.contains(w)) {
                    continue;
                }
            }
            let id = TripleId(store.triples.len());
            let words: BTreeSet<String> = head_words.into_iter().chain(tail_words).collect();
            for w in &words {
                store.index.entry(w.clone()).or_default().push(id);
            }
            store.facts.push(rewrite_triple(&t, surface));
            store.words.push(words);
            store.triples.push(t);
        }
        store
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn triple(&self, id: TripleId) -> &KnowledgeTriple {
        &self.triples[id.0]
    }

    pub fn fact(&self, id: TripleId) -> &Fact {
        &self.facts[id.0]
    }

    /// Lowercased head and tail words of a triple.
    pub fn words(&self, id: TripleId) -> &BTreeSet<String> {
        &self.words[id.0]
    }

    pub fn triples(&self) -> &[KnowledgeTriple] {
        &self.triples
    }

    pub fn ids(&self) -> impl Iterator<Item = TripleId> {
        (0..self.triples.len()).map(TripleId)
    }

    /// Serializes the retained triples in the input file format.
    pub fn to_tsv(&self) -> String {
        self.triples
            .iter()
            .map(|t| format!("{}\t{}\t{}\t{}\n", t.relation, t.head, t.tail, t.weight))
            .collect()
    }

    /// Top-`p` triples touching any content word of `texts`, ordered by
    /// weight, then matched-word count, then fact text (all descending
    /// except text), then id.
    pub fn retrieve<S: AsRef<str>>(&self, texts: &[S], p: usize, tagger: &PosTagger) -> Vec<Retrieved> {
        let query: BTreeSet<String> = texts.iter().flat_map(|t| tagger.content_words(t.as_ref())).collect();
        self.retrieve_words(&query, p)
    }

    pub fn retrieve_words(&self, query: &BTreeSet<String>, p: usize) -> Vec<Retrieved> {
        if p == 0 {
            return Vec::new();
        }
        let mut matched: BTreeMap<TripleId, usize> = BTreeMap::new();
        for w in query {
            if let Some(ids) = self.index.get(w) {
                for &id in ids {
                    *matched.entry(id).or_default() += 1;
                }
            }
        }
        let mut hits: Vec<Retrieved> = matched
            .into_iter()
            .map(|(id, m)| Retrieved {
                id,
                weight: self.triples[id.0].weight,
                matched: m,
                fact: self.facts[id.0].text.clone(),
            })
            .collect();
        hits.sort_by(rank_order);
        hits.truncate(p);
        hits
    }
}

pub(crate) fn rank_order(a: &Retrieved, b: &Retrieved) -> Ordering {
    b.weight
        .total_cmp(&a.weight)
        .then(b.matched.cmp(&a.matched))
        .then_with(|| a.fact.cmp(&b.fact))
        .then(a.id.cmp(&b.id))
}
