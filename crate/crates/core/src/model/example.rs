use serde::{Deserialize, Serialize};

use crate::error::{KktError, Result};
use crate::knowledge::TripleId;

/// One question over a dialogue with its answer options.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueExample {
    pub id: String,
    pub turns: Vec<String>,
    pub question: String,
    pub options: Vec<String>,
    pub gold: usize,
}

impl DialogueExample {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| KktError::Schema {
            id: self.id.clone(),
            msg,
        };
        if self.options.len() < 2 {
            return Err(err(format!("needs at least 2 options, has {}", self.options.len())));
        }
        if self.gold >= self.options.len() {
            return Err(err(format!("gold index {} out of range", self.gold)));
        }
        if self.turns.is_empty() {
            return Err(err("dialogue has no turns".into()));
        }
        if let Some(i) = self.turns.iter().position(|t| t.trim().is_empty()) {
            return Err(err(format!("turn {i} is empty")));
        }
        Ok(())
    }

    /// `question option`, the text of one QA pair.
    pub fn qa_text(&self, option: usize) -> String {
        format!("{} {}", self.question, self.options[option])
    }
}

/// Key turns and question-side knowledge for one option.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionPipeline {
    pub key_turns: Vec<usize>,
    pub qak: Vec<TripleId>,
}

/// Everything the reader needs besides the text: context knowledge shared by
/// all options and per-option key turns and QA knowledge.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamplePipeline {
    pub ck: Vec<TripleId>,
    pub options: Vec<OptionPipeline>,
}

impl ExamplePipeline {
    /// No knowledge, every turn a key turn.
    pub fn all_turns(ex: &DialogueExample) -> Self {
        Self {
            ck: Vec::new(),
            options: (0..ex.options.len())
                .map(|_| OptionPipeline {
                    key_turns: (0..ex.turns.len()).collect(),
                    qak: Vec::new(),
                })
                .collect(),
        }
    }
}
