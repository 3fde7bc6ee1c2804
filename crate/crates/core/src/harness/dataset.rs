use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{KktError, Result};
use crate::model::DialogueExample;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub question: String,
    pub choice: Vec<String>,
    pub answer: String,
}

/// One dialogue in the `[turns, questions, id]` layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue(pub Vec<String>, pub Vec<Question>, pub String);

impl Dialogue {
    pub fn turns(&self) -> &[String] {
        &self.0
    }

    pub fn questions(&self) -> &[Question] {
        &self.1
    }

    pub fn id(&self) -> &str {
        &self.2
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Dataset {
    pub dialogues: Vec<Dialogue>,
}

impl Dataset {
    /// Parses and validates; every answer must be one of its choices.
    pub fn from_json(text: &str) -> Result<Self> {
        let ds: Dataset = serde_json::from_str(text)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for ex in self.examples_unchecked() {
            ex?.validate()?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("dataset serializes")
    }

    pub fn num_questions(&self) -> usize {
        self.dialogues.iter().map(|d| d.1.len()).sum()
    }

    /// One task instance per question, with id `{dialogue id}#{question index}`.
    pub fn examples(&self) -> Result<Vec<DialogueExample>> {
        self.examples_unchecked()
            .map(|e| {
                let e = e?;
                e.validate()?;
                Ok(e)
            })
            .collect()
    }

    fn examples_unchecked(&self) -> impl Iterator<Item = Result<DialogueExample>> + '_ {
        self.dialogues.iter().flat_map(|d| {
            d.1.iter().enumerate().map(move |(qi, q)| {
                let id = format!("{}#{qi}", d.2);
                let gold = q
                    .choice
                    .iter()
                    .position(|c| c == &q.answer)
                    .ok_or_else(|| KktError::Schema {
                        id: id.clone(),
                        msg: format!("answer {:?} is not among the choices", q.answer),
                    })?;
                Ok(DialogueExample {
                    id,
                    turns: d.0.clone(),
                    question: q.question.clone(),
                    options: q.choice.clone(),
                    gold,
                })
            })
        })
    }

    /// Hex sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| KktError::io(path, e))?;
    Dataset::from_json(&text)
}
