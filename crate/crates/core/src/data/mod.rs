//! Toy corpora, char-level tokenization, client partitioning and
//! multiple-choice evaluation.

mod eval;
mod partition;
mod tokenizer;
mod toy;

pub use eval::{accuracy_from_scores, mc_accuracy, option_scores, predict};
pub use partition::{partition, Partition, Scheme};
pub use tokenizer::Tokenizer;
pub use toy::{make_toy_tasks, make_toy_tasks_with, ArithOp, TaskSpec, NEUTRAL_TAG};

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub text: String,
    pub split: Split,
    /// Template category, used for label-skewed partitioning.
    pub category: usize,
}

impl Document {
    pub fn new(text: String, split: Split, category: usize) -> Self {
        Document { text, split, category }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McExample {
    pub context: String,
    pub options: Vec<String>,
    pub gold: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub docs: Vec<Document>,
    pub tokenizer: Tokenizer,
}

impl Corpus {
    /// Builds the tokenizer from the documents themselves.
    pub fn new(docs: Vec<Document>) -> Self {
        let tokenizer = Tokenizer::from_texts(docs.iter().map(|d| d.text.as_str()));
        Corpus { docs, tokenizer }
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.docs.len()).filter(|&i| self.docs[i].split == split).collect()
    }

    /// `[BOS] ++ text` token ids of the given documents.
    pub fn encode(&self, indices: &[usize]) -> Result<Vec<Vec<usize>>> {
        indices.iter().map(|&i| self.tokenizer.encode_doc(&self.docs[i].text)).collect()
    }

    pub fn encode_split(&self, split: Split) -> Result<Vec<Vec<usize>>> {
        self.encode(&self.indices(split))
    }

    /// Writes one document per line; the tokenizer is rebuilt on load.
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.docs)
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        Ok(Corpus::new(read_jsonl(path)?))
    }
}

pub fn write_jsonl<S: Serialize>(path: &Path, items: &[S]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<D: DeserializeOwned>(path: &Path) -> Result<Vec<D>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
