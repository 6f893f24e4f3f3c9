//! Synthetic digit-pair fact corpora.
//!
//! Pretraining documents state facts about digit pairs under four operations,
//! either with an explicit operation tag (`s34=4`) or with the neutral tag
//! `?` (`?34=4`, one document per operation, so the neutral form is
//! ambiguous). The downstream task fixes one operation for the neutral tag;
//! evaluation probes use pairs held out of the downstream training split and
//! offer the four operation results as options.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, Document, McExample, Split, Tokenizer};
use crate::error::{Error, Result};

/// Operation on a pair of residues `(a, b)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArithOp {
    /// `a`
    First,
    /// `b`
    Last,
    /// `a + 1`
    Succ,
    /// `b - 1`
    Pred,
}

impl ArithOp {
    pub const ALL: [ArithOp; 4] = [ArithOp::First, ArithOp::Last, ArithOp::Succ, ArithOp::Pred];

    pub fn apply(self, a: usize, b: usize, modulus: usize) -> usize {
        match self {
            ArithOp::First => a,
            ArithOp::Last => b,
            ArithOp::Succ => (a + 1) % modulus,
            ArithOp::Pred => (b + modulus - 1) % modulus,
        }
    }

    pub fn tag(self) -> char {
        match self {
            ArithOp::First => 'f',
            ArithOp::Last => 'l',
            ArithOp::Succ => 's',
            ArithOp::Pred => 'p',
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ArithOp::First => "first",
            ArithOp::Last => "last",
            ArithOp::Succ => "succ",
            ArithOp::Pred => "pred",
        }
    }
}

impl std::str::FromStr for ArithOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArithOp::ALL
            .into_iter()
            .find(|o| o.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown operation `{}`", s)))
    }
}

impl std::fmt::Display for ArithOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const NEUTRAL_TAG: char = '?';

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// Operands and results are residues below this (2..=10, one char each).
    pub modulus: usize,
    /// Operation the neutral tag stands for in the downstream task.
    pub target: ArithOp,
    /// Held-out pairs turned into probes.
    pub eval_pairs: usize,
    /// Copies of each downstream training fact.
    pub train_repeats: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            modulus: 10,
            target: ArithOp::Succ,
            eval_pairs: 20,
            train_repeats: 4,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=10).contains(&self.modulus) {
            return Err(Error::Config("modulus must be in 2..=10".into()));
        }
        if self.eval_pairs == 0 || self.train_repeats == 0 {
            return Err(Error::Config("eval_pairs and train_repeats must be >= 1".into()));
        }
        let candidates = self.probe_candidates().len();
        if self.eval_pairs > candidates || self.eval_pairs >= self.modulus * self.modulus {
            return Err(Error::Config(format!(
                "only {} pairs have four distinct results; asked for {}",
                candidates, self.eval_pairs
            )));
        }
        Ok(())
    }

    /// Pairs whose four operation results are pairwise distinct.
    pub fn probe_candidates(&self) -> Vec<(usize, usize)> {
        let m = self.modulus;
        (0..m)
            .flat_map(|a| (0..m).map(move |b| (a, b)))
            .filter(|&(a, b)| {
                let r: Vec<usize> = ArithOp::ALL.iter().map(|o| o.apply(a, b, m)).collect();
                (0..4).all(|i| (i + 1..4).all(|j| r[i] != r[j]))
            })
            .collect()
    }
}

fn fact(tag: char, a: usize, b: usize, r: usize) -> String {
    format!("{}{}{}={}", tag, a, b, r)
}

/// Generates the corpus and probes for `spec`, bit-exactly from `seed`.
pub fn make_toy_tasks_with(seed: u64, spec: &TaskSpec) -> Result<(Corpus, Vec<McExample>)> {
    spec.validate()?;
    let m = spec.modulus;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut held_out = spec.probe_candidates();
    held_out.shuffle(&mut rng);
    held_out.truncate(spec.eval_pairs);
    held_out.sort_unstable();

    let mut docs = Vec::new();
    for a in 0..m {
        for b in 0..m {
            for (k, op) in ArithOp::ALL.iter().enumerate() {
                let r = op.apply(a, b, m);
                docs.push(Document::new(fact(op.tag(), a, b, r), Split::Pretrain, k));
                docs.push(Document::new(fact(NEUTRAL_TAG, a, b, r), Split::Pretrain, k));
            }
        }
    }
    for a in 0..m {
        for b in 0..m {
            let r = spec.target.apply(a, b, m);
            if held_out.binary_search(&(a, b)).is_ok() {
                docs.push(Document::new(fact(NEUTRAL_TAG, a, b, r), Split::Eval, r));
            } else {
                for _ in 0..spec.train_repeats {
                    docs.push(Document::new(fact(NEUTRAL_TAG, a, b, r), Split::Train, r));
                }
            }
        }
    }

    let mut examples = Vec::with_capacity(held_out.len());
    for &(a, b) in &held_out {
        let mut ops = ArithOp::ALL;
        ops.shuffle(&mut rng);
        let gold = ops.iter().position(|&o| o == spec.target).expect("target is one of the four");
        examples.push(McExample {
            context: format!("{}{}{}=", NEUTRAL_TAG, a, b),
            options: ops.iter().map(|o| o.apply(a, b, m).to_string()).collect(),
            gold,
        });
    }

    let tokenizer = Tokenizer::from_texts(docs.iter().map(|d| d.text.as_str()));
    Ok((Corpus { docs, tokenizer }, examples))
}

/// [`make_toy_tasks_with`] for the default task (successor mod 10).
pub fn make_toy_tasks(seed: u64) -> (Corpus, Vec<McExample>) {
    make_toy_tasks_with(seed, &TaskSpec::default()).expect("default task spec is valid")
}
