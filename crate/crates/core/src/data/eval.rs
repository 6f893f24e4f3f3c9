use super::{McExample, Tokenizer};
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::model::{LanguageModel, PromptSet, TokenBatch};
use crate::scalar::Scalar;

const SCORE_CHUNK: usize = 64;

/// Summed next-token log-likelihood of each option given its context.
pub fn option_scores<T: Scalar, M: LanguageModel<T>>(
    model: &M,
    prompts: Option<&PromptSet<T>>,
    examples: &[McExample],
    tokenizer: &Tokenizer,
) -> Result<Vec<Vec<f64>>> {
    let mut seqs = Vec::new();
    for ex in examples {
        if ex.options.is_empty() || ex.gold >= ex.options.len() {
            return Err(Error::Data(format!("malformed probe `{}`", ex.context)));
        }
        let ctx = tokenizer.encode_doc(&ex.context)?;
        for opt in &ex.options {
            let o = tokenizer.encode(opt)?;
            if o.is_empty() {
                return Err(Error::Data(format!("empty option in probe `{}`", ex.context)));
            }
            let mut s = ctx.clone();
            s.extend_from_slice(&o);
            seqs.push((s, ctx.len()));
        }
    }

    let vocab = model.config().vocab_size;
    let mut flat = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(SCORE_CHUNK) {
        let ids: Vec<&[usize]> = chunk.iter().map(|(s, _)| s.as_slice()).collect();
        let batch = TokenBatch::from_sequences(&ids, Tokenizer::PAD)?;
        let mut tape = Tape::new();
        let pre = prompts.map(|p| p.materialize(&mut tape)).transpose()?;
        let y = model.logits(&mut tape, pre.as_deref(), &batch)?;
        let logits = tape.value(y);
        for (row, (s, ctx_len)) in chunk.iter().enumerate() {
            let mut total = 0.0;
            for pos in *ctx_len..s.len() {
                let off = (row * batch.len + pos - 1) * vocab;
                total += log_softmax_at(&logits[off..off + vocab], s[pos]);
            }
            flat.push(total);
        }
    }

    let mut out = Vec::with_capacity(examples.len());
    let mut it = flat.into_iter();
    for ex in examples {
        out.push(it.by_ref().take(ex.options.len()).collect());
    }
    Ok(out)
}

fn log_softmax_at<T: Scalar>(row: &[T], target: usize) -> f64 {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
    row[target].as_f64() - lse
}

/// Index of the highest score; ties go to the lowest index.
pub fn predict(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy_from_scores(scores: &[Vec<f64>], examples: &[McExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Data("no evaluation examples".into()));
    }
    let correct = scores.iter().zip(examples).filter(|(s, ex)| predict(s) == ex.gold).count();
    Ok(correct as f64 / examples.len() as f64)
}

/// Fraction of probes whose gold option has the highest summed log-likelihood.
pub fn mc_accuracy<T: Scalar, M: LanguageModel<T>>(
    model: &M,
    prompts: Option<&PromptSet<T>>,
    examples: &[McExample],
    tokenizer: &Tokenizer,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Data("no evaluation examples".into()));
    }
    let scores = option_scores(model, prompts, examples, tokenizer)?;
    accuracy_from_scores(&scores, examples)
}
