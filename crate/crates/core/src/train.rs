//! Language-model training plumbing shared by pretraining, distillation and
//! the federated phases.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AdamW, AdamWConfig, LrSchedule, Parameters, Tape, Var};
use crate::data::Tokenizer;
use crate::error::{Error, Result};
use crate::model::{GlobalModel, LanguageModel, LayerPrefix, PromptSet, TokenBatch};
use crate::scalar::Scalar;

/// Deterministic epoch-wise sampler over a fixed set of sequences.
#[derive(Debug, Clone)]
pub struct Batcher {
    len: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    pub fn new(len: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::Data("cannot sample from an empty shard".into()));
        }
        let mut b = Batcher {
            len,
            order: (0..len).collect(),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        b.order.shuffle(&mut b.rng);
        Ok(b)
    }

    /// Next `min(size, len)` distinct indices; reshuffles at epoch boundaries.
    pub fn next_indices(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.len);
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.len {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    pub fn next_batch(&mut self, seqs: &[Vec<usize>], size: usize) -> Result<TokenBatch> {
        let idx = self.next_indices(size);
        let rows: Vec<&[usize]> = idx.iter().map(|&i| seqs[i].as_slice()).collect();
        TokenBatch::from_sequences(&rows, Tokenizer::PAD)
    }
}

/// Mean next-token cross-entropy over the unpadded positions of `batch`.
pub fn lm_loss<T: Scalar, M: LanguageModel<T>>(
    tape: &mut Tape<T>,
    model: &M,
    prefixes: Option<&[LayerPrefix]>,
    batch: &TokenBatch,
) -> Result<Var> {
    let y = model.logits(tape, prefixes, batch)?;
    tape.cross_entropy(y, &batch.next_token_targets())
}

/// Mean next-token loss of `model` (with prompts, if given) over all `seqs`.
pub fn eval_loss<T: Scalar, M: LanguageModel<T>>(
    model: &M,
    prompts: Option<&PromptSet<T>>,
    seqs: &[Vec<usize>],
    chunk: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for part in seqs.chunks(chunk.max(1)) {
        let batch = TokenBatch::from_sequences(part, Tokenizer::PAD)?;
        let n = batch.next_token_targets().iter().filter(|t| t.is_some()).count();
        let mut tape = Tape::new();
        let pre = prompts.map(|p| p.materialize(&mut tape)).transpose()?;
        let loss = lm_loss(&mut tape, model, pre.as_deref(), &batch)?;
        total += tape.value(loss)[0].as_f64() * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Data("no prediction targets".into()));
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 3000,
            lr: 3e-3,
            batch_size: 16,
            warmup_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Trains every parameter of `model` on `seqs`; returns the per-step loss.
pub fn pretrain<T: Scalar>(model: &mut GlobalModel<T>, seqs: &[Vec<usize>], cfg: &PretrainConfig) -> Result<Vec<f64>> {
    if cfg.steps == 0 || cfg.lr <= 0.0 || cfg.batch_size == 0 {
        return Err(Error::Config("pretraining needs steps >= 1, lr > 0, batch_size >= 1".into()));
    }
    let mut batcher = Batcher::new(seqs.len(), cfg.seed)?;
    let sched = LrSchedule::new(cfg.lr, cfg.steps, cfg.warmup_fraction);
    let mut opt = AdamW::new(AdamWConfig::default());
    model.set_requires_grad(true);
    let mut curve = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let batch = batcher.next_batch(seqs, cfg.batch_size)?;
        let mut tape = Tape::new();
        let loss = lm_loss(&mut tape, &*model, None, &batch)?;
        curve.push(tape.value(loss)[0].as_f64());
        let mut grads = tape.backward(loss)?;
        model.fill_grads(&mut grads);
        opt.step(model.named_params_mut(), sched.lr(step))?;
    }
    model.set_requires_grad(false);
    Ok(curve)
}
