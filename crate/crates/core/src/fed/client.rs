use serde::{Deserialize, Serialize};

use super::TrainMode;
use crate::autograd::{AdamW, AdamWConfig, LrSchedule, Parameters, Tape};
use crate::error::{Error, Result};
use crate::model::{AuxModel, LanguageModel, PromptSet};
use crate::scalar::Scalar;
use crate::train::{lm_loss, Batcher};

/// A client's private state; persists across rounds.
#[derive(Debug, Clone)]
pub struct ClientState<T> {
    /// 1-based client id.
    pub id: usize,
    pub aux: AuxModel<T>,
    pub shard: Vec<Vec<usize>>,
    aux_opt: AdamW<T>,
    prompt_opt: AdamW<T>,
    batcher: Batcher,
}

impl<T: Scalar> ClientState<T> {
    pub fn new(id: usize, mut aux: AuxModel<T>, shard: Vec<Vec<usize>>, seed: u64) -> Result<Self> {
        if shard.is_empty() {
            return Err(Error::Data(format!("client {} has an empty shard", id)));
        }
        aux.set_requires_grad(false);
        let batcher = Batcher::new(shard.len(), seed)?;
        Ok(ClientState {
            id,
            aux,
            shard,
            aux_opt: AdamW::new(AdamWConfig::default()),
            prompt_opt: AdamW::new(AdamWConfig::default()),
            batcher,
        })
    }

    pub fn n_examples(&self) -> usize {
        self.shard.len()
    }
}

/// Step budget and learning-rate schedules for one local round.
#[derive(Debug, Clone, Copy)]
pub struct LocalTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub aux_lr: LrSchedule,
    pub prompt_lr: LrSchedule,
    /// Schedule position of this round's first step.
    pub offset: u64,
}

/// Checksums taken around each phase of a local round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseAudit {
    pub prompts_in: u64,
    pub prompts_after_align: u64,
    pub aux_before: u64,
    pub aux_after_align: u64,
    pub aux_after_capture: u64,
}

#[derive(Debug, Clone)]
pub struct ClientReport<T> {
    pub id: usize,
    pub prompts: PromptSet<T>,
    pub n_examples: usize,
    pub loss_mean: f64,
    pub audit: PhaseAudit,
}

/// One round of alternating local training.
///
/// Alignment trains the auxiliary model with the received prompts attached
/// and frozen; capture then trains only the prompts (the slots the model
/// consumes) with the auxiliary model frozen. Modes without alignment run
/// capture only. Returns the captured prompts.
pub fn client_local_round<T: Scalar>(
    cs: &mut ClientState<T>,
    prompts_in: &PromptSet<T>,
    mode: TrainMode,
    lt: &LocalTraining,
) -> Result<ClientReport<T>> {
    if lt.steps == 0 {
        return Err(Error::Config("local steps must be >= 1".into()));
    }
    let depth = cs.aux.depth();
    if depth > prompts_in.depth() {
        return Err(Error::DepthMismatch {
            prompts: prompts_in.depth(),
            model: depth,
        });
    }
    let mut prompts = prompts_in.clone();
    prompts.set_requires_grad(false);
    let prompts_in_sum = prompts_in.checksum();
    let aux_before = cs.aux.checksum();
    let mut losses = Vec::with_capacity(2 * lt.steps);

    if mode.aligns() {
        cs.aux.set_requires_grad(true);
        for s in 0..lt.steps {
            let batch = cs.batcher.next_batch(&cs.shard, lt.batch_size)?;
            let mut tape = Tape::new();
            let pre = prompts.materialize(&mut tape)?;
            let loss = lm_loss(&mut tape, &cs.aux, Some(&pre[..depth]), &batch)?;
            losses.push(tape.value(loss)[0].as_f64());
            let mut grads = tape.backward(loss)?;
            cs.aux.fill_grads(&mut grads);
            cs.aux_opt.step(cs.aux.named_params_mut(), lt.aux_lr.lr(lt.offset + s as u64))?;
        }
        cs.aux.set_requires_grad(false);
    }
    let prompts_after_align = prompts.checksum();
    let aux_after_align = cs.aux.checksum();

    let trainable = prompts.names_for_slots(depth);
    for (name, t) in prompts.named_params_mut() {
        t.set_requires_grad(trainable.contains(&name));
    }
    for s in 0..lt.steps {
        let batch = cs.batcher.next_batch(&cs.shard, lt.batch_size)?;
        let mut tape = Tape::new();
        let pre = prompts.materialize(&mut tape)?;
        let loss = lm_loss(&mut tape, &cs.aux, Some(&pre[..depth]), &batch)?;
        losses.push(tape.value(loss)[0].as_f64());
        let mut grads = tape.backward(loss)?;
        prompts.fill_grads(&mut grads);
        cs.prompt_opt.step(prompts.named_params_mut(), lt.prompt_lr.lr(lt.offset + s as u64))?;
    }
    prompts.set_requires_grad(true);
    let aux_after_capture = cs.aux.checksum();

    Ok(ClientReport {
        id: cs.id,
        prompts,
        n_examples: cs.n_examples(),
        loss_mean: losses.iter().sum::<f64>() / losses.len() as f64,
        audit: PhaseAudit {
            prompts_in: prompts_in_sum,
            prompts_after_align,
            aux_before,
            aux_after_align,
            aux_after_capture,
        },
    })
}
