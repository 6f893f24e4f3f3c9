use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{AdamW, AdamWConfig, LrSchedule, Parameters, Tape};
use crate::error::{Error, Result};
use crate::model::{GlobalModel, PromptSet};
use crate::scalar::Scalar;
use crate::train::{lm_loss, Batcher};

/// Server-side state: the private global model, the current prompts and the
/// proxy shard used for prompt refinement.
#[derive(Debug, Clone)]
pub struct ServerState<'a, T> {
    pub global: &'a GlobalModel<T>,
    pub prompts: PromptSet<T>,
    pub round: usize,
    pub proxy: &'a [Vec<usize>],
    /// `(client id, examples)` for every client.
    pub client_sizes: Vec<(usize, usize)>,
    opt: AdamW<T>,
    batcher: Option<Batcher>,
}

impl<'a, T: Scalar> ServerState<'a, T> {
    pub fn new(
        global: &'a GlobalModel<T>,
        prompts: PromptSet<T>,
        proxy: &'a [Vec<usize>],
        client_sizes: Vec<(usize, usize)>,
        seed: u64,
    ) -> Result<Self> {
        if prompts.depth() != global.cfg.n_layers {
            return Err(Error::DepthMismatch {
                prompts: prompts.depth(),
                model: global.cfg.n_layers,
            });
        }
        let batcher = if proxy.is_empty() {
            None
        } else {
            Some(Batcher::new(proxy.len(), seed)?)
        };
        Ok(ServerState {
            global,
            prompts,
            round: 0,
            proxy,
            client_sizes,
            opt: AdamW::new(AdamWConfig::default()),
            batcher,
        })
    }

    pub fn total_examples(&self) -> usize {
        self.client_sizes.iter().map(|(_, n)| n).sum()
    }

    pub fn client_size(&self, id: usize) -> Option<usize> {
        self.client_sizes.iter().find(|(k, _)| *k == id).map(|(_, n)| *n)
    }
}

/// `steps` prompt-only updates through the frozen global model on the proxy
/// shard. Returns the mean loss, or `None` when `steps == 0`.
pub fn server_optimize<T: Scalar>(
    ss: &mut ServerState<'_, T>,
    steps: usize,
    batch_size: usize,
    sched: &LrSchedule,
    offset: u64,
) -> Result<Option<f64>> {
    if steps == 0 {
        return Ok(None);
    }
    let batcher = ss
        .batcher
        .as_mut()
        .ok_or_else(|| Error::Data("server optimization needs a non-empty proxy shard".into()))?;
    ss.prompts.set_requires_grad(true);
    let mut total = 0.0;
    for s in 0..steps {
        let batch = batcher.next_batch(ss.proxy, batch_size)?;
        let mut tape = Tape::new();
        let pre = ss.prompts.materialize(&mut tape)?;
        let loss = lm_loss(&mut tape, ss.global, Some(&pre), &batch)?;
        total += tape.value(loss)[0].as_f64();
        let mut grads = tape.backward(loss)?;
        ss.prompts.fill_grads(&mut grads);
        ss.opt.step(ss.prompts.named_params_mut(), sched.lr(offset + s as u64))?;
    }
    Ok(Some(total / steps as f64))
}

/// `ceil(fraction · k_total)` distinct client ids from `1..=k_total`, ascending.
pub fn sample_clients(k_total: usize, fraction: f64, round_seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("client fraction {} is outside (0, 1]", fraction)));
    }
    let take = ((fraction * k_total as f64).ceil() as usize).min(k_total);
    if take == k_total {
        return Ok((1..=k_total).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(round_seed);
    let mut ids: Vec<usize> = rand::seq::index::sample(&mut rng, k_total, take).into_iter().map(|i| i + 1).collect();
    ids.sort_unstable();
    Ok(ids)
}
