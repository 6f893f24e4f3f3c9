use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::aggregate::aggregate_prompts;
use super::client::{client_local_round, ClientReport, ClientState, LocalTraining, PhaseAudit};
use super::message::{Direction, RoundMessage};
use super::server::{sample_clients, server_optimize, ServerState};
use super::{FedConfig, TrainMode};
use crate::autograd::{AdamW, AdamWConfig, LrSchedule, Parameters, Tape};
use crate::data::{mc_accuracy, Corpus, McExample, Partition, Tokenizer};
use crate::distill::{run_kd, KdConfig};
use crate::error::{Error, Result};
use crate::model::{count_params, AuxModel, GlobalModel, ParamKind, PromptSet};
use crate::scalar::Scalar;
use crate::train::{eval_loss, lm_loss, Batcher};

const STREAM_PROMPTS: u64 = 1;
const STREAM_CLIENT: u64 = 2;
const STREAM_SERVER: u64 = 3;
const STREAM_SAMPLE: u64 = 4;
const STREAM_CENTRAL: u64 = 5;

/// Independent sub-seed for `(stream, index)` under a run seed (splitmix64 finalizer).
pub(crate) fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Encoded shards and probes for one federated run.
#[derive(Debug, Clone)]
pub struct FedData {
    pub tokenizer: Tokenizer,
    /// Client `k` owns `shards[k - 1]`.
    pub shards: Vec<Vec<Vec<usize>>>,
    pub proxy: Vec<Vec<usize>>,
    pub examples: Vec<McExample>,
}

impl FedData {
    pub fn new(corpus: &Corpus, partition: &Partition, examples: Vec<McExample>) -> Result<Self> {
        let shards = partition
            .clients
            .iter()
            .map(|s| corpus.encode(s))
            .collect::<Result<Vec<_>>>()?;
        Ok(FedData {
            tokenizer: corpus.tokenizer.clone(),
            shards,
            proxy: corpus.encode(&partition.proxy)?,
            examples,
        })
    }

    /// All client shards concatenated in id order.
    pub fn union(&self) -> Vec<Vec<usize>> {
        self.shards.iter().flatten().cloned().collect()
    }
}

/// One line of `metrics.jsonl`. Byte counts are cumulative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub train_loss_mean: f64,
    pub eval_acc: f64,
    pub uploaded_bytes: u64,
    pub downloaded_bytes: u64,
    /// Wall-clock time of the round; kept out of the serialized record so
    /// metrics files stay reproducible.
    #[serde(skip)]
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub global: usize,
    pub aux: usize,
    pub payload: usize,
    /// `payload / global`.
    pub payload_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerAudit {
    pub round: usize,
    pub global_before: u64,
    pub global_after: u64,
}

/// Checksums collected along a run for the freeze contracts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Audit {
    /// Teacher checksum before and after distillation.
    pub kd_teacher: Option<(u64, u64)>,
    /// `(round, client id, phase checksums)`.
    pub clients: Vec<(usize, usize, PhaseAudit)>,
    pub server: Vec<ServerAudit>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions<T> {
    /// Distillation settings for modes that distill.
    pub kd: KdConfig,
    /// Client model to start from instead of building (and distilling) one.
    pub client_model: Option<AuxModel<T>>,
    /// Keep every encoded round message in the outcome.
    pub record_messages: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome<T> {
    pub mode: TrainMode,
    pub records: Vec<RoundRecord>,
    pub prompts: Option<PromptSet<T>>,
    /// The finetuned global model (central finetuning only).
    pub model: Option<GlobalModel<T>>,
    /// Initial client model, after distillation when the mode distills.
    pub client_model: Option<AuxModel<T>>,
    pub kd_curve: Vec<f64>,
    pub audit: Audit,
    /// Encoded wire messages, when recording was requested.
    pub messages: Vec<Vec<u8>>,
    pub params: ParamSummary,
}

impl<T> RunOutcome<T> {
    pub fn final_acc(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.eval_acc)
    }

    pub fn best_acc(&self) -> f64 {
        self.records.iter().map(|r| r.eval_acc).fold(f64::NAN, f64::max)
    }
}

/// Runs one training mode end to end against the (frozen) pretrained `global`.
pub fn run_federation<T: Scalar>(
    global: &GlobalModel<T>,
    data: &FedData,
    cfg: &FedConfig,
    opts: RunOptions<T>,
) -> Result<RunOutcome<T>> {
    cfg.validate(global.cfg.n_layers)?;
    if cfg.mode.is_federated() && data.shards.len() != cfg.clients {
        return Err(Error::Config(format!(
            "partition has {} client shards but {} clients are configured",
            data.shards.len(),
            cfg.clients
        )));
    }
    if data.examples.is_empty() {
        return Err(Error::Data("no evaluation examples".into()));
    }
    match cfg.mode {
        TrainMode::ZeroShot => zero_shot(global, data, cfg),
        TrainMode::CentralFinetune => central_finetune(global, data, cfg),
        TrainMode::CentralPrefix => central_prefix(global, data, cfg),
        _ => federate(global, data, cfg, opts),
    }
}

fn summary<T: Scalar>(global: &GlobalModel<T>, aux: usize) -> ParamSummary {
    let g = count_params(ParamKind::GlobalModel, &global.cfg);
    let p = count_params(ParamKind::PromptPayload, &global.cfg);
    ParamSummary {
        global: g,
        aux,
        payload: p,
        payload_ratio: p as f64 / g as f64,
    }
}

/// The prompts every prompt-training mode starts from for a given run seed.
pub fn initial_prompts<T: Scalar>(global: &GlobalModel<T>, seed: u64) -> PromptSet<T> {
    PromptSet::init(&global.cfg, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_PROMPTS, 0)))
}

fn federate<T: Scalar>(
    global: &GlobalModel<T>,
    data: &FedData,
    cfg: &FedConfig,
    opts: RunOptions<T>,
) -> Result<RunOutcome<T>> {
    let mode = cfg.mode;
    let mut audit = Audit::default();
    let mut kd_curve = Vec::new();
    let client_model = match opts.client_model {
        Some(m) => m,
        None => {
            let raw = mode.client_model(global, cfg.selection, cfg.aux_layers)?;
            if mode.distills() {
                let before = global.checksum();
                let out = run_kd(global, raw, &data.proxy, &opts.kd)?;
                audit.kd_teacher = Some((before, global.checksum()));
                kd_curve = out.curve;
                out.aux
            } else {
                raw
            }
        }
    };
    if client_model.cfg.d_model != global.cfg.d_model || client_model.cfg.vocab_size != global.cfg.vocab_size {
        return Err(Error::Config("client model does not match the global model".into()));
    }

    let mut clients = data
        .shards
        .iter()
        .enumerate()
        .map(|(i, shard)| {
            let id = i + 1;
            ClientState::new(id, client_model.clone(), shard.clone(), derive_seed(cfg.seed, STREAM_CLIENT, id as u64))
        })
        .collect::<Result<Vec<_>>>()?;

    let client_sizes = clients.iter().map(|c| (c.id, c.n_examples())).collect();
    let mut server = ServerState::new(
        global,
        initial_prompts(global, cfg.seed),
        &data.proxy,
        client_sizes,
        derive_seed(cfg.seed, STREAM_SERVER, 0),
    )?;
    let server_steps = if mode.server_optimizes() { cfg.server_steps } else { 0 };
    let total = cfg.rounds as u64;
    let client_sched = |lr| LrSchedule::new(lr, total * cfg.local_steps as u64, cfg.warmup_fraction);
    let server_sched = LrSchedule::new(cfg.server_lr, total * server_steps as u64, cfg.warmup_fraction);

    let mut records = Vec::with_capacity(cfg.rounds);
    let mut messages = Vec::new();
    let (mut up, mut down) = (0u64, 0u64);
    for t in 1..=cfg.rounds {
        let start = Instant::now();
        server.round = t;
        let ids = sample_clients(cfg.clients, cfg.fraction, derive_seed(cfg.seed, STREAM_SAMPLE, t as u64))?;

        let broadcast_msg = RoundMessage::with_prompts(Direction::ServerToClient, t as u32, 0, &server.prompts);
        let broadcast_payload = broadcast_msg.payload_bytes() as u64;
        let broadcast = broadcast_msg.encode();
        let lt = LocalTraining {
            steps: cfg.local_steps,
            batch_size: cfg.batch_size,
            aux_lr: client_sched(cfg.aux_lr),
            prompt_lr: client_sched(cfg.prompt_lr),
            offset: (t as u64 - 1) * cfg.local_steps as u64,
        };
        let template = &server.prompts;
        let work = |cs: &mut ClientState<T>| -> Result<(ClientReport<T>, Vec<u8>)> {
            let msg = RoundMessage::decode(&broadcast)?;
            let received = msg.prompts(template)?;
            let report = client_local_round(cs, &received, mode, &lt)?;
            let upload =
                RoundMessage::with_prompts(Direction::ClientToServer, t as u32, cs.id as u32, &report.prompts).encode();
            Ok((report, upload))
        };
        let selected: Vec<&mut ClientState<T>> = clients.iter_mut().filter(|c| ids.contains(&c.id)).collect();
        let results: Vec<Result<(ClientReport<T>, Vec<u8>)>> = if cfg.parallel {
            selected.into_par_iter().map(work).collect()
        } else {
            selected.into_iter().map(work).collect()
        };

        let mut reports = Vec::with_capacity(ids.len());
        for r in results {
            let (report, upload) = r?;
            let msg = RoundMessage::decode(&upload)?;
            down += broadcast_payload;
            up += msg.payload_bytes() as u64;
            let prompts = msg.prompts(&server.prompts)?;
            audit.clients.push((t, report.id, report.audit));
            if opts.record_messages {
                messages.push(broadcast.clone());
                messages.push(upload);
            }
            reports.push((report.id, prompts, report.n_examples, report.loss_mean));
        }
        reports.sort_by_key(|r| r.0);
        let updates: Vec<(&PromptSet<T>, usize)> = reports.iter().map(|(_, p, n, _)| (p, *n)).collect();
        server.prompts = aggregate_prompts(&updates)?;
        let train_loss_mean = reports.iter().map(|r| r.3).sum::<f64>() / reports.len() as f64;

        let global_before = global.checksum();
        let offset = (t as u64 - 1) * server_steps as u64;
        server_optimize(&mut server, server_steps, cfg.batch_size, &server_sched, offset)?;
        audit.server.push(ServerAudit {
            round: t,
            global_before,
            global_after: global.checksum(),
        });

        let eval_acc = mc_accuracy(global, Some(&server.prompts), &data.examples, &data.tokenizer)?;
        records.push(RoundRecord {
            round: t,
            train_loss_mean,
            eval_acc,
            uploaded_bytes: up,
            downloaded_bytes: down,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }

    Ok(RunOutcome {
        mode,
        records,
        prompts: Some(server.prompts),
        model: None,
        params: summary(global, client_model.param_count()),
        client_model: Some(client_model),
        kd_curve,
        audit,
        messages,
    })
}

fn zero_shot<T: Scalar>(global: &GlobalModel<T>, data: &FedData, cfg: &FedConfig) -> Result<RunOutcome<T>> {
    let start = Instant::now();
    let union = data.union();
    let train_loss_mean = eval_loss(global, None, &union, 64)?;
    let eval_acc = mc_accuracy(global, None, &data.examples, &data.tokenizer)?;
    Ok(RunOutcome {
        mode: cfg.mode,
        records: vec![RoundRecord {
            round: 1,
            train_loss_mean,
            eval_acc,
            uploaded_bytes: 0,
            downloaded_bytes: 0,
            wall_ms: start.elapsed().as_millis() as u64,
        }],
        prompts: None,
        model: None,
        client_model: None,
        kd_curve: Vec::new(),
        audit: Audit::default(),
        messages: Vec::new(),
        params: summary(global, 0),
    })
}

/// Finetunes every global parameter on the pooled client data, one "round"
/// being `local_steps` updates.
fn central_finetune<T: Scalar>(global: &GlobalModel<T>, data: &FedData, cfg: &FedConfig) -> Result<RunOutcome<T>> {
    let union = data.union();
    let mut model = global.clone();
    let mut batcher = Batcher::new(union.len(), derive_seed(cfg.seed, STREAM_CENTRAL, 0))?;
    let sched = LrSchedule::new(cfg.aux_lr, (cfg.rounds * cfg.local_steps) as u64, cfg.warmup_fraction);
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut records = Vec::with_capacity(cfg.rounds);
    model.set_requires_grad(true);
    for t in 1..=cfg.rounds {
        let start = Instant::now();
        let mut total = 0.0;
        for s in 0..cfg.local_steps {
            let batch = batcher.next_batch(&union, cfg.batch_size)?;
            let mut tape = Tape::new();
            let loss = lm_loss(&mut tape, &model, None, &batch)?;
            total += tape.value(loss)[0].as_f64();
            let mut grads = tape.backward(loss)?;
            model.fill_grads(&mut grads);
            opt.step(model.named_params_mut(), sched.lr(((t - 1) * cfg.local_steps + s) as u64))?;
        }
        records.push(RoundRecord {
            round: t,
            train_loss_mean: total / cfg.local_steps as f64,
            eval_acc: mc_accuracy(&model, None, &data.examples, &data.tokenizer)?,
            uploaded_bytes: 0,
            downloaded_bytes: 0,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    model.set_requires_grad(false);
    Ok(RunOutcome {
        mode: cfg.mode,
        records,
        prompts: None,
        model: Some(model),
        client_model: None,
        kd_curve: Vec::new(),
        audit: Audit::default(),
        messages: Vec::new(),
        params: summary(global, 0),
    })
}

/// Prefix-tunes prompts through the frozen global model on the pooled client data.
fn central_prefix<T: Scalar>(global: &GlobalModel<T>, data: &FedData, cfg: &FedConfig) -> Result<RunOutcome<T>> {
    let union = data.union();
    let mut prompts = initial_prompts(global, cfg.seed);
    let mut batcher = Batcher::new(union.len(), derive_seed(cfg.seed, STREAM_CENTRAL, 0))?;
    let sched = LrSchedule::new(cfg.prompt_lr, (cfg.rounds * cfg.local_steps) as u64, cfg.warmup_fraction);
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut records = Vec::with_capacity(cfg.rounds);
    for t in 1..=cfg.rounds {
        let start = Instant::now();
        let mut total = 0.0;
        for s in 0..cfg.local_steps {
            let batch = batcher.next_batch(&union, cfg.batch_size)?;
            let mut tape = Tape::new();
            let pre = prompts.materialize(&mut tape)?;
            let loss = lm_loss(&mut tape, global, Some(&pre), &batch)?;
            total += tape.value(loss)[0].as_f64();
            let mut grads = tape.backward(loss)?;
            prompts.fill_grads(&mut grads);
            opt.step(prompts.named_params_mut(), sched.lr(((t - 1) * cfg.local_steps + s) as u64))?;
        }
        records.push(RoundRecord {
            round: t,
            train_loss_mean: total / cfg.local_steps as f64,
            eval_acc: mc_accuracy(global, Some(&prompts), &data.examples, &data.tokenizer)?,
            uploaded_bytes: 0,
            downloaded_bytes: 0,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    Ok(RunOutcome {
        mode: cfg.mode,
        records,
        prompts: Some(prompts),
        model: None,
        client_model: None,
        kd_curve: Vec::new(),
        audit: Audit::default(),
        messages: Vec::new(),
        params: summary(global, 0),
    })
}
