//! Experiment runner behind the `fedsp` command: config handling, the
//! pretrain / distill / run / eval / sweep pipelines and Markdown reports.

mod config;
mod report;

pub use config::RunConfig;
pub use report::{load_summaries, render_report, render_sweep, SweepRow};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{checkpoint, Parameters};
use crate::data::{make_toy_tasks_with, mc_accuracy, partition, Corpus, McExample, Partition, Split, NEUTRAL_TAG};
use crate::distill::{run_kd, write_curve_csv};
use crate::error::{Error, Result};
use crate::fed::{run_federation, FedData, ParamSummary, RunOptions, RunOutcome, TrainMode};
use crate::model::{AuxModel, GlobalModel, PromptSet, Selection};
use crate::train::pretrain;

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const KD_CURVE_FILE: &str = "kd_curve.csv";

/// Final numbers of one run, written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: TrainMode,
    /// Downstream task name (the operation the neutral tag stands for).
    pub task: String,
    pub seed: u64,
    pub selection: Selection,
    pub aux_layers: usize,
    pub rounds: usize,
    pub final_acc: f64,
    pub best_acc: f64,
    pub uploaded_bytes: u64,
    pub downloaded_bytes: u64,
    pub params: ParamSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean loss over the last tenth of the steps.
    pub final_loss: f64,
    /// Loss of a uniform predictor over the vocabulary.
    pub uniform_loss: f64,
    /// Accuracy on the probes with the target operation's own tag.
    pub tagged_acc: f64,
    /// Accuracy on the neutral-tag probes (the downstream task before tuning).
    pub zero_shot_acc: f64,
}

/// Toy corpus, probes, shards and their encodings for `cfg`.
pub struct Prepared {
    pub corpus: Corpus,
    pub examples: Vec<McExample>,
    pub partition: Partition,
    pub data: FedData,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let (corpus, examples) = make_toy_tasks_with(cfg.task_seed, &cfg.task_spec())?;
    let partition = partition(&corpus, cfg.clients, cfg.scheme(), cfg.seed)?;
    let data = FedData::new(&corpus, &partition, examples.clone())?;
    Ok(Prepared {
        corpus,
        examples,
        partition,
        data,
    })
}

/// The probes rewritten with the target operation's tag instead of the neutral one.
pub fn tagged_probes(cfg: &RunConfig, examples: &[McExample]) -> Vec<McExample> {
    let tag = cfg.target.tag().to_string();
    examples
        .iter()
        .map(|e| McExample {
            context: e.context.replacen(NEUTRAL_TAG, &tag, 1),
            ..e.clone()
        })
        .collect()
}

pub fn load_global(cfg: &RunConfig, vocab_size: usize) -> Result<GlobalModel<f64>> {
    let tensors = checkpoint::load::<f64>(&cfg.global_checkpoint)?;
    let mut g = GlobalModel::init(&cfg.model_config(vocab_size), &mut ChaCha8Rng::seed_from_u64(0))?;
    g.load_named(&tensors)?;
    g.set_requires_grad(false);
    Ok(g)
}

/// The client model a mode starts from, before distillation.
pub fn client_model(cfg: &RunConfig, global: &GlobalModel<f64>) -> Result<AuxModel<f64>> {
    cfg.mode.client_model(global, cfg.selection, cfg.aux_layers)
}

pub fn load_aux(cfg: &RunConfig, global: &GlobalModel<f64>, path: &Path) -> Result<AuxModel<f64>> {
    let tensors = checkpoint::load::<f64>(path)?;
    let mut aux = client_model(cfg, global)?;
    aux.load_named(&tensors)?;
    aux.set_requires_grad(false);
    Ok(aux)
}

fn write_config_echo(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(CONFIG_FILE), serde_json::to_string_pretty(cfg)? + "\n")?;
    Ok(())
}

/// Trains the global model on the pretraining split and saves it to
/// `global_checkpoint`.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PretrainReport> {
    cfg.validate()?;
    let (corpus, examples) = make_toy_tasks_with(cfg.task_seed, &cfg.task_spec())?;
    let vocab = corpus.tokenizer.vocab_size();
    let mut g = GlobalModel::<f64>::init(&cfg.model_config(vocab), &mut ChaCha8Rng::seed_from_u64(cfg.task_seed))?;
    let curve = pretrain(&mut g, &corpus.encode_split(Split::Pretrain)?, &cfg.pretrain_config())?;
    if let Some(dir) = cfg.global_checkpoint.parent() {
        fs::create_dir_all(dir)?;
    }
    checkpoint::save(&cfg.global_checkpoint, &g.named_params())?;
    write_config_echo(cfg)?;
    write_curve_csv(&cfg.out.join("pretrain_curve.csv"), &curve)?;
    let tail = &curve[curve.len() - (curve.len() / 10).max(1)..];
    let report = PretrainReport {
        final_loss: tail.iter().sum::<f64>() / tail.len() as f64,
        uniform_loss: (vocab as f64).ln(),
        tagged_acc: mc_accuracy(&g, None, &tagged_probes(cfg, &examples), &corpus.tokenizer)?,
        zero_shot_acc: mc_accuracy(&g, None, &examples, &corpus.tokenizer)?,
    };
    fs::write(cfg.out.join("pretrain.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}

/// Distills the mode's client model from the global model on the proxy
/// shard; writes `aux.fspt` and `kd_curve.csv` under `out`.
pub fn cmd_distill(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let prep = prepare(cfg)?;
    let global = load_global(cfg, prep.corpus.tokenizer.vocab_size())?;
    let outcome = run_kd(&global, client_model(cfg, &global)?, &prep.data.proxy, &cfg.kd_config())?;
    write_config_echo(cfg)?;
    write_curve_csv(&cfg.out.join(KD_CURVE_FILE), &outcome.curve)?;
    let path = cfg.out.join("aux.fspt");
    checkpoint::save(&path, &outcome.aux.named_params())?;
    Ok(path)
}

/// Runs one mode and writes the config echo, metrics, timing, summary and
/// final checkpoints under `out`.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let prep = prepare(cfg)?;
    let global = load_global(cfg, prep.corpus.tokenizer.vocab_size())?;
    let client_model = match &cfg.aux_checkpoint {
        Some(p) if cfg.mode.is_federated() => Some(load_aux(cfg, &global, p)?),
        _ => None,
    };
    let outcome = run_federation(
        &global,
        &prep.data,
        &cfg.fed_config(),
        RunOptions {
            kd: cfg.kd_config(),
            client_model,
            record_messages: false,
        },
    )?;
    write_outputs(cfg, &prep.partition, &outcome)
}

fn write_jsonl<S: Serialize>(path: &Path, rows: impl IntoIterator<Item = S>) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, &r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Timing {
    round: usize,
    wall_ms: u64,
}

fn write_outputs(cfg: &RunConfig, partition: &Partition, outcome: &RunOutcome<f64>) -> Result<RunSummary> {
    write_config_echo(cfg)?;
    let out = &cfg.out;
    partition.save(&out.join("partition.json"))?;
    write_jsonl(&out.join(METRICS_FILE), &outcome.records)?;
    write_jsonl(
        &out.join(TIMING_FILE),
        outcome.records.iter().map(|r| Timing {
            round: r.round,
            wall_ms: r.wall_ms,
        }),
    )?;
    if !outcome.kd_curve.is_empty() {
        write_curve_csv(&out.join(KD_CURVE_FILE), &outcome.kd_curve)?;
    }
    if let Some(p) = &outcome.prompts {
        checkpoint::save(&out.join("prompts.fspt"), &p.named_params())?;
    }
    if let Some(m) = &outcome.model {
        checkpoint::save(&out.join("model.fspt"), &m.named_params())?;
    }
    if let Some(a) = &outcome.client_model {
        checkpoint::save(&out.join("aux.fspt"), &a.named_params())?;
    }
    let last = outcome.records.last().ok_or_else(|| Error::Data("run produced no records".into()))?;
    let summary = RunSummary {
        mode: outcome.mode,
        task: cfg.target.as_str().to_string(),
        seed: cfg.seed,
        selection: cfg.selection,
        aux_layers: cfg.aux_layers,
        rounds: outcome.records.len(),
        final_acc: outcome.final_acc(),
        best_acc: outcome.best_acc(),
        uploaded_bytes: last.uploaded_bytes,
        downloaded_bytes: last.downloaded_bytes,
        params: outcome.params,
    };
    fs::write(out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

/// Probe accuracy of the global model, or of a finetuned replacement, with
/// optional prompts attached.
pub fn cmd_eval(cfg: &RunConfig, model: Option<&Path>, prompts: Option<&Path>) -> Result<f64> {
    cfg.validate()?;
    let (corpus, examples) = make_toy_tasks_with(cfg.task_seed, &cfg.task_spec())?;
    let mut global = load_global(cfg, corpus.tokenizer.vocab_size())?;
    if let Some(path) = model {
        global.load_named(&checkpoint::load::<f64>(path)?)?;
    }
    let prompts = match prompts {
        Some(path) => {
            let mut p = PromptSet::zeros(&global.cfg);
            p.load_named(&checkpoint::load::<f64>(path)?)?;
            Some(p)
        }
        None => None,
    };
    mc_accuracy(&global, prompts.as_ref(), &examples, &corpus.tokenizer)
}

/// Hyperparameter grid; every combination is one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub selections: Vec<Selection>,
    pub prompt_lrs: Vec<f64>,
    pub rounds: Vec<usize>,
    pub local_steps: Vec<usize>,
}

impl SweepGrid {
    /// All three selections; every other axis fixed at the base config's value.
    pub fn selections_only(base: &RunConfig) -> Self {
        SweepGrid {
            selections: Selection::ALL.to_vec(),
            prompt_lrs: vec![base.prompt_lr],
            rounds: vec![base.rounds],
            local_steps: vec![base.local_steps],
        }
    }

    pub fn configs(&self, base: &RunConfig) -> Vec<RunConfig> {
        let mut out = Vec::new();
        for &selection in &self.selections {
            for &lr in &self.prompt_lrs {
                for &rounds in &self.rounds {
                    for &steps in &self.local_steps {
                        let name = format!("{}_lr{:e}_T{}_S{}", selection, lr, rounds, steps);
                        out.push(RunConfig {
                            selection,
                            prompt_lr: lr,
                            server_lr: lr,
                            rounds,
                            local_steps: steps,
                            out: base.out.join(name),
                            ..base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

/// Runs every grid point in sequence and writes `sweep.md` under `out`.
pub fn cmd_sweep(base: &RunConfig, grid: &SweepGrid) -> Result<String> {
    let configs = grid.configs(base);
    if configs.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    for c in &configs {
        c.validate()?;
    }
    let mut rows = Vec::with_capacity(configs.len());
    for c in &configs {
        let s = cmd_run(c)?;
        rows.push(SweepRow {
            selection: c.selection,
            prompt_lr: c.prompt_lr,
            rounds: c.rounds,
            local_steps: c.local_steps,
            summary: s,
        });
    }
    let md = render_sweep(&rows);
    fs::create_dir_all(&base.out)?;
    fs::write(base.out.join("sweep.md"), &md)?;
    Ok(md)
}
