use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ArithOp, Scheme, TaskSpec};
use crate::distill::KdConfig;
use crate::error::{Error, Result};
use crate::fed::{FedConfig, TrainMode};
use crate::model::{ModelConfig, Reparam, Selection};
use crate::train::PretrainConfig;

/// Everything one experiment needs, as a single flat JSON object.
///
/// Missing keys take their defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: TrainMode,
    /// Seeds partitioning, prompt init, client batching and distillation.
    pub seed: u64,

    /// Seeds the toy task (which pairs are held out as probes).
    pub task_seed: u64,
    pub modulus: usize,
    pub target: ArithOp,
    pub eval_pairs: usize,
    pub train_repeats: usize,
    /// Dirichlet concentration for label-skewed shards; `null` means iid.
    pub label_skew_alpha: Option<f64>,

    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub prefix_len: usize,
    /// Hidden width of the prompt MLP; `null` trains prefixes directly.
    pub reparam_hidden: Option<usize>,

    pub pretrain_steps: u64,
    pub pretrain_lr: f64,

    pub clients: usize,
    pub rounds: usize,
    pub fraction: f64,
    pub local_steps: usize,
    pub server_steps: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub aux_lr: f64,
    pub prompt_lr: f64,
    pub server_lr: f64,
    pub kd_lr: f64,
    pub kd_steps: u64,
    pub selection: Selection,
    pub aux_layers: usize,
    pub parallel: bool,

    pub out: PathBuf,
    pub global_checkpoint: PathBuf,
    /// Pre-distilled client model; when unset, runs build (and distill) their own.
    pub aux_checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = TaskSpec::default();
        let fed = FedConfig::default();
        let kd = KdConfig::default();
        let pre = PretrainConfig::default();
        RunConfig {
            mode: TrainMode::Fedsp,
            seed: 0,
            task_seed: 0,
            modulus: spec.modulus,
            target: spec.target,
            eval_pairs: spec.eval_pairs,
            train_repeats: spec.train_repeats,
            label_skew_alpha: None,
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            max_seq_len: 8,
            prefix_len: 8,
            reparam_hidden: None,
            pretrain_steps: pre.steps,
            pretrain_lr: pre.lr,
            clients: fed.clients,
            rounds: fed.rounds,
            fraction: fed.fraction,
            local_steps: fed.local_steps,
            server_steps: fed.server_steps,
            batch_size: fed.batch_size,
            warmup_fraction: fed.warmup_fraction,
            aux_lr: fed.aux_lr,
            prompt_lr: fed.prompt_lr,
            server_lr: fed.server_lr,
            kd_lr: kd.lr,
            kd_steps: kd.steps,
            selection: fed.selection,
            aux_layers: fed.aux_layers,
            parallel: fed.parallel,
            out: PathBuf::from("runs/fedsp"),
            global_checkpoint: PathBuf::from("runs/global.fspt"),
            aux_checkpoint: None,
        }
    }
}

impl RunConfig {
    /// Reads a config file without validating it.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))
    }

    /// Checks every downstream constraint that does not need data or checkpoints.
    pub fn validate(&self) -> Result<()> {
        self.task_spec().validate()?;
        // Vocabulary size is data-dependent; any positive value checks the rest.
        ModelConfig {
            vocab_size: 1,
            ..self.model_config(1)
        }
        .validate()?;
        self.fed_config().validate(self.n_layers)?;
        self.kd_config().validate()?;
        if self.pretrain_steps == 0 || !(self.pretrain_lr > 0.0) {
            return Err(Error::Config("pretraining needs steps >= 1 and lr > 0".into()));
        }
        if let Some(a) = self.label_skew_alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Config("label_skew_alpha must be positive and finite".into()));
            }
        }
        // Longest sequence: BOS, tag, two operands, '=', one result digit.
        if self.max_seq_len < 6 {
            return Err(Error::Config("max_seq_len must be >= 6 for the toy facts".into()));
        }
        Ok(())
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            modulus: self.modulus,
            target: self.target,
            eval_pairs: self.eval_pairs,
            train_repeats: self.train_repeats,
        }
    }

    pub fn scheme(&self) -> Scheme {
        match self.label_skew_alpha {
            Some(alpha) => Scheme::LabelSkew { alpha },
            None => Scheme::Iid,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            vocab_size,
            max_seq_len: self.max_seq_len,
            prefix_len: self.prefix_len,
            reparam: self.reparam_hidden.map_or(Reparam::Off, Reparam::Hidden),
        }
    }

    pub fn fed_config(&self) -> FedConfig {
        FedConfig {
            mode: self.mode,
            rounds: self.rounds,
            clients: self.clients,
            fraction: self.fraction,
            local_steps: self.local_steps,
            server_steps: self.server_steps,
            batch_size: self.batch_size,
            warmup_fraction: self.warmup_fraction,
            aux_lr: self.aux_lr,
            prompt_lr: self.prompt_lr,
            server_lr: self.server_lr,
            selection: self.selection,
            aux_layers: self.aux_layers,
            parallel: self.parallel,
            seed: self.seed,
        }
    }

    pub fn kd_config(&self) -> KdConfig {
        KdConfig {
            steps: self.kd_steps,
            lr: self.kd_lr,
            batch_size: self.batch_size,
            warmup_fraction: self.warmup_fraction,
            seed: self.seed,
            ..KdConfig::default()
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain_steps,
            lr: self.pretrain_lr,
            batch_size: self.batch_size,
            warmup_fraction: self.warmup_fraction,
            seed: self.task_seed,
        }
    }
}
