//! Federated round engine: prompt aggregation, alternating client training,
//! server-side prompt refinement, baselines and ablations.

mod aggregate;
mod client;
mod message;
mod run;
mod server;

pub use aggregate::aggregate_prompts;
pub use client::{client_local_round, ClientReport, ClientState, LocalTraining, PhaseAudit};
pub use message::{is_prompt_only, Direction, RoundMessage};
pub use run::{initial_prompts, run_federation, Audit, FedData, ParamSummary, RoundRecord, RunOptions, RunOutcome, ServerAudit};
pub use server::{sample_clients, server_optimize, ServerState};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_auxiliary, AuxModel, GlobalModel, Selection};
use crate::scalar::Scalar;

/// Training recipe of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Fedsp,
    FedspNoKd,
    FedspNoCs,
    FedspNoAt,
    Fedprompt,
    FedpromptSingle,
    CentralFinetune,
    CentralPrefix,
    ZeroShot,
}

impl TrainMode {
    pub const ALL: [TrainMode; 9] = [
        TrainMode::Fedsp,
        TrainMode::FedspNoKd,
        TrainMode::FedspNoCs,
        TrainMode::FedspNoAt,
        TrainMode::Fedprompt,
        TrainMode::FedpromptSingle,
        TrainMode::CentralFinetune,
        TrainMode::CentralPrefix,
        TrainMode::ZeroShot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Fedsp => "fedsp",
            TrainMode::FedspNoKd => "fedsp_no_kd",
            TrainMode::FedspNoCs => "fedsp_no_cs",
            TrainMode::FedspNoAt => "fedsp_no_at",
            TrainMode::Fedprompt => "fedprompt",
            TrainMode::FedpromptSingle => "fedprompt_single",
            TrainMode::CentralFinetune => "central_finetune",
            TrainMode::CentralPrefix => "central_prefix",
            TrainMode::ZeroShot => "zero_shot",
        }
    }

    pub fn is_federated(self) -> bool {
        !matches!(self, TrainMode::CentralFinetune | TrainMode::CentralPrefix | TrainMode::ZeroShot)
    }

    /// Runs the alignment phase before prompt capture.
    pub fn aligns(self) -> bool {
        matches!(self, TrainMode::Fedsp | TrainMode::FedspNoKd | TrainMode::FedspNoCs)
    }

    pub fn distills(self) -> bool {
        matches!(self, TrainMode::Fedsp | TrainMode::FedspNoCs | TrainMode::FedspNoAt)
    }

    pub fn server_optimizes(self) -> bool {
        matches!(
            self,
            TrainMode::Fedsp | TrainMode::FedspNoKd | TrainMode::FedspNoCs | TrainMode::FedspNoAt
        )
    }

    /// Uses a selected auxiliary model (and so needs `L mod N == 0`).
    pub fn uses_selection(self) -> bool {
        self.server_optimizes()
    }

    /// The model clients train against, before any distillation.
    pub fn client_model<T: Scalar>(
        self,
        global: &GlobalModel<T>,
        selection: Selection,
        aux_layers: usize,
    ) -> Result<AuxModel<T>> {
        let l = global.cfg.n_layers;
        match self {
            TrainMode::Fedsp | TrainMode::FedspNoKd | TrainMode::FedspNoAt => {
                build_auxiliary(global, selection, aux_layers)
            }
            TrainMode::FedspNoCs => Ok(build_auxiliary(global, selection, aux_layers)?.without_sharing()),
            TrainMode::Fedprompt => build_auxiliary(global, Selection::Bot, l),
            TrainMode::FedpromptSingle => Ok(build_auxiliary(global, Selection::Bot, 1)?.without_sharing()),
            _ => Err(Error::Config(format!("mode {} has no client model", self))),
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{}`", s)))
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedConfig {
    pub mode: TrainMode,
    pub rounds: usize,
    pub clients: usize,
    /// Fraction of clients sampled per round.
    pub fraction: f64,
    /// Steps per local phase (and per round for the central baselines).
    pub local_steps: usize,
    /// Server prompt steps per round; 0 disables server refinement.
    pub server_steps: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    /// Auxiliary-model lr (also the central finetuning lr).
    pub aux_lr: f64,
    /// Client prompt lr (also the central prefix-tuning lr).
    pub prompt_lr: f64,
    pub server_lr: f64,
    pub selection: Selection,
    pub aux_layers: usize,
    /// Run the selected clients of a round concurrently.
    pub parallel: bool,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            mode: TrainMode::Fedsp,
            rounds: 20,
            clients: 10,
            fraction: 1.0,
            local_steps: 10,
            server_steps: 10,
            batch_size: 16,
            warmup_fraction: 0.1,
            aux_lr: 5e-4,
            prompt_lr: 5e-4,
            server_lr: 5e-4,
            selection: Selection::Bot,
            aux_layers: 1,
            parallel: false,
            seed: 0,
        }
    }
}

impl FedConfig {
    /// Checks every constraint that does not depend on data.
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.rounds == 0 {
            return bad("rounds must be >= 1".into());
        }
        if self.clients == 0 {
            return bad("clients must be >= 1".into());
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return bad(format!("fraction {} is outside (0, 1]", self.fraction));
        }
        if self.local_steps == 0 {
            return bad("local_steps must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must be in [0, 1]".into());
        }
        for (name, lr) in [("aux_lr", self.aux_lr), ("prompt_lr", self.prompt_lr), ("server_lr", self.server_lr)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("{} must be finite and >= 0", name));
            }
        }
        if self.mode.uses_selection() && (self.aux_layers == 0 || n_layers % self.aux_layers != 0) {
            return bad(format!(
                "auxiliary depth {} must divide global depth {}",
                self.aux_layers, n_layers
            ));
        }
        Ok(())
    }
}
