//! Decoder-only transformer LM, soft prompts and the auxiliary model.

mod auxiliary;
mod config;
mod prompts;
mod transformer;

pub use auxiliary::{build_auxiliary, AuxModel, Selection};
pub use config::{ModelConfig, Reparam};
pub use prompts::{PromptSet, PromptStorage};
pub use transformer::{Block, Embeddings, GlobalModel, LanguageModel, LayerPrefix, LmHead, TokenBatch};

use serde::{Deserialize, Serialize};

/// What to count in [`count_params`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    GlobalModel,
    /// Auxiliary model with this many distinct blocks.
    AuxModel(usize),
    /// Trainable prompt parameters, i.e. what a round message carries.
    PromptPayload,
}

fn block_params(d: usize) -> usize {
    // 2 layer norms, 4 attention projections, 2 MLP projections (4x hidden).
    2 * 2 * d + 4 * (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d)
}

fn shell_params(cfg: &ModelConfig) -> usize {
    let (v, d) = (cfg.vocab_size, cfg.d_model);
    v * d + cfg.max_seq_len * d + 2 * d + d * v + v
}

/// Exact trainable-parameter count derived from the configuration alone.
pub fn count_params(kind: ParamKind, cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    match kind {
        ParamKind::GlobalModel => shell_params(cfg) + cfg.n_layers * block_params(d),
        ParamKind::AuxModel(n) => shell_params(cfg) + n * block_params(d),
        ParamKind::PromptPayload => {
            let (l, p) = (cfg.n_layers, cfg.prefix_len);
            match cfg.reparam {
                Reparam::Off => l * 2 * p * d,
                Reparam::Hidden(h) => p * d + d * h + h + h * (l * 2 * d) + l * 2 * d,
            }
        }
    }
}
