//! Shallow client-side model derived from the global model.
//!
//! The auxiliary model keeps `N` contiguous blocks of the global model and
//! executes them `R = L / N` times in sequence (cross-layer sharing), so it
//! consumes the same `L` prompt slots as the global model.

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::transformer::{
    push_shell_params, push_shell_params_mut, run_stack, Block, Embeddings, GlobalModel, LanguageModel,
    LayerPrefix, LmHead, TokenBatch,
};
use crate::autograd::{Parameters, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which contiguous run of global blocks seeds the auxiliary model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Selection {
    Bot,
    Mid,
    Top,
}

impl Selection {
    pub const ALL: [Selection; 3] = [Selection::Bot, Selection::Mid, Selection::Top];

    /// 1-based index of the first selected block for a global depth `l` and `n` selected blocks.
    ///
    /// MID uses `L/2 - N/2` (integer division, at least 1): for `L = 48, N = 1`
    /// that is block 24, and for `L = 24` block 12.
    pub fn first_block(self, l: usize, n: usize) -> usize {
        match self {
            Selection::Bot => 1,
            Selection::Mid => (l / 2).saturating_sub(n / 2).max(1),
            Selection::Top => l - n + 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Selection::Bot => "BOT",
            Selection::Mid => "MID",
            Selection::Top => "TOP",
        }
    }
}

impl std::str::FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "BOT" => Ok(Selection::Bot),
            "MID" => Ok(Selection::Mid),
            "TOP" => Ok(Selection::Top),
            other => Err(Error::Config(format!("unknown selection `{}`", other))),
        }
    }
}

impl std::fmt::Display for Selection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct AuxModel<T> {
    pub cfg: ModelConfig,
    pub embed: Embeddings<T>,
    pub blocks: Vec<Block<T>>,
    pub head: LmHead<T>,
    repeats: usize,
    first_block: usize,
}

/// Deep-copies embeddings, head and `n_layers` contiguous blocks of `global`.
pub fn build_auxiliary<T: Scalar>(
    global: &GlobalModel<T>,
    selection: Selection,
    n_layers: usize,
) -> Result<AuxModel<T>> {
    let l = global.cfg.n_layers;
    if n_layers == 0 || n_layers > l || l % n_layers != 0 {
        return Err(Error::Config(format!(
            "auxiliary depth {} must divide global depth {}",
            n_layers, l
        )));
    }
    let first = selection.first_block(l, n_layers);
    let blocks = global.blocks[first - 1..first - 1 + n_layers].to_vec();
    let mut aux = AuxModel {
        cfg: global.cfg.clone(),
        embed: global.embed.clone(),
        blocks,
        head: global.head.clone(),
        repeats: l / n_layers,
        first_block: first,
    };
    for (_, t) in aux.named_params_mut() {
        t.grad = None;
    }
    Ok(aux)
}

impl<T: Scalar> AuxModel<T> {
    /// Sharing factor `R`.
    pub fn repeats(&self) -> usize {
        self.repeats
    }

    /// 1-based global index of the first copied block.
    pub fn first_block(&self) -> usize {
        self.first_block
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Runs each block once (no cross-layer sharing); depth becomes `N`.
    pub fn without_sharing(mut self) -> Self {
        self.repeats = 1;
        self
    }

    /// Blocks in execution order; position `i` consumes prompt slot `i`.
    pub fn schedule(&self) -> Vec<&Block<T>> {
        (0..self.repeats).flat_map(|_| self.blocks.iter()).collect()
    }
}

impl<T: Scalar> Parameters<T> for AuxModel<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        push_shell_params(&mut out, &self.embed, &self.blocks, &self.head);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        push_shell_params_mut(&mut out, &mut self.embed, &mut self.blocks, &mut self.head);
        out
    }
}

impl<T: Scalar> LanguageModel<T> for AuxModel<T> {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn depth(&self) -> usize {
        self.blocks.len() * self.repeats
    }

    fn hidden(&self, tape: &mut Tape<T>, prefixes: Option<&[LayerPrefix]>, batch: &TokenBatch) -> Result<Var> {
        run_stack(&self.cfg, tape, &self.embed, &self.schedule(), &self.head, prefixes, batch)
    }

    fn head(&self) -> &LmHead<T> {
        &self.head
    }
}
