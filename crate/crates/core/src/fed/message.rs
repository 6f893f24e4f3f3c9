//! Round message envelope.
//!
//! ```text
//! magic     4 bytes  "FSPM"
//! version   u32 LE   1
//! direction u8       0 = server→client, 1 = client→server
//! round     u32 LE
//! sender    u32 LE   0 = server, k = client k
//! length    u64 LE   payload bytes
//! payload   tensor checkpoint bytes (prompt parameters only)
//! ```

use serde::{Deserialize, Serialize};

use crate::autograd::{checkpoint, Parameters, Tensor};
use crate::error::{Error, Result};
use crate::model::PromptSet;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"FSPM";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 1 + 4 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ServerToClient,
    ClientToServer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundMessage {
    pub direction: Direction,
    pub round: u32,
    pub sender: u32,
    pub payload: Vec<u8>,
}

impl RoundMessage {
    pub fn with_prompts<T: Scalar>(direction: Direction, round: u32, sender: u32, prompts: &PromptSet<T>) -> Self {
        RoundMessage {
            direction,
            round,
            sender,
            payload: prompts.to_checkpoint_bytes(),
        }
    }

    /// Exact serialized payload length; this is what communication cost counts.
    pub fn payload_bytes(&self) -> usize {
        self.payload.len()
    }

    pub fn payload_tensors<T: Scalar>(&self) -> Result<Vec<(String, Tensor<T>)>> {
        checkpoint::from_bytes(&self.payload)
    }

    /// Decodes the payload into a prompt set with the layout of `template`.
    pub fn prompts<T: Scalar>(&self, template: &PromptSet<T>) -> Result<PromptSet<T>> {
        template.with_values(&self.payload_tensors()?)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(match self.direction {
            Direction::ServerToClient => 0,
            Direction::ClientToServer => 1,
        });
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.sender.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("round message: {}", m));
        if bytes.len() < HEADER_LEN {
            return Err(bad("truncated header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        if u32_at(4) != VERSION {
            return Err(bad("unsupported version"));
        }
        let direction = match bytes[8] {
            0 => Direction::ServerToClient,
            1 => Direction::ClientToServer,
            _ => return Err(bad("bad direction")),
        };
        let round = u32_at(9);
        let sender = u32_at(13);
        let len = u64::from_le_bytes(bytes[17..25].try_into().expect("8 bytes")) as usize;
        if bytes.len() - HEADER_LEN != len {
            return Err(bad("payload length does not match"));
        }
        Ok(RoundMessage {
            direction,
            round,
            sender,
            payload: bytes[HEADER_LEN..].to_vec(),
        })
    }
}

/// True when every tensor name in the payload belongs to a prompt set.
pub fn is_prompt_only(names: impl IntoIterator<Item = impl AsRef<str>>) -> bool {
    names
        .into_iter()
        .all(|n| n.as_ref().starts_with("prompts.") || n.as_ref().starts_with("prompt_mlp."))
}
