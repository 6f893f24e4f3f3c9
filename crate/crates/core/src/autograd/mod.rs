//! Dense tensors, a reverse-mode tape, AdamW and the binary checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
mod kernels;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{checksum_all, Tensor, TensorId};

use crate::scalar::Scalar;

/// Anything that owns named trainable tensors.
///
/// Names are stable, canonical and ordered; checkpoints and optimizer state
/// are keyed by them.
pub trait Parameters<T: Scalar> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)>;
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn set_requires_grad(&mut self, flag: bool) {
        for (_, t) in self.named_params_mut() {
            t.set_requires_grad(flag);
        }
    }

    /// Moves gradients from a backward pass into each tensor's `grad` slot.
    fn fill_grads(&mut self, grads: &mut Gradients<T>) {
        for (_, t) in self.named_params_mut() {
            grads.fill(t);
        }
    }

    fn checksum(&self) -> u64 {
        checksum_all(self.named_params())
    }

    fn to_checkpoint_bytes(&self) -> Vec<u8> {
        checkpoint::to_bytes(&self.named_params())
    }

    /// Loads values by name; every own parameter must be present with a matching shape.
    fn load_named(&mut self, tensors: &[(String, Tensor<T>)]) -> crate::Result<()> {
        for (name, t) in self.named_params_mut() {
            let src = tensors
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| crate::Error::Format(format!("checkpoint lacks `{}`", name)))?;
            t.assign(&src.1)?;
        }
        Ok(())
    }
}
