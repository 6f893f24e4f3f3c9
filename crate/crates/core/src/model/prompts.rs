//! Per-layer soft prompts (key/value prefixes), directly stored or generated
//! through a reparametrization MLP.

use rand::Rng;

use super::config::{ModelConfig, Reparam};
use super::transformer::LayerPrefix;
use crate::autograd::{Parameters, Tape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const PROMPT_INIT_STD: f64 = 0.1;
const MLP_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub enum PromptStorage<T> {
    Direct {
        keys: Vec<Tensor<T>>,
        values: Vec<Tensor<T>>,
    },
    /// `seed [P, d]` → tanh(seed·w1 + b1)·w2 + b2 → `[P, L·2·d]`, columns
    /// laid out layer-major then key/value then feature.
    Reparam {
        seed: Tensor<T>,
        w1: Tensor<T>,
        b1: Tensor<T>,
        w2: Tensor<T>,
        b2: Tensor<T>,
    },
}

/// The only learned payload exchanged between server and clients.
#[derive(Debug, Clone)]
pub struct PromptSet<T> {
    n_layers: usize,
    prefix_len: usize,
    d_model: usize,
    pub storage: PromptStorage<T>,
}

impl<T: Scalar> PromptSet<T> {
    /// Random initialization; every tensor requires a gradient.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let (l, p, d) = (cfg.n_layers, cfg.prefix_len, cfg.d_model);
        let storage = match cfg.reparam {
            Reparam::Off => {
                let mut keys = Vec::with_capacity(l);
                let mut values = Vec::with_capacity(l);
                for _ in 0..l {
                    keys.push(Tensor::randn(&[p, d], PROMPT_INIT_STD, rng).with_requires_grad(true));
                    values.push(Tensor::randn(&[p, d], PROMPT_INIT_STD, rng).with_requires_grad(true));
                }
                PromptStorage::Direct { keys, values }
            }
            Reparam::Hidden(h) => PromptStorage::Reparam {
                seed: Tensor::randn(&[p, d], 1.0, rng).with_requires_grad(true),
                w1: Tensor::randn(&[d, h], MLP_INIT_STD, rng).with_requires_grad(true),
                b1: Tensor::zeros(&[h]).with_requires_grad(true),
                w2: Tensor::randn(&[h, l * 2 * d], MLP_INIT_STD, rng).with_requires_grad(true),
                b2: Tensor::zeros(&[l * 2 * d]).with_requires_grad(true),
            },
        };
        PromptSet {
            n_layers: l,
            prefix_len: p,
            d_model: d,
            storage,
        }
    }

    /// All-zero prompts (in reparam form: zero MLP weights and biases).
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (l, p, d) = (cfg.n_layers, cfg.prefix_len, cfg.d_model);
        let z = |shape: &[usize]| Tensor::zeros(shape).with_requires_grad(true);
        let storage = match cfg.reparam {
            Reparam::Off => PromptStorage::Direct {
                keys: (0..l).map(|_| z(&[p, d])).collect(),
                values: (0..l).map(|_| z(&[p, d])).collect(),
            },
            Reparam::Hidden(h) => PromptStorage::Reparam {
                seed: z(&[p, d]),
                w1: z(&[d, h]),
                b1: z(&[h]),
                w2: z(&[h, l * 2 * d]),
                b2: z(&[l * 2 * d]),
            },
        };
        PromptSet {
            n_layers: l,
            prefix_len: p,
            d_model: d,
            storage,
        }
    }

    /// Number of layer slots.
    pub fn depth(&self) -> usize {
        self.n_layers
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn is_reparam(&self) -> bool {
        matches!(self.storage, PromptStorage::Reparam { .. })
    }

    /// Number of materialized prefix values, independent of storage form.
    pub fn materialized_len(&self) -> usize {
        self.n_layers * 2 * self.prefix_len * self.d_model
    }

    /// Records the per-layer prefixes on `tape`.
    ///
    /// Direct storage binds the stored tensors themselves; reparam storage
    /// runs the MLP so gradients reach the seed and MLP weights.
    pub fn materialize(&self, tape: &mut Tape<T>) -> Result<Vec<LayerPrefix>> {
        match &self.storage {
            PromptStorage::Direct { keys, values } => Ok(keys
                .iter()
                .zip(values)
                .map(|(k, v)| LayerPrefix {
                    key: tape.bind(k),
                    value: tape.bind(v),
                })
                .collect()),
            PromptStorage::Reparam { seed, w1, b1, w2, b2 } => {
                let e = tape.bind(seed);
                let w1 = tape.bind(w1);
                let b1 = tape.bind(b1);
                let w2 = tape.bind(w2);
                let b2 = tape.bind(b2);
                let h = tape.matmul(e, w1)?;
                let h = tape.add(h, b1)?;
                let h = tape.tanh(h);
                let out = tape.matmul(h, w2)?;
                let out = tape.add(out, b2)?;
                let d = self.d_model;
                (0..self.n_layers)
                    .map(|l| {
                        Ok(LayerPrefix {
                            key: tape.slice(out, 1, (2 * l) * d, d)?,
                            value: tape.slice(out, 1, (2 * l + 1) * d, d)?,
                        })
                    })
                    .collect()
            }
        }
    }

    /// Detached per-layer (key, value) tensors.
    pub fn materialize_values(&self) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
        let mut tape = Tape::new();
        let layers = self.materialize(&mut tape)?;
        Ok(layers
            .iter()
            .map(|p| (tape.to_tensor(p.key), tape.to_tensor(p.value)))
            .collect())
    }

    /// Same storage form and tensor shapes.
    pub fn same_layout(&self, other: &PromptSet<T>) -> bool {
        let a = self.named_params();
        let b = other.named_params();
        a.len() == b.len() && a.iter().zip(&b).all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    /// Rebuilds a prompt set with this layout from named tensors (e.g. a decoded payload).
    pub fn with_values(&self, tensors: &[(String, Tensor<T>)]) -> Result<Self> {
        let mut out = self.clone();
        let own = out.named_params().len();
        if tensors.len() != own {
            return Err(Error::Format(format!("expected {} prompt tensors, got {}", own, tensors.len())));
        }
        out.load_named(tensors)?;
        for (_, t) in out.named_params_mut() {
            t.grad = None;
            t.set_requires_grad(true);
        }
        Ok(out)
    }

    /// Names of the trainable tensors that feed the first `slots` layers.
    /// Reparametrized prompts couple every slot, so all names are returned.
    pub fn names_for_slots(&self, slots: usize) -> Vec<String> {
        match &self.storage {
            PromptStorage::Direct { .. } => (0..slots.min(self.n_layers))
                .flat_map(|l| [format!("prompts.{}.key", l), format!("prompts.{}.value", l)])
                .collect(),
            PromptStorage::Reparam { .. } => self.named_params().into_iter().map(|(n, _)| n).collect(),
        }
    }
}

impl<T: Scalar> Parameters<T> for PromptSet<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        match &self.storage {
            PromptStorage::Direct { keys, values } => keys
                .iter()
                .zip(values)
                .enumerate()
                .flat_map(|(l, (k, v))| [(format!("prompts.{}.key", l), k), (format!("prompts.{}.value", l), v)])
                .collect(),
            PromptStorage::Reparam { seed, w1, b1, w2, b2 } => vec![
                ("prompt_mlp.seed".into(), seed),
                ("prompt_mlp.w1".into(), w1),
                ("prompt_mlp.b1".into(), b1),
                ("prompt_mlp.w2".into(), w2),
                ("prompt_mlp.b2".into(), b2),
            ],
        }
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        match &mut self.storage {
            PromptStorage::Direct { keys, values } => keys
                .iter_mut()
                .zip(values.iter_mut())
                .enumerate()
                .flat_map(|(l, (k, v))| [(format!("prompts.{}.key", l), k), (format!("prompts.{}.value", l), v)])
                .collect(),
            PromptStorage::Reparam { seed, w1, b1, w2, b2 } => vec![
                ("prompt_mlp.seed".into(), seed),
                ("prompt_mlp.w1".into(), w1),
                ("prompt_mlp.b1".into(), b1),
                ("prompt_mlp.w2".into(), w2),
                ("prompt_mlp.b2".into(), b2),
            ],
        }
    }
}
