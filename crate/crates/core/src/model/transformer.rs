//! Pre-norm decoder-only transformer with per-layer key/value prefixes.

use rand::Rng;

use super::config::ModelConfig;
use crate::autograd::{Parameters, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const INIT_STD: f64 = 0.02;

/// Right-padded batch of token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub len: usize,
    /// Unpadded length of each row.
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    pub fn from_sequences<S: AsRef<[usize]>>(seqs: &[S], pad: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let len = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        if len == 0 {
            return Err(Error::Data("batch of empty sequences".into()));
        }
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            let s = s.as_ref();
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat(pad).take(len - s.len()));
            lengths.push(s.len());
        }
        Ok(TokenBatch {
            ids,
            batch: seqs.len(),
            len,
            lengths,
        })
    }

    /// Target for position t is the token at t+1 within the unpadded row.
    pub fn next_token_targets(&self) -> Vec<Option<usize>> {
        let mut out = Vec::with_capacity(self.batch * self.len);
        for b in 0..self.batch {
            for t in 0..self.len {
                out.push((t + 1 < self.lengths[b]).then(|| self.ids[b * self.len + t + 1]));
            }
        }
        out
    }
}

/// Materialized key/value prefix for one effective layer, each `[P, d_model]`.
#[derive(Debug, Clone, Copy)]
pub struct LayerPrefix {
    pub key: Var,
    pub value: Var,
}

/// One transformer block: LN, causal multi-head attention, LN, GELU MLP.
#[derive(Debug, Clone)]
pub struct Block<T> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub w_fc: Tensor<T>,
    pub b_fc: Tensor<T>,
    pub w_proj: Tensor<T>,
    pub b_proj: Tensor<T>,
}

impl<T: Scalar> Block<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let h = cfg.mlp_dim();
        let resid_std = INIT_STD / (2.0 * cfg.n_layers as f64).sqrt();
        Block {
            ln1_g: Tensor::ones(&[d]),
            ln1_b: Tensor::zeros(&[d]),
            wq: Tensor::randn(&[d, d], INIT_STD, rng),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::randn(&[d, d], INIT_STD, rng),
            bk: Tensor::zeros(&[d]),
            wv: Tensor::randn(&[d, d], INIT_STD, rng),
            bv: Tensor::zeros(&[d]),
            wo: Tensor::randn(&[d, d], resid_std, rng),
            bo: Tensor::zeros(&[d]),
            ln2_g: Tensor::ones(&[d]),
            ln2_b: Tensor::zeros(&[d]),
            w_fc: Tensor::randn(&[d, h], INIT_STD, rng),
            b_fc: Tensor::zeros(&[h]),
            w_proj: Tensor::randn(&[h, d], resid_std, rng),
            b_proj: Tensor::zeros(&[d]),
        }
    }

    pub fn fields(&self) -> [(&'static str, &Tensor<T>); 16] {
        [
            ("ln1.g", &self.ln1_g),
            ("ln1.b", &self.ln1_b),
            ("attn.wq", &self.wq),
            ("attn.bq", &self.bq),
            ("attn.wk", &self.wk),
            ("attn.bk", &self.bk),
            ("attn.wv", &self.wv),
            ("attn.bv", &self.bv),
            ("attn.wo", &self.wo),
            ("attn.bo", &self.bo),
            ("ln2.g", &self.ln2_g),
            ("ln2.b", &self.ln2_b),
            ("mlp.w_fc", &self.w_fc),
            ("mlp.b_fc", &self.b_fc),
            ("mlp.w_proj", &self.w_proj),
            ("mlp.b_proj", &self.b_proj),
        ]
    }

    pub fn fields_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 16] {
        [
            ("ln1.g", &mut self.ln1_g),
            ("ln1.b", &mut self.ln1_b),
            ("attn.wq", &mut self.wq),
            ("attn.bq", &mut self.bq),
            ("attn.wk", &mut self.wk),
            ("attn.bk", &mut self.bk),
            ("attn.wv", &mut self.wv),
            ("attn.bv", &mut self.bv),
            ("attn.wo", &mut self.wo),
            ("attn.bo", &mut self.bo),
            ("ln2.g", &mut self.ln2_g),
            ("ln2.b", &mut self.ln2_b),
            ("mlp.w_fc", &mut self.w_fc),
            ("mlp.b_fc", &mut self.b_fc),
            ("mlp.w_proj", &mut self.w_proj),
            ("mlp.b_proj", &mut self.b_proj),
        ]
    }

    fn linear(&self, tape: &mut Tape<T>, x: Var, w: &Tensor<T>, b: &Tensor<T>) -> Result<Var> {
        let w = tape.bind(w);
        let b = tape.bind(b);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    /// `x` is `[B, T, d]`; `mask` is the additive causal mask `[T, P + T]`
    /// (or `[T, T]` without a prefix).
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        prefix: Option<&LayerPrefix>,
        n_heads: usize,
        mask: Var,
    ) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (batch, d) = (s[0], s[2]);
        let dh = d / n_heads;

        let g1 = tape.bind(&self.ln1_g);
        let b1 = tape.bind(&self.ln1_b);
        let h = tape.layer_norm(x, g1, b1)?;
        let q = self.linear(tape, h, &self.wq, &self.bq)?;
        let k = self.linear(tape, h, &self.wk, &self.bk)?;
        let v = self.linear(tape, h, &self.wv, &self.bv)?;
        let scale = T::of(1.0 / (dh as f64).sqrt());

        let mut heads = Vec::with_capacity(n_heads);
        for i in 0..n_heads {
            let qh = tape.slice(q, 2, i * dh, dh)?;
            let mut kh = tape.slice(k, 2, i * dh, dh)?;
            let mut vh = tape.slice(v, 2, i * dh, dh)?;
            if let Some(p) = prefix {
                let pk = tape.slice(p.key, 1, i * dh, dh)?;
                let pk = tape.expand(pk, &[batch]);
                kh = tape.concat(&[pk, kh], 1)?;
                let pv = tape.slice(p.value, 1, i * dh, dh)?;
                let pv = tape.expand(pv, &[batch]);
                vh = tape.concat(&[pv, vh], 1)?;
            }
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let scores = tape.add(scores, mask)?;
            let att = tape.softmax(scores)?;
            heads.push(tape.matmul(att, vh)?);
        }
        let o = tape.concat(&heads, 2)?;
        let o = self.linear(tape, o, &self.wo, &self.bo)?;
        let x = tape.add(x, o)?;

        let g2 = tape.bind(&self.ln2_g);
        let b2 = tape.bind(&self.ln2_b);
        let h = tape.layer_norm(x, g2, b2)?;
        let m = self.linear(tape, h, &self.w_fc, &self.b_fc)?;
        let m = tape.gelu(m);
        let m = self.linear(tape, m, &self.w_proj, &self.b_proj)?;
        tape.add(x, m)
    }
}

/// Token and learned positional embeddings.
#[derive(Debug, Clone)]
pub struct Embeddings<T> {
    pub tok: Tensor<T>,
    pub pos: Tensor<T>,
}

impl<T: Scalar> Embeddings<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        Embeddings {
            tok: Tensor::randn(&[cfg.vocab_size, cfg.d_model], INIT_STD, rng),
            pos: Tensor::randn(&[cfg.max_seq_len, cfg.d_model], INIT_STD, rng),
        }
    }

    fn forward(&self, tape: &mut Tape<T>, batch: &TokenBatch) -> Result<Var> {
        let tok = tape.bind(&self.tok);
        let x = tape.embedding(tok, &batch.ids, &[batch.batch, batch.len])?;
        let pos = tape.bind(&self.pos);
        let p = tape.slice(pos, 0, 0, batch.len)?;
        tape.add(x, p)
    }
}

/// Final layer norm followed by the untied output projection.
#[derive(Debug, Clone)]
pub struct LmHead<T> {
    pub ln_g: Tensor<T>,
    pub ln_b: Tensor<T>,
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> LmHead<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        LmHead {
            ln_g: Tensor::ones(&[cfg.d_model]),
            ln_b: Tensor::zeros(&[cfg.d_model]),
            w: Tensor::randn(&[cfg.d_model, cfg.vocab_size], INIT_STD, rng),
            b: Tensor::zeros(&[cfg.vocab_size]),
        }
    }

    fn normalize(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let g = tape.bind(&self.ln_g);
        let b = tape.bind(&self.ln_b);
        tape.layer_norm(x, g, b)
    }

    /// Projects final hidden states `[B, T, d]` to logits `[B, T, V]`.
    pub fn project(&self, tape: &mut Tape<T>, hidden: Var) -> Result<Var> {
        let w = tape.bind(&self.w);
        let b = tape.bind(&self.b);
        let y = tape.matmul(hidden, w)?;
        tape.add(y, b)
    }
}

/// Additive causal mask over `[prefix slots ++ tokens]`.
pub(crate) fn causal_mask<T: Scalar>(tape: &mut Tape<T>, len: usize, prefix_len: usize) -> Result<Var> {
    let cols = prefix_len + len;
    let mut m = vec![T::zero(); len * cols];
    for t in 0..len {
        for j in (prefix_len + t + 1)..cols {
            m[t * cols + j] = T::neg_infinity();
        }
    }
    tape.constant(&[len, cols], m)
}

/// Runs embeddings, the given block schedule and the final layer norm.
///
/// `schedule[i]` is executed at effective depth `i` and consumes prefix slot `i`.
pub(crate) fn run_stack<T: Scalar>(
    cfg: &ModelConfig,
    tape: &mut Tape<T>,
    embed: &Embeddings<T>,
    schedule: &[&Block<T>],
    head: &LmHead<T>,
    prefixes: Option<&[LayerPrefix]>,
    batch: &TokenBatch,
) -> Result<Var> {
    if let Some(p) = prefixes {
        if p.len() != schedule.len() {
            return Err(Error::DepthMismatch {
                prompts: p.len(),
                model: schedule.len(),
            });
        }
    }
    if batch.len > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: batch.len,
            max: cfg.max_seq_len,
        });
    }
    let plen = match prefixes {
        Some(p) if !p.is_empty() => tape.shape(p[0].key)[0],
        _ => 0,
    };
    let mask = causal_mask(tape, batch.len, plen)?;
    let mut x = embed.forward(tape, batch)?;
    for (depth, block) in schedule.iter().enumerate() {
        let prefix = prefixes.map(|p| &p[depth]);
        x = block.forward(tape, x, prefix, cfg.n_heads, mask)?;
    }
    head.normalize(tape, x)
}

/// Common interface of the global and auxiliary models.
pub trait LanguageModel<T: Scalar>: Parameters<T> {
    fn config(&self) -> &ModelConfig;

    /// Number of blocks executed per forward, i.e. prompt slots consumed.
    fn depth(&self) -> usize;

    /// Last hidden states `[B, T, d]` after the final layer norm.
    fn hidden(&self, tape: &mut Tape<T>, prefixes: Option<&[LayerPrefix]>, batch: &TokenBatch) -> Result<Var>;

    fn head(&self) -> &LmHead<T>;

    /// Next-token logits `[B, T, V]`.
    fn logits(&self, tape: &mut Tape<T>, prefixes: Option<&[LayerPrefix]>, batch: &TokenBatch) -> Result<Var> {
        let h = self.hidden(tape, prefixes, batch)?;
        self.head().project(tape, h)
    }
}

pub(crate) fn push_shell_params<'a, T: Scalar>(
    out: &mut Vec<(String, &'a Tensor<T>)>,
    embed: &'a Embeddings<T>,
    blocks: &'a [Block<T>],
    head: &'a LmHead<T>,
) {
    out.push(("tok_emb".into(), &embed.tok));
    out.push(("pos_emb".into(), &embed.pos));
    for (i, b) in blocks.iter().enumerate() {
        for (n, t) in b.fields() {
            out.push((format!("blocks.{}.{}", i, n), t));
        }
    }
    out.push(("ln_f.g".into(), &head.ln_g));
    out.push(("ln_f.b".into(), &head.ln_b));
    out.push(("head.w".into(), &head.w));
    out.push(("head.b".into(), &head.b));
}

pub(crate) fn push_shell_params_mut<'a, T: Scalar>(
    out: &mut Vec<(String, &'a mut Tensor<T>)>,
    embed: &'a mut Embeddings<T>,
    blocks: &'a mut [Block<T>],
    head: &'a mut LmHead<T>,
) {
    out.push(("tok_emb".into(), &mut embed.tok));
    out.push(("pos_emb".into(), &mut embed.pos));
    for (i, b) in blocks.iter_mut().enumerate() {
        for (n, t) in b.fields_mut() {
            out.push((format!("blocks.{}.{}", i, n), t));
        }
    }
    out.push(("ln_f.g".into(), &mut head.ln_g));
    out.push(("ln_f.b".into(), &mut head.ln_b));
    out.push(("head.w".into(), &mut head.w));
    out.push(("head.b".into(), &mut head.b));
}

/// The server's full-depth model.
#[derive(Debug, Clone)]
pub struct GlobalModel<T> {
    pub cfg: ModelConfig,
    pub embed: Embeddings<T>,
    pub blocks: Vec<Block<T>>,
    pub head: LmHead<T>,
}

impl<T: Scalar> GlobalModel<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let embed = Embeddings::init(cfg, rng);
        let blocks = (0..cfg.n_layers).map(|_| Block::init(cfg, rng)).collect();
        let head = LmHead::init(cfg, rng);
        Ok(GlobalModel {
            cfg: cfg.clone(),
            embed,
            blocks,
            head,
        })
    }
}

impl<T: Scalar> Parameters<T> for GlobalModel<T> {
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

impl<T: Scalar> LanguageModel<T> for GlobalModel<T> {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn depth(&self) -> usize {
        self.blocks.len()
    }

    fn hidden(&self, tape: &mut Tape<T>, prefixes: Option<&[LayerPrefix]>, batch: &TokenBatch) -> Result<Var> {
        let schedule: Vec<&Block<T>> = self.blocks.iter().collect();
        run_stack(&self.cfg, tape, &self.embed, &schedule, &self.head, prefixes, batch)
    }

    fn head(&self) -> &LmHead<T> {
        &self.head
    }
}
