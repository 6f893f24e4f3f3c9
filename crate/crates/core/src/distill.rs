//! Hidden-state distillation of the auxiliary model from the global model.
//!
//! The student's last hidden states are mapped through a learnable square
//! projection and regressed onto the teacher's with a mean squared error.
//! Teacher activations enter the student's tape as constants, so no gradient
//! reaches the teacher, and no prompts are attached on either side.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{AdamW, AdamWConfig, LrSchedule, Parameters, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::model::{AuxModel, GlobalModel, LanguageModel};
use crate::scalar::Scalar;
use crate::train::Batcher;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdConfig {
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            steps: 5000,
            lr: 5e-4,
            batch_size: 16,
            warmup_fraction: 0.1,
            weight_decay: AdamWConfig::default().weight_decay,
            seed: 0,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("distillation needs steps >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("distillation lr must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("distillation batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Learnable `d × d` map from student to teacher hidden space, identity-initialized.
#[derive(Debug, Clone)]
pub struct KdProjector<T> {
    pub w: Tensor<T>,
}

impl<T: Scalar> KdProjector<T> {
    pub fn identity(d_model: usize) -> Self {
        KdProjector {
            w: Tensor::eye(d_model).with_requires_grad(true),
        }
    }
}

impl<T: Scalar> Parameters<T> for KdProjector<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("kd.w_s".into(), &self.w)]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![("kd.w_s".into(), &mut self.w)]
    }
}

/// `mean((teacher - student · Wᵀ)²)` over every batch, time and feature element.
pub fn kd_loss<T: Scalar>(tape: &mut Tape<T>, teacher: Var, student: Var, proj: &KdProjector<T>) -> Result<Var> {
    let (ts, ss) = (tape.shape(teacher).to_vec(), tape.shape(student).to_vec());
    if ts != ss {
        return Err(shape_err("kd_loss", format!("teacher {:?} vs student {:?}", ts, ss)));
    }
    let d = *ss.last().unwrap_or(&0);
    if proj.w.shape() != [d, d] {
        return Err(shape_err(
            "kd_loss",
            format!("projector {:?} does not map width {}", proj.w.shape(), d),
        ));
    }
    let w = tape.bind(&proj.w);
    let wt = tape.transpose(w)?;
    let mapped = tape.matmul(student, wt)?;
    tape.mse(teacher, mapped)
}

/// [`kd_loss`] on detached hidden-state tensors.
pub fn kd_loss_value<T: Scalar>(teacher: &Tensor<T>, student: &Tensor<T>, proj: &KdProjector<T>) -> Result<T> {
    let mut tape = Tape::new();
    let t = tape.bind_detached(teacher);
    let s = tape.bind_detached(student);
    let l = kd_loss(&mut tape, t, s, proj)?;
    Ok(tape.value(l)[0])
}

#[derive(Debug, Clone)]
pub struct KdOutcome<T> {
    pub aux: AuxModel<T>,
    /// Loss before each update.
    pub curve: Vec<f64>,
}

/// Distills `aux` from the frozen `teacher` on `seqs`.
///
/// All auxiliary parameters that feed the last hidden state (everything but
/// the output projection) and the projector are trained with AdamW under a
/// warm-up/linear-decay schedule; the projector is dropped afterwards.
pub fn run_kd<T: Scalar>(
    teacher: &GlobalModel<T>,
    mut aux: AuxModel<T>,
    seqs: &[Vec<usize>],
    cfg: &KdConfig,
) -> Result<KdOutcome<T>> {
    cfg.validate()?;
    if seqs.len() < cfg.batch_size {
        return Err(Error::Data(format!(
            "distillation corpus has {} sequences, fewer than one batch of {}",
            seqs.len(),
            cfg.batch_size
        )));
    }
    if aux.cfg.d_model != teacher.cfg.d_model {
        return Err(shape_err("run_kd", "teacher and student widths differ".to_string()));
    }
    let mut proj = KdProjector::identity(aux.cfg.d_model);
    let mut batcher = Batcher::new(seqs.len(), cfg.seed)?;
    let sched = LrSchedule::new(cfg.lr, cfg.steps, cfg.warmup_fraction);
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    aux.set_requires_grad(true);
    // The output projection is off the hidden-state path and gets no gradient.
    aux.head.w.set_requires_grad(false);
    aux.head.b.set_requires_grad(false);
    let mut curve = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let batch = batcher.next_batch(seqs, cfg.batch_size)?;
        let target = {
            let mut t = Tape::new();
            let h = teacher.hidden(&mut t, None, &batch)?;
            t.to_tensor(h)
        };
        let mut tape = Tape::new();
        let h_t = tape.bind_detached(&target);
        let h_s = aux.hidden(&mut tape, None, &batch)?;
        let loss = kd_loss(&mut tape, h_t, h_s, &proj)?;
        curve.push(tape.value(loss)[0].as_f64());
        let mut grads = tape.backward(loss)?;
        aux.fill_grads(&mut grads);
        proj.fill_grads(&mut grads);
        let params = aux.named_params_mut().into_iter().chain(proj.named_params_mut());
        opt.step(params, sched.lr(step))?;
    }
    aux.set_requires_grad(false);
    Ok(KdOutcome { aux, curve })
}

/// Trailing moving average with the given window.
pub fn smooth(curve: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(curve.len());
    let mut sum = 0.0;
    for (i, &v) in curve.iter().enumerate() {
        sum += v;
        if i >= w {
            sum -= curve[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

/// Writes `step,loss` rows.
pub fn write_curve_csv(path: &Path, curve: &[f64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,loss")?;
    for (i, l) in curve.iter().enumerate() {
        writeln!(f, "{},{:e}", i, l)?;
    }
    f.flush()?;
    Ok(())
}
