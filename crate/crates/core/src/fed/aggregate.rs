use crate::autograd::Parameters;
use crate::error::{shape_err, Error, Result};
use crate::model::PromptSet;
use crate::scalar::Scalar;

/// Data-size weighted mean of prompt sets: each parameter becomes
/// `Σ_k (n_k / N) · p_k` with `N = Σ n_k`, summed in the order given.
pub fn aggregate_prompts<T: Scalar>(updates: &[(&PromptSet<T>, usize)]) -> Result<PromptSet<T>> {
    let (first, _) = updates.first().ok_or_else(|| Error::Data("no prompt updates to aggregate".into()))?;
    if updates.iter().any(|(_, n)| *n == 0) {
        return Err(Error::Data("aggregation weights must be positive".into()));
    }
    if updates.iter().any(|(p, _)| !p.same_layout(first)) {
        return Err(shape_err("aggregate_prompts", "prompt sets differ in layout"));
    }
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    let weights: Vec<T> = updates.iter().map(|(_, n)| T::of(*n as f64 / total as f64)).collect();

    let mut out = (*first).clone();
    let sources: Vec<Vec<(String, &crate::autograd::Tensor<T>)>> =
        updates.iter().map(|(p, _)| p.named_params()).collect();
    for (i, (_, t)) in out.named_params_mut().into_iter().enumerate() {
        t.grad = None;
        for (e, v) in t.data_mut().iter_mut().enumerate() {
            let mut acc = T::zero();
            for (src, &w) in sources.iter().zip(&weights) {
                acc = acc + w * src[i].1.data()[e];
            }
            *v = acc;
        }
    }
    Ok(out)
}
