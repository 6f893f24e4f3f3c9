//! Slice-level numeric kernels used by the tape's forward and backward rules.

use crate::scalar::Scalar;

/// `c[m,n] += a[m,k] · b[k,n]`
///
/// Each output element accumulates its products in increasing `p`, so the
/// result does not depend on the column blocking.
pub(crate) fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    const NB: usize = 8;
    let full = n - n % NB;
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for j in (0..full).step_by(NB) {
            let mut acc = [T::zero(); NB];
            acc.copy_from_slice(&crow[j..j + NB]);
            for (p, &av) in arow.iter().enumerate() {
                let bs = &b[p * n + j..p * n + j + NB];
                for t in 0..NB {
                    acc[t] = acc[t] + av * bs[t];
                }
            }
            crow[j..j + NB].copy_from_slice(&acc);
        }
        if full < n {
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b[p * n + full..(p + 1) * n];
                for (cv, &bv) in crow[full..].iter_mut().zip(brow) {
                    *cv = *cv + av * bv;
                }
            }
        }
    }
}

/// `c[m,k] += g[m,n] · b[k,n]ᵀ`
pub(crate) fn gemm_nt_acc<T: Scalar>(g: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let mut bt = vec![T::zero(); n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    gemm_acc(g, &bt, c, m, n, k);
}

/// `c[k,n] += a[m,k]ᵀ · g[m,n]`
pub(crate) fn gemm_tn_acc<T: Scalar>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    const NB: usize = 8;
    if n % NB == 0 {
        for p in 0..k {
            for j in (0..n).step_by(NB) {
                let mut acc = [T::zero(); NB];
                acc.copy_from_slice(&c[p * n + j..p * n + j + NB]);
                for i in 0..m {
                    let av = a[i * k + p];
                    let gs = &g[i * n + j..i * n + j + NB];
                    for t in 0..NB {
                        acc[t] = acc[t] + av * gs[t];
                    }
                }
                c[p * n + j..p * n + j + NB].copy_from_slice(&acc);
            }
        }
        return;
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv = *cv + av * gv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

/// Numerically stable softmax of one row into `out`.
pub(crate) fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// `log Σ exp(row)`
pub(crate) fn logsumexp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}
