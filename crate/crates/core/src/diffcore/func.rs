use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) fn embed_into<T: Scalar>(x: &[T], freqs: usize, include_input: bool, out: &mut Vec<T>) {
    for &xi in x {
        if include_input {
            out.push(xi);
        }
        let mut f = T::one();
        for _ in 0..freqs {
            let (s, c) = (f * xi).sin_cos();
            out.push(s);
            out.push(c);
            f = f + f;
        }
    }
}

/// Sinusoidal positional lifting.
///
/// For every input component `x_j`, in order, emits `x_j` (when
/// `include_input`) followed by `sin(2^k x_j), cos(2^k x_j)` for
/// `k = 0..num_freqs`. Output length is `len(x) * (2 * num_freqs + include_input)`.
pub fn sinusoidal_embed<T: Scalar>(x: &[T], num_freqs: usize, include_input: bool) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len() * (2 * num_freqs + usize::from(include_input)));
    embed_into(x, num_freqs, include_input, &mut out);
    out
}

/// Max-shifted softmax.
pub fn softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-log softmax(logits)[target]` together with its gradient
/// `softmax(logits) - one_hot(target)`.
pub fn crossentropy<T: Scalar>(logits: &[T], target: usize) -> Result<(T, Vec<T>)> {
    if target >= logits.len() {
        return Err(Error::OutOfRange(format!(
            "target class {target} for {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    let mut grad = softmax(logits);
    grad[target] -= T::one();
    Ok((lse - logits[target], grad))
}
