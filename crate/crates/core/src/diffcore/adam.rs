use std::collections::BTreeMap;

use super::array::ParamBlock;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Bias-corrected Adam moments for a set of parameter blocks, keyed by
/// `block.tensor`.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub step: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lr: T, beta1: T, beta2: T, eps: T) -> Self {
        Self {
            step: 0,
            lr,
            beta1,
            beta2,
            eps,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// `lr` with betas `(0.9, 0.999)` and `eps = 1e-8`.
    pub fn with_lr(lr: T) -> Self {
        Self::new(lr, T::lit(0.9), T::lit(0.999), T::lit(1e-8))
    }

    pub fn first_moment(&self, key: &str) -> Option<&[T]> {
        self.m.get(key).map(Vec::as_slice)
    }

    pub fn second_moment(&self, key: &str) -> Option<&[T]> {
        self.v.get(key).map(Vec::as_slice)
    }
}

/// One Adam update of every tensor that carries a gradient. Tensors without a
/// gradient (frozen this iteration) are left alone. All gradients are
/// validated before anything is modified.
pub fn adam_step<T: Scalar>(
    state: &mut AdamState<T>,
    blocks: &mut [&mut ParamBlock<T>],
) -> Result<()> {
    for block in blocks.iter() {
        for (name, t) in block.iter() {
            if let Some(g) = &t.grad {
                if g.len() != t.len() {
                    return Err(Error::Shape(format!(
                        "gradient for {}.{name} has {} values, tensor has {}",
                        block.name,
                        g.len(),
                        t.len()
                    )));
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of {}.{name}",
                        block.name
                    )));
                }
            }
        }
    }
    state.step += 1;
    let step = i32::try_from(state.step).unwrap_or(i32::MAX);
    let bc1 = T::one() - state.beta1.powi(step);
    let bc2 = T::one() - state.beta2.powi(step);
    for block in blocks.iter_mut() {
        let bname = block.name.clone();
        for (name, t) in block.iter_mut() {
            let Some(g) = t.grad.take() else { continue };
            let key = format!("{bname}.{name}");
            let m = state
                .m
                .entry(key.clone())
                .or_insert_with(|| vec![T::zero(); g.len()]);
            let v = state
                .v
                .entry(key)
                .or_insert_with(|| vec![T::zero(); g.len()]);
            for (((p, &gi), mi), vi) in t
                .data_mut()
                .iter_mut()
                .zip(&g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = state.beta1 * *mi + (T::one() - state.beta1) * gi;
                *vi = state.beta2 * *vi + (T::one() - state.beta2) * gi * gi;
                if state.lr != T::zero() {
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    *p -= state.lr * mhat / (vhat.sqrt() + state.eps);
                }
            }
            t.grad = Some(g);
        }
    }
    Ok(())
}
