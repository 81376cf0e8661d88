//! Central-difference verification of tape gradients (double precision).

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::array::ParamBlock;
use super::graph::{Graph, Var};
use super::nn::{bind, BoundBlock};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    pub h: f64,
    pub tol: f64,
    /// Coordinates sampled per tensor; tensors this small or smaller are checked exhaustively.
    pub coords_per_tensor: usize,
    pub seed: u64,
    /// Extra coordinates tried per tensor when a sampled one sits within `h`
    /// of a non-differentiable point.
    pub max_resamples: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-3,
            tol: 1e-3,
            coords_per_tensor: 6,
            seed: 0,
            max_resamples: 24,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckEntry {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|analytic - numeric| / max(1, |numeric|)`
    pub error: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub tol: f64,
    pub entries: Vec<GradcheckEntry>,
    /// Coordinates whose `±h` stencil crossed a branch (ReLU sign, L1 sign,
    /// sampling cell) and therefore have no valid central difference.
    pub skipped: Vec<(String, usize)>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.error <= self.tol)
    }

    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradcheckEntry> {
        self.entries.iter().filter(move |e| e.error > self.tol)
    }

    /// The `n` entries with the largest error, worst first.
    pub fn worst(&self, n: usize) -> Vec<&GradcheckEntry> {
        let mut v: Vec<_> = self.entries.iter().collect();
        v.sort_by(|a, b| b.error.total_cmp(&a.error));
        v.truncate(n);
        v
    }
}

/// Per-block map from tensor name to its analytic gradient.
pub type AnalyticGrads = Vec<BTreeMap<String, Vec<f64>>>;

struct Evaluation {
    value: f64,
    signature: Option<u64>,
    grads: Option<AnalyticGrads>,
}

fn evaluate<F>(f: &mut F, blocks: &[ParamBlock<f64>], with_grads: bool) -> Result<Evaluation>
where
    F: FnMut(&mut Graph<f64>, &[BoundBlock]) -> Result<Var>,
{
    let mut g = Graph::with_branch_tracking();
    let bound: Vec<BoundBlock> = blocks.iter().map(|b| bind(&mut g, b, true)).collect();
    let root = f(&mut g, &bound)?;
    let value = g.scalar(root);
    if !value.is_finite() {
        return Err(Error::NonFinite("gradcheck objective".into()));
    }
    let signature = g.branch_signature();
    if !with_grads {
        return Ok(Evaluation {
            value,
            signature,
            grads: None,
        });
    }
    let grads = g.backward(root);
    let out = blocks
        .iter()
        .zip(&bound)
        .map(|(block, bb)| {
            block
                .iter()
                .map(|(name, t)| {
                    let v = bb.get(name).expect("bound tensor");
                    let gv = grads
                        .get(v)
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; t.len()]);
                    (name.clone(), gv)
                })
                .collect()
        })
        .collect();
    Ok(Evaluation {
        value,
        signature,
        grads: Some(out),
    })
}

pub fn analytic_gradients<F>(f: &mut F, blocks: &[ParamBlock<f64>]) -> Result<AnalyticGrads>
where
    F: FnMut(&mut Graph<f64>, &[BoundBlock]) -> Result<Var>,
{
    Ok(evaluate(f, blocks, true)?
        .grads
        .expect("gradients requested"))
}

/// Compares supplied analytic gradients with central differences on a
/// seeded subset of coordinates of every tensor.
pub fn compare_with_central_differences<F>(
    f: &mut F,
    blocks: &[ParamBlock<f64>],
    analytic: &AnalyticGrads,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport>
where
    F: FnMut(&mut Graph<f64>, &[BoundBlock]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base = evaluate(f, blocks, false)?.signature;
    let mut work: Vec<ParamBlock<f64>> = blocks.to_vec();
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for bi in 0..blocks.len() {
        let names: Vec<String> = blocks[bi].iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            let len = blocks[bi].get(&name)?.len();
            let label = format!("{}.{}", blocks[bi].name, name);
            // random order over all coordinates; take the first `coords_per_tensor`
            // with a smooth stencil
            let order: Vec<usize> = sample(
                &mut rng,
                len,
                len.min(cfg.coords_per_tensor + cfg.max_resamples),
            )
            .into_vec();
            let mut checked = 0;
            for idx in order {
                if checked == cfg.coords_per_tensor {
                    break;
                }
                let orig = blocks[bi].get(&name)?.data()[idx];
                work[bi].get_mut(&name)?.data_mut()[idx] = orig + cfg.h;
                let plus = evaluate(f, &work, false)?;
                work[bi].get_mut(&name)?.data_mut()[idx] = orig - cfg.h;
                let minus = evaluate(f, &work, false)?;
                work[bi].get_mut(&name)?.data_mut()[idx] = orig;
                if plus.signature != base || minus.signature != base {
                    skipped.push((label.clone(), idx));
                    continue;
                }
                checked += 1;
                let numeric = (plus.value - minus.value) / (2.0 * cfg.h);
                let a = analytic[bi][&name][idx];
                entries.push(GradcheckEntry {
                    tensor: label.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                    error: (a - numeric).abs() / numeric.abs().max(1.0),
                });
            }
        }
    }
    Ok(GradcheckReport {
        tol: cfg.tol,
        entries,
        skipped,
    })
}

/// Tape gradients of `f` versus central differences.
pub fn gradcheck<F>(
    mut f: F,
    blocks: &[ParamBlock<f64>],
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport>
where
    F: FnMut(&mut Graph<f64>, &[BoundBlock]) -> Result<Var>,
{
    let analytic = analytic_gradients(&mut f, blocks)?;
    compare_with_central_differences(&mut f, blocks, &analytic, cfg)
}
