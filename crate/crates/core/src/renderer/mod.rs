//! Discretised volume rendering.
//!
//! Samples sit at stratified depths `u_1 < ... < u_M` with intervals
//! `delta_i = u_{i+1} - u_i` and a final interval of `(u_f - u_n) / M`.
//! For densities `sigma_i`, `alpha_i = 1 - exp(-sigma_i delta_i)`,
//! `T_i = prod_{j<i} (1 - alpha_j)` and `w_i = T_i alpha_i`.
//!
//! Blended rendering of a static and a dynamic field uses the blended
//! density `sigma = (1-b) sigma_st + b sigma_dy` for transmittance and the
//! blended integrand `(1-b) sigma_st V_st + b sigma_dy V_dy`, with
//! `coef_i = T_i (1 - exp(-sigma_i delta_i)) / sigma_i` as the per-sample
//! factor. With `b = 0` this is exactly `w_i^st V_st`.

mod ops;

use rand::Rng;

pub use ops::{ray_integrate, render_coefficients, RayIntegrateOp, RenderCoefOp};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray<T> {
    pub origin: [T; 3],
    pub direction: [T; 3],
    pub near: T,
    pub far: T,
    /// `(row, col)` of the source pixel.
    pub pixel: (usize, usize),
    /// 0-based frame index.
    pub frame: usize,
}

impl<T: Scalar> Ray<T> {
    pub fn new(
        origin: [T; 3],
        direction: [T; 3],
        near: T,
        far: T,
        pixel: (usize, usize),
        frame: usize,
    ) -> Result<Self> {
        let n = direction.iter().map(|&d| d * d).sum::<T>().sqrt();
        if (n - T::one()).abs() > T::lit(1e-6) {
            return Err(Error::InvalidArgument(format!(
                "ray direction has norm {n}"
            )));
        }
        if !(near > T::zero() && far > near) {
            return Err(Error::InvalidArgument(format!("ray bounds {near}..{far}")));
        }
        Ok(Self {
            origin,
            direction,
            near,
            far,
            pixel,
            frame,
        })
    }

    pub fn at(&self, u: T) -> [T; 3] {
        [0, 1, 2].map(|k| self.origin[k] + u * self.direction[k])
    }

    /// Final-interval cap `(far - near) / M`.
    pub fn last_delta(&self, m: usize) -> T {
        (self.far - self.near) / T::from_usize_lossy(m)
    }
}

/// Stratified depths `u_n + (i - 1 + xi_i) / M (u_f - u_n)` with `xi_i ~ U[0,1)`
/// when jittered, `0.5` otherwise.
pub fn sample_ray<T: Scalar>(ray: &Ray<T>, m: usize, jitter: bool, rng: &mut impl Rng) -> Vec<T> {
    sample_depths(ray.near, ray.far, m, jitter, rng)
}

pub fn sample_depths<T: Scalar>(
    near: T,
    far: T,
    m: usize,
    jitter: bool,
    rng: &mut impl Rng,
) -> Vec<T> {
    let span = far - near;
    let mf = T::from_usize_lossy(m);
    (0..m)
        .map(|i| {
            let xi = if jitter {
                T::lit(rng.gen::<f64>())
            } else {
                T::lit(0.5)
            };
            near + (T::from_usize_lossy(i) + xi) / mf * span
        })
        .collect()
}

/// `delta_i = u_{i+1} - u_i`, last one `last`.
pub fn deltas<T: Scalar>(depths: &[T], last: T) -> Vec<T> {
    let mut out: Vec<T> = depths.windows(2).map(|w| w[1] - w[0]).collect();
    if !depths.is_empty() {
        out.push(last);
    }
    out
}

/// `(1 - exp(-s d)) / s` and its derivative in `s`, accurate near `s = 0`.
pub(crate) fn coef_factor(s: f64, d: f64) -> (f64, f64) {
    let x = s * d;
    if x.abs() < 1e-4 {
        let g = d * (1.0 - x / 2.0 + x * x / 6.0 - x * x * x / 24.0);
        let dg = d * d * (-0.5 + x / 3.0 - x * x / 8.0 + x * x * x / 30.0);
        (g, dg)
    } else {
        let e = (-x).exp();
        let a = -(-x).exp_m1();
        (a / s, (d * s * e - a) / (s * s))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RayQuadrature<T> {
    pub depths: Vec<T>,
    pub deltas: Vec<T>,
    pub alphas: Vec<T>,
    pub transmittance: Vec<T>,
    pub weights: Vec<T>,
}

impl<T: Scalar> RayQuadrature<T> {
    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    /// Weights divided by their sum (plus `1e-8`).
    pub fn normalized_weights(&self) -> Vec<T> {
        let total = self.weights.iter().copied().sum::<T>() + T::lit(1e-8);
        self.weights.iter().map(|&w| w / total).collect()
    }
}

pub fn quadrature<T: Scalar>(
    depths: &[T],
    sigmas: &[T],
    last_delta: T,
) -> Result<RayQuadrature<T>> {
    if depths.len() != sigmas.len() {
        return Err(Error::Shape(format!(
            "{} depths, {} densities",
            depths.len(),
            sigmas.len()
        )));
    }
    if let Some(s) = sigmas.iter().find(|&&s| !(s >= T::zero())) {
        return Err(Error::InvalidArgument(format!(
            "negative or NaN density {s}"
        )));
    }
    let deltas = deltas(depths, last_delta);
    let mut alphas = Vec::with_capacity(depths.len());
    let mut transmittance = Vec::with_capacity(depths.len());
    let mut weights = Vec::with_capacity(depths.len());
    let mut optical = 0.0f64;
    for (&s, &d) in sigmas.iter().zip(&deltas) {
        let x = s.as_f64() * d.as_f64();
        let t = (-optical).exp();
        let a = -(-x).exp_m1();
        alphas.push(T::lit(a));
        transmittance.push(T::lit(t));
        weights.push(T::lit(t * a));
        optical += x;
    }
    Ok(RayQuadrature {
        depths: depths.to_vec(),
        deltas,
        alphas,
        transmittance,
        weights,
    })
}

/// `sum_i w_i V_i` for row-major `values` (`M x channels`).
pub fn integrate<T: Scalar>(q: &RayQuadrature<T>, values: &[T], channels: usize) -> Result<Vec<T>> {
    weighted_sum(&q.weights, values, channels)
}

fn weighted_sum<T: Scalar>(weights: &[T], values: &[T], channels: usize) -> Result<Vec<T>> {
    if values.len() != weights.len() * channels {
        return Err(Error::Shape(format!(
            "{} values for {} samples x {channels} channels",
            values.len(),
            weights.len()
        )));
    }
    let mut out = vec![T::zero(); channels];
    for (&w, row) in weights.iter().zip(values.chunks_exact(channels.max(1))) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Per-sample blended contributions: returns the weights applied to
/// `V_st` and `V_dy` respectively.
pub fn blend_weights<T: Scalar>(
    deltas: &[T],
    sigma_st: &[T],
    sigma_dy: &[T],
    b: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    let m = deltas.len();
    if sigma_st.len() != m || sigma_dy.len() != m || b.len() != m {
        return Err(Error::Shape(format!(
            "blend inputs of length {}/{}/{} for {m} depths",
            sigma_st.len(),
            sigma_dy.len(),
            b.len()
        )));
    }
    let mut w_st = Vec::with_capacity(m);
    let mut w_dy = Vec::with_capacity(m);
    let mut optical = 0.0f64;
    for i in 0..m {
        let (bs, bd) = (b[i].as_f64(), 1.0 - b[i].as_f64());
        let a_st = bd * sigma_st[i].as_f64();
        let a_dy = bs * sigma_dy[i].as_f64();
        let s = a_st + a_dy;
        let d = deltas[i].as_f64();
        let c = (-optical).exp() * coef_factor(s, d).0;
        w_st.push(T::lit(c * a_st));
        w_dy.push(T::lit(c * a_dy));
        optical += s * d;
    }
    Ok((w_st, w_dy))
}

/// Blended render of a static and a dynamic field sampled at shared depths.
#[allow(clippy::too_many_arguments)]
pub fn blend<T: Scalar>(
    depths: &[T],
    last_delta: T,
    sigma_st: &[T],
    v_st: &[T],
    sigma_dy: &[T],
    v_dy: &[T],
    b: &[T],
    channels: usize,
) -> Result<Vec<T>> {
    let d = deltas(depths, last_delta);
    let (w_st, w_dy) = blend_weights(&d, sigma_st, sigma_dy, b)?;
    let a = weighted_sum(&w_st, v_st, channels)?;
    let c = weighted_sum(&w_dy, v_dy, channels)?;
    Ok(a.iter().zip(&c).map(|(&x, &y)| x + y).collect())
}
