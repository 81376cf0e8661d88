//! Tape operations for batched rendering. Rays are stored back to back:
//! sample `i` of ray `r` is row `r * m + i`.

use std::rc::Rc;

use super::coef_factor;
use crate::diffcore::{CustomOp, Graph, Var};
use crate::scalar::Scalar;

/// `coef_i = T_i (1 - exp(-sigma_i delta_i)) / sigma_i`, so `coef_i sigma_i`
/// is the quadrature weight and `coef_i` multiplies blended integrands.
pub struct RenderCoefOp {
    pub deltas: Rc<[f64]>,
    pub m: usize,
}

fn coefficients(sigma: &[f64], deltas: &[f64], m: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(sigma.len());
    for (s, d) in sigma.chunks_exact(m).zip(deltas.chunks_exact(m)) {
        let mut optical = 0.0f64;
        for i in 0..m {
            out.push((-optical).exp() * coef_factor(s[i], d[i]).0);
            optical += s[i] * d[i];
        }
    }
    out
}

impl<T: Scalar> CustomOp<T> for RenderCoefOp {
    fn name(&self) -> &'static str {
        "render_coef"
    }

    fn backward(
        &self,
        inputs: &[&[T]],
        output: &[T],
        grad_out: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let Some(gs) = grads[0].as_mut() else { return };
        let m = self.m;
        for r in 0..inputs[0].len() / m {
            let base = r * m;
            let mut optical = 0.0f64;
            // suffix sum of go_i coef_i over i > k
            let mut tail = 0.0;
            let mut trans = vec![0.0; m];
            for i in 0..m {
                trans[i] = (-optical).exp();
                optical += inputs[0][base + i].as_f64() * self.deltas[base + i];
            }
            for k in (0..m).rev() {
                let s = inputs[0][base + k].as_f64();
                let d = self.deltas[base + k];
                let go = grad_out[base + k].as_f64();
                let dg = coef_factor(s, d).1;
                gs[base + k] += T::lit(go * trans[k] * dg - d * tail);
                tail += go * output[base + k].as_f64();
            }
        }
    }
}

/// Per-ray `sum_i w_i V_i`: `w` has `R*m` entries, `V` is `[R*m, C]`, output `[R, C]`.
pub struct RayIntegrateOp {
    pub m: usize,
    pub channels: usize,
}

impl<T: Scalar> CustomOp<T> for RayIntegrateOp {
    fn name(&self) -> &'static str {
        "ray_integrate"
    }

    fn backward(
        &self,
        inputs: &[&[T]],
        _output: &[T],
        grad_out: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (w, v) = (inputs[0], inputs[1]);
        let c = self.channels;
        if let Some(gw) = grads[0].as_mut() {
            for (i, gwi) in gw.iter_mut().enumerate() {
                let go = &grad_out[(i / self.m) * c..][..c];
                *gwi += v[i * c..][..c]
                    .iter()
                    .zip(go)
                    .map(|(&a, &b)| a * b)
                    .sum::<T>();
            }
        }
        if let Some(gv) = grads[1].as_mut() {
            for (i, &wi) in w.iter().enumerate() {
                let go = &grad_out[(i / self.m) * c..][..c];
                for (d, &gi) in gv[i * c..][..c].iter_mut().zip(go) {
                    *d += wi * gi;
                }
            }
        }
    }
}

pub fn render_coefficients<T: Scalar>(
    g: &mut Graph<T>,
    sigma: Var,
    deltas: Rc<[f64]>,
    m: usize,
) -> Var {
    let s: Vec<f64> = g.value(sigma).iter().map(|v| v.as_f64()).collect();
    assert!(
        m > 0 && s.len().is_multiple_of(m) && deltas.len() == s.len(),
        "render coefficient layout"
    );
    let value = coefficients(&s, &deltas, m)
        .into_iter()
        .map(T::lit)
        .collect();
    let shape = g.shape(sigma).to_vec();
    g.custom(&[sigma], shape, value, Box::new(RenderCoefOp { deltas, m }))
}

pub fn ray_integrate<T: Scalar>(g: &mut Graph<T>, w: Var, v: Var, m: usize) -> Var {
    let n = g.value(w).len();
    let (rows, c) = g.dims(v);
    assert!(
        m > 0 && n.is_multiple_of(m) && rows == n,
        "ray integrate layout: {n} weights, {rows} rows"
    );
    let mut out = vec![T::zero(); n / m * c];
    {
        let (wv, vv) = (g.value(w), g.value(v));
        for i in 0..n {
            let o = &mut out[(i / m) * c..][..c];
            for (d, &x) in o.iter_mut().zip(&vv[i * c..][..c]) {
                *d += wv[i] * x;
            }
        }
    }
    g.custom(
        &[w, v],
        vec![n / m, c],
        out,
        Box::new(RayIntegrateOp { m, channels: c }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{gradcheck, BoundBlock, GradcheckConfig, NdArray, ParamBlock};
    use crate::error::Result;
    use crate::renderer::{blend, deltas, integrate, quadrature, sample_depths};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weights_match_plain_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (r, m) = (3, 10);
        let mut ds = Vec::new();
        let mut dep = Vec::new();
        for _ in 0..r {
            let d = sample_depths(2.0, 5.0, m, true, &mut rng);
            ds.extend(deltas(&d, 0.3));
            dep.push(d);
        }
        let sig: Vec<f64> = (0..r * m)
            .map(|i| {
                if i % 4 == 0 {
                    0.0
                } else {
                    rng.gen_range(0.0..5.0)
                }
            })
            .collect();
        let mut g = Graph::<f64>::new();
        let s = g.constant(&[r * m], sig.clone());
        let c = render_coefficients(&mut g, s, Rc::from(ds), m);
        let w = g.mul(c, s);
        for k in 0..r {
            let q = quadrature(&dep[k], &sig[k * m..(k + 1) * m], 0.3).unwrap();
            for i in 0..m {
                assert!((g.value(w)[k * m + i] - q.weights[i]).abs() < 1e-12);
            }
        }
    }

    fn graph_blend(
        g: &mut Graph<f64>,
        p: &[BoundBlock],
        deltas: Rc<[f64]>,
        m: usize,
    ) -> Result<Var> {
        let (st, dy, b) = (p[0].get("st")?, p[0].get("dy")?, p[0].get("b")?);
        let one_minus = g.one_minus(b);
        let a_st = g.mul(one_minus, st);
        let a_dy = g.mul(b, dy);
        let s = g.add(a_st, a_dy);
        let coef = render_coefficients(g, s, deltas, m);
        let w_st = g.mul(coef, a_st);
        let w_dy = g.mul(coef, a_dy);
        let x = ray_integrate(g, w_st, p[0].get("vs")?, m);
        let y = ray_integrate(g, w_dy, p[0].get("vd")?, m);
        Ok(g.add(x, y))
    }

    fn blend_block(r: usize, m: usize, rng: &mut impl Rng) -> ParamBlock<f64> {
        let mut p = ParamBlock::new("ray");
        let n = r * m;
        let pos = |rng: &mut dyn rand::RngCore, scale: f64| {
            (0..n)
                .map(|_| rng.gen_range(0.05..scale))
                .collect::<Vec<_>>()
        };
        p.insert("st", NdArray::new(vec![n], pos(rng, 3.0)).unwrap())
            .unwrap();
        p.insert("dy", NdArray::new(vec![n], pos(rng, 3.0)).unwrap())
            .unwrap();
        p.insert("b", NdArray::new(vec![n], pos(rng, 0.95)).unwrap())
            .unwrap();
        p.insert("vs", NdArray::uniform(&[n, 3], 1.0, rng)).unwrap();
        p.insert("vd", NdArray::uniform(&[n, 3], 1.0, rng)).unwrap();
        p
    }

    #[test]
    fn graph_blend_matches_plain_blend() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (r, m) = (4, 12);
        let p = blend_block(r, m, &mut rng);
        let mut depths = Vec::new();
        let mut ds = Vec::new();
        for _ in 0..r {
            let d = sample_depths(2.0, 5.0, m, true, &mut rng);
            ds.extend(deltas(&d, 0.25));
            depths.push(d);
        }
        let mut g = Graph::new();
        let bound = [crate::diffcore::bind(&mut g, &p, false)];
        let out = graph_blend(&mut g, &bound, Rc::from(ds), m).unwrap();
        let v = |name: &str| p.get(name).unwrap().data().to_vec();
        for k in 0..r {
            let sl = |x: &[f64], c: usize| x[k * m * c..(k + 1) * m * c].to_vec();
            let plain = blend(
                &depths[k],
                0.25,
                &sl(&v("st"), 1),
                &sl(&v("vs"), 3),
                &sl(&v("dy"), 1),
                &sl(&v("vd"), 3),
                &sl(&v("b"), 1),
                3,
            )
            .unwrap();
            for c in 0..3 {
                assert!((g.value(out)[3 * k + c] - plain[c]).abs() < 1e-12);
            }
        }
        // b = 0 gives exactly the static weights through the tape as well
        let mut g = Graph::new();
        let mut p0 = p.clone();
        p0.get_mut("b").unwrap().data_mut().fill(0.0);
        let bound = [crate::diffcore::bind(&mut g, &p0, false)];
        let ds: Vec<f64> = depths.iter().flat_map(|d| deltas(d, 0.25)).collect();
        let out = graph_blend(&mut g, &bound, Rc::from(ds), m).unwrap();
        let q = quadrature(&depths[0], &v("st")[..m], 0.25).unwrap();
        let plain = integrate(&q, &v("vs")[..3 * m], 3).unwrap();
        for c in 0..3 {
            assert!((g.value(out)[c] - plain[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_of_blended_render() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (r, m) = (2, 6);
        let mut p = blend_block(r, m, &mut rng);
        // include a vacuum sample to exercise the small-density series
        p.get_mut("st").unwrap().data_mut()[2] = 1e-7;
        p.get_mut("dy").unwrap().data_mut()[2] = 2e-7;
        let ds: Rc<[f64]> = (0..r)
            .flat_map(|_| deltas(&sample_depths(2.0, 5.0, m, true, &mut rng), 0.5))
            .collect::<Vec<_>>()
            .into();
        let cfg = GradcheckConfig {
            coords_per_tensor: 12,
            ..Default::default()
        };
        let report = gradcheck(
            |g, b| {
                let out = graph_blend(g, b, ds.clone(), m)?;
                let w = g.constant(&[r, 3], vec![0.3, -1.1, 0.8, 0.5, 0.9, -0.4]);
                let o = g.mul(out, w);
                Ok(g.sum(o))
            },
            &[p],
            &cfg,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst(3));
    }
}
