//! Network building blocks on top of the gradient tape.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;

use super::array::{NdArray, ParamBlock};
use super::graph::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Tape handles for every tensor of a [`ParamBlock`].
#[derive(Clone, Debug)]
pub struct BoundBlock {
    pub name: String,
    vars: BTreeMap<String, Var>,
}

impl BoundBlock {
    pub fn get(&self, tensor: &str) -> Result<Var> {
        self.vars
            .get(tensor)
            .copied()
            .ok_or_else(|| Error::UnknownTensor(format!("{}.{}", self.name, tensor)))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Copies a block onto the tape. Frozen blocks enter as constants.
pub fn bind<T: Scalar>(g: &mut Graph<T>, block: &ParamBlock<T>, trainable: bool) -> BoundBlock {
    let vars = block
        .iter()
        .map(|(name, t)| {
            let v = if trainable {
                g.input(t.shape(), t.data().to_vec())
            } else {
                g.constant(t.shape(), t.data().to_vec())
            };
            (name.clone(), v)
        })
        .collect();
    BoundBlock {
        name: block.name.clone(),
        vars,
    }
}

/// Stores the adjoint of every bound tensor into `block` (zeros when the
/// tensor did not influence the root).
pub fn collect_grads<T: Scalar>(
    grads: &Gradients<T>,
    bound: &BoundBlock,
    block: &mut ParamBlock<T>,
) {
    for (name, t) in block.iter_mut() {
        let g = bound
            .vars
            .get(name)
            .and_then(|&v| grads.get(v))
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); t.len()]);
        t.grad = Some(g);
    }
}

/// Adds `{prefix}.w` (`[fan_in, fan_out]`) and `{prefix}.b` drawn from
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_affine<T: Scalar>(
    block: &mut ParamBlock<T>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    block.insert(
        format!("{prefix}.w"),
        NdArray::uniform(&[fan_in, fan_out], bound, rng),
    )?;
    block.insert(
        format!("{prefix}.b"),
        NdArray::uniform(&[fan_out], bound, rng),
    )
}

pub fn affine<T: Scalar>(g: &mut Graph<T>, p: &BoundBlock, prefix: &str, x: Var) -> Result<Var> {
    affine_act(g, p, prefix, x, false)
}

/// `relu(affine(x))` as one tape node.
pub fn affine_relu<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundBlock,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    affine_act(g, p, prefix, x, true)
}

fn affine_act<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundBlock,
    prefix: &str,
    x: Var,
    relu: bool,
) -> Result<Var> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    let (_, cols) = g.dims(x);
    let (fan_in, fan_out) = g.dims(w);
    if cols != fan_in || g.value(b).len() != fan_out {
        return Err(Error::Shape(format!(
            "{}.{prefix}: input width {cols}, weight {fan_in}x{fan_out}",
            p.name
        )));
    }
    Ok(g.linear(x, w, b, relu))
}

/// Residual MLP layout: input projection (affine + ReLU), `blocks` residual
/// units `h + fc1(relu(fc0(h)))`, affine output projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResidualMlpShape {
    pub input: usize,
    pub width: usize,
    pub blocks: usize,
    pub output: usize,
}

impl ResidualMlpShape {
    pub fn init<T: Scalar>(&self, name: &str, rng: &mut impl Rng) -> Result<ParamBlock<T>> {
        let mut b = ParamBlock::new(name);
        init_affine(&mut b, "in", self.input, self.width, rng)?;
        for i in 0..self.blocks {
            init_affine(&mut b, &format!("blk{i}.fc0"), self.width, self.width, rng)?;
            init_affine(&mut b, &format!("blk{i}.fc1"), self.width, self.width, rng)?;
        }
        init_affine(&mut b, "out", self.width, self.output, rng)?;
        Ok(b)
    }
}

/// Forward pass of a residual MLP; checks the bound tensors against
/// `width`/`blocks` and the input width.
pub fn residual_mlp<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundBlock,
    x: Var,
    width: usize,
    blocks: usize,
) -> Result<Var> {
    let w_in = p.get("in.w")?;
    if g.dims(w_in).1 != width {
        return Err(Error::Shape(format!(
            "{}: input projection has width {}, expected {width}",
            p.name,
            g.dims(w_in).1
        )));
    }
    if p.get(&format!("blk{blocks}.fc0.w")).is_ok()
        || (blocks > 0 && p.get(&format!("blk{}.fc1.w", blocks - 1)).is_err())
    {
        return Err(Error::Shape(format!(
            "{}: parameters not sized for {blocks} blocks",
            p.name
        )));
    }
    let mut h = affine_relu(g, p, "in", x)?;
    for i in 0..blocks {
        let a = affine_relu(g, p, &format!("blk{i}.fc0"), h)?;
        let d = affine(g, p, &format!("blk{i}.fc1"), a)?;
        h = g.add(h, d);
    }
    affine(g, p, "out", h)
}

/// Plain MLP with ReLU between consecutive affine layers `l0, l1, ...`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpShape {
    pub dims: Vec<usize>,
}

impl MlpShape {
    pub fn new(dims: &[usize]) -> Self {
        Self {
            dims: dims.to_vec(),
        }
    }

    pub fn init<T: Scalar>(&self, name: &str, rng: &mut impl Rng) -> Result<ParamBlock<T>> {
        let mut b = ParamBlock::new(name);
        self.init_into(&mut b, "", rng)?;
        Ok(b)
    }

    /// Adds the layers to an existing block under `{prefix}l{i}`.
    pub fn init_into<T: Scalar>(
        &self,
        block: &mut ParamBlock<T>,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<()> {
        for (i, w) in self.dims.windows(2).enumerate() {
            init_affine(block, &format!("{prefix}l{i}"), w[0], w[1], rng)?;
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.dims.len().saturating_sub(1)
    }
}

pub fn mlp<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundBlock,
    prefix: &str,
    layers: usize,
    x: Var,
) -> Result<Var> {
    let mut h = x;
    for i in 0..layers {
        let name = format!("{prefix}l{i}");
        h = if i + 1 < layers {
            affine_relu(g, p, &name, h)?
        } else {
            affine(g, p, &name, h)?
        };
    }
    Ok(h)
}

/// Adds bias-free `{prefix}wq`, `{prefix}wk`, `{prefix}wv`, each `[channels, channels]`.
pub fn init_attention<T: Scalar>(
    block: &mut ParamBlock<T>,
    prefix: &str,
    channels: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let bound = 1.0 / (channels as f64).sqrt();
    for n in ["wq", "wk", "wv"] {
        block.insert(
            format!("{prefix}{n}"),
            NdArray::uniform(&[channels, channels], bound, rng),
        )?;
    }
    Ok(())
}

/// Multi-head self-attention over consecutive groups of `group` rows.
///
/// `Q = X W_q`, `K = X W_k`, `V = X W_v`; head `h` uses channel block
/// `h*C/H..(h+1)*C/H` and the per-head outputs are concatenated in head order.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundBlock,
    prefix: &str,
    x: Var,
    group: usize,
    heads: usize,
    mask: Option<Rc<[bool]>>,
) -> Result<Var> {
    let (rows, c) = g.dims(x);
    if heads == 0 || c % heads != 0 {
        return Err(Error::Shape(format!(
            "{c} channels not divisible by {heads} heads"
        )));
    }
    if group == 0 || rows % group != 0 {
        return Err(Error::Shape(format!(
            "{rows} rows not divisible into groups of {group}"
        )));
    }
    let wq = p.get(&format!("{prefix}wq"))?;
    if g.dims(wq) != (c, c) {
        return Err(Error::Shape(format!(
            "attention weights {:?} for {c} channels",
            g.shape(wq)
        )));
    }
    let q = g.matmul(x, wq);
    let wk = p.get(&format!("{prefix}wk"))?;
    let k = g.matmul(x, wk);
    let wv = p.get(&format!("{prefix}wv"))?;
    let v = g.matmul(x, wv);
    Ok(g.attention(q, k, v, group, heads, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_block<T: Scalar>(mut b: ParamBlock<T>) -> ParamBlock<T> {
        for (_, t) in b.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        b
    }

    /// Independent loop implementation of the residual MLP forward pass.
    fn residual_loop(p: &ParamBlock<f64>, x: &[f64], blocks: usize) -> Vec<f64> {
        fn lin(p: &ParamBlock<f64>, name: &str, x: &[f64]) -> Vec<f64> {
            let w = p.get(&format!("{name}.w")).unwrap();
            let b = p.get(&format!("{name}.b")).unwrap();
            let (fi, fo) = (w.shape()[0], w.shape()[1]);
            (0..fo)
                .map(|j| b.data()[j] + (0..fi).map(|i| x[i] * w.data()[i * fo + j]).sum::<f64>())
                .collect()
        }
        let mut h: Vec<f64> = lin(p, "in", x).into_iter().map(|v| v.max(0.0)).collect();
        for i in 0..blocks {
            let a: Vec<f64> = lin(p, &format!("blk{i}.fc0"), &h)
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
            let d = lin(p, &format!("blk{i}.fc1"), &a);
            h = h.iter().zip(d).map(|(a, b)| a + b).collect();
        }
        lin(p, "out", &h)
    }

    #[test]
    fn residual_mlp_zero_weights_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = ResidualMlpShape {
            input: 5,
            width: 8,
            blocks: 2,
            output: 3,
        };
        let p = zero_block(shape.init::<f64>("z", &mut rng).unwrap());
        let mut g = Graph::new();
        let bp = bind(&mut g, &p, true);
        let x = g.constant(
            &[2, 5],
            vec![0.3, -1.0, 2.0, 0.5, 1.5, 4.0, 0.1, 0.2, 0.3, 0.4],
        );
        let y = residual_mlp(&mut g, &bp, x, 8, 2).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.0));
        assert_eq!(g.shape(y), &[2, 3]);
    }

    #[test]
    fn residual_mlp_skip_path_passes_input_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = ResidualMlpShape {
            input: 4,
            width: 4,
            blocks: 1,
            output: 4,
        };
        let mut p = shape.init::<f64>("skip", &mut rng).unwrap();
        for name in [
            "blk0.fc0.w",
            "blk0.fc0.b",
            "blk0.fc1.w",
            "blk0.fc1.b",
            "out.b",
        ] {
            p.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let out_w = p.get_mut("out.w").unwrap().data_mut();
        out_w.fill(0.0);
        for i in 0..4 {
            out_w[i * 4 + i] = 1.0;
        }
        let x = [0.5, -0.2, 0.9, 0.1];
        let mut g = Graph::new();
        let bp = bind(&mut g, &p, true);
        let xv = g.constant(&[1, 4], x.to_vec());
        let y = residual_mlp(&mut g, &bp, xv, 4, 1).unwrap();
        let proj = affine(&mut g, &bp, "in", xv).unwrap();
        let proj = g.relu(proj);
        assert_eq!(g.value(y), g.value(proj));
    }

    #[test]
    fn residual_mlp_matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = ResidualMlpShape {
            input: 6,
            width: 10,
            blocks: 3,
            output: 4,
        };
        let p = shape.init::<f64>("r", &mut rng).unwrap();
        let xs: Vec<f64> = (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let bp = bind(&mut g, &p, true);
        let x = g.constant(&[3, 6], xs.clone());
        let y = residual_mlp(&mut g, &bp, x, 10, 3).unwrap();
        for r in 0..3 {
            let expect = residual_loop(&p, &xs[r * 6..(r + 1) * 6], 3);
            for (a, b) in g.value(y)[r * 4..(r + 1) * 4].iter().zip(&expect) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn residual_mlp_shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = ResidualMlpShape {
            input: 3,
            width: 8,
            blocks: 2,
            output: 2,
        };
        let p = shape.init::<f32>("e", &mut rng).unwrap();
        let mut g = Graph::new();
        let bp = bind(&mut g, &p, true);
        let bad_in = g.constant(&[1, 4], vec![0.0; 4]);
        assert!(matches!(
            residual_mlp(&mut g, &bp, bad_in, 8, 2),
            Err(Error::Shape(_))
        ));
        let x = g.constant(&[1, 3], vec![0.0; 3]);
        assert!(residual_mlp(&mut g, &bp, x, 16, 2).is_err());
        assert!(residual_mlp(&mut g, &bp, x, 8, 3).is_err());
        assert!(residual_mlp(&mut g, &bp, x, 8, 1).is_err());
    }

    fn attention_block(c: usize, rng: &mut ChaCha8Rng) -> ParamBlock<f64> {
        let mut b = ParamBlock::new("attn");
        init_attention(&mut b, "", c, rng).unwrap();
        b
    }

    #[test]
    fn zero_query_key_gives_column_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = attention_block(3, &mut rng);
        p.get_mut("wq").unwrap().data_mut().fill(0.0);
        p.get_mut("wk").unwrap().data_mut().fill(0.0);
        let wv = p.get_mut("wv").unwrap().data_mut();
        wv.fill(0.0);
        for i in 0..3 {
            wv[i * 3 + i] = 1.0;
        }
        let xs: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut g = Graph::new();
        let bp = bind(&mut g, &p, true);
        let x = g.constant(&[4, 3], xs.clone());
        let y = multi_head_attention(&mut g, &bp, "", x, 4, 1, None).unwrap();
        for c in 0..3 {
            let mean = (0..4).map(|r| xs[r * 3 + c]).sum::<f64>() / 4.0;
            for r in 0..4 {
                assert!((g.value(y)[r * 3 + c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_returns_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = attention_block(4, &mut rng);
        let xs: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let bp = bind(&mut g, &p, true);
        let x = g.constant(&[1, 4], xs);
        let y = multi_head_attention(&mut g, &bp, "", x, 1, 2, None).unwrap();
        let v = g.matmul(x, bp.get("wv").unwrap());
        for (a, b) in g.value(y).iter().zip(g.value(v)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Brute-force per-head loop oracle.
    fn attention_loop(
        p: &ParamBlock<f64>,
        x: &[f64],
        n: usize,
        c: usize,
        heads: usize,
    ) -> Vec<f64> {
        let proj = |name: &str| -> Vec<f64> {
            let w = p.get(name).unwrap().data();
            let mut out = vec![0.0; n * c];
            for r in 0..n {
                for j in 0..c {
                    for i in 0..c {
                        out[r * c + j] += x[r * c + i] * w[i * c + j];
                    }
                }
            }
            out
        };
        let (q, k, v) = (proj("wq"), proj("wk"), proj("wv"));
        let dk = c / heads;
        let mut out = vec![0.0; n * c];
        for h in 0..heads {
            for i in 0..n {
                let s: Vec<f64> = (0..n)
                    .map(|j| {
                        (0..dk)
                            .map(|d| q[i * c + h * dk + d] * k[j * c + h * dk + d])
                            .sum::<f64>()
                            / (dk as f64).sqrt()
                    })
                    .collect();
                let z: f64 = s.iter().map(|v| v.exp()).sum();
                for j in 0..n {
                    for d in 0..dk {
                        out[i * c + h * dk + d] += s[j].exp() / z * v[j * c + h * dk + d];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn attention_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = attention_block(4, &mut rng);
        let xs: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let bp = bind(&mut g, &p, true);
        let x = g.constant(&[3, 4], xs.clone());
        let y = multi_head_attention(&mut g, &bp, "", x, 3, 2, None).unwrap();
        for (a, b) in g.value(y).iter().zip(attention_loop(&p, &xs, 3, 4, 2)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn looped_heads_equal_single_head_per_block() {
        // With H heads, head h equals a one-head evaluation on its own d_k channels.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n, c, heads) = (3, 6, 3);
        let xs: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let qs: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ks: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let (q, k, v) = (
            g.constant(&[n, c], qs.clone()),
            g.constant(&[n, c], ks.clone()),
            g.constant(&[n, c], xs.clone()),
        );
        let multi = g.attention(q, k, v, n, heads, None);
        let dk = c / heads;
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dk, (h + 1) * dk);
            let kh = g.slice_cols(k, h * dk, (h + 1) * dk);
            let vh = g.slice_cols(v, h * dk, (h + 1) * dk);
            let single = g.attention(qh, kh, vh, n, 1, None);
            let mh = g.slice_cols(multi, h * dk, (h + 1) * dk);
            assert_eq!(g.value(single), g.value(mh));
        }
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = attention_block(4, &mut rng);
        let mut g = Graph::new();
        let bp = bind(&mut g, &p, true);
        let x = g.constant(&[2, 4], vec![0.0; 8]);
        assert!(matches!(
            multi_head_attention(&mut g, &bp, "", x, 2, 3, None),
            Err(Error::Shape(_))
        ));
    }
}
