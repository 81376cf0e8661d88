//! Reverse-mode gradient tape over dense arrays.
//!
//! A [`Graph`] is built fresh for every ray batch: each operation appends a
//! node holding its forward value, and [`Graph::backward`] walks the nodes in
//! reverse creation order accumulating adjoints. Operations work on row-major
//! matrices (`[rows, cols]`); a handful of fused operations (attention,
//! im2col, masked losses) exist because expressing them through elementwise
//! primitives would cost an order of magnitude more memory per batch.
//!
//! Shape mismatches inside the tape are programming errors and panic; the
//! public network builders validate shapes and return [`crate::Error`].

use std::rc::Rc;

use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Extension point for operations whose forward/backward live outside this
/// module (projection, bilinear sampling, quadrature).
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Accumulates input adjoints. `grads[i]` is `Some` only for inputs that
    /// require a gradient; buffers arrive zeroed and sized like the input.
    fn backward(&self, inputs: &[&[T]], output: &[T], grad_out: &[T], grads: &mut [Option<Vec<T>>]);
}

/// Geometry of a `k x k` convolution window unfolded by [`Graph::im2col`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
        relu: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    Reshape(Var),
    MulRows(Var, Var),
    GatherRows(Var, Rc<[usize]>),
    Interleave(Vec<Var>),
    Embed {
        x: Var,
        freqs: usize,
        include_input: bool,
    },
    Im2Col(Var, ConvGeometry),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        group: usize,
        heads: usize,
        mask: Option<Rc<[bool]>>,
        probs: Vec<T>,
    },
    GroupMean {
        x: Var,
        group: usize,
        mask: Option<Rc<[bool]>>,
    },
    RowNormalize(Var, T),
    CrossEntropy {
        logits: Var,
        targets: Rc<[usize]>,
        mask: Option<Rc<[bool]>>,
        probs: Vec<T>,
        count: usize,
    },
    Mse {
        pred: Var,
        target: Rc<[T]>,
        mask: Option<Rc<[bool]>>,
        count: usize,
    },
    L1 {
        pred: Var,
        target: Rc<[T]>,
        mask: Option<Rc<[bool]>>,
        count: usize,
    },
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradient tape.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    branches: Option<u64>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (shape[0], 1),
        2 => (shape[0], shape[1]),
        _ => {
            let cols = *shape.last().unwrap();
            (shape.iter().product::<usize>() / cols.max(1), cols)
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn is_valid(mask: &Option<Rc<[bool]>>, i: usize) -> bool {
    mask.as_ref().is_none_or(|m| m[i])
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            branches: None,
        }
    }

    /// Tape that fingerprints every piecewise branch taken in the forward
    /// pass (ReLU signs, L1 signs, sampling cells). Two evaluations with equal
    /// fingerprints lie on the same smooth piece of the function.
    pub fn with_branch_tracking() -> Self {
        Self {
            nodes: Vec::new(),
            branches: Some(0xcbf2_9ce4_8422_2325),
        }
    }

    pub fn branch_signature(&self) -> Option<u64> {
        self.branches
    }

    pub fn tracks_branches(&self) -> bool {
        self.branches.is_some()
    }

    /// Folds branch decisions into the fingerprint (no-op unless tracking).
    pub fn note_branches(&mut self, decisions: impl IntoIterator<Item = u64>) {
        if let Some(h) = self.branches.as_mut() {
            for d in decisions {
                *h = (*h ^ d).wrapping_mul(0x0100_0000_01b3);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        rows_cols(&self.nodes[v.0].shape)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on a node with {} values", val.len());
        val[0]
    }

    /// First variable (in creation order) holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<Var> {
        self.nodes
            .iter()
            .position(|n| n.value.iter().any(|v| !v.is_finite()))
            .map(Var)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that participates in differentiation.
    pub fn input(&mut self, shape: &[usize], value: Vec<T>) -> Var {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "leaf shape");
        self.push(shape.to_vec(), value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, shape: &[usize], value: Vec<T>) -> Var {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "leaf shape");
        self.push(shape.to_vec(), value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dimension {k} vs {k2}");
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a),
            (k as isize, 1),
            self.value(b),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![m, n], out, Op::MatMul(a, b), rg)
    }

    /// Fused `x w + b`, optionally followed by ReLU.
    pub fn linear(&mut self, x: Var, w: Var, b: Var, relu: bool) -> Var {
        let (m, k) = self.dims(x);
        let (k2, n) = self.dims(w);
        assert_eq!(k, k2, "linear inner dimension {k} vs {k2}");
        assert_eq!(self.value(b).len(), n, "bias width");
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(self.value(b));
        }
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(x),
            (k as isize, 1),
            self.value(w),
            (n as isize, 1),
            T::one(),
            &mut out,
            (n as isize, 1),
        );
        if relu {
            if self.tracks_branches() {
                let bits: Vec<u64> = out.iter().map(|&v| u64::from(v > T::zero())).collect();
                self.note_branches(bits);
            }
            for v in &mut out {
                *v = v.max(T::zero());
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(vec![m, n], out, Op::Linear { x, w, b, relu }, rg)
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (m, n) = self.dims(a);
        assert_eq!(self.value(bias).len(), n, "bias width");
        let b = self.value(bias);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, &bj) in row.iter_mut().zip(b) {
                *o += bj;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(vec![m, n], out, Op::AddBias(a, bias), rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        assert_eq!(
            self.value(a).len(),
            self.value(b).len(),
            "elementwise operands differ in length"
        );
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -T::one());
        self.add_scalar(neg, T::one())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        if self.tracks_branches() {
            let bits: Vec<u64> = self
                .value(a)
                .iter()
                .map(|&x| u64::from(x > T::zero()))
                .collect();
            self.note_branches(bits);
        }
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.dims(p);
                assert_eq!(r, rows, "concat row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(vec![rows, total], out, Op::Concat(parts.to_vec()), rg)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (m, n) = self.dims(a);
        assert!(start < end && end <= n, "slice {start}..{end} of width {n}");
        let w = end - start;
        let src = self.value(a);
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let rg = self.rg(a);
        self.push(vec![m, w], out, Op::Slice(a, start, end), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.value(a).len(),
            "reshape changes element count"
        );
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        self.push(shape.to_vec(), out, Op::Reshape(a), rg)
    }

    /// Scales row `i` of `a` by `s[i]`.
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Var {
        let (m, n) = self.dims(a);
        assert_eq!(self.value(s).len(), m, "mul_rows factor count");
        let sv = self.value(s);
        let mut out = self.value(a).to_vec();
        for (row, &f) in out.chunks_exact_mut(n).zip(sv) {
            for o in row {
                *o *= f;
            }
        }
        let rg = self.rg(a) || self.rg(s);
        self.push(vec![m, n], out, Op::MulRows(a, s), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Var {
        let (m, n) = self.dims(a);
        let src = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx.iter() {
            assert!(i < m, "gather row {i} of {m}");
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let rg = self.rg(a);
        self.push(vec![idx.len(), n], out, Op::GatherRows(a, idx), rg)
    }

    /// Row `g * parts.len() + p` of the result is row `g` of `parts[p]`.
    pub fn interleave_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (m, n) = self.dims(parts[0]);
        for &p in parts {
            assert_eq!(self.dims(p), (m, n), "interleave operands differ");
        }
        let mut out = Vec::with_capacity(m * n * parts.len());
        for g in 0..m {
            for &p in parts {
                out.extend_from_slice(&self.value(p)[g * n..(g + 1) * n]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            vec![m * parts.len(), n],
            out,
            Op::Interleave(parts.to_vec()),
            rg,
        )
    }

    /// Sinusoidal lifting of every column; see [`crate::diffcore::sinusoidal_embed`]
    /// for the output layout.
    pub fn embed(&mut self, x: Var, freqs: usize, include_input: bool) -> Var {
        let (m, d) = self.dims(x);
        let per = 2 * freqs + usize::from(include_input);
        let src = self.value(x);
        let mut out = Vec::with_capacity(m * d * per);
        for row in src.chunks_exact(d.max(1)).take(m) {
            crate::diffcore::func::embed_into(row, freqs, include_input, &mut out);
        }
        let rg = self.rg(x);
        self.push(
            vec![m, d * per],
            out,
            Op::Embed {
                x,
                freqs,
                include_input,
            },
            rg,
        )
    }

    /// Unfolds `[frames, height, width, channels]` into convolution patches of
    /// shape `[frames * out_h * out_w, kernel * kernel * channels]`, patch column
    /// order `(ky, kx, channel)`; zero padding outside the image.
    pub fn im2col(&mut self, x: Var, geo: ConvGeometry) -> Var {
        let ConvGeometry {
            frames,
            height,
            width,
            channels,
            kernel,
            stride,
            pad,
        } = geo;
        assert_eq!(
            self.value(x).len(),
            frames * height * width * channels,
            "im2col input size"
        );
        let (oh, ow) = (geo.out_height(), geo.out_width());
        let cols = kernel * kernel * channels;
        let mut out = vec![T::zero(); frames * oh * ow * cols];
        let src = self.value(x);
        for f in 0..frames {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((f * oh + oy) * ow + ox) * cols;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= height as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= width as isize {
                                continue;
                            }
                            let s = ((f * height + iy as usize) * width + ix as usize) * channels;
                            let d = row + (ky * kernel + kx) * channels;
                            out[d..d + channels].copy_from_slice(&src[s..s + channels]);
                        }
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(vec![frames * oh * ow, cols], out, Op::Im2Col(x, geo), rg)
    }

    /// Grouped scaled dot-product attention.
    ///
    /// Rows are split into consecutive groups of `group` tokens; within each
    /// group, head `h` attends using columns `h*dk..(h+1)*dk` of `q`, `k`, `v`.
    /// Masked-out rows neither attend nor are attended to and produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        group: usize,
        heads: usize,
        mask: Option<Rc<[bool]>>,
    ) -> Var {
        let (rows, c) = self.dims(q);
        assert_eq!(self.dims(k), (rows, c), "attention key shape");
        assert_eq!(self.dims(v), (rows, c), "attention value shape");
        assert!(
            group > 0 && rows % group == 0,
            "rows not divisible by group"
        );
        assert!(
            heads > 0 && c % heads == 0,
            "channels not divisible by heads"
        );
        if let Some(m) = &mask {
            assert_eq!(m.len(), rows);
        }
        let dk = c / heads;
        let scale = T::one() / T::from_usize_lossy(dk).sqrt();
        let groups = rows / group;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![T::zero(); rows * c];
        let mut probs = vec![T::zero(); groups * heads * group * group];
        let mut logits = vec![T::zero(); group];
        for g in 0..groups {
            let base = g * group;
            for h in 0..heads {
                let off = h * dk;
                for i in 0..group {
                    if !is_valid(&mask, base + i) {
                        continue;
                    }
                    let qi = &qv[(base + i) * c + off..(base + i) * c + off + dk];
                    let mut max = T::neg_infinity();
                    for j in 0..group {
                        if !is_valid(&mask, base + j) {
                            continue;
                        }
                        let kj = &kv[(base + j) * c + off..(base + j) * c + off + dk];
                        let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                        logits[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let prow = &mut probs[((g * heads + h) * group + i) * group..][..group];
                    let mut total = T::zero();
                    for j in 0..group {
                        if is_valid(&mask, base + j) {
                            let e = (logits[j] - max).exp();
                            prow[j] = e;
                            total += e;
                        }
                    }
                    let orow = &mut out[(base + i) * c + off..(base + i) * c + off + dk];
                    for j in 0..group {
                        if !is_valid(&mask, base + j) {
                            continue;
                        }
                        prow[j] /= total;
                        let p = prow[j];
                        let vj = &vv[(base + j) * c + off..(base + j) * c + off + dk];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            vec![rows, c],
            out,
            Op::Attention {
                q,
                k,
                v,
                group,
                heads,
                mask,
                probs,
            },
            rg,
        )
    }

    /// Attention probabilities of an [`Graph::attention`] node, laid out as
    /// `[groups, heads, group, group]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean over the valid rows of each consecutive group; empty groups give zeros.
    pub fn group_mean(&mut self, x: Var, group: usize, mask: Option<Rc<[bool]>>) -> Var {
        let (rows, c) = self.dims(x);
        assert!(group > 0 && rows % group == 0);
        let groups = rows / group;
        let src = self.value(x);
        let mut out = vec![T::zero(); groups * c];
        for g in 0..groups {
            let count = (0..group)
                .filter(|&i| is_valid(&mask, g * group + i))
                .count();
            if count == 0 {
                continue;
            }
            let inv = T::one() / T::from_usize_lossy(count);
            let orow = &mut out[g * c..(g + 1) * c];
            for i in 0..group {
                let r = g * group + i;
                if !is_valid(&mask, r) {
                    continue;
                }
                for (o, &s) in orow.iter_mut().zip(&src[r * c..(r + 1) * c]) {
                    *o += s * inv;
                }
            }
        }
        let rg = self.rg(x);
        self.push(vec![groups, c], out, Op::GroupMean { x, group, mask }, rg)
    }

    /// Each row divided by (row sum + eps).
    pub fn row_normalize(&mut self, x: Var, eps: T) -> Var {
        let (m, n) = self.dims(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(n) {
            let s = row.iter().copied().sum::<T>() + eps;
            for v in row {
                *v /= s;
            }
        }
        let rg = self.rg(x);
        self.push(vec![m, n], out, Op::RowNormalize(x, eps), rg)
    }

    /// Mean softmax cross-entropy over rows with `mask[i]` set (all rows when
    /// `mask` is `None`). Zero when no row is selected.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: Rc<[usize]>,
        mask: Option<Rc<[bool]>>,
    ) -> Var {
        let (m, l) = self.dims(logits);
        assert_eq!(targets.len(), m, "one target per row");
        let src = self.value(logits);
        let mut probs = vec![T::zero(); m * l];
        let mut total = T::zero();
        let mut count = 0usize;
        for i in 0..m {
            if !is_valid(&mask, i) {
                continue;
            }
            let t = targets[i];
            assert!(t < l, "target class {t} >= {l}");
            let row = &src[i * l..(i + 1) * l];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t];
            for (p, &x) in probs[i * l..(i + 1) * l].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
            count += 1;
        }
        let value = if count == 0 {
            T::zero()
        } else {
            total / T::from_usize_lossy(count)
        };
        let rg = self.rg(logits);
        self.push(
            vec![1],
            vec![value],
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            },
            rg,
        )
    }

    fn masked_elementwise_loss(
        &self,
        pred: Var,
        target: &[T],
        mask: &Option<Rc<[bool]>>,
        f: impl Fn(T) -> T,
    ) -> (T, usize) {
        let (m, n) = self.dims(pred);
        assert_eq!(target.len(), m * n, "loss target size");
        if let Some(mk) = mask {
            assert_eq!(mk.len(), m);
        }
        let p = self.value(pred);
        let mut total = T::zero();
        let mut count = 0;
        for i in 0..m {
            if !is_valid(mask, i) {
                continue;
            }
            for j in 0..n {
                total += f(p[i * n + j] - target[i * n + j]);
            }
            count += n;
        }
        let value = if count == 0 {
            T::zero()
        } else {
            total / T::from_usize_lossy(count)
        };
        (value, count)
    }

    /// Mean squared error over the components of the selected rows.
    pub fn mse(&mut self, pred: Var, target: Rc<[T]>, mask: Option<Rc<[bool]>>) -> Var {
        let (value, count) = self.masked_elementwise_loss(pred, &target, &mask, |d| d * d);
        let rg = self.rg(pred);
        self.push(
            vec![1],
            vec![value],
            Op::Mse {
                pred,
                target,
                mask,
                count,
            },
            rg,
        )
    }

    /// Mean absolute error over the components of the selected rows.
    pub fn l1(&mut self, pred: Var, target: Rc<[T]>, mask: Option<Rc<[bool]>>) -> Var {
        if self.tracks_branches() {
            let bits: Vec<u64> = self
                .value(pred)
                .iter()
                .zip(target.iter())
                .map(|(&p, &t)| u64::from(p > t))
                .collect();
            self.note_branches(bits);
        }
        let (value, count) = self.masked_elementwise_loss(pred, &target, &mask, |d| d.abs());
        let rg = self.rg(pred);
        self.push(
            vec![1],
            vec![value],
            Op::L1 {
                pred,
                target,
                mask,
                count,
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    /// Appends a node computed outside the tape; `op` supplies the backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: Vec<usize>,
        value: Vec<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            shape,
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Reverse sweep from a single-element node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(root) {
            grads[root.0] = Some(vec![T::one()]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            // interior adjoints are dead once propagated
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.rg(v) {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.dims(a);
                let n = self.dims(b).1;
                if let Some(ga) = self.acc(grads, a) {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        (n as isize, 1),
                        self.value(b),
                        (1, n as isize),
                        T::one(),
                        ga,
                        (k as isize, 1),
                    );
                }
                if let Some(gb) = self.acc(grads, b) {
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        self.value(a),
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        T::one(),
                        gb,
                        (n as isize, 1),
                    );
                }
            }
            &Op::Linear { x, w, b, relu } => {
                let (m, k) = self.dims(x);
                let n = self.dims(w).1;
                let masked: Vec<T>;
                let g = if relu {
                    masked = g
                        .iter()
                        .zip(y)
                        .map(|(&gi, &yi)| if yi > T::zero() { gi } else { T::zero() })
                        .collect();
                    &masked[..]
                } else {
                    g
                };
                if let Some(gx) = self.acc(grads, x) {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        (n as isize, 1),
                        self.value(w),
                        (1, n as isize),
                        T::one(),
                        gx,
                        (k as isize, 1),
                    );
                }
                if let Some(gw) = self.acc(grads, w) {
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        self.value(x),
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        T::one(),
                        gw,
                        (n as isize, 1),
                    );
                }
                if let Some(gb) = self.acc(grads, b) {
                    for row in g.chunks_exact(n) {
                        for (d, &s) in gb.iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                }
            }
            &Op::AddBias(a, bias) => {
                let n = self.dims(a).1;
                if let Some(ga) = self.acc(grads, a) {
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if let Some(gb) = self.acc(grads, bias) {
                    for row in g.chunks_exact(n) {
                        for (d, &s) in gb.iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, v) {
                        for (d, &s) in gv.iter_mut().zip(g) {
                            *d += s;
                        }
                    }
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, a) {
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for (d, &s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    let bv = self.value(b).to_vec();
                    let ga = self.acc(grads, a).unwrap();
                    for ((d, &s), &o) in ga.iter_mut().zip(g).zip(&bv) {
                        *d += s * o;
                    }
                }
                if self.rg(b) {
                    let av = self.value(a).to_vec();
                    let gb = self.acc(grads, b).unwrap();
                    for ((d, &s), &o) in gb.iter_mut().zip(g).zip(&av) {
                        *d += s * o;
                    }
                }
            }
            &Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, a) {
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d += s * c;
                    }
                }
            }
            &Op::AddScalar(a) | &Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            &Op::Relu(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    for ((d, &s), &o) in ga.iter_mut().zip(g).zip(y) {
                        if o > T::zero() {
                            *d += s;
                        }
                    }
                }
            }
            &Op::Tanh(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    for ((d, &s), &o) in ga.iter_mut().zip(g).zip(y) {
                        *d += s * (T::one() - o * o);
                    }
                }
            }
            &Op::Sigmoid(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    for ((d, &s), &o) in ga.iter_mut().zip(g).zip(y) {
                        *d += s * o * (T::one() - o);
                    }
                }
            }
            &Op::Softplus(a) => {
                if self.rg(a) {
                    let x = self.value(a).to_vec();
                    let ga = self.acc(grads, a).unwrap();
                    for ((d, &s), &xi) in ga.iter_mut().zip(g).zip(&x) {
                        *d += s * sigmoid(xi);
                    }
                }
            }
            &Op::Exp(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    for ((d, &s), &o) in ga.iter_mut().zip(g).zip(y) {
                        *d += s * o;
                    }
                }
            }
            Op::Concat(parts) => {
                let rows = self.dims(parts[0]).0;
                let total = node.shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    if let Some(gp) = self.acc(grads, p) {
                        for r in 0..rows {
                            for (d, &s) in gp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(&g[r * total + off..r * total + off + w])
                            {
                                *d += s;
                            }
                        }
                    }
                    off += w;
                }
            }
            &Op::Slice(a, start, end) => {
                let (m, n) = self.dims(a);
                let w = end - start;
                if let Some(ga) = self.acc(grads, a) {
                    for r in 0..m {
                        for (d, &s) in ga[r * n + start..r * n + end]
                            .iter_mut()
                            .zip(&g[r * w..(r + 1) * w])
                        {
                            *d += s;
                        }
                    }
                }
            }
            &Op::MulRows(a, s) => {
                let (_, n) = self.dims(a);
                if self.rg(a) {
                    let sv = self.value(s).to_vec();
                    let ga = self.acc(grads, a).unwrap();
                    for ((drow, grow), &f) in ga.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(&sv)
                    {
                        for (d, &x) in drow.iter_mut().zip(grow) {
                            *d += x * f;
                        }
                    }
                }
                if self.rg(s) {
                    let av = self.value(a).to_vec();
                    let gs = self.acc(grads, s).unwrap();
                    for ((d, grow), arow) in
                        gs.iter_mut().zip(g.chunks_exact(n)).zip(av.chunks_exact(n))
                    {
                        *d += grow.iter().zip(arow).map(|(&x, &y)| x * y).sum::<T>();
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let n = self.dims(*a).1;
                if let Some(ga) = self.acc(grads, *a) {
                    for (k, &r) in idx.iter().enumerate() {
                        for (d, &s) in ga[r * n..(r + 1) * n]
                            .iter_mut()
                            .zip(&g[k * n..(k + 1) * n])
                        {
                            *d += s;
                        }
                    }
                }
            }
            Op::Interleave(parts) => {
                let (m, n) = self.dims(parts[0]);
                let p_count = parts.len();
                for (pi, &p) in parts.iter().enumerate() {
                    if let Some(gp) = self.acc(grads, p) {
                        for r in 0..m {
                            let src = (r * p_count + pi) * n;
                            for (d, &s) in gp[r * n..(r + 1) * n].iter_mut().zip(&g[src..src + n]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            &Op::Embed {
                x,
                freqs,
                include_input,
            } => {
                if self.rg(x) {
                    let xv = self.value(x).to_vec();
                    let per = 2 * freqs + usize::from(include_input);
                    let gx = self.acc(grads, x).unwrap();
                    for (j, (d, &xi)) in gx.iter_mut().zip(&xv).enumerate() {
                        let base = j * per;
                        let mut acc = T::zero();
                        let mut o = base;
                        if include_input {
                            acc += g[o];
                            o += 1;
                        }
                        let mut f = T::one();
                        for _ in 0..freqs {
                            let (s, c) = (f * xi).sin_cos();
                            acc += g[o] * f * c - g[o + 1] * f * s;
                            o += 2;
                            f = f + f;
                        }
                        *d += acc;
                    }
                }
            }
            &Op::Im2Col(x, geo) => {
                if let Some(gx) = self.acc(grads, x) {
                    let (oh, ow) = (geo.out_height(), geo.out_width());
                    let ch = geo.channels;
                    let cols = geo.kernel * geo.kernel * ch;
                    for f in 0..geo.frames {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let row = ((f * oh + oy) * ow + ox) * cols;
                                for ky in 0..geo.kernel {
                                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                                    if iy < 0 || iy >= geo.height as isize {
                                        continue;
                                    }
                                    for kx in 0..geo.kernel {
                                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                                        if ix < 0 || ix >= geo.width as isize {
                                            continue;
                                        }
                                        let s = ((f * geo.height + iy as usize) * geo.width
                                            + ix as usize)
                                            * ch;
                                        let d = row + (ky * geo.kernel + kx) * ch;
                                        for (a, &b) in gx[s..s + ch].iter_mut().zip(&g[d..d + ch]) {
                                            *a += b;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                group,
                heads,
                mask,
                probs,
            } => self.attention_backward(*q, *k, *v, *group, *heads, mask, probs, g, grads),
            Op::GroupMean { x, group, mask } => {
                let (rows, c) = self.dims(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for gi in 0..rows / group {
                        let count = (0..*group)
                            .filter(|&r| is_valid(mask, gi * group + r))
                            .count();
                        if count == 0 {
                            continue;
                        }
                        let inv = T::one() / T::from_usize_lossy(count);
                        for r in 0..*group {
                            let row = gi * group + r;
                            if !is_valid(mask, row) {
                                continue;
                            }
                            for (d, &s) in gx[row * c..(row + 1) * c]
                                .iter_mut()
                                .zip(&g[gi * c..(gi + 1) * c])
                            {
                                *d += s * inv;
                            }
                        }
                    }
                }
            }
            &Op::RowNormalize(x, eps) => {
                let n = self.dims(x).1;
                if self.rg(x) {
                    let xv = self.value(x).to_vec();
                    let gx = self.acc(grads, x).unwrap();
                    for ((drow, grow), (xrow, yrow)) in gx
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(xv.chunks_exact(n).zip(y.chunks_exact(n)))
                    {
                        let s = xrow.iter().copied().sum::<T>() + eps;
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for (d, &gj) in drow.iter_mut().zip(grow) {
                            *d += (gj - dot) / s;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let (m, l) = self.dims(*logits);
                if let Some(gl) = self.acc(grads, *logits) {
                    let scale = g[0] / T::from_usize_lossy(*count);
                    for i in 0..m {
                        if !is_valid(mask, i) {
                            continue;
                        }
                        for j in 0..l {
                            let onehot = if j == targets[i] { T::one() } else { T::zero() };
                            gl[i * l + j] += scale * (probs[i * l + j] - onehot);
                        }
                    }
                }
            }
            Op::Mse {
                pred,
                target,
                mask,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let n = self.dims(*pred).1;
                if self.rg(*pred) {
                    let pv = self.value(*pred).to_vec();
                    let gp = self.acc(grads, *pred).unwrap();
                    let scale = g[0] * T::lit(2.0) / T::from_usize_lossy(*count);
                    for (i, (d, (&p, &t))) in
                        gp.iter_mut().zip(pv.iter().zip(target.iter())).enumerate()
                    {
                        if is_valid(mask, i / n) {
                            *d += scale * (p - t);
                        }
                    }
                }
            }
            Op::L1 {
                pred,
                target,
                mask,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let n = self.dims(*pred).1;
                if self.rg(*pred) {
                    let pv = self.value(*pred).to_vec();
                    let gp = self.acc(grads, *pred).unwrap();
                    let scale = g[0] / T::from_usize_lossy(*count);
                    for (i, (d, (&p, &t))) in
                        gp.iter_mut().zip(pv.iter().zip(target.iter())).enumerate()
                    {
                        if is_valid(mask, i / n) {
                            let diff = p - t;
                            if diff > T::zero() {
                                *d += scale;
                            } else if diff < T::zero() {
                                *d -= scale;
                            }
                        }
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    for d in ga.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&[T]> = inputs.iter().map(|&v| self.value(v)).collect();
                let mut local: Vec<Option<Vec<T>>> = inputs
                    .iter()
                    .map(|&v| self.rg(v).then(|| vec![T::zero(); self.value(v).len()]))
                    .collect();
                op.backward(&vals, y, g, &mut local);
                for (&v, lg) in inputs.iter().zip(local) {
                    if let (Some(lg), Some(acc)) = (lg, self.acc(grads, v)) {
                        for (d, s) in acc.iter_mut().zip(lg) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        group: usize,
        heads: usize,
        mask: &Option<Rc<[bool]>>,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (rows, c) = self.dims(q);
        let dk = c / heads;
        let scale = T::one() / T::from_usize_lossy(dk).sqrt();
        let groups = rows / group;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut gq = vec![T::zero(); rows * c];
        let mut gk = vec![T::zero(); rows * c];
        let mut gv = vec![T::zero(); rows * c];
        let mut dp = vec![T::zero(); group];
        for gi in 0..groups {
            let base = gi * group;
            for h in 0..heads {
                let off = h * dk;
                for i in 0..group {
                    if !is_valid(mask, base + i) {
                        continue;
                    }
                    let prow = &probs[((gi * heads + h) * group + i) * group..][..group];
                    let go = &g[(base + i) * c + off..(base + i) * c + off + dk];
                    let mut dot = T::zero();
                    for j in 0..group {
                        if !is_valid(mask, base + j) {
                            continue;
                        }
                        let vj = &vv[(base + j) * c + off..(base + j) * c + off + dk];
                        dp[j] = go.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                        dot += prow[j] * dp[j];
                        let gvj = &mut gv[(base + j) * c + off..(base + j) * c + off + dk];
                        for (d, &o) in gvj.iter_mut().zip(go) {
                            *d += prow[j] * o;
                        }
                    }
                    for j in 0..group {
                        if !is_valid(mask, base + j) {
                            continue;
                        }
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        for cc in 0..dk {
                            let qi = (base + i) * c + off + cc;
                            let kj = (base + j) * c + off + cc;
                            gq[qi] += ds * kv[kj];
                            gk[kj] += ds * qv[qi];
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(acc) = self.acc(grads, var) {
                for (d, s) in acc.iter_mut().zip(local) {
                    *d += s;
                }
            }
        }
    }
}
