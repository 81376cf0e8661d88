//! Semantic and geometric heads.
//!
//! The flow head projects each flow-feature row to `C` channels, runs
//! multi-head self-attention over the rows of every point, concatenates the
//! heads per row, mean-pools the valid rows, and applies `Psi_o` and the
//! dynamic semantic MLP. The static head is a 3-layer MLP on
//! `[static feature, gamma(x)]`. The geometric networks emit density
//! (softplus), colour (logistic) and, for the dynamic branch, the blend weight.

use std::rc::Rc;

use rand::Rng;

use crate::diffcore::{
    affine, bind, init_affine, init_attention, mlp, multi_head_attention, residual_mlp, BoundBlock,
    Graph, MlpShape, ParamBlock, ResidualMlpShape, Var,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Layout of the flow semantic head (`heads` tensors).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlowHeadShape {
    /// Width of one flow-feature row.
    pub input: usize,
    /// Attention channels `C`.
    pub channels: usize,
    /// Attention heads `H`.
    pub heads: usize,
    /// Hidden width of the semantic MLP.
    pub hidden: usize,
    pub classes: usize,
}

impl FlowHeadShape {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Shape(format!(
                "{} attention channels not divisible by {} heads",
                self.channels, self.heads
            )));
        }
        if self.classes == 0 {
            return Err(Error::Shape("semantic head with zero classes".into()));
        }
        Ok(())
    }

    /// Tensors `proj`, `wq`/`wk`/`wv`, `psi_o.l0..1` and `sem.l0..2`.
    pub fn init<T: Scalar>(&self, name: &str, rng: &mut impl Rng) -> Result<ParamBlock<T>> {
        self.validate()?;
        let mut b = ParamBlock::new(name);
        init_affine(&mut b, "proj", self.input, self.channels, rng)?;
        init_attention(&mut b, "", self.channels, rng)?;
        MlpShape::new(&[self.channels, self.channels, self.channels])
            .init_into(&mut b, "psi_o.", rng)?;
        MlpShape::new(&[self.channels, self.hidden, self.hidden, self.classes])
            .init_into(&mut b, "sem.", rng)?;
        Ok(b)
    }
}

/// Per-row attention outputs (`[P * group, C]`, heads concatenated) of the
/// projected flow features.
pub fn flow_attention<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundBlock,
    shape: &FlowHeadShape,
    features: Var,
    group: usize,
    mask: Option<Rc<[bool]>>,
) -> Result<Var> {
    let x = project_rows(g, p, shape, features, group)?;
    multi_head_attention(g, p, "", x, group, shape.heads, mask)
}

fn project_rows<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundBlock,
    shape: &FlowHeadShape,
    features: Var,
    group: usize,
) -> Result<Var> {
    let (rows, cols) = g.dims(features);
    if cols != shape.input {
        return Err(Error::Shape(format!(
            "flow rows of width {cols}, head expects {}",
            shape.input
        )));
    }
    if group == 0 || rows % group != 0 {
        return Err(Error::Shape(format!(
            "{rows} flow rows not divisible into groups of {group}"
        )));
    }
    affine(g, p, "proj", features)
}

/// `[P, L]` dynamic semantic logits of `P` flows of `group` rows each.
/// With `attention` off the projected rows are mean-pooled directly.
pub fn flow_semantic_logits<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundBlock,
    shape: &FlowHeadShape,
    features: Var,
    group: usize,
    mask: Option<Rc<[bool]>>,
    attention: bool,
) -> Result<Var> {
    let rows = if attention {
        flow_attention(g, p, shape, features, group, mask.clone())?
    } else {
        project_rows(g, p, shape, features, group)?
    };
    let pooled = g.group_mean(rows, group, mask);
    let sem = mlp(g, p, "psi_o.", 2, pooled)?;
    mlp(g, p, "sem.", 3, sem)
}

/// Layout of the static semantic MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StaticHeadShape {
    /// Static feature width plus embedded position width.
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl StaticHeadShape {
    pub fn init<T: Scalar>(&self, name: &str, rng: &mut impl Rng) -> Result<ParamBlock<T>> {
        MlpShape::new(&[self.input, self.hidden, self.hidden, self.classes]).init(name, rng)
    }
}

/// `[P, L]` static semantic logits from `[P, D]` features and `[P, E]` embedded positions.
pub fn static_semantic_logits<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundBlock,
    feature: Var,
    x_embed: Var,
) -> Result<Var> {
    if g.dims(feature).0 != g.dims(x_embed).0 {
        return Err(Error::Shape(format!(
            "{} features for {} positions",
            g.dims(feature).0,
            g.dims(x_embed).0
        )));
    }
    let x = g.concat(&[feature, x_embed]);
    mlp(g, p, "", 3, x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Static,
    Dynamic,
}

/// Layout of a geometric network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeoShape {
    pub input: usize,
    pub width: usize,
    pub blocks: usize,
    pub branch: Branch,
}

impl GeoShape {
    /// Raw outputs: density, RGB and (dynamic only) blend.
    pub fn outputs(&self) -> usize {
        match self.branch {
            Branch::Static => 4,
            Branch::Dynamic => 5,
        }
    }

    pub fn init<T: Scalar>(&self, name: &str, rng: &mut impl Rng) -> Result<ParamBlock<T>> {
        ResidualMlpShape {
            input: self.input,
            width: self.width,
            blocks: self.blocks,
            output: self.outputs(),
        }
        .init(name, rng)
    }
}

/// Tape outputs of a geometric network: `sigma` `[P, 1]`, `color` `[P, 3]`, `blend` `[P, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct GeoOutput {
    pub sigma: Var,
    pub color: Var,
    pub blend: Option<Var>,
}

/// Geometric network on a prepared input row `[feature, gamma(x), gamma(t/N)]`
/// (static branch: `[feature, gamma(x)]`).
pub fn geo_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundBlock,
    shape: &GeoShape,
    input: Var,
) -> Result<GeoOutput> {
    let raw = residual_mlp(g, p, input, shape.width, shape.blocks)?;
    if g.dims(raw).1 != shape.outputs() {
        return Err(Error::Shape(format!(
            "{}: {} raw outputs, expected {}",
            p.name,
            g.dims(raw).1,
            shape.outputs()
        )));
    }
    let s = g.slice_cols(raw, 0, 1);
    let sigma = g.softplus(s);
    let c = g.slice_cols(raw, 1, 4);
    let color = g.sigmoid(c);
    let blend = match shape.branch {
        Branch::Static => None,
        Branch::Dynamic => {
            let b = g.slice_cols(raw, 4, 5);
            Some(g.sigmoid(b))
        }
    };
    Ok(GeoOutput {
        sigma,
        color,
        blend,
    })
}

/// One evaluated field point.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSample<T> {
    pub sigma: T,
    pub color: [T; 3],
    /// Dynamic branch only.
    pub blend: Option<T>,
    pub logits: Vec<T>,
}

impl<T: Scalar> FieldSample<T> {
    pub fn check(&self) -> Result<()> {
        let unit = |v: T| v >= T::zero() && v <= T::one();
        if !(self.sigma >= T::zero())
            || !self.color.iter().all(|&c| unit(c))
            || !self.blend.map_or(true, unit)
        {
            return Err(Error::OutOfRange(format!(
                "field sample outside its ranges: {self:?}"
            )));
        }
        if self.logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("semantic logits".into()));
        }
        Ok(())
    }
}

/// Evaluates a geometric network on one input row (no logits).
pub fn geo_sample<T: Scalar>(
    params: &ParamBlock<T>,
    shape: &GeoShape,
    input: &[T],
) -> Result<FieldSample<T>> {
    let mut g = Graph::new();
    let p = bind(&mut g, params, false);
    let x = g.constant(&[1, input.len()], input.to_vec());
    let out = geo_forward(&mut g, &p, shape, x)?;
    let c = g.value(out.color);
    Ok(FieldSample {
        sigma: g.value(out.sigma)[0],
        color: [c[0], c[1], c[2]],
        blend: out.blend.map(|b| g.value(b)[0]),
        logits: Vec::new(),
    })
}
