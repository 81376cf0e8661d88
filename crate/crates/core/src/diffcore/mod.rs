//! Differentiable numerical primitives: arrays, the gradient tape, network
//! layers, Adam and the finite-difference checker.

mod adam;
mod array;
mod func;
mod gradcheck;
mod graph;
mod nn;

pub use adam::{adam_step, AdamState};
pub use array::{NdArray, ParamBlock};
pub use func::{crossentropy, sinusoidal_embed, softmax};
pub use gradcheck::{
    analytic_gradients, compare_with_central_differences, gradcheck, AnalyticGrads,
    GradcheckConfig, GradcheckEntry, GradcheckReport,
};
pub use graph::{ConvGeometry, CustomOp, Gradients, Graph, Var};
pub use nn::{
    affine, affine_relu, bind, collect_grads, init_affine, init_attention, mlp,
    multi_head_attention, residual_mlp, BoundBlock, MlpShape, ResidualMlpShape,
};
