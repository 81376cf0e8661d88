//! Image encoders and the point/flow features read from them.
//!
//! Each encoder is three stride-2 3x3 convolutions with ReLU (strides 2, 4
//! and 8 relative to the image). A point feature samples every level
//! bilinearly at the point's projection, concatenates the levels and maps
//! them to `D` channels with one affine layer.

mod ops;

use std::rc::Rc;

use rand::Rng;

pub use ops::{
    bilinear_sample, bilinear_sample_batch, map_coords, project_points, BilinearOp, MapGeometry,
    ProjectOp,
};

use crate::diffcore::{
    affine, affine_relu, init_affine, BoundBlock, ConvGeometry, Graph, ParamBlock, Var,
};
use crate::error::{Error, Result};
use crate::flow_field::TrajectoryBatch;
use crate::scalar::Scalar;
use crate::scene_synth::CameraPose;

/// Pinhole projection `(u, v, z)`; errors when the point is not in front of the camera.
pub fn project<T: Scalar>(pose: &CameraPose<T>, x: [T; 3]) -> Result<(T, T, T)> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("projected point".into()));
    }
    let (u, v, z) = pose.project(x);
    if z <= T::zero() {
        return Err(Error::OutOfRange(format!(
            "point at camera depth {z} is behind the camera"
        )));
    }
    Ok((u, v, z))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderShape {
    pub in_channels: usize,
    /// Channels of every convolution level.
    pub channels: usize,
    pub levels: usize,
    /// Fused feature width `D`.
    pub out: usize,
}

impl EncoderShape {
    pub fn new(channels: usize, out: usize) -> Self {
        Self {
            in_channels: 3,
            channels,
            levels: 3,
            out,
        }
    }

    /// Tensors `conv{l}.w` (`[9 c_in, c]`), `conv{l}.b`, `fuse.w` (`[levels c, D]`), `fuse.b`.
    pub fn init<T: Scalar>(&self, name: &str, rng: &mut impl Rng) -> Result<ParamBlock<T>> {
        let mut b = ParamBlock::new(name);
        let mut cin = self.in_channels;
        for l in 0..self.levels {
            init_affine(&mut b, &format!("conv{l}"), 9 * cin, self.channels, rng)?;
            cin = self.channels;
        }
        init_affine(&mut b, "fuse", self.levels * self.channels, self.out, rng)?;
        Ok(b)
    }
}

/// Encoded feature maps of every frame, one entry per level.
#[derive(Clone, Debug)]
pub struct FeatureMaps {
    pub levels: Vec<(Var, MapGeometry)>,
}

/// Runs the encoder on `[F, H, W, C]` images.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundBlock,
    images: Var,
    frames: usize,
    height: usize,
    width: usize,
    levels: usize,
) -> Result<FeatureMaps> {
    let (_, cin) = g.dims(images);
    if g.value(images).len() != frames * height * width * cin {
        return Err(Error::Shape(format!(
            "{} image values for {frames}x{height}x{width}x{cin}",
            g.value(images).len()
        )));
    }
    let mut x = images;
    let (mut h, mut w, mut c) = (height, width, cin);
    let mut stride = 1;
    let mut out = Vec::with_capacity(levels);
    for l in 0..levels {
        let geo = ConvGeometry {
            frames,
            height: h,
            width: w,
            channels: c,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let cols = g.im2col(x, geo);
        let y = affine_relu(g, p, &format!("conv{l}"), cols)?;
        h = geo.out_height();
        w = geo.out_width();
        c = g.dims(y).1;
        stride *= 2;
        x = g.reshape(y, &[frames, h, w, c]);
        out.push((
            y,
            MapGeometry {
                frames,
                height: h,
                width: w,
                channels: c,
                stride,
            },
        ));
    }
    Ok(FeatureMaps { levels: out })
}

/// Fused `[P, D]` features at pixel coordinates `uv` of the given frames.
pub fn sample_features<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundBlock,
    maps: &FeatureMaps,
    uv: Var,
    frames: Rc<[usize]>,
) -> Result<Var> {
    let parts: Vec<Var> = maps
        .levels
        .iter()
        .map(|&(map, geo)| bilinear_sample_batch(g, map, geo, uv, frames.clone()))
        .collect();
    let cat = g.concat(&parts);
    affine(g, p, "fuse", cat)
}

/// Uniform choice of a source frame other than `anchor` (the anchor itself
/// when the video has a single frame).
pub fn choose_static_frame(anchor: usize, n_frames: usize, rng: &mut impl Rng) -> usize {
    if n_frames <= 1 {
        return 0;
    }
    let k = rng.gen_range(0..n_frames - 1);
    if k >= anchor {
        k + 1
    } else {
        k
    }
}

/// Static features of constant points (`[P, 3]` values) read from a randomly
/// chosen non-anchor frame each. Returns the features and the chosen frames.
pub fn sample_static_features<T: Scalar>(
    g: &mut Graph<T>,
    e_st: &BoundBlock,
    maps: &FeatureMaps,
    points: &[T],
    anchors: &[usize],
    poses: &Rc<[CameraPose<f64>]>,
    rng: &mut impl Rng,
) -> Result<(Var, Vec<usize>)> {
    let mut chosen = Vec::with_capacity(anchors.len());
    for (p, &t) in anchors.iter().enumerate() {
        let x = [0, 1, 2].map(|k| points[3 * p + k].as_f64());
        chosen.push(pick_static_frame(x, t, poses, rng)?);
    }
    static_features_from(g, e_st, maps, points, chosen, poses)
}

/// Random non-anchor source frame for `x`, falling back to any frame that
/// has `x` in front of the camera.
pub fn pick_static_frame(
    x: [f64; 3],
    anchor: usize,
    poses: &[CameraPose<f64>],
    rng: &mut impl Rng,
) -> Result<usize> {
    let n = poses.len();
    let f = choose_static_frame(anchor, n, rng);
    if poses[f].project(x).2 > 0.0 {
        return Ok(f);
    }
    let candidates: Vec<usize> = (0..n)
        .filter(|&c| (c != anchor || n == 1) && poses[c].project(x).2 > 0.0)
        .collect();
    if candidates.is_empty() {
        return Err(Error::OutOfRange(format!(
            "point {x:?} is behind every candidate camera"
        )));
    }
    Ok(candidates[rng.gen_range(0..candidates.len())])
}

/// Static features of constant points read from the given source frames.
pub fn static_features_from<T: Scalar>(
    g: &mut Graph<T>,
    e_st: &BoundBlock,
    maps: &FeatureMaps,
    points: &[T],
    chosen: Vec<usize>,
    poses: &Rc<[CameraPose<f64>]>,
) -> Result<(Var, Vec<usize>)> {
    let pts = g.constant(&[chosen.len(), 3], points.to_vec());
    let frames: Rc<[usize]> = chosen.clone().into();
    let (uv, _) = project_points(g, pts, poses.clone(), frames.clone());
    let feat = sample_features(g, e_st, maps, uv, frames)?;
    Ok((feat, chosen))
}

/// Single-point form of [`sample_static_features`]: the `[1, D]` feature
/// and the chosen frame.
pub fn sample_static_feature<T: Scalar>(
    g: &mut Graph<T>,
    e_st: &BoundBlock,
    maps: &FeatureMaps,
    poses: &Rc<[CameraPose<f64>]>,
    x: [T; 3],
    exclude: usize,
    rng: &mut impl Rng,
) -> Result<(Var, usize)> {
    let (v, f) = sample_static_features(g, e_st, maps, &x, &[exclude], poses, rng)?;
    Ok((v, f[0]))
}

/// What each flow-feature row embeds besides its image feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DispMode {
    /// `Phi_tau - Phi_t`
    Delta,
    /// `Phi_tau`
    Absolute,
    /// both, displacement first
    Both,
}

impl DispMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "delta" => Ok(DispMode::Delta),
            "abs" | "absolute" => Ok(DispMode::Absolute),
            "both" => Ok(DispMode::Both),
            other => Err(Error::Config(format!(
                "unknown disp_mode {other:?} (delta|abs|both)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DispMode::Delta => "delta",
            DispMode::Absolute => "abs",
            DispMode::Both => "both",
        }
    }

    /// Width of the embedded block for 3-D positions.
    pub fn width(&self, disp_freqs: usize, pos_freqs: usize) -> usize {
        let d = 3 * (2 * disp_freqs + 1);
        let p = 3 * (2 * pos_freqs + 1);
        match self {
            DispMode::Delta => d,
            DispMode::Absolute => p,
            DispMode::Both => d + p,
        }
    }
}

/// Flow-feature matrix: rows of every point are consecutive and ordered by
/// ascending timestamp. Returns `[P * rows, D + E]` and the row validity mask.
pub fn assemble_flow_features<T: Scalar>(
    g: &mut Graph<T>,
    traj: &TrajectoryBatch,
    mode: DispMode,
    disp_freqs: usize,
    pos_freqs: usize,
) -> Result<(Var, Rc<[bool]>)> {
    let anchor = traj.anchor_row();
    let anchor_pos = anchor.positions;
    let mut rows = Vec::with_capacity(traj.rows.len());
    for row in &traj.rows {
        let mut parts = vec![row.features];
        if matches!(mode, DispMode::Delta | DispMode::Both) {
            let d = if row.offset == 0 {
                // exactly zero, independent of the anchor position values
                let n = g.value(anchor_pos).len();
                g.constant(&[n / 3, 3], vec![T::zero(); n])
            } else {
                g.sub(row.positions, anchor_pos)
            };
            parts.push(g.embed(d, disp_freqs, true));
        }
        if matches!(mode, DispMode::Absolute | DispMode::Both) {
            parts.push(g.embed(row.positions, pos_freqs, true));
        }
        rows.push(g.concat(&parts));
    }
    let matrix = g.interleave_rows(&rows);
    let points = traj.points();
    let mut mask = Vec::with_capacity(points * rows.len());
    for p in 0..points {
        for row in &traj.rows {
            mask.push(row.valid[p]);
        }
    }
    Ok((matrix, mask.into()))
}
