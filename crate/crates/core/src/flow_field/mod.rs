//! Implicit flow field: per-point motion to the neighbouring frames,
//! trajectory chaining, ray warping and rendered optical flow.
//!
//! The field is a residual MLP on `[feature, gamma(x), gamma(t/N)]` with six
//! outputs, squashed by `tanh` and scaled by `max_step` into a backward and a
//! forward displacement.

use std::rc::Rc;

use rand::Rng;

use crate::diffcore::{bind, residual_mlp, BoundBlock, Graph, ParamBlock, ResidualMlpShape, Var};
use crate::error::{Error, Result};
use crate::feature_agg::{project_points, sample_features, FeatureMaps};
use crate::renderer::{quadrature, ray_integrate, render_coefficients, Ray};
use crate::scalar::Scalar;
use crate::scene_synth::CameraPose;

/// Half-width of the default trajectory window (frames `t-1..=t+1`).
pub const DEFAULT_WINDOW: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowFieldConfig {
    pub width: usize,
    pub blocks: usize,
    pub max_step: f64,
    pub pos_freqs: usize,
    pub time_freqs: usize,
    pub n_frames: usize,
    /// Axis-aligned box trajectories must stay inside.
    pub bounds: ([f64; 3], [f64; 3]),
}

impl FlowFieldConfig {
    /// Width of `[feature, gamma(x), gamma(t/N)]` for `feature_width` channels.
    pub fn input_width(&self, feature_width: usize) -> usize {
        feature_width + 3 * (2 * self.pos_freqs + 1) + 2 * self.time_freqs + 1
    }

    /// `Psi_flow` parameters for `feature_width`-channel dynamic features.
    pub fn init<T: Scalar>(
        &self,
        feature_width: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamBlock<T>> {
        ResidualMlpShape {
            input: self.input_width(feature_width),
            width: self.width,
            blocks: self.blocks,
            output: 6,
        }
        .init("psi_flow", rng)
    }

    pub(crate) fn contains(&self, x: [f64; 3]) -> bool {
        (0..3).all(|k| x[k] >= self.bounds.0[k] && x[k] <= self.bounds.1[k])
    }
}

/// `[feature, gamma(x), gamma(t/N)]` for 0-based frames `frames`.
pub fn field_input<T: Scalar>(
    g: &mut Graph<T>,
    feature: Var,
    positions: Var,
    frames: &[usize],
    n_frames: usize,
    pos_freqs: usize,
    time_freqs: usize,
) -> Var {
    let pe = g.embed(positions, pos_freqs, true);
    let t: Vec<T> = frames
        .iter()
        .map(|&f| T::from_usize_lossy(f + 1) / T::from_usize_lossy(n_frames))
        .collect();
    let tv = g.constant(&[frames.len(), 1], t);
    let te = g.embed(tv, time_freqs, true);
    g.concat(&[feature, pe, te])
}

/// Backward and forward displacements (`[P, 3]` each) predicted from `input`.
pub fn flow_offsets<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundBlock,
    input: Var,
    cfg: &FlowFieldConfig,
) -> Result<(Var, Var)> {
    let raw = residual_mlp(g, p, input, cfg.width, cfg.blocks)?;
    if g.dims(raw).1 != 6 {
        return Err(Error::Shape(format!(
            "flow field emits {} values per point, expected 6",
            g.dims(raw).1
        )));
    }
    let th = g.tanh(raw);
    let off = g.scale(th, T::lit(cfg.max_step));
    Ok((g.slice_cols(off, 0, 3), g.slice_cols(off, 3, 6)))
}

/// One timestamp of a batch of trajectories.
#[derive(Clone, Debug)]
pub struct TrajectoryRow {
    /// Frame offset from the anchor.
    pub offset: isize,
    /// `[P, 3]` positions `Phi_tau`.
    pub positions: Var,
    /// Frame of every point (the anchor frame where the row is invalid).
    pub frames: Rc<[usize]>,
    /// Inside the video, inside the bounds and in front of the camera.
    pub valid: Vec<bool>,
    /// `[P, 2]` projections into `frames`.
    pub uv: Var,
    /// `[P, D]` dynamic features at `uv`.
    pub features: Var,
}

/// Trajectories of `P` points, rows in ascending offset `-window..=window`.
#[derive(Clone, Debug)]
pub struct TrajectoryBatch {
    pub anchors: Rc<[usize]>,
    pub window: usize,
    pub rows: Vec<TrajectoryRow>,
    /// Rows dropped because the chain left the scene bounds.
    pub out_of_bounds: usize,
}

impl TrajectoryBatch {
    pub fn points(&self) -> usize {
        self.anchors.len()
    }

    pub fn row(&self, offset: isize) -> Option<&TrajectoryRow> {
        self.rows.iter().find(|r| r.offset == offset)
    }

    pub fn anchor_row(&self) -> &TrajectoryRow {
        self.row(0).expect("anchor row")
    }
}

/// Shared inputs for building trajectories.
pub struct TrajectoryContext<'a> {
    pub cfg: &'a FlowFieldConfig,
    pub psi_flow: &'a BoundBlock,
    pub e_dy: &'a BoundBlock,
    pub maps: &'a FeatureMaps,
    pub poses: Rc<[CameraPose<f64>]>,
}

/// Chains the flow field outward from the anchors for `window` steps in
/// each direction, re-sampling dynamic features at every predicted position.
/// `anchor_input` is the field input at the anchors (also used by the
/// geometry network), `anchor_uv`/`anchor_features` their projections and features.
#[allow(clippy::too_many_arguments)]
pub fn build_trajectories<T: Scalar>(
    g: &mut Graph<T>,
    ctx: &TrajectoryContext,
    x: Var,
    anchors: Rc<[usize]>,
    anchor_valid: Vec<bool>,
    anchor_uv: Var,
    anchor_features: Var,
    anchor_input: Var,
    window: usize,
) -> Result<TrajectoryBatch> {
    let cfg = ctx.cfg;
    let n = cfg.n_frames;
    let points = anchors.len();
    let anchor_row = TrajectoryRow {
        offset: 0,
        positions: x,
        frames: anchors.clone(),
        valid: anchor_valid,
        uv: anchor_uv,
        features: anchor_features,
    };
    let mut back = Vec::new();
    let mut fwd = Vec::new();
    let mut out_of_bounds = 0;
    let first = if window > 0 {
        Some(flow_offsets(g, ctx.psi_flow, anchor_input, cfg)?)
    } else {
        None
    };
    for r in 1..=window {
        for side in [-1isize, 1] {
            let prev = if r == 1 {
                &anchor_row
            } else if side < 0 {
                &back[r - 2]
            } else {
                &fwd[r - 2]
            };
            let offset = if r == 1 {
                let (b, f) = first.expect("window > 0");
                if side < 0 {
                    b
                } else {
                    f
                }
            } else {
                let inp = field_input(
                    g,
                    prev.features,
                    prev.positions,
                    &prev.frames,
                    n,
                    cfg.pos_freqs,
                    cfg.time_freqs,
                );
                let (b, f) = flow_offsets(g, ctx.psi_flow, inp, cfg)?;
                if side < 0 {
                    b
                } else {
                    f
                }
            };
            let positions = g.add(prev.positions, offset);
            let mut valid = Vec::with_capacity(points);
            let mut frames = Vec::with_capacity(points);
            {
                let pv = g.value(positions);
                for p in 0..points {
                    let target = anchors[p] as isize + side * r as isize;
                    let inside = target >= 0 && (target as usize) < n;
                    let pos = [0, 1, 2].map(|k| pv[3 * p + k].as_f64());
                    let in_box = cfg.contains(pos);
                    if inside && prev.valid[p] && !in_box {
                        out_of_bounds += 1;
                    }
                    valid.push(inside && prev.valid[p] && in_box);
                    frames.push(if inside { target as usize } else { anchors[p] });
                }
            }
            let frames: Rc<[usize]> = frames.into();
            let (uv, in_front) = project_points(g, positions, ctx.poses.clone(), frames.clone());
            for (v, f) in valid.iter_mut().zip(in_front) {
                *v &= f;
            }
            let features = sample_features(g, ctx.e_dy, ctx.maps, uv, frames.clone())?;
            let row = TrajectoryRow {
                offset: side * r as isize,
                positions,
                frames,
                valid,
                uv,
                features,
            };
            if side < 0 {
                back.push(row);
            } else {
                fwd.push(row);
            }
        }
    }
    let mut rows: Vec<TrajectoryRow> = back.into_iter().rev().collect();
    rows.push(anchor_row);
    rows.extend(fwd);
    Ok(TrajectoryBatch {
        anchors,
        window,
        rows,
        out_of_bounds,
    })
}

/// Projects the anchors `x` (`[P, 3]`) into their frames, samples their
/// dynamic features and chains trajectories from them. Also returns the
/// anchor field input.
pub fn trajectories_from_points<T: Scalar>(
    g: &mut Graph<T>,
    ctx: &TrajectoryContext,
    x: Var,
    anchors: Rc<[usize]>,
    window: usize,
) -> Result<(TrajectoryBatch, Var)> {
    let (uv, valid) = project_points(g, x, ctx.poses.clone(), anchors.clone());
    let feat = sample_features(g, ctx.e_dy, ctx.maps, uv, anchors.clone())?;
    let cfg = ctx.cfg;
    let input = field_input(
        g,
        feat,
        x,
        &anchors,
        cfg.n_frames,
        cfg.pos_freqs,
        cfg.time_freqs,
    );
    let traj = build_trajectories(g, ctx, x, anchors, valid, uv, feat, input, window)?;
    Ok((traj, input))
}

/// `[P, 3]` positions of each point at its own offset (`Phi_tau`).
/// Offsets must lie within the window.
pub fn warp_positions<T: Scalar>(
    g: &mut Graph<T>,
    traj: &TrajectoryBatch,
    offsets: &[isize],
) -> Result<Var> {
    let w = traj.window as isize;
    if offsets.len() != traj.points() {
        return Err(Error::Shape(format!(
            "{} offsets for {} points",
            offsets.len(),
            traj.points()
        )));
    }
    if let Some(o) = offsets.iter().find(|o| o.abs() > w) {
        return Err(Error::OutOfRange(format!("offset {o} outside window {w}")));
    }
    let parts: Vec<Var> = traj.rows.iter().map(|r| r.positions).collect();
    let all = g.interleave_rows(&parts);
    let rows = traj.rows.len();
    let idx: Vec<usize> = offsets
        .iter()
        .enumerate()
        .map(|(p, &o)| p * rows + (o + w) as usize)
        .collect();
    Ok(g.gather_rows(all, idx.into()))
}

/// Per-ray rendered 2-D displacement towards the frame at `offset` from
/// `m` samples per ray: projected sample positions minus the ray's pixel,
/// weighted by the dynamic quadrature weights (renormalised to sum to one
/// when `normalize`). Invalid samples get zero weight. Returns `[R, 2]`.
#[allow(clippy::too_many_arguments)]
pub fn render_flow_batch<T: Scalar>(
    g: &mut Graph<T>,
    traj: &TrajectoryBatch,
    offset: isize,
    sigma_dy: Var,
    deltas: Rc<[f64]>,
    pixels: &[[f64; 2]],
    m: usize,
    normalize: bool,
) -> Result<Var> {
    let row = traj
        .row(offset)
        .ok_or_else(|| Error::OutOfRange(format!("offset {offset} not materialised")))?;
    let points = traj.points();
    let rays = points / m;
    if pixels.len() != rays {
        return Err(Error::Shape(format!(
            "{} pixels for {rays} rays",
            pixels.len()
        )));
    }
    let pix: Vec<T> = (0..points)
        .flat_map(|p| [T::lit(pixels[p / m][0]), T::lit(pixels[p / m][1])])
        .collect();
    let pix = g.constant(&[points, 2], pix);
    let disp = g.sub(row.uv, pix);
    let coef = render_coefficients(g, sigma_dy, deltas, m);
    let w = g.mul(coef, sigma_dy);
    let keep: Vec<T> = row
        .valid
        .iter()
        .map(|&v| if v { T::one() } else { T::zero() })
        .collect();
    let keep = g.constant(&[points], keep);
    let w = g.mul(w, keep);
    let w = if normalize {
        let wr = g.reshape(w, &[rays, m]);
        let wr = g.row_normalize(wr, T::lit(1e-8));
        g.reshape(wr, &[points])
    } else {
        w
    };
    Ok(ray_integrate(g, w, disp, m))
}

/// Trajectory of a single point: `positions[f]` is `Phi` at 0-based frame `f`
/// where materialised.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T> {
    pub anchor: usize,
    pub window: usize,
    pub positions: Vec<Option<[T; 3]>>,
    /// The chain left the bounds; later positions were not materialised.
    pub flagged: bool,
}

impl<T: Scalar> Trajectory<T> {
    pub fn at(&self, frame: usize) -> Option<[T; 3]> {
        self.positions.get(frame).copied().flatten()
    }
}

/// `(Phi_{t-1}, Phi_{t+1})` of point `x` at 0-based frame `t` given its feature.
pub fn flow_step<T: Scalar>(
    cfg: &FlowFieldConfig,
    params: &ParamBlock<T>,
    feature: &[T],
    x: [T; 3],
    t: usize,
) -> Result<([T; 3], [T; 3])> {
    if feature.iter().chain(&x).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("flow step input".into()));
    }
    if t >= cfg.n_frames {
        return Err(Error::OutOfRange(format!("frame {t} of {}", cfg.n_frames)));
    }
    let mut g = Graph::new();
    let p = bind(&mut g, params, false);
    let f = g.constant(&[1, feature.len()], feature.to_vec());
    let xv = g.constant(&[1, 3], x.to_vec());
    let inp = field_input(
        &mut g,
        f,
        xv,
        &[t],
        cfg.n_frames,
        cfg.pos_freqs,
        cfg.time_freqs,
    );
    let (b, fw) = flow_offsets(&mut g, &p, inp, cfg)?;
    let (b, fw) = (g.value(b), g.value(fw));
    Ok((
        [0, 1, 2].map(|k| x[k] + b[k]),
        [0, 1, 2].map(|k| x[k] + fw[k]),
    ))
}

/// Chains [`flow_step`] outward from `(x, t)`; `features(pos, frame)` supplies
/// the dynamic feature at every visited position.
pub fn build_trajectory<T: Scalar>(
    cfg: &FlowFieldConfig,
    params: &ParamBlock<T>,
    mut features: impl FnMut([T; 3], usize) -> Vec<T>,
    x: [T; 3],
    t: usize,
    window: usize,
) -> Result<Trajectory<T>> {
    let n = cfg.n_frames;
    let mut traj = Trajectory {
        anchor: t,
        window,
        positions: vec![None; n],
        flagged: false,
    };
    traj.positions[t] = Some(x);
    for side in [-1isize, 1] {
        let (mut pos, mut frame) = (x, t);
        for _ in 0..window {
            let target = frame as isize + side;
            if target < 0 || target as usize >= n {
                break;
            }
            let (b, f) = flow_step(cfg, params, &features(pos, frame), pos, frame)?;
            let next = if side < 0 { b } else { f };
            if !cfg.contains(next.map(|v| v.as_f64())) {
                traj.flagged = true;
                break;
            }
            pos = next;
            frame = target as usize;
            traj.positions[frame] = Some(pos);
        }
    }
    Ok(traj)
}

/// Positions `Phi_tau` of every sample's trajectory.
pub fn warp_ray<T: Scalar>(samples: &[Trajectory<T>], tau: usize) -> Result<Vec<[T; 3]>> {
    samples
        .iter()
        .map(|s| {
            s.at(tau).ok_or_else(|| {
                Error::OutOfRange(format!(
                    "frame {tau} outside the window of the trajectory anchored at {}",
                    s.anchor
                ))
            })
        })
        .collect()
}

/// Rendered forward and backward optical flow of one ray at depths `depths`.
/// Samples whose neighbouring position is missing or behind the camera are
/// excluded. Returns `[forward, backward]`, `None` for a direction with
/// no frame or no usable sample.
pub fn render_optical_flow<T: Scalar>(
    ray: &Ray<T>,
    depths: &[T],
    sigma_dy: &[T],
    trajectories: &[Trajectory<T>],
    poses: &[CameraPose<T>],
    normalize: bool,
) -> Result<[Option<[T; 2]>; 2]> {
    let m = depths.len();
    if sigma_dy.len() != m || trajectories.len() != m {
        return Err(Error::Shape(format!(
            "{m} depths, {} densities, {} trajectories",
            sigma_dy.len(),
            trajectories.len()
        )));
    }
    let q = quadrature(depths, sigma_dy, ray.last_delta(m))?;
    let pixel = [
        T::from_usize_lossy(ray.pixel.1) + T::lit(0.5),
        T::from_usize_lossy(ray.pixel.0) + T::lit(0.5),
    ];
    let t = ray.frame;
    let mut out = [None, None];
    for (slot, target) in [(0, t.checked_add(1)), (1, t.checked_sub(1))] {
        let Some(target) = target.filter(|&f| f < poses.len()) else {
            continue;
        };
        let mut w = Vec::with_capacity(m);
        let mut d = Vec::with_capacity(m);
        for (i, tr) in trajectories.iter().enumerate() {
            let proj = tr.at(target).map(|p| poses[target].project(p));
            match proj {
                Some((u, v, z)) if z > T::zero() => {
                    w.push(q.weights[i]);
                    d.push([u - pixel[0], v - pixel[1]]);
                }
                _ => {
                    w.push(T::zero());
                    d.push([T::zero(); 2]);
                }
            }
        }
        if !w.iter().any(|&x| x > T::zero()) {
            continue;
        }
        let total = if normalize {
            w.iter().copied().sum::<T>() + T::lit(1e-8)
        } else {
            T::one()
        };
        let mut acc = [T::zero(); 2];
        for (wi, di) in w.iter().zip(&d) {
            acc[0] += *wi / total * di[0];
            acc[1] += *wi / total * di[1];
        }
        out[slot] = Some(acc);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
