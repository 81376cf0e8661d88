//! Projection and bilinear sampling as tape operations.

use std::rc::Rc;

use crate::diffcore::{CustomOp, Graph, Var};
use crate::scalar::Scalar;
use crate::scene_synth::CameraPose;

/// Pinhole projection of `[P, 3]` world points into per-point cameras,
/// output `[P, 2]` pixel coordinates. Points at or behind a camera project
/// to its principal point with zero gradient.
pub struct ProjectOp {
    pub poses: Rc<[CameraPose<f64>]>,
    pub frames: Rc<[usize]>,
}

impl<T: Scalar> CustomOp<T> for ProjectOp {
    fn name(&self) -> &'static str {
        "project"
    }

    fn backward(
        &self,
        inputs: &[&[T]],
        _output: &[T],
        grad_out: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let Some(gx) = grads[0].as_mut() else { return };
        for (p, &f) in self.frames.iter().enumerate() {
            let pose = &self.poses[f];
            let x = [0, 1, 2].map(|k| inputs[0][3 * p + k].as_f64());
            let c = pose.to_camera(x);
            if c[2] <= 0.0 {
                continue;
            }
            let (gu, gv) = (grad_out[2 * p].as_f64(), grad_out[2 * p + 1].as_f64());
            let iz = 1.0 / c[2];
            // d c_k / d x_j = R[j][k]
            let r = &pose.rotation;
            for j in 0..3 {
                let du = pose.fx * (r[j][0] * iz - c[0] * iz * iz * r[j][2]);
                let dv = pose.fy * (r[j][1] * iz - c[1] * iz * iz * r[j][2]);
                gx[3 * p + j] += T::lit(gu * du + gv * dv);
            }
        }
    }
}

/// Projects `points` (`[P, 3]`); returns the `[P, 2]` pixel coordinates and
/// a per-point in-front-of-camera flag.
pub fn project_points<T: Scalar>(
    g: &mut Graph<T>,
    points: Var,
    poses: Rc<[CameraPose<f64>]>,
    frames: Rc<[usize]>,
) -> (Var, Vec<bool>) {
    let n = frames.len();
    assert_eq!(g.value(points).len(), 3 * n, "projection input layout");
    let mut out = Vec::with_capacity(2 * n);
    let mut valid = Vec::with_capacity(n);
    {
        let x = g.value(points);
        for (p, &f) in frames.iter().enumerate() {
            let (u, v, z) = poses[f].project([0, 1, 2].map(|k| x[3 * p + k].as_f64()));
            out.push(T::lit(u));
            out.push(T::lit(v));
            valid.push(z > 0.0);
        }
    }
    let uv = g.custom(
        &[points],
        vec![n, 2],
        out,
        Box::new(ProjectOp { poses, frames }),
    );
    (uv, valid)
}

/// Geometry of one stack of feature maps stored `[F, H, W, C]` row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MapGeometry {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Image pixels per map texel.
    pub stride: usize,
}

#[derive(Clone, Copy, Debug)]
struct Corners {
    idx: [usize; 4],
    w: [f64; 4],
    /// Derivative of the blend weights in map x and y (zero when clamped).
    dx: [f64; 4],
    dy: [f64; 4],
    cell: (usize, usize, bool, bool),
}

fn axis(coord: f64, extent: usize) -> (usize, usize, f64, bool) {
    let max = (extent - 1) as f64;
    let clamped = !(0.0..=max).contains(&coord);
    let c = coord.clamp(0.0, max);
    let i0 = (c.floor() as usize).min(extent - 1);
    let i1 = (i0 + 1).min(extent - 1);
    (i0, i1, c - i0 as f64, clamped)
}

fn corners(geo: &MapGeometry, frame: usize, mx: f64, my: f64) -> Corners {
    let (x0, x1, ax, cx) = axis(mx, geo.width);
    let (y0, y1, ay, cy) = axis(my, geo.height);
    let at = |y: usize, x: usize| (frame * geo.height + y) * geo.width + x;
    let sx = if cx { 0.0 } else { 1.0 };
    let sy = if cy { 0.0 } else { 1.0 };
    Corners {
        idx: [at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1)],
        w: [
            (1.0 - ay) * (1.0 - ax),
            (1.0 - ay) * ax,
            ay * (1.0 - ax),
            ay * ax,
        ],
        dx: [-(1.0 - ay) * sx, (1.0 - ay) * sx, -ay * sx, ay * sx],
        dy: [-(1.0 - ax) * sy, -ax * sy, (1.0 - ax) * sy, ax * sy],
        cell: (x0, y0, cx, cy),
    }
}

/// Map coordinates of an image pixel position (texel centres at integers).
pub fn map_coords(u: f64, v: f64, stride: usize) -> (f64, f64) {
    (u / stride as f64 - 0.5, v / stride as f64 - 0.5)
}

/// Bilinear sampling of `[F*H*W, C]` maps at `[P, 2]` pixel coordinates,
/// clamped to the border. Output `[P, C]`.
pub struct BilinearOp {
    pub geo: MapGeometry,
    pub frames: Rc<[usize]>,
}

impl<T: Scalar> CustomOp<T> for BilinearOp {
    fn name(&self) -> &'static str {
        "bilinear"
    }

    fn backward(
        &self,
        inputs: &[&[T]],
        _output: &[T],
        grad_out: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let c = self.geo.channels;
        let (map, uv) = (inputs[0], inputs[1]);
        let inv = 1.0 / self.geo.stride as f64;
        for (p, &f) in self.frames.iter().enumerate() {
            let (mx, my) = map_coords(uv[2 * p].as_f64(), uv[2 * p + 1].as_f64(), self.geo.stride);
            let k = corners(&self.geo, f, mx, my);
            let go = &grad_out[p * c..][..c];
            if let Some(gm) = grads[0].as_mut() {
                for (&i, &w) in k.idx.iter().zip(&k.w) {
                    let w = T::lit(w);
                    for (d, &gi) in gm[i * c..][..c].iter_mut().zip(go) {
                        *d += w * gi;
                    }
                }
            }
            if let Some(guv) = grads[1].as_mut() {
                let (mut du, mut dv) = (0.0, 0.0);
                for j in 0..4 {
                    let s: f64 = map[k.idx[j] * c..][..c]
                        .iter()
                        .zip(go)
                        .map(|(&m, &gi)| m.as_f64() * gi.as_f64())
                        .sum();
                    du += k.dx[j] * s;
                    dv += k.dy[j] * s;
                }
                guv[2 * p] += T::lit(du * inv);
                guv[2 * p + 1] += T::lit(dv * inv);
            }
        }
    }
}

pub fn bilinear_sample_batch<T: Scalar>(
    g: &mut Graph<T>,
    map: Var,
    geo: MapGeometry,
    uv: Var,
    frames: Rc<[usize]>,
) -> Var {
    let c = geo.channels;
    let n = frames.len();
    assert_eq!(
        g.value(map).len(),
        geo.frames * geo.height * geo.width * c,
        "feature map layout"
    );
    assert_eq!(g.value(uv).len(), 2 * n, "sample coordinates");
    let mut out = vec![T::zero(); n * c];
    let mut cells = Vec::new();
    {
        let (m, q) = (g.value(map), g.value(uv));
        for (p, &f) in frames.iter().enumerate() {
            let (mx, my) = map_coords(q[2 * p].as_f64(), q[2 * p + 1].as_f64(), geo.stride);
            let k = corners(&geo, f, mx, my);
            let o = &mut out[p * c..][..c];
            for (&i, &w) in k.idx.iter().zip(&k.w) {
                let w = T::lit(w);
                for (d, &v) in o.iter_mut().zip(&m[i * c..][..c]) {
                    *d += w * v;
                }
            }
            cells.push(k.cell);
        }
    }
    if g.tracks_branches() {
        g.note_branches(cells.iter().map(|&(x, y, cx, cy)| {
            ((x as u64) << 33) ^ ((y as u64) << 2) ^ (u64::from(cx) << 1) ^ u64::from(cy)
        }));
    }
    g.custom(
        &[map, uv],
        vec![n, c],
        out,
        Box::new(BilinearOp { geo, frames }),
    )
}

/// Bilinear read of one `[H, W, C]` map at map coordinates `(x, y)`
/// (texel centres at integers), clamped to the border.
pub fn bilinear_sample<T: Scalar>(
    map: &[T],
    height: usize,
    width: usize,
    channels: usize,
    x: f64,
    y: f64,
) -> Vec<T> {
    let geo = MapGeometry {
        frames: 1,
        height,
        width,
        channels,
        stride: 1,
    };
    let k = corners(&geo, 0, x, y);
    let mut out = vec![T::zero(); channels];
    for (&i, &w) in k.idx.iter().zip(&k.w) {
        for (d, &v) in out.iter_mut().zip(&map[i * channels..][..channels]) {
            *d += T::lit(w) * v;
        }
    }
    out
}
