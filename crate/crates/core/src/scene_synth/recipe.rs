use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::camera::CameraPose;
use super::{SyntheticScene, DEFAULT_FRAMES};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PrimitiveKind {
    Sphere {
        radius: f64,
    },
    /// Infinite plane through the path centre with the given unit normal.
    Plane {
        normal: [f64; 3],
    },
}

/// Centre position `c(t)` for 1-based frame time `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CenterPath {
    Static([f64; 3]),
    /// `start + velocity (t - 1) + bob sin(2 pi (t - 1) / period)`
    Linear {
        start: [f64; 3],
        velocity: [f64; 3],
        bob: [f64; 3],
        period: f64,
    },
}

impl CenterPath {
    pub fn at(&self, t: f64) -> [f64; 3] {
        match *self {
            CenterPath::Static(c) => c,
            CenterPath::Linear {
                start,
                velocity,
                bob,
                period,
            } => {
                let s = (TAU * (t - 1.0) / period).sin();
                [0, 1, 2].map(|k| start[k] + velocity[k] * (t - 1.0) + bob[k] * s)
            }
        }
    }

    pub fn is_static(&self) -> bool {
        match self {
            CenterPath::Static(_) => true,
            CenterPath::Linear { velocity, bob, .. } => {
                velocity.iter().chain(bob).all(|&v| v == 0.0)
            }
        }
    }
}

/// Surface colour as a function of object-local coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Albedo {
    Solid([f64; 3]),
    /// `base + amp * sin(freq x) * cos(freq y)` per channel.
    Waves {
        base: [f64; 3],
        amp: [f64; 3],
        freq: f64,
    },
}

impl Albedo {
    pub fn at(&self, local: [f64; 3]) -> [f64; 3] {
        match *self {
            Albedo::Solid(c) => c,
            Albedo::Waves { base, amp, freq } => {
                let w = (freq * local[0]).sin() * (freq * local[1]).cos();
                [0, 1, 2].map(|k| base[k] + amp[k] * w)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenePrimitive {
    pub kind: PrimitiveKind,
    pub class_id: u8,
    pub path: CenterPath,
    pub albedo: Albedo,
}

impl ScenePrimitive {
    /// Distance along a unit ray to the nearest hit in front of the origin.
    pub fn intersect(&self, origin: [f64; 3], dir: [f64; 3], t: f64) -> Option<f64> {
        let c = self.path.at(t);
        match self.kind {
            PrimitiveKind::Sphere { radius } => {
                let oc = sub(origin, c);
                let b = dot(dir, oc);
                let q = dot(oc, oc) - radius * radius;
                let disc = b * b - q;
                if disc < 0.0 {
                    return None;
                }
                let r = disc.sqrt();
                [-b - r, -b + r].into_iter().find(|&s| s > 1e-9)
            }
            PrimitiveKind::Plane { normal } => {
                let denom = dot(dir, normal);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let s = dot(sub(c, origin), normal) / denom;
                (s > 1e-9).then_some(s)
            }
        }
    }

    fn normal_at(&self, x: [f64; 3], t: f64) -> [f64; 3] {
        match self.kind {
            PrimitiveKind::Sphere { .. } => normalize(sub(x, self.path.at(t))),
            PrimitiveKind::Plane { normal } => normal,
        }
    }
}

/// Forward-facing camera rig translating along x.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rig {
    pub focal: f64,
    /// Camera x position at the first and last frame.
    pub x_start: f64,
    pub x_end: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecipe {
    pub name: String,
    pub n: usize,
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    pub fg_classes: Vec<u8>,
    pub near: f64,
    pub far: f64,
    pub rig: Rig,
    pub primitives: Vec<ScenePrimitive>,
    /// Unit direction towards the light for sphere shading.
    pub light: [f64; 3],
    /// Amplitude of the seeded per-scene colour jitter.
    pub color_jitter: f64,
}

const RIG: Rig = Rig {
    focal: 60.0,
    x_start: 0.25,
    x_end: -0.25,
};

impl SceneRecipe {
    pub const NAMES: [&'static str; 3] = ["balloon", "drift", "plane"];

    /// Built-in recipes: `balloon` (default), `drift` (a second dynamic scene
    /// for multi-scene runs) and `plane` (static textured plane only).
    pub fn named(name: &str) -> Result<Self> {
        let background = |base: [f64; 3], amp: [f64; 3]| ScenePrimitive {
            kind: PrimitiveKind::Plane {
                normal: [0.0, 0.0, -1.0],
            },
            class_id: 0,
            path: CenterPath::Static([0.0, 0.0, 4.0]),
            albedo: Albedo::Waves {
                base,
                amp,
                freq: 3.0,
            },
        };
        let mut r = SceneRecipe {
            name: name.to_string(),
            n: DEFAULT_FRAMES,
            width: 64,
            height: 64,
            classes: 4,
            fg_classes: vec![2],
            near: 2.0,
            far: 5.5,
            rig: RIG,
            primitives: Vec::new(),
            light: normalize([-0.4, -0.5, -0.75]),
            color_jitter: 0.03,
        };
        match name {
            "balloon" => {
                r.primitives = vec![
                    background([0.55, 0.5, 0.4], [0.25, 0.2, 0.2]),
                    ScenePrimitive {
                        kind: PrimitiveKind::Sphere { radius: 0.35 },
                        class_id: 1,
                        path: CenterPath::Static([0.65, 0.45, 3.3]),
                        albedo: Albedo::Solid([0.25, 0.7, 0.3]),
                    },
                    ScenePrimitive {
                        kind: PrimitiveKind::Sphere { radius: 0.42 },
                        class_id: 2,
                        path: CenterPath::Linear {
                            start: [-0.55, -0.15, 2.7],
                            velocity: [0.08, 0.015, 0.0],
                            bob: [0.0, 0.04, 0.0],
                            period: 8.0,
                        },
                        albedo: Albedo::Waves {
                            base: [0.85, 0.25, 0.2],
                            amp: [0.12, 0.15, 0.1],
                            freq: 6.0,
                        },
                    },
                ];
            }
            "drift" => {
                r.primitives = vec![
                    background([0.35, 0.45, 0.6], [0.2, 0.2, 0.25]),
                    ScenePrimitive {
                        kind: PrimitiveKind::Sphere { radius: 0.3 },
                        class_id: 1,
                        path: CenterPath::Static([-0.6, 0.5, 3.4]),
                        albedo: Albedo::Solid([0.8, 0.75, 0.25]),
                    },
                    ScenePrimitive {
                        kind: PrimitiveKind::Sphere { radius: 0.4 },
                        class_id: 2,
                        path: CenterPath::Linear {
                            start: [0.35, -0.45, 2.8],
                            velocity: [-0.03, 0.07, 0.0],
                            bob: [0.03, 0.0, 0.0],
                            period: 10.0,
                        },
                        albedo: Albedo::Waves {
                            base: [0.6, 0.3, 0.75],
                            amp: [0.15, 0.1, 0.15],
                            freq: 6.0,
                        },
                    },
                ];
            }
            "plane" => {
                r.primitives = vec![background([0.5, 0.5, 0.5], [0.3, 0.25, 0.2])];
                r.fg_classes = Vec::new();
            }
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown recipe {other:?} (expected one of {:?})",
                    Self::NAMES
                )))
            }
        }
        Ok(r)
    }

    pub fn poses(&self) -> Vec<CameraPose<f64>> {
        let (cx, cy) = (self.width as f64 / 2.0, self.height as f64 / 2.0);
        (0..self.n)
            .map(|i| {
                let s = if self.n > 1 {
                    i as f64 / (self.n - 1) as f64
                } else {
                    0.0
                };
                let x = self.rig.x_start + s * (self.rig.x_end - self.rig.x_start);
                CameraPose::looking_forward([x, 0.0, 0.0], self.rig.focal, cx, cy)
            })
            .collect()
    }

    fn validate(&self, poses: &[CameraPose<f64>]) -> Result<()> {
        if self.n < 2 {
            return Err(Error::DegenerateRecipe(format!(
                "{} frames (need at least 2)",
                self.n
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::DegenerateRecipe("empty image".into()));
        }
        if self.classes < 2 || self.classes > 256 {
            return Err(Error::DegenerateRecipe(format!("{} classes", self.classes)));
        }
        if self.primitives.is_empty() {
            return Err(Error::DegenerateRecipe("no primitives".into()));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::DegenerateRecipe("near/far range".into()));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            if usize::from(p.class_id) >= self.classes {
                return Err(Error::DegenerateRecipe(format!(
                    "primitive {i} has class {} with only {} classes",
                    p.class_id, self.classes
                )));
            }
            let visible = poses.iter().enumerate().any(|(f, pose)| match p.kind {
                PrimitiveKind::Sphere { radius } => {
                    pose.to_camera(p.path.at(f as f64 + 1.0))[2] > -radius
                }
                PrimitiveKind::Plane { .. } => {
                    let cc = pose.cast::<f64>();
                    p.intersect(cc.center(), cc.ray_direction(cc.cx, cc.cy), f as f64 + 1.0)
                        .is_some()
                }
            });
            if !visible {
                return Err(Error::DegenerateRecipe(format!(
                    "primitive {i} is behind every camera"
                )));
            }
        }
        for &c in &self.fg_classes {
            if usize::from(c) >= self.classes {
                return Err(Error::DegenerateRecipe(format!(
                    "foreground class {c} out of range"
                )));
            }
        }
        Ok(())
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

/// Nearest primitive hit along a ray at frame time `t`: `(index, distance)`.
pub(crate) fn nearest_hit(
    prims: &[ScenePrimitive],
    origin: [f64; 3],
    dir: [f64; 3],
    t: f64,
) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in prims.iter().enumerate() {
        if let Some(s) = p.intersect(origin, dir, t) {
            if best.is_none_or(|(_, b)| s < b) {
                best = Some((i, s));
            }
        }
    }
    best
}

/// Renders every ground-truth map of `recipe`. The seed drives a small
/// per-primitive colour jitter so different seeds give different scenes.
pub fn generate_scene(recipe: &SceneRecipe, seed: u64) -> Result<SyntheticScene> {
    let poses = recipe.poses();
    recipe.validate(&poses)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prims = recipe.primitives.clone();
    for p in &mut prims {
        let j: [f64; 3] = [0; 3].map(|_| rng.gen_range(-1.0..=1.0) * recipe.color_jitter);
        p.albedo = match p.albedo {
            Albedo::Solid(c) => Albedo::Solid([0, 1, 2].map(|k| c[k] + j[k])),
            Albedo::Waves { base, amp, freq } => Albedo::Waves {
                base: [0, 1, 2].map(|k| base[k] + j[k]),
                amp,
                freq,
            },
        };
    }

    let (w, h, n) = (recipe.width, recipe.height, recipe.n);
    let mut scene = SyntheticScene {
        recipe: recipe.name.clone(),
        seed,
        n,
        width: w,
        height: h,
        classes: recipe.classes,
        fg_classes: recipe.fg_classes.clone(),
        near: recipe.near,
        far: recipe.far,
        poses: poses.clone(),
        frames: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        depth: Vec::with_capacity(n),
        flow_fwd: Vec::with_capacity(n),
        flow_bwd: Vec::with_capacity(n),
        foreground: Vec::new(),
    };

    for f in 0..n {
        let t = f as f64 + 1.0;
        let pose = &poses[f];
        let mut rgb = vec![0.0f32; w * h * 3];
        let mut labels = vec![0u8; w * h];
        let mut depth = vec![0.0f32; w * h];
        let mut fwd = vec![0.0f32; w * h * 2];
        let mut bwd = vec![0.0f32; w * h * 2];
        for row in 0..h {
            for col in 0..w {
                let px = row * w + col;
                let (u, v) = (col as f64 + 0.5, row as f64 + 0.5);
                let dir = pose.ray_direction(u, v);
                let origin = pose.center();
                let Some((pi, s)) = nearest_hit(&prims, origin, dir, t) else {
                    continue;
                };
                let prim = &prims[pi];
                let x = [0, 1, 2].map(|k| origin[k] + s * dir[k]);
                let c = prim.path.at(t);
                let mut color = prim.albedo.at(sub(x, c));
                if let PrimitiveKind::Sphere { .. } = prim.kind {
                    let shade = 0.55 + 0.45 * dot(prim.normal_at(x, t), recipe.light).max(0.0);
                    color = color.map(|ch| ch * shade);
                }
                for k in 0..3 {
                    rgb[3 * px + k] = quantize(color[k]);
                }
                labels[px] = prim.class_id;
                depth[px] = s as f32;
                for (target, out) in [(f + 1, &mut fwd), (f.wrapping_sub(1), &mut bwd)] {
                    if target >= n {
                        continue;
                    }
                    let moved = prim.path.at(target as f64 + 1.0);
                    let y = [0, 1, 2].map(|k| x[k] + moved[k] - c[k]);
                    let (u2, v2, z2) = poses[target].project(y);
                    if z2 > 0.0 {
                        out[2 * px] = (u2 - u) as f32;
                        out[2 * px + 1] = (v2 - v) as f32;
                    }
                }
            }
        }
        scene.frames.push(rgb);
        scene.labels.push(labels);
        scene.depth.push(depth);
        scene.flow_fwd.push(fwd);
        scene.flow_bwd.push(bwd);
    }
    scene.refresh_foreground();
    Ok(scene)
}
