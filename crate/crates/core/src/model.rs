//! The assembled field: configuration, parameter blocks and the batched
//! forward pass shared by training, evaluation and editing.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{bind, BoundBlock, Graph, ParamBlock, Var};
use crate::error::{Error, Result};
use crate::feature_agg::{
    assemble_flow_features, encode, pick_static_frame, sample_static_features,
    static_features_from, DispMode, EncoderShape, FeatureMaps, MapGeometry,
};
use crate::flow_field::{
    render_flow_batch, trajectories_from_points, warp_positions, FlowFieldConfig, TrajectoryBatch,
    TrajectoryContext,
};
use crate::renderer::{deltas, ray_integrate, render_coefficients, sample_depths};
use crate::scalar::Scalar;
use crate::scene_synth::{CameraPose, SyntheticScene};
use crate::semantic_heads::{
    flow_semantic_logits, geo_forward, static_semantic_logits, Branch, FlowHeadShape, GeoShape,
    StaticHeadShape,
};

/// Block names in checkpoint and binding order.
pub const BLOCK_NAMES: [&str; 7] = [
    "e_st", "e_dy", "psi_st", "st_sem", "psi_geo", "psi_flow", "heads",
];
/// Indices of the static-field blocks.
pub const STATIC_BLOCKS: [usize; 3] = [0, 2, 3];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub classes: usize,
    /// Fused image feature width `D`.
    pub feature_width: usize,
    pub encoder_channels: usize,
    pub mlp_width: usize,
    pub mlp_blocks: usize,
    pub sem_hidden: usize,
    /// Attention channels `C`.
    pub attn_channels: usize,
    pub heads: usize,
    /// Samples per ray `M`.
    pub samples: usize,
    pub pos_freqs: usize,
    pub time_freqs: usize,
    pub disp_freqs: usize,
    /// Trajectory half-width `W`.
    pub window: usize,
    pub max_step: f64,
    pub disp_mode: DispMode,
    pub attention: bool,
    pub normalize_flow: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            feature_width: 32,
            encoder_channels: 32,
            mlp_width: 128,
            mlp_blocks: 4,
            sem_hidden: 128,
            attn_channels: 64,
            heads: 4,
            samples: 64,
            pos_freqs: 10,
            time_freqs: 4,
            disp_freqs: 4,
            window: 1,
            max_step: 0.1,
            disp_mode: DispMode::Delta,
            attention: true,
            normalize_flow: true,
        }
    }
}

impl ModelConfig {
    /// Reduced widths and sample count sized for single-core training runs.
    pub fn compact() -> Self {
        Self {
            feature_width: 16,
            encoder_channels: 12,
            mlp_width: 48,
            mlp_blocks: 1,
            sem_hidden: 32,
            attn_channels: 16,
            heads: 4,
            samples: 16,
            pos_freqs: 6,
            time_freqs: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("classes", self.classes),
            ("feature_width", self.feature_width),
            ("encoder_channels", self.encoder_channels),
            ("mlp_width", self.mlp_width),
            ("sem_hidden", self.sem_hidden),
            ("attn_channels", self.attn_channels),
            ("heads", self.heads),
            ("samples", self.samples),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if !self.attn_channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "attn_channels {} not divisible by heads {}",
                self.attn_channels, self.heads
            )));
        }
        if !(self.max_step > 0.0 && self.max_step.is_finite()) {
            return Err(Error::Config(format!(
                "max_step {} must be positive",
                self.max_step
            )));
        }
        Ok(())
    }

    pub fn encoder(&self) -> EncoderShape {
        EncoderShape::new(self.encoder_channels, self.feature_width)
    }

    fn pos_width(&self) -> usize {
        3 * (2 * self.pos_freqs + 1)
    }

    pub fn static_geo(&self) -> GeoShape {
        GeoShape {
            input: self.feature_width + self.pos_width(),
            width: self.mlp_width,
            blocks: self.mlp_blocks,
            branch: Branch::Static,
        }
    }

    pub fn static_head(&self) -> StaticHeadShape {
        StaticHeadShape {
            input: self.feature_width + self.pos_width(),
            hidden: self.sem_hidden,
            classes: self.classes,
        }
    }

    pub fn flow_field(&self, n_frames: usize, bounds: ([f64; 3], [f64; 3])) -> FlowFieldConfig {
        FlowFieldConfig {
            width: self.mlp_width,
            blocks: self.mlp_blocks,
            max_step: self.max_step,
            pos_freqs: self.pos_freqs,
            time_freqs: self.time_freqs,
            n_frames,
            bounds,
        }
    }

    pub fn dynamic_geo(&self) -> GeoShape {
        GeoShape {
            input: self
                .flow_field(1, ([0.0; 3], [0.0; 3]))
                .input_width(self.feature_width),
            width: self.mlp_width,
            blocks: self.mlp_blocks,
            branch: Branch::Dynamic,
        }
    }

    pub fn flow_head(&self) -> FlowHeadShape {
        FlowHeadShape {
            input: self.feature_width + self.disp_mode.width(self.disp_freqs, self.pos_freqs),
            channels: self.attn_channels,
            heads: self.heads,
            hidden: self.sem_hidden,
            classes: self.classes,
        }
    }

    /// `key=value` lines understood by [`ModelConfig::set`].
    pub fn to_key_values(&self) -> String {
        format!(
            "classes={}\nfeature_width={}\nencoder_channels={}\nmlp_width={}\nmlp_blocks={}\nsem_hidden={}\n\
             attn_channels={}\nheads={}\nsamples={}\npos_freqs={}\ntime_freqs={}\ndisp_freqs={}\nwindow={}\n\
             max_step={}\ndisp_mode={}\nattention={}\nnormalize_flow={}\n",
            self.classes,
            self.feature_width,
            self.encoder_channels,
            self.mlp_width,
            self.mlp_blocks,
            self.sem_hidden,
            self.attn_channels,
            self.heads,
            self.samples,
            self.pos_freqs,
            self.time_freqs,
            self.disp_freqs,
            self.window,
            self.max_step,
            self.disp_mode.as_str(),
            self.attention,
            self.normalize_flow,
        )
    }

    /// Applies one `key=value` setting; returns `false` for keys this type does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "classes" => self.classes = num(key, value)?,
            "feature_width" => self.feature_width = num(key, value)?,
            "encoder_channels" => self.encoder_channels = num(key, value)?,
            "mlp_width" => self.mlp_width = num(key, value)?,
            "mlp_blocks" => self.mlp_blocks = num(key, value)?,
            "sem_hidden" => self.sem_hidden = num(key, value)?,
            "attn_channels" => self.attn_channels = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "samples" => self.samples = num(key, value)?,
            "pos_freqs" => self.pos_freqs = num(key, value)?,
            "time_freqs" => self.time_freqs = num(key, value)?,
            "disp_freqs" => self.disp_freqs = num(key, value)?,
            "window" => self.window = num(key, value)?,
            "max_step" => self.max_step = num(key, value)?,
            "disp_mode" => self.disp_mode = DispMode::parse(value)?,
            "attention" => self.attention = num(key, value)?,
            "normalize_flow" => self.normalize_flow = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_key_values(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in pairs {
            if !c.set(k, v)? {
                return Err(Error::Config(format!("unknown model key {k:?}")));
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Configuration plus the seven parameter blocks in [`BLOCK_NAMES`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticFlowModel<T> {
    pub config: ModelConfig,
    pub blocks: Vec<ParamBlock<T>>,
}

impl<T: Scalar> SemanticFlowModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = config.encoder();
        let blocks = vec![
            enc.init("e_st", &mut rng)?,
            enc.init("e_dy", &mut rng)?,
            config.static_geo().init("psi_st", &mut rng)?,
            config.static_head().init("st_sem", &mut rng)?,
            config.dynamic_geo().init("psi_geo", &mut rng)?,
            config
                .flow_field(1, ([0.0; 3], [0.0; 3]))
                .init(config.feature_width, &mut rng)?,
            config.flow_head().init("heads", &mut rng)?,
        ];
        let blocks = blocks
            .into_iter()
            .zip(BLOCK_NAMES)
            .map(|(mut b, name)| {
                b.name = name.to_string();
                b
            })
            .collect();
        Ok(Self { config, blocks })
    }

    pub fn block(&self, name: &str) -> Result<&ParamBlock<T>> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks.iter().map(ParamBlock::num_scalars).sum()
    }

    pub fn cast<U: Scalar>(&self) -> SemanticFlowModel<U> {
        SemanticFlowModel {
            config: self.config.clone(),
            blocks: self.blocks.iter().map(ParamBlock::cast).collect(),
        }
    }

    /// Binds every block; `trainable[i]` selects which blocks receive gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: &[bool; 7]) -> ModelBound {
        ModelBound::from_slice(
            &self
                .blocks
                .iter()
                .zip(trainable)
                .map(|(b, &t)| bind(g, b, t))
                .collect::<Vec<_>>(),
        )
        .expect("seven blocks")
    }
}

/// Tape handles of every block.
#[derive(Clone, Debug)]
pub struct ModelBound {
    pub e_st: BoundBlock,
    pub e_dy: BoundBlock,
    pub psi_st: BoundBlock,
    pub st_sem: BoundBlock,
    pub psi_geo: BoundBlock,
    pub psi_flow: BoundBlock,
    pub heads: BoundBlock,
}

impl ModelBound {
    pub fn from_slice(b: &[BoundBlock]) -> Result<Self> {
        if b.len() != 7 {
            return Err(Error::Shape(format!(
                "{} bound blocks, expected 7",
                b.len()
            )));
        }
        Ok(Self {
            e_st: b[0].clone(),
            e_dy: b[1].clone(),
            psi_st: b[2].clone(),
            st_sem: b[3].clone(),
            psi_geo: b[4].clone(),
            psi_flow: b[5].clone(),
            heads: b[6].clone(),
        })
    }

    pub fn all(&self) -> [&BoundBlock; 7] {
        [
            &self.e_st,
            &self.e_dy,
            &self.psi_st,
            &self.st_sem,
            &self.psi_geo,
            &self.psi_flow,
            &self.heads,
        ]
    }
}

/// Video frames and cameras the field is conditioned on.
#[derive(Clone, Debug)]
pub struct SceneInput {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    /// `[N, H, W, 3]` RGB.
    pub images: Rc<[f32]>,
    pub poses: Rc<[CameraPose<f64>]>,
    pub near: f64,
    pub far: f64,
    /// Box trajectories must stay inside.
    pub bounds: ([f64; 3], [f64; 3]),
}

impl SceneInput {
    pub fn from_scene(s: &SyntheticScene) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &s.poses {
            for (u, v) in [
                (0.0, 0.0),
                (s.width as f64, 0.0),
                (0.0, s.height as f64),
                (s.width as f64, s.height as f64),
            ] {
                let d = p.ray_direction(u, v);
                for dist in [0.0, s.far] {
                    for k in 0..3 {
                        let x = p.center()[k] + dist * d[k];
                        lo[k] = lo[k].min(x);
                        hi[k] = hi[k].max(x);
                    }
                }
            }
        }
        for k in 0..3 {
            lo[k] -= 0.5;
            hi[k] += 0.5;
        }
        Self {
            n: s.n,
            height: s.height,
            width: s.width,
            images: s.frames.concat().into(),
            poses: s.poses.clone().into(),
            near: s.near,
            far: s.far,
            bounds: (lo, hi),
        }
    }
}

/// Rays with explicit origins; the frame selects features and time.
#[derive(Clone, Debug, Default)]
pub struct Rays {
    pub frames: Vec<usize>,
    /// `(row, col)`.
    pub pixels: Vec<(usize, usize)>,
    pub origins: Vec<[f64; 3]>,
    pub directions: Vec<[f64; 3]>,
}

impl Rays {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn push(&mut self, pose: &CameraPose<f64>, frame: usize, row: usize, col: usize) {
        self.frames.push(frame);
        self.pixels.push((row, col));
        self.origins.push(pose.center());
        self.directions
            .push(pose.ray_direction(col as f64 + 0.5, row as f64 + 0.5));
    }

    /// Rays through the given pixels of the scene's own cameras.
    pub fn from_pixels(scene: &SceneInput, frames: &[usize], pixels: &[(usize, usize)]) -> Self {
        let mut r = Self::default();
        for (&f, &(row, col)) in frames.iter().zip(pixels) {
            r.push(&scene.poses[f], f, row, col);
        }
        r
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            frames: idx.iter().map(|&i| self.frames[i]).collect(),
            pixels: idx.iter().map(|&i| self.pixels[i]).collect(),
            origins: idx.iter().map(|&i| self.origins[i]).collect(),
            directions: idx.iter().map(|&i| self.directions[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    pub jitter: bool,
    /// Seeds depth jitter and static source-frame choice.
    pub seed: u64,
    /// Evaluate only the static field.
    pub static_only: bool,
    /// Render optical flow of the dynamic field.
    pub flow: bool,
    /// Render expected depth of the blended field.
    pub depth: bool,
    /// Per-ray target offset for the semantic-consistency re-rendering.
    pub consistency: Option<Vec<Option<isize>>>,
}

/// Per-point field values (`P = rays * M`).
#[derive(Clone, Copy, Debug)]
pub struct PointFields {
    pub sigma_st: Var,
    pub color_st: Var,
    pub logits_st: Var,
    pub dynamic: Option<DynamicPoints>,
}

#[derive(Clone, Copy, Debug)]
pub struct DynamicPoints {
    pub sigma: Var,
    pub color: Var,
    pub blend: Var,
    pub logits: Var,
}

/// Dynamic, blended and auxiliary renders.
#[derive(Clone, Debug)]
pub struct DynamicRender {
    pub rgb_dy: Var,
    pub sem_dy: Var,
    pub rgb_full: Var,
    pub sem_full: Var,
    pub depth_full: Option<Var>,
    /// Forward and backward optical flow `[R, 2]`.
    pub flow: Option<[Var; 2]>,
    /// Re-rendered dynamic logits of the selected rays and their indices.
    pub consistency: Option<(Var, Vec<usize>)>,
}

#[derive(Clone, Debug)]
pub struct Rendered {
    pub rgb_st: Var,
    pub sem_st: Var,
    pub dynamic: Option<DynamicRender>,
    pub points: PointFields,
    /// Sample distances, `M` per ray.
    pub depths: Vec<f64>,
    pub deltas: Rc<[f64]>,
}

/// Static and dynamic encoder outputs for every frame.
pub struct EncodedScene {
    pub st: FeatureMaps,
    pub dy: Option<FeatureMaps>,
}

pub fn encode_scene<T: Scalar>(
    g: &mut Graph<T>,
    b: &ModelBound,
    scene: &SceneInput,
    dynamic: bool,
) -> Result<EncodedScene> {
    let img = g.constant(
        &[scene.n * scene.height * scene.width, 3],
        scene.images.iter().map(|&v| T::lit(f64::from(v))).collect(),
    );
    let st = encode(g, &b.e_st, img, scene.n, scene.height, scene.width, 3)?;
    let dy = if dynamic {
        Some(encode(
            g,
            &b.e_dy,
            img,
            scene.n,
            scene.height,
            scene.width,
            3,
        )?)
    } else {
        None
    };
    Ok(EncodedScene { st, dy })
}

/// Encoder outputs copied off their tape so several graphs can share them.
#[derive(Clone, Debug)]
pub struct DetachedScene<T> {
    st: Vec<(Vec<usize>, Vec<T>, MapGeometry)>,
    dy: Option<Vec<(Vec<usize>, Vec<T>, MapGeometry)>>,
}

impl EncodedScene {
    pub fn detach<T: Scalar>(&self, g: &Graph<T>) -> DetachedScene<T> {
        let copy = |m: &FeatureMaps| {
            m.levels
                .iter()
                .map(|&(v, geo)| (g.shape(v).to_vec(), g.value(v).to_vec(), geo))
                .collect()
        };
        DetachedScene {
            st: copy(&self.st),
            dy: self.dy.as_ref().map(copy),
        }
    }
}

impl<T: Scalar> DetachedScene<T> {
    /// Re-enters the maps into `g` as constants.
    pub fn attach(&self, g: &mut Graph<T>) -> EncodedScene {
        let mut put = |levels: &[(Vec<usize>, Vec<T>, MapGeometry)]| FeatureMaps {
            levels: levels
                .iter()
                .map(|(shape, data, geo)| (g.constant(shape, data.clone()), *geo))
                .collect(),
        };
        EncodedScene {
            st: put(&self.st),
            dy: self.dy.as_deref().map(put),
        }
    }
}

/// Runs both encoders with frozen parameters.
pub fn encode_detached<T: Scalar>(
    model: &SemanticFlowModel<T>,
    scene: &SceneInput,
) -> Result<DetachedScene<T>> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, &[false; 7]);
    Ok(encode_scene(&mut g, &b, scene, true)?.detach(&g))
}

struct DynamicEval {
    sigma: Var,
    color: Var,
    blend: Var,
    logits: Var,
    traj: TrajectoryBatch,
}

fn dynamic_points<T: Scalar>(
    g: &mut Graph<T>,
    b: &ModelBound,
    cfg: &ModelConfig,
    scene: &SceneInput,
    maps: &FeatureMaps,
    x: Var,
    anchors: Rc<[usize]>,
) -> Result<DynamicEval> {
    let p = anchors.len();
    let fcfg = cfg.flow_field(scene.n, scene.bounds);
    let ctx = TrajectoryContext {
        cfg: &fcfg,
        psi_flow: &b.psi_flow,
        e_dy: &b.e_dy,
        maps,
        poses: scene.poses.clone(),
    };
    let (traj, input) = trajectories_from_points(g, &ctx, x, anchors, cfg.window)?;
    let geo = geo_forward(g, &b.psi_geo, &cfg.dynamic_geo(), input)?;
    let (f, mask) = assemble_flow_features(g, &traj, cfg.disp_mode, cfg.disp_freqs, cfg.pos_freqs)?;
    let logits = flow_semantic_logits(
        g,
        &b.heads,
        &cfg.flow_head(),
        f,
        2 * cfg.window + 1,
        Some(mask),
        cfg.attention,
    )?;
    Ok(DynamicEval {
        sigma: g.reshape(geo.sigma, &[p]),
        color: geo.color,
        blend: g.reshape(geo.blend.expect("dynamic branch"), &[p]),
        logits,
        traj,
    })
}

/// Single-field render: `(rgb, logits, weights)`.
pub fn render_field<T: Scalar>(
    g: &mut Graph<T>,
    sigma: Var,
    color: Var,
    logits: Var,
    deltas: Rc<[f64]>,
    m: usize,
) -> (Var, Var, Var) {
    let coef = render_coefficients(g, sigma, deltas, m);
    let w = g.mul(coef, sigma);
    (
        ray_integrate(g, w, color, m),
        ray_integrate(g, w, logits, m),
        w,
    )
}

/// Blended render of both fields: `(rgb, logits, weights)`. `sigma_dy`
/// replaces the dynamic density when given (used by editing).
pub fn render_blend<T: Scalar>(
    g: &mut Graph<T>,
    pts: &PointFields,
    sigma_dy: Option<Var>,
    deltas: Rc<[f64]>,
    m: usize,
) -> Result<(Var, Var, Var)> {
    let d = pts
        .dynamic
        .ok_or_else(|| Error::InvalidArgument("blended render needs the dynamic field".into()))?;
    let sdy = sigma_dy.unwrap_or(d.sigma);
    let keep = g.one_minus(d.blend);
    let a_st = g.mul(keep, pts.sigma_st);
    let a_dy = g.mul(d.blend, sdy);
    let full = g.add(a_st, a_dy);
    let coef = render_coefficients(g, full, deltas, m);
    let w_st = g.mul(coef, a_st);
    let w_dy = g.mul(coef, a_dy);
    let c1 = ray_integrate(g, w_st, pts.color_st, m);
    let c2 = ray_integrate(g, w_dy, d.color, m);
    let s1 = ray_integrate(g, w_st, pts.logits_st, m);
    let s2 = ray_integrate(g, w_dy, d.logits, m);
    let w = g.add(w_st, w_dy);
    Ok((g.add(c1, c2), g.add(s1, s2), w))
}

/// Evaluates and renders a batch of rays.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &ModelBound,
    cfg: &ModelConfig,
    scene: &SceneInput,
    maps: &EncodedScene,
    rays: &Rays,
    opts: &ForwardOptions,
) -> Result<Rendered> {
    let r = rays.len();
    let m = cfg.samples;
    if r == 0 {
        return Err(Error::InvalidArgument("empty ray batch".into()));
    }
    if let Some(f) = rays.frames.iter().find(|&&f| f >= scene.n) {
        return Err(Error::OutOfRange(format!("ray frame {f} of {}", scene.n)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let last = (scene.far - scene.near) / m as f64;
    let mut depths = Vec::with_capacity(r * m);
    let mut dl = Vec::with_capacity(r * m);
    let mut pts = Vec::with_capacity(r * m * 3);
    let mut anchors = Vec::with_capacity(r * m);
    for i in 0..r {
        let d = sample_depths(scene.near, scene.far, m, opts.jitter, &mut rng);
        dl.extend(deltas(&d, last));
        for &u in &d {
            for k in 0..3 {
                pts.push(T::lit(rays.origins[i][k] + u * rays.directions[i][k]));
            }
            anchors.push(rays.frames[i]);
        }
        depths.extend(d);
    }
    let p = r * m;
    let dl: Rc<[f64]> = dl.into();
    let x = g.constant(&[p, 3], pts.clone());

    let (feat, _) = if opts.jitter {
        sample_static_features(g, &b.e_st, &maps.st, &pts, &anchors, &scene.poses, &mut rng)?
    } else {
        // Without jitter every ray draws its source frames from its own
        // stream so results do not depend on the batch a ray lands in.
        let mut chosen = Vec::with_capacity(p);
        for i in 0..r {
            let (row, col) = rays.pixels[i];
            let key = [rays.frames[i] as u64, row as u64, col as u64]
                .iter()
                .fold(opts.seed, |h, &v| {
                    (h ^ v).wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(29)
                });
            let mut ray_rng = ChaCha8Rng::seed_from_u64(key);
            for j in 0..m {
                let q = i * m + j;
                let x = [0, 1, 2].map(|k| pts[3 * q + k].as_f64());
                chosen.push(pick_static_frame(
                    x,
                    rays.frames[i],
                    &scene.poses,
                    &mut ray_rng,
                )?);
            }
        }
        static_features_from(g, &b.e_st, &maps.st, &pts, chosen, &scene.poses)?
    };
    let xe = g.embed(x, cfg.pos_freqs, true);
    let inp = g.concat(&[feat, xe]);
    let geo = geo_forward(g, &b.psi_st, &cfg.static_geo(), inp)?;
    let sigma_st = g.reshape(geo.sigma, &[p]);
    let logits_st = static_semantic_logits(g, &b.st_sem, feat, xe)?;
    let (rgb_st, sem_st, _) = render_field(g, sigma_st, geo.color, logits_st, dl.clone(), m);
    let mut points = PointFields {
        sigma_st,
        color_st: geo.color,
        logits_st,
        dynamic: None,
    };
    if opts.static_only {
        return Ok(Rendered {
            rgb_st,
            sem_st,
            dynamic: None,
            points,
            depths,
            deltas: dl,
        });
    }

    let maps_dy = maps
        .dy
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("dynamic encoder maps missing".into()))?;
    let anchors: Rc<[usize]> = anchors.into();
    let dy = dynamic_points(g, b, cfg, scene, maps_dy, x, anchors.clone())?;
    points.dynamic = Some(DynamicPoints {
        sigma: dy.sigma,
        color: dy.color,
        blend: dy.blend,
        logits: dy.logits,
    });
    let (rgb_dy, sem_dy, _) = render_field(g, dy.sigma, dy.color, dy.logits, dl.clone(), m);
    let (rgb_full, sem_full, w_full) = render_blend(g, &points, None, dl.clone(), m)?;

    let depth_full = if opts.depth {
        let u = g.constant(&[p, 1], depths.iter().map(|&v| T::lit(v)).collect());
        Some(ray_integrate(g, w_full, u, m))
    } else {
        None
    };

    let flow = if opts.flow && cfg.window >= 1 {
        let centres: Vec<[f64; 2]> = rays
            .pixels
            .iter()
            .map(|&(row, col)| [col as f64 + 0.5, row as f64 + 0.5])
            .collect();
        let fwd = render_flow_batch(
            g,
            &dy.traj,
            1,
            dy.sigma,
            dl.clone(),
            &centres,
            m,
            cfg.normalize_flow,
        )?;
        let bwd = render_flow_batch(
            g,
            &dy.traj,
            -1,
            dy.sigma,
            dl.clone(),
            &centres,
            m,
            cfg.normalize_flow,
        )?;
        Some([fwd, bwd])
    } else {
        None
    };

    let consistency = match &opts.consistency {
        Some(offsets) => {
            if offsets.len() != r {
                return Err(Error::Shape(format!(
                    "{} consistency offsets for {r} rays",
                    offsets.len()
                )));
            }
            let selected: Vec<usize> = (0..r).filter(|&i| offsets[i].is_some()).collect();
            if selected.is_empty() {
                None
            } else {
                let per_point: Vec<isize> = (0..p).map(|q| offsets[q / m].unwrap_or(0)).collect();
                let warped = warp_positions(g, &dy.traj, &per_point)?;
                let idx: Vec<usize> = selected.iter().flat_map(|&i| i * m..(i + 1) * m).collect();
                let mut tau = Vec::with_capacity(idx.len());
                for &q in &idx {
                    let t = anchors[q] as isize + per_point[q];
                    if t < 0 || t as usize >= scene.n {
                        return Err(Error::OutOfRange(format!(
                            "consistency frame {t} of {}",
                            scene.n
                        )));
                    }
                    tau.push(t as usize);
                }
                let xt = g.gather_rows(warped, idx.clone().into());
                let dt = dynamic_points(g, b, cfg, scene, maps_dy, xt, tau.into())?;
                let sub: Rc<[f64]> = idx.iter().map(|&q| dl[q]).collect::<Vec<_>>().into();
                let (_, sem, _) = render_field(g, dt.sigma, dt.color, dt.logits, sub, m);
                Some((sem, selected))
            }
        }
        None => None,
    };

    Ok(Rendered {
        rgb_st,
        sem_st,
        dynamic: Some(DynamicRender {
            rgb_dy,
            sem_dy,
            rgb_full,
            sem_full,
            depth_full,
            flow,
            consistency,
        }),
        points,
        depths,
        deltas: dl,
    })
}

/// Random `(frame, pixel)` draws; `filter` restricts the admissible pixels.
pub fn sample_pixels(
    rng: &mut impl Rng,
    count: usize,
    n: usize,
    height: usize,
    width: usize,
    mut filter: impl FnMut(usize, usize) -> bool,
) -> Result<(Vec<usize>, Vec<(usize, usize)>)> {
    let mut frames = Vec::with_capacity(count);
    let mut pixels = Vec::with_capacity(count);
    let limit = 1000 * count.max(1);
    let mut tries = 0;
    while frames.len() < count {
        tries += 1;
        if tries > limit {
            return Err(Error::InvalidArgument(
                "no admissible pixel to sample".into(),
            ));
        }
        let f = rng.gen_range(0..n);
        let px = rng.gen_range(0..height * width);
        if filter(f, px) {
            frames.push(f);
            pixels.push((px / width, px % width));
        }
    }
    Ok((frames, pixels))
}
