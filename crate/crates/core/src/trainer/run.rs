use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    loss_l1, loss_rgb, loss_semantic, weighted_total, LossTerms, LossWeights, TrainConfig, TERMS,
};
use crate::diffcore::{collect_grads, AdamState, Graph, Var};
use crate::error::{Error, Result};
use crate::evalkit::{load_model, save_model};
use crate::model::{
    encode_scene, forward, sample_pixels, ForwardOptions, ModelBound, ModelConfig, Rays,
    SceneInput, SemanticFlowModel, STATIC_BLOCKS,
};
use crate::scalar::Scalar;
use crate::scene_synth::SyntheticScene;

pub const LOG_HEADER: &str =
    "step,st_rgb,dy_rgb,full_rgb,opt,full_sem,dy_sem,st_sem,consist,depth,total,wall_ms";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Static field only, background pixels.
    Static,
    /// Both fields, all pixels.
    Dynamic,
}

/// Rays of one scene plus their reference values.
#[derive(Clone, Debug)]
pub struct Batch {
    pub rays: Rays,
    /// `[R, 3]`.
    pub rgb: Vec<f64>,
    pub labels: Vec<u8>,
    /// Ray comes from a frame whose labels are visible.
    pub labeled: Vec<bool>,
    pub foreground: Vec<bool>,
    /// Forward and backward optical flow, `[R, 2]` each.
    pub flow: [Vec<f64>; 2],
    /// Target frame of each flow direction exists.
    pub flow_valid: [Vec<bool>; 2],
    pub depth: Vec<f64>,
    /// Offset of the consistency target frame for labelled foreground rays.
    pub consistency: Vec<Option<isize>>,
}

/// Draws `count` rays. The static phase only admits background pixels;
/// `labeled` marks frames whose labels may be used.
pub fn draw_batch(
    scene: &SyntheticScene,
    input: &SceneInput,
    phase: Phase,
    count: usize,
    labeled: &[bool],
    window: usize,
    rng: &mut impl Rng,
) -> Result<Batch> {
    let (frames, pixels) =
        sample_pixels(rng, count, scene.n, scene.height, scene.width, |f, p| {
            phase == Phase::Dynamic || !scene.foreground[f][p]
        })?;
    Ok(batch_from_pixels(
        scene, input, &frames, &pixels, labeled, window, rng,
    ))
}

/// Batch for explicit `(frame, (row, col))` pixels.
pub fn batch_from_pixels(
    scene: &SyntheticScene,
    input: &SceneInput,
    frames: &[usize],
    pixels: &[(usize, usize)],
    labeled: &[bool],
    window: usize,
    rng: &mut impl Rng,
) -> Batch {
    let count = frames.len();
    let rays = Rays::from_pixels(input, frames, pixels);
    let n = scene.n;
    let mut b = Batch {
        rays,
        rgb: Vec::with_capacity(3 * count),
        labels: Vec::with_capacity(count),
        labeled: Vec::with_capacity(count),
        foreground: Vec::with_capacity(count),
        flow: [Vec::with_capacity(2 * count), Vec::with_capacity(2 * count)],
        flow_valid: [Vec::with_capacity(count), Vec::with_capacity(count)],
        depth: Vec::with_capacity(count),
        consistency: Vec::with_capacity(count),
    };
    for (&f, &(row, col)) in frames.iter().zip(pixels) {
        let p = row * scene.width + col;
        b.rgb.extend(scene.rgb(f, p).map(f64::from));
        b.labels.push(scene.labels[f][p]);
        b.labeled.push(labeled[f]);
        let fg = scene.foreground[f][p];
        b.foreground.push(fg);
        b.flow[0].extend(
            scene.flow_fwd[f][2 * p..2 * p + 2]
                .iter()
                .map(|&v| f64::from(v)),
        );
        b.flow[1].extend(
            scene.flow_bwd[f][2 * p..2 * p + 2]
                .iter()
                .map(|&v| f64::from(v)),
        );
        b.flow_valid[0].push(f + 1 < n);
        b.flow_valid[1].push(f > 0);
        b.depth.push(f64::from(scene.depth[f][p]));
        let offset = if labeled[f] && fg && window >= 1 && n > 1 {
            Some(if f == 0 {
                1
            } else if f + 1 == n {
                -1
            } else if rng.gen::<bool>() {
                1
            } else {
                -1
            })
        } else {
            None
        };
        b.consistency.push(offset);
    }
    b
}

fn rc<T: Scalar>(v: &[f64]) -> Rc<[T]> {
    v.iter().map(|&x| T::lit(x)).collect()
}

fn mask(v: impl Iterator<Item = bool>) -> Option<Rc<[bool]>> {
    Some(v.collect())
}

/// Encodes the scene, renders the batch and returns the weighted objective
/// with the individual terms. Terms with zero weight are not evaluated.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss<T: Scalar>(
    g: &mut Graph<T>,
    b: &ModelBound,
    cfg: &ModelConfig,
    w: &LossWeights,
    scene: &SceneInput,
    batch: &Batch,
    phase: Phase,
    jitter: bool,
    seed: u64,
) -> Result<(Var, [Option<Var>; 9])> {
    let dynamic = phase == Phase::Dynamic;
    let maps = encode_scene(g, b, scene, dynamic)?;
    let consistency =
        (dynamic && w.consist > 0.0 && cfg.window >= 1).then(|| batch.consistency.clone());
    let opts = ForwardOptions {
        jitter,
        seed,
        static_only: !dynamic,
        flow: dynamic && w.opt > 0.0,
        depth: dynamic && w.depth > 0.0,
        consistency,
    };
    let out = forward(g, b, cfg, scene, &maps, &batch.rays, &opts)?;
    let rgb: Rc<[T]> = rc(&batch.rgb);
    let labeled = || batch.labeled.iter().copied();
    let fg = || batch.foreground.iter().copied();
    let mut terms: [Option<Var>; 9] = [None; 9];

    let bg_mask = if dynamic {
        mask(fg().map(|f| !f))
    } else {
        None
    };
    terms[0] = Some(loss_rgb(g, out.rgb_st, rgb.clone(), bg_mask)?);
    terms[6] = Some(loss_semantic(
        g,
        out.sem_st,
        &batch.labels,
        mask(labeled().zip(fg()).map(|(l, f)| l && !f)),
    )?);
    if let Some(d) = &out.dynamic {
        terms[1] = Some(loss_rgb(g, d.rgb_dy, rgb.clone(), None)?);
        terms[2] = Some(loss_rgb(g, d.rgb_full, rgb, None)?);
        if let Some([fwd, bwd]) = d.flow {
            let pred = g.interleave_rows(&[fwd, bwd]);
            let mut gt = Vec::with_capacity(4 * batch.rays.len());
            let mut valid = Vec::with_capacity(2 * batch.rays.len());
            for i in 0..batch.rays.len() {
                for dir in 0..2 {
                    gt.extend_from_slice(&batch.flow[dir][2 * i..2 * i + 2]);
                    valid.push(batch.flow_valid[dir][i]);
                }
            }
            terms[3] = Some(loss_l1(g, pred, rc(&gt), Some(valid.into()))?);
        }
        terms[4] = Some(loss_semantic(
            g,
            d.sem_full,
            &batch.labels,
            mask(labeled()),
        )?);
        terms[5] = Some(loss_semantic(
            g,
            d.sem_dy,
            &batch.labels,
            mask(labeled().zip(fg()).map(|(l, f)| l && f)),
        )?);
        if let Some((sem, sel)) = &d.consistency {
            let labels: Vec<u8> = sel.iter().map(|&i| batch.labels[i]).collect();
            terms[7] = Some(loss_semantic(g, *sem, &labels, None)?);
        }
        if let Some(depth) = d.depth_full {
            terms[8] = Some(loss_l1(g, depth, rc(&batch.depth), None)?);
        }
    }
    let total = weighted_total(g, &terms, w)?;
    Ok((total, terms))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub terms: LossTerms,
    pub total: f64,
    /// Milliseconds since training started.
    pub wall_ms: f64,
}

impl LogRow {
    pub fn csv(&self) -> String {
        let mut s = self.step.to_string();
        for v in self.terms.iter().chain([&self.total]) {
            s.push(',');
            s.push_str(&v.to_string());
        }
        s.push_str(&format!(",{:.3}", self.wall_ms));
        s
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::Malformed {
            path: PathBuf::from("train_log.csv"),
            reason: format!("bad log line {line:?}"),
        };
        let cols: Vec<&str> = line.trim().split(',').collect();
        if cols.len() != 12 {
            return Err(bad());
        }
        let step = cols[0].parse().map_err(|_| bad())?;
        let vals: Vec<f64> = cols[1..]
            .iter()
            .map(|c| c.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let mut terms = [0.0; 9];
        terms.copy_from_slice(&vals[..9]);
        Ok(Self {
            step,
            terms,
            total: vals[9],
            wall_ms: vals[10],
        })
    }
}

pub struct TrainOutcome<T> {
    pub model: SemanticFlowModel<T>,
    pub log: Vec<LogRow>,
}

/// Where a run writes its log and checkpoints.
#[derive(Clone, Copy, Debug)]
pub struct TrainOutput<'a> {
    pub dir: &'a Path,
    /// Dataset directories recorded in the checkpoint sidecar.
    pub data: &'a [PathBuf],
}

struct LogFile {
    path: PathBuf,
    w: BufWriter<File>,
}

impl LogFile {
    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.w, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.w.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn trainable(phase: Phase, freeze_static: bool) -> [bool; 7] {
    let mut t = [false; 7];
    for (i, f) in t.iter_mut().enumerate() {
        let is_static = STATIC_BLOCKS.contains(&i);
        *f = match phase {
            Phase::Static => is_static,
            Phase::Dynamic => !(freeze_static && is_static),
        };
    }
    t
}

/// Two-phase optimisation over one or more scenes. With several scenes the
/// ray budget is split evenly and the per-scene objectives are averaged.
pub fn run_training<T: Scalar>(
    scenes: &[SyntheticScene],
    cfg: &TrainConfig,
    out: Option<TrainOutput<'_>>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("no training scene".into()));
    }
    let mut model = match &cfg.init {
        Some(p) => load_model::<T>(p)?.model,
        None => SemanticFlowModel::new(cfg.model.clone(), cfg.seed)?,
    };
    let mcfg = model.config.clone();
    for s in scenes {
        if s.classes != mcfg.classes {
            return Err(Error::Config(format!(
                "scene {} has {} classes, model has {}",
                s.recipe, s.classes, mcfg.classes
            )));
        }
    }
    let k = scenes.len();
    if cfg.batch_rays < k {
        return Err(Error::Config(format!(
            "batch_rays {} below scene count {k}",
            cfg.batch_rays
        )));
    }
    let inputs: Vec<SceneInput> = scenes.iter().map(SceneInput::from_scene).collect();
    let labeled: Vec<Vec<bool>> = scenes
        .iter()
        .map(|s| cfg.label_schedule.mask(s.n))
        .collect();

    let mut log_file = match out {
        Some(o) => {
            std::fs::create_dir_all(o.dir).map_err(|e| Error::io(o.dir, e))?;
            let path = o.dir.join("train_log.csv");
            let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut lf = LogFile {
                path,
                w: BufWriter::new(f),
            };
            lf.line(LOG_HEADER)?;
            Some(lf)
        }
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(
        T::lit(cfg.lr),
        T::lit(cfg.betas.0),
        T::lit(cfg.betas.1),
        T::lit(1e-8),
    );
    let mut log = Vec::new();
    let start = Instant::now();
    let total_steps = cfg.static_steps + cfg.dynamic_steps;
    let share = T::lit(1.0 / k as f64);

    for step in 0..total_steps {
        let phase = if step < cfg.static_steps {
            Phase::Static
        } else {
            Phase::Dynamic
        };
        let flags = trainable(phase, cfg.freeze_static);
        let mut g = Graph::new();
        let bound = model.bind(&mut g, &flags);
        let mut objective: Option<Var> = None;
        let mut terms = [0.0; 9];
        for (si, scene) in scenes.iter().enumerate() {
            let count = cfg.batch_rays / k + usize::from(si < cfg.batch_rays % k);
            let batch = draw_batch(
                scene,
                &inputs[si],
                phase,
                count,
                &labeled[si],
                mcfg.window,
                &mut rng,
            )?;
            let seed = rng.gen();
            let (total, parts) = batch_loss(
                &mut g,
                &bound,
                &mcfg,
                &cfg.weights,
                &inputs[si],
                &batch,
                phase,
                cfg.jitter,
                seed,
            )?;
            for (acc, p) in terms.iter_mut().zip(parts) {
                if let Some(v) = p {
                    *acc += g.scalar(v).as_f64() / k as f64;
                }
            }
            let scaled = g.scale(total, share);
            objective = Some(match objective {
                Some(o) => g.add(o, scaled),
                None => scaled,
            });
        }
        let objective = objective.expect("at least one scene");
        let total = g.scalar(objective).as_f64();

        let bad = TERMS
            .iter()
            .zip(terms)
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n.to_string())
            .or_else(|| (!total.is_finite()).then(|| "total".to_string()));
        if let Some(term) = bad {
            return Err(diverged(&model, &mut log_file, out, step, term));
        }

        let grads = g.backward(objective);
        for ((block, bb), &f) in model.blocks.iter_mut().zip(bound.all()).zip(&flags) {
            if f {
                collect_grads(&grads, bb, block);
            } else {
                block.zero_grad();
            }
        }
        drop(grads);
        drop(g);
        let mut refs: Vec<_> = model.blocks.iter_mut().collect();
        if let Err(e) = crate::diffcore::adam_step(&mut adam, &mut refs) {
            return Err(match e {
                Error::NonFinite(what) => diverged(&model, &mut log_file, out, step, what),
                other => other,
            });
        }
        for b in model.blocks.iter_mut() {
            b.zero_grad();
        }

        let row = LogRow {
            step,
            terms,
            total,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        if let Some(lf) = log_file.as_mut() {
            lf.line(&row.csv())?;
        }
        log.push(row);
        if let (Some(o), true) = (
            out,
            cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0,
        ) {
            if let Some(lf) = log_file.as_mut() {
                lf.flush()?;
            }
            save_model(
                &o.dir.join(format!("step_{:06}.sfck", step + 1)),
                &model,
                o.data,
            )?;
        }
    }
    if let Some(lf) = log_file.as_mut() {
        lf.flush()?;
    }
    if let Some(o) = out {
        save_model(&o.dir.join("model.sfck"), &model, o.data)?;
    }
    Ok(TrainOutcome { model, log })
}

/// Saves the parameters from before the failing step and builds the error.
fn diverged<T: Scalar>(
    model: &SemanticFlowModel<T>,
    log_file: &mut Option<LogFile>,
    out: Option<TrainOutput<'_>>,
    step: usize,
    term: String,
) -> Error {
    if let Some(lf) = log_file.as_mut() {
        if let Err(e) = lf.flush() {
            return e;
        }
    }
    if let Some(o) = out {
        let path = o.dir.join("last_good.sfck");
        if let Err(e) = save_model(&path, model, o.data) {
            return e;
        }
    }
    Error::Diverged { step, term }
}
