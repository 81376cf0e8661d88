//! Chunked inference, instance removal, evaluation reports and image output.

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::diffcore::{softmax, Graph};
use crate::error::{Error, Result};
use crate::evalkit::metrics::{image_metrics, mean_epe, ConfusionMatrix, PixelMetrics};
use crate::model::{
    forward, render_blend, DetachedScene, ForwardOptions, Rays, SceneInput, SemanticFlowModel,
};
use crate::scalar::Scalar;
use crate::scene_synth::{CameraPose, SyntheticScene};
use crate::trainer::LabelSchedule;

pub const DEFAULT_CHUNK: usize = 1024;

#[derive(Clone, Debug, Default)]
pub struct RenderOptions {
    /// Render only the static field.
    pub static_only: bool,
    /// Also render forward and backward optical flow.
    pub flow: bool,
    /// Classes whose dynamic samples lose their density.
    pub remove: Vec<u8>,
    /// Rays per graph; 0 selects [`DEFAULT_CHUNK`].
    pub chunk: usize,
}

/// Per-ray outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct RayRender {
    pub classes: usize,
    /// `[R, 3]`.
    pub rgb: Vec<f32>,
    /// Softmax of the rendered logits, `[R, L]`.
    pub probs: Vec<f32>,
    /// Argmax of the rendered logits.
    pub labels: Vec<u8>,
    /// Forward and backward flow `[R, 2]`.
    pub flow: Option<[Vec<f32>; 2]>,
}

impl RayRender {
    fn empty(classes: usize, flow: bool) -> Self {
        Self {
            classes,
            rgb: Vec::new(),
            probs: Vec::new(),
            labels: Vec::new(),
            flow: flow.then(|| [Vec::new(), Vec::new()]),
        }
    }
}

fn push_f32<T: Scalar>(dst: &mut Vec<f32>, src: &[T]) {
    dst.extend(src.iter().map(|v| v.as_f32()));
}

/// Renders rays without jitter, `chunk` rays per tape.
pub fn render_rays<T: Scalar>(
    model: &SemanticFlowModel<T>,
    scene: &SceneInput,
    maps: &DetachedScene<T>,
    rays: &Rays,
    opts: &RenderOptions,
) -> Result<RayRender> {
    let cfg = &model.config;
    let l = cfg.classes;
    if let Some(c) = opts.remove.iter().find(|&&c| usize::from(c) >= l) {
        return Err(Error::OutOfRange(format!("class {c} with {l} classes")));
    }
    let chunk = if opts.chunk == 0 {
        DEFAULT_CHUNK
    } else {
        opts.chunk
    };
    let m = cfg.samples;
    let mut out = RayRender::empty(l, opts.flow && !opts.static_only);
    let idx: Vec<usize> = (0..rays.len()).collect();
    for part in idx.chunks(chunk) {
        let sub = rays.subset(part);
        let mut g = Graph::new();
        let b = model.bind(&mut g, &[false; 7]);
        let enc = maps.attach(&mut g);
        let fo = ForwardOptions {
            static_only: opts.static_only,
            flow: opts.flow,
            ..Default::default()
        };
        let r = forward(&mut g, &b, cfg, scene, &enc, &sub, &fo)?;
        let (rgb, sem) = match &r.dynamic {
            None => (r.rgb_st, r.sem_st),
            Some(d) if opts.remove.is_empty() => (d.rgb_full, d.sem_full),
            Some(_) => {
                let mut pts = r.points;
                let mut dp = pts.dynamic.expect("dynamic points");
                let logits = g.value(dp.logits).to_vec();
                let removed: Vec<bool> = logits
                    .chunks(l)
                    .map(|row| opts.remove.contains(&(argmax(row) as u8)))
                    .collect();
                // A removed sample loses its dynamic density and its blend
                // weight, so it renders as the static field alone.
                let zero_removed = |vals: &[T]| -> Vec<T> {
                    vals.iter()
                        .zip(&removed)
                        .map(|(&v, &r)| if r { T::zero() } else { v })
                        .collect()
                };
                let sigma = zero_removed(g.value(dp.sigma));
                let blend = zero_removed(g.value(dp.blend));
                let (rows, cols) = g.dims(dp.blend);
                let sv = g.constant(&[sigma.len()], sigma);
                dp.blend = g.constant(&[rows, cols], blend);
                pts.dynamic = Some(dp);
                let (rgb, sem, _) = render_blend(&mut g, &pts, Some(sv), r.deltas.clone(), m)?;
                (rgb, sem)
            }
        };
        push_f32(&mut out.rgb, g.value(rgb));
        let logits = g.value(sem);
        for row in logits.chunks(l) {
            out.labels.push(argmax(row) as u8);
            push_f32(&mut out.probs, &softmax(row));
        }
        if let (Some(dst), Some(d)) = (out.flow.as_mut(), r.dynamic.as_ref()) {
            let [fwd, bwd] = d.flow.expect("flow requested");
            push_f32(&mut dst[0], g.value(fwd));
            push_f32(&mut dst[1], g.value(bwd));
        }
    }
    if out.rgb.iter().chain(&out.probs).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rendered output".into()));
    }
    Ok(out)
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// A full image from `pose` at time `frame`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRender {
    pub width: usize,
    pub height: usize,
    pub pixels: RayRender,
}

pub fn render_frame<T: Scalar>(
    model: &SemanticFlowModel<T>,
    scene: &SceneInput,
    maps: &DetachedScene<T>,
    pose: &CameraPose<f64>,
    frame: usize,
    opts: &RenderOptions,
) -> Result<FrameRender> {
    if frame >= scene.n {
        return Err(Error::OutOfRange(format!("frame {frame} of {}", scene.n)));
    }
    let mut rays = Rays::default();
    for row in 0..scene.height {
        for col in 0..scene.width {
            rays.push(pose, frame, row, col);
        }
    }
    Ok(FrameRender {
        width: scene.width,
        height: scene.height,
        pixels: render_rays(model, scene, maps, &rays, opts)?,
    })
}

fn save_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `{stem}_rgb.png`, `{stem}_label.png` (class ids) and
/// `{stem}_prob{k}.png` for every class.
pub fn write_frame(dir: &Path, stem: &str, f: &FrameRender) -> Result<()> {
    let (w, h) = (f.width as u32, f.height as u32);
    let path = dir.join(format!("{stem}_rgb.png"));
    RgbImage::from_raw(w, h, f.pixels.rgb.iter().map(|&v| to_byte(v)).collect())
        .expect("rgb buffer")
        .save(&path)
        .map_err(|e| save_err(&path, e))?;
    let path = dir.join(format!("{stem}_label.png"));
    GrayImage::from_raw(w, h, f.pixels.labels.clone())
        .expect("label buffer")
        .save(&path)
        .map_err(|e| save_err(&path, e))?;
    let l = f.pixels.classes;
    for k in 0..l {
        let path = dir.join(format!("{stem}_prob{k}.png"));
        let plane = f
            .pixels
            .probs
            .iter()
            .skip(k)
            .step_by(l)
            .map(|&v| to_byte(v))
            .collect();
        GrayImage::from_raw(w, h, plane)
            .expect("prob buffer")
            .save(&path)
            .map_err(|e| save_err(&path, e))?;
    }
    Ok(())
}

/// Renders every `(pose, frame)` view into `out_dir` as `view_{i:03}_*`.
pub fn render_views<T: Scalar>(
    model: &SemanticFlowModel<T>,
    scene: &SceneInput,
    maps: &DetachedScene<T>,
    views: &[(CameraPose<f64>, usize)],
    out_dir: &Path,
    opts: &RenderOptions,
) -> Result<Vec<FrameRender>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut out = Vec::with_capacity(views.len());
    for (i, (pose, frame)) in views.iter().enumerate() {
        let f = render_frame(model, scene, maps, pose, *frame, opts)?;
        write_frame(out_dir, &format!("view_{:03}", i + 1), &f)?;
        out.push(f);
    }
    Ok(out)
}

/// Render poses: 16 camera values per line as in `poses.txt`, optionally
/// followed by a 1-based frame number (default: the line number, clamped
/// to the video).
pub fn parse_views(
    path: &Path,
    text: &str,
    n_frames: usize,
) -> Result<Vec<(CameraPose<f64>, usize)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let vals: Vec<&str> = line.split_whitespace().collect();
        let (cam, frame) = match vals.len() {
            16 => (vals.join(" "), (i + 1).min(n_frames)),
            17 => {
                let f: usize = vals[16].parse().map_err(|_| {
                    Error::malformed(path, format!("view {}: bad frame {:?}", i + 1, vals[16]))
                })?;
                if f == 0 || f > n_frames {
                    return Err(Error::malformed(
                        path,
                        format!("view {}: frame {f} outside 1..={n_frames}", i + 1),
                    ));
                }
                (vals[..16].join(" "), f)
            }
            k => {
                return Err(Error::malformed(
                    path,
                    format!("view {}: {k} values, expected 16 or 17", i + 1),
                ))
            }
        };
        let pose = crate::scene_synth::parse_poses(path, &cam)?.remove(0);
        out.push((pose, frame - 1));
    }
    Ok(out)
}

/// Metrics of one rendered training view.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameEval {
    /// 1-based frame number.
    pub frame: usize,
    pub labeled: bool,
    pub pixel: PixelMetrics,
    pub psnr: f64,
    pub ssim: f64,
    /// Mean flow end-point error over foreground pixels.
    pub epe: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub frames: usize,
    /// From the pooled confusion matrix.
    pub pixel: PixelMetrics,
    pub psnr: f64,
    pub ssim: f64,
    pub epe: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_frame: Vec<FrameEval>,
    pub all: EvalSummary,
    pub labeled: Option<EvalSummary>,
    pub heldout: Option<EvalSummary>,
}

/// Renders every training view and scores it against the dataset.
/// `split` decides which frames count as labelled.
pub fn evaluate<T: Scalar>(
    model: &SemanticFlowModel<T>,
    data: &SyntheticScene,
    split: LabelSchedule,
) -> Result<EvalReport> {
    let scene = SceneInput::from_scene(data);
    let maps = crate::model::encode_detached(model, &scene)?;
    let mask = split.mask(data.n);
    let l = model.config.classes;
    let opts = RenderOptions {
        flow: true,
        ..Default::default()
    };
    let mut per_frame = Vec::with_capacity(data.n);
    let mut confusion = Vec::with_capacity(data.n);
    for f in 0..data.n {
        let r = render_frame(model, &scene, &maps, &data.poses[f], f, &opts)?;
        let cm = ConfusionMatrix::from_labels(&r.pixels.labels, &data.labels[f], l)?;
        let im = image_metrics(&r.pixels.rgb, &data.frames[f], data.width, data.height)?;
        let epe = match &r.pixels.flow {
            Some([fwd, bwd]) => {
                let mut pred = Vec::new();
                let mut gt = Vec::new();
                let mut sel = Vec::new();
                if f + 1 < data.n {
                    pred.extend_from_slice(fwd);
                    gt.extend_from_slice(&data.flow_fwd[f]);
                    sel.extend_from_slice(&data.foreground[f]);
                }
                if f > 0 {
                    pred.extend_from_slice(bwd);
                    gt.extend_from_slice(&data.flow_bwd[f]);
                    sel.extend_from_slice(&data.foreground[f]);
                }
                mean_epe(&pred, &gt, &sel)?
            }
            None => None,
        };
        per_frame.push(FrameEval {
            frame: f + 1,
            labeled: mask[f],
            pixel: cm.metrics(),
            psnr: im.psnr,
            ssim: im.ssim,
            epe,
        });
        confusion.push(cm);
    }
    let summarize = |keep: &dyn Fn(usize) -> bool| -> Option<EvalSummary> {
        let sel: Vec<usize> = (0..data.n).filter(|&f| keep(f)).collect();
        if sel.is_empty() {
            return None;
        }
        let mut cm = ConfusionMatrix::new(l);
        for &f in &sel {
            cm.merge(&confusion[f]);
        }
        let k = sel.len() as f64;
        let epes: Vec<f64> = sel.iter().filter_map(|&f| per_frame[f].epe).collect();
        Some(EvalSummary {
            frames: sel.len(),
            pixel: cm.metrics(),
            psnr: sel.iter().map(|&f| per_frame[f].psnr).sum::<f64>() / k,
            ssim: sel.iter().map(|&f| per_frame[f].ssim).sum::<f64>() / k,
            epe: (!epes.is_empty()).then(|| epes.iter().sum::<f64>() / epes.len() as f64),
        })
    };
    let all = summarize(&|_| true).expect("scene has frames");
    let labeled = summarize(&|f| mask[f]);
    let heldout = summarize(&|f| !mask[f]);
    Ok(EvalReport {
        per_frame,
        all,
        labeled,
        heldout,
    })
}

impl EvalReport {
    /// CSV with one row per frame followed by `all`, `labeled` and `heldout` rows.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        let mut s = String::from("scope,frames,total_acc,avg_acc,miou,psnr,ssim,epe\n");
        for f in &self.per_frame {
            s.push_str(&format!(
                "frame_{:03},1,{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
                f.frame,
                f.pixel.total_acc,
                f.pixel.avg_acc,
                f.pixel.miou,
                f.psnr,
                f.ssim,
                opt(f.epe)
            ));
        }
        for (name, sum) in [
            ("all", Some(&self.all)),
            ("labeled", self.labeled.as_ref()),
            ("heldout", self.heldout.as_ref()),
        ] {
            if let Some(x) = sum {
                s.push_str(&format!(
                    "{name},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
                    x.frames,
                    x.pixel.total_acc,
                    x.pixel.avg_acc,
                    x.pixel.miou,
                    x.psnr,
                    x.ssim,
                    opt(x.epe)
                ));
            }
        }
        s
    }
}
