//! Loss terms, the weighted objective and the two-phase training loop.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use crate::diffcore::{Graph, Var};
use crate::error::{Error, Result};
use crate::feature_agg::DispMode;
use crate::model::ModelConfig;
use crate::scalar::Scalar;
use crate::scene_synth::parse_key_values;

mod gradcheck;
mod run;

pub use gradcheck::{
    check_config, check_scene, loss_gradcheck, module_checks, CHECK_MODULES, LOSS_GROUPS,
};
pub use run::{
    batch_from_pixels, batch_loss, draw_batch, run_training, Batch, LogRow, Phase, TrainOutcome,
    TrainOutput, LOG_HEADER,
};

/// Loss term names in log and weight order.
pub const TERMS: [&str; 9] = [
    "st_rgb", "dy_rgb", "full_rgb", "opt", "full_sem", "dy_sem", "st_sem", "consist", "depth",
];

/// One value per entry of [`TERMS`].
pub type LossTerms = [f64; 9];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub st_rgb: f64,
    pub dy_rgb: f64,
    pub full_rgb: f64,
    pub opt: f64,
    pub full_sem: f64,
    pub dy_sem: f64,
    pub st_sem: f64,
    pub consist: f64,
    /// L1 on expected ray depth; off by default.
    pub depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            st_rgb: 4.0,
            dy_rgb: 1.0,
            full_rgb: 1.0,
            opt: 0.02,
            full_sem: 0.16,
            dy_sem: 0.08,
            st_sem: 0.08,
            consist: 0.01,
            depth: 0.0,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> LossTerms {
        [
            self.st_rgb,
            self.dy_rgb,
            self.full_rgb,
            self.opt,
            self.full_sem,
            self.dy_sem,
            self.st_sem,
            self.consist,
            self.depth,
        ]
    }

    pub fn from_array(a: LossTerms) -> Self {
        Self {
            st_rgb: a[0],
            dy_rgb: a[1],
            full_rgb: a[2],
            opt: a[3],
            full_sem: a[4],
            dy_sem: a[5],
            st_sem: a[6],
            consist: a[7],
            depth: a[8],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in TERMS.iter().zip(self.as_array()) {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!(
                    "weight a_{name} = {w} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }

    /// Handles `a_<term>=value`; returns `false` for other keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let Some(term) = key.strip_prefix("a_") else {
            return Ok(false);
        };
        let Some(i) = TERMS.iter().position(|t| *t == term) else {
            return Ok(false);
        };
        let v: f64 = value
            .parse()
            .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))?;
        let mut a = self.as_array();
        a[i] = v;
        *self = Self::from_array(a);
        Ok(true)
    }
}

/// Weighted sum of the term values. A non-finite term is reported by name.
pub fn loss_total(terms: &LossTerms, w: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for ((name, &v), a) in TERMS.iter().zip(terms).zip(w.as_array()) {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name}")));
        }
        total += a * v;
    }
    Ok(total)
}

/// Tape version of [`loss_total`]; absent terms count as zero.
pub fn weighted_total<T: Scalar>(
    g: &mut Graph<T>,
    terms: &[Option<Var>; 9],
    w: &LossWeights,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (t, a) in terms.iter().zip(w.as_array()) {
        let Some(t) = *t else { continue };
        if a == 0.0 {
            continue;
        }
        let s = g.scale(t, T::lit(a));
        acc = Some(match acc {
            Some(x) => g.add(x, s),
            None => s,
        });
    }
    Ok(acc.unwrap_or_else(|| g.constant(&[1], vec![T::zero()])))
}

/// Mean squared error over the colour channels of the selected rays.
pub fn loss_rgb<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    gt: Rc<[T]>,
    mask: Option<Rc<[bool]>>,
) -> Result<Var> {
    let (r, c) = g.dims(pred);
    if gt.len() != r * c {
        return Err(Error::Shape(format!(
            "{} colour targets for a [{r}, {c}] render",
            gt.len()
        )));
    }
    Ok(g.mse(pred, gt, mask))
}

/// Cross-entropy of the softmax of rendered logits against class ids,
/// averaged over the selected rays (zero when none are selected).
pub fn loss_semantic<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    gt: &[u8],
    mask: Option<Rc<[bool]>>,
) -> Result<Var> {
    let (r, l) = g.dims(logits);
    if gt.len() != r {
        return Err(Error::Shape(format!(
            "{} labels for {r} rendered rays",
            gt.len()
        )));
    }
    if let Some(c) = gt
        .iter()
        .enumerate()
        .find(|&(i, &c)| usize::from(c) >= l && mask.as_ref().map_or(true, |m| m[i]))
    {
        return Err(Error::OutOfRange(format!("class {} with {l} classes", c.1)));
    }
    let targets: Rc<[usize]> = gt.iter().map(|&c| usize::from(c).min(l - 1)).collect();
    Ok(g.cross_entropy(logits, targets, mask))
}

/// Mean absolute error between rendered and reference values.
pub fn loss_l1<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    gt: Rc<[T]>,
    mask: Option<Rc<[bool]>>,
) -> Result<Var> {
    let (r, c) = g.dims(pred);
    if gt.len() != r * c {
        return Err(Error::Shape(format!(
            "{} targets for a [{r}, {c}] render",
            gt.len()
        )));
    }
    Ok(g.l1(pred, gt, mask))
}

/// Frames whose semantic labels are visible to training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelSchedule {
    Full,
    /// First three and last three frames.
    Completion,
    /// First three frames.
    Tracking,
}

impl LabelSchedule {
    /// Displacement encoding used with this schedule unless configured.
    pub fn disp_mode(self) -> DispMode {
        match self {
            LabelSchedule::Completion => DispMode::Both,
            LabelSchedule::Full | LabelSchedule::Tracking => DispMode::Delta,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "completion" | "completion-50%" => Ok(Self::Completion),
            "tracking" | "tracking-25%" => Ok(Self::Tracking),
            _ => Err(Error::Config(format!("unknown label schedule {s:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Completion => "completion",
            Self::Tracking => "tracking",
        }
    }

    /// Per-frame label visibility for a video of `n` frames (0-based).
    pub fn mask(&self, n: usize) -> Vec<bool> {
        (0..n)
            .map(|f| match self {
                Self::Full => true,
                Self::Completion => f < 3 || f + 3 >= n,
                Self::Tracking => f < 3,
            })
            .collect()
    }

    /// 0-based labelled frames.
    pub fn frames(&self, n: usize) -> Vec<usize> {
        self.mask(n)
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Phase 1 (static field) iterations.
    pub static_steps: usize,
    /// Phase 2 (joint) iterations.
    pub dynamic_steps: usize,
    pub batch_rays: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub seed: u64,
    pub label_schedule: LabelSchedule,
    pub model: ModelConfig,
    pub weights: LossWeights,
    /// Keep the static blocks fixed during phase 2.
    pub freeze_static: bool,
    /// Stratified jitter of ray samples.
    pub jitter: bool,
    /// Write a checkpoint every this many steps (0: final only).
    pub checkpoint_every: usize,
    /// Checkpoint to start from (finetuning).
    pub init: Option<PathBuf>,
    /// Phase 2 budget used when `init` is given without explicit step counts.
    pub finetune_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            static_steps: 2000,
            dynamic_steps: 4000,
            batch_rays: 1024,
            lr: 5e-4,
            betas: (0.9, 0.999),
            seed: 0,
            label_schedule: LabelSchedule::Full,
            model: ModelConfig::compact(),
            weights: LossWeights::default(),
            freeze_static: false,
            jitter: true,
            checkpoint_every: 0,
            init: None,
            finetune_steps: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_rays == 0 {
            return Err(Error::Config("batch_rays must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr {} must be finite and >= 0",
                self.lr
            )));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!(
                "betas ({b1}, {b2}) must lie in [0, 1)"
            )));
        }
        self.weights.validate()?;
        self.model.validate()
    }

    /// Builds a configuration from `key=value` pairs. Model and weight keys
    /// (`a_<term>`) are accepted alongside the training keys. Unless set,
    /// `disp_mode` follows the label schedule (`completion` uses both
    /// displacement encodings), and `init` switches to a `finetune_steps`
    /// phase-2-only budget.
    pub fn from_key_values(pairs: &BTreeMap<String, String>) -> Result<Self> {
        fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
        }
        let mut c = Self::default();
        for (k, v) in pairs {
            match k.as_str() {
                "static_steps" => c.static_steps = num(k, v)?,
                "dynamic_steps" => c.dynamic_steps = num(k, v)?,
                "batch_rays" => c.batch_rays = num(k, v)?,
                "lr" => c.lr = num(k, v)?,
                "beta1" => c.betas.0 = num(k, v)?,
                "beta2" => c.betas.1 = num(k, v)?,
                "seed" => c.seed = num(k, v)?,
                "label_schedule" => c.label_schedule = LabelSchedule::parse(v)?,
                "freeze_static" => c.freeze_static = num(k, v)?,
                "jitter" => c.jitter = num(k, v)?,
                "checkpoint_every" => c.checkpoint_every = num(k, v)?,
                "init" => c.init = Some(PathBuf::from(v)),
                "finetune_steps" => c.finetune_steps = num(k, v)?,
                _ => {
                    if !c.weights.set(k, v)? && !c.model.set(k, v)? {
                        return Err(Error::Config(format!("unknown key {k:?}")));
                    }
                }
            }
        }
        if !pairs.contains_key("disp_mode") {
            c.model.disp_mode = c.label_schedule.disp_mode();
        }
        if c.init.is_some() {
            if !pairs.contains_key("static_steps") {
                c.static_steps = 0;
            }
            if !pairs.contains_key("dynamic_steps") {
                c.dynamic_steps = c.finetune_steps;
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        Self::from_key_values(&parse_key_values(path, text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text)
    }

    /// Every setting as `key=value` lines accepted by [`TrainConfig::parse`].
    pub fn to_key_values(&self) -> String {
        let mut s = format!(
            "static_steps={}\ndynamic_steps={}\nbatch_rays={}\nlr={}\nbeta1={}\nbeta2={}\nseed={}\n\
             label_schedule={}\nfreeze_static={}\njitter={}\ncheckpoint_every={}\nfinetune_steps={}\n",
            self.static_steps,
            self.dynamic_steps,
            self.batch_rays,
            self.lr,
            self.betas.0,
            self.betas.1,
            self.seed,
            self.label_schedule.as_str(),
            self.freeze_static,
            self.jitter,
            self.checkpoint_every,
            self.finetune_steps,
        );
        if let Some(p) = &self.init {
            s.push_str(&format!("init={}\n", p.display()));
        }
        for (name, w) in TERMS.iter().zip(self.weights.as_array()) {
            s.push_str(&format!("a_{name}={w}\n"));
        }
        s.push_str(&self.model.to_key_values());
        s
    }
}
