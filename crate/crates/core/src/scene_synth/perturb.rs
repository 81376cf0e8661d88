//! Robustness harnesses: noisy flow maps and occluded frames.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SyntheticScene;
use crate::error::{Error, Result};

/// Pixel rectangle, `x`/`y` = top-left column/row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Gray occluder colour (128/255).
pub const OCCLUDER_GRAY: f32 = 128.0 / 255.0;

/// `flow + beta * noise` with `noise ~ U(min, max)` drawn independently per
/// component, `min`/`max` taken over all components of that flow map.
pub fn add_flow_noise(scene: &SyntheticScene, beta: f64, seed: u64) -> Result<SyntheticScene> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "flow noise scale must be >= 0, got {beta}"
        )));
    }
    let mut out = scene.clone();
    if beta == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for map in out.flow_fwd.iter_mut().chain(out.flow_bwd.iter_mut()) {
        let (lo, hi) = map
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        if map.is_empty() {
            continue;
        }
        let (lo, hi) = (f64::from(lo), f64::from(hi));
        for v in map.iter_mut() {
            let x = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            *v = (f64::from(*v) + beta * x) as f32;
        }
    }
    Ok(out)
}

/// Paints `rect` of 1-based `frame` with the occluder: gray RGB, class
/// `L - 1`, zero flow in both directions for that frame.
pub fn occlude_region(scene: &SyntheticScene, frame: usize, rect: Rect) -> Result<SyntheticScene> {
    if frame == 0 || frame > scene.n {
        return Err(Error::OutOfRange(format!(
            "frame {frame} (scene has frames 1..={})",
            scene.n
        )));
    }
    if rect.x + rect.w > scene.width || rect.y + rect.h > scene.height {
        return Err(Error::InvalidArgument(format!(
            "rect {rect:?} exceeds {}x{} image",
            scene.width, scene.height
        )));
    }
    let mut out = scene.clone();
    let f = frame - 1;
    let occluder = u8::try_from(scene.classes - 1).expect("class count fits u8");
    for row in rect.y..rect.y + rect.h {
        for col in rect.x..rect.x + rect.w {
            let px = row * scene.width + col;
            out.frames[f][3 * px..3 * px + 3].fill(OCCLUDER_GRAY);
            out.labels[f][px] = occluder;
            out.foreground[f][px] = out.fg_classes.contains(&occluder);
            out.flow_fwd[f][2 * px..2 * px + 2].fill(0.0);
            out.flow_bwd[f][2 * px..2 * px + 2].fill(0.0);
        }
    }
    Ok(out)
}
