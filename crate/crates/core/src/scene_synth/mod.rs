//! Analytic dynamic scenes with exact ground truth.
//!
//! Scenes are built from spheres and textured planes that translate along
//! parametric paths in front of a laterally translating camera rig. Every
//! ground-truth map is computed by ray casting, so RGB, labels, depth and
//! optical flow are mutually consistent up to float rounding.

mod camera;
mod io;
mod perturb;
mod recipe;

pub use camera::{axis_angle, CameraPose};
pub(crate) use io::parse_key_values;
pub use io::{
    parse_poses, read_dataset, read_depth_file, read_flow_file, write_dataset, write_depth_file,
    write_flow_file,
};
pub use perturb::{add_flow_noise, occlude_region, Rect};
pub use recipe::{
    generate_scene, Albedo, CenterPath, PrimitiveKind, Rig, ScenePrimitive, SceneRecipe,
};

/// Frame count of the default recipe.
pub const DEFAULT_FRAMES: usize = 12;

/// A rendered scene. Frames are indexed from 0 in memory; file names and
/// user-facing frame numbers are 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub recipe: String,
    pub seed: u64,
    pub n: usize,
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    /// Class ids counted as dynamic foreground.
    pub fg_classes: Vec<u8>,
    /// Depth range enclosing every visible surface.
    pub near: f64,
    pub far: f64,
    pub poses: Vec<CameraPose<f64>>,
    /// RGB in `[0, 1]`, `height * width * 3` per frame, multiples of 1/255.
    pub frames: Vec<Vec<f32>>,
    pub labels: Vec<Vec<u8>>,
    /// Distance from the camera centre to the first hit.
    pub depth: Vec<Vec<f32>>,
    /// `(dx, dy)` per pixel, pixels; zero where the target frame does not exist.
    pub flow_fwd: Vec<Vec<f32>>,
    pub flow_bwd: Vec<Vec<f32>>,
    pub foreground: Vec<Vec<bool>>,
}

impl SyntheticScene {
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn is_foreground_class(&self, class: u8) -> bool {
        self.fg_classes.contains(&class)
    }

    /// Recomputes the foreground masks from the labels.
    pub fn refresh_foreground(&mut self) {
        let fg = self.fg_classes.clone();
        self.foreground = self
            .labels
            .iter()
            .map(|l| l.iter().map(|c| fg.contains(c)).collect())
            .collect();
    }

    pub fn rgb(&self, frame: usize, pixel: usize) -> [f32; 3] {
        let f = &self.frames[frame];
        [f[3 * pixel], f[3 * pixel + 1], f[3 * pixel + 2]]
    }

    /// Bitwise equality of every map (distinguishes `-0.0` from `0.0`).
    pub fn bit_identical(&self, other: &Self) -> bool {
        fn bits(a: &[Vec<f32>], b: &[Vec<f32>]) -> bool {
            a.len() == b.len()
                && a.iter().zip(b).all(|(x, y)| {
                    x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
                })
        }
        self.recipe == other.recipe
            && self.seed == other.seed
            && (self.n, self.width, self.height, self.classes)
                == (other.n, other.width, other.height, other.classes)
            && self.fg_classes == other.fg_classes
            && self.near.to_bits() == other.near.to_bits()
            && self.far.to_bits() == other.far.to_bits()
            && self.poses.len() == other.poses.len()
            && self
                .poses
                .iter()
                .zip(&other.poses)
                .all(|(a, b)| pose_bits(a) == pose_bits(b))
            && self.labels == other.labels
            && self.foreground == other.foreground
            && bits(&self.frames, &other.frames)
            && bits(&self.depth, &other.depth)
            && bits(&self.flow_fwd, &other.flow_fwd)
            && bits(&self.flow_bwd, &other.flow_bwd)
    }
}

fn pose_bits(p: &CameraPose<f64>) -> Vec<u64> {
    p.rotation
        .iter()
        .flatten()
        .chain(&p.translation)
        .chain([&p.fx, &p.fy, &p.cx, &p.cy])
        .map(|v| v.to_bits())
        .collect()
}
