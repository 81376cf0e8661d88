//! Central-difference checks of every loss term through the full model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{batch_loss, draw_batch, LabelSchedule, LossWeights, Phase};
use crate::diffcore::{bind, gradcheck, GradcheckConfig, GradcheckReport, Graph, ParamBlock};
use crate::error::{Error, Result};
use crate::model::{ModelBound, ModelConfig, SceneInput, SemanticFlowModel, BLOCK_NAMES};
use crate::scene_synth::{generate_scene, SceneRecipe, SyntheticScene};

/// Loss groups that can be checked, with the weight vector each one uses.
pub const LOSS_GROUPS: [&str; 5] = ["rgb", "semantic", "flow", "consistency", "depth"];

fn group_weights(group: &str) -> Result<LossWeights> {
    let mut a = [0.0; 9];
    let on: &[usize] = match group {
        "rgb" => &[0, 1, 2],
        "semantic" => &[4, 5, 6],
        "flow" => &[3],
        "consistency" => &[7],
        "depth" => &[8],
        _ => {
            return Err(Error::InvalidArgument(format!(
                "unknown loss group {group:?}"
            )))
        }
    };
    for &i in on {
        a[i] = 1.0;
    }
    Ok(LossWeights::from_array(a))
}

/// Small model used for the checks.
pub fn check_config() -> ModelConfig {
    ModelConfig {
        feature_width: 4,
        encoder_channels: 4,
        mlp_width: 8,
        mlp_blocks: 1,
        sem_hidden: 8,
        attn_channels: 8,
        heads: 2,
        samples: 6,
        pos_freqs: 2,
        time_freqs: 2,
        disp_freqs: 2,
        ..ModelConfig::default()
    }
}

/// Low-resolution four-frame version of the default scene.
pub fn check_scene() -> Result<SyntheticScene> {
    let mut r = SceneRecipe::named("balloon")?;
    r.n = 4;
    r.width = 16;
    r.height = 16;
    r.rig.focal = 15.0;
    generate_scene(&r, 3)
}

/// Checks the gradient of one loss group with respect to the named blocks
/// (all blocks when `blocks` is empty).
pub fn loss_gradcheck(
    group: &str,
    blocks: &[&str],
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport> {
    let w = group_weights(group)?;
    let data = check_scene()?;
    let scene = SceneInput::from_scene(&data);
    let model = SemanticFlowModel::<f64>::new(check_config(), 11)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let labeled = LabelSchedule::Full.mask(data.n);
    let mut batch = draw_batch(&data, &scene, Phase::Dynamic, 10, &labeled, 1, &mut rng)?;
    // Make sure the foreground-only terms see at least two rays.
    let fg: Vec<(usize, usize, usize)> = (0..data.n)
        .flat_map(|f| {
            let d = &data;
            (0..d.pixels())
                .filter(move |&p| d.foreground[f][p])
                .map(move |p| (f, p / d.width, p % d.width))
        })
        .collect();
    if fg.len() < 2 {
        return Err(Error::InvalidArgument(
            "check scene has no foreground".into(),
        ));
    }
    let extra = [fg[fg.len() / 3], fg[2 * fg.len() / 3]];
    let frames: Vec<usize> = batch
        .rays
        .frames
        .iter()
        .copied()
        .chain(extra.iter().map(|e| e.0))
        .collect();
    let pixels: Vec<(usize, usize)> = batch
        .rays
        .pixels
        .iter()
        .copied()
        .chain(extra.iter().map(|e| (e.1, e.2)))
        .collect();
    batch = super::run::batch_from_pixels(&data, &scene, &frames, &pixels, &labeled, 1, &mut rng);

    let selected: Vec<usize> = if blocks.is_empty() {
        (0..BLOCK_NAMES.len()).collect()
    } else {
        blocks
            .iter()
            .map(|b| {
                BLOCK_NAMES
                    .iter()
                    .position(|n| n == b)
                    .ok_or_else(|| Error::UnknownTensor(b.to_string()))
            })
            .collect::<Result<_>>()?
    };
    let checked: Vec<ParamBlock<f64>> = selected.iter().map(|&i| model.blocks[i].clone()).collect();
    let mcfg = model.config.clone();
    let f = |g: &mut Graph<f64>, bound: &[crate::diffcore::BoundBlock]| {
        let all: Vec<_> = (0..BLOCK_NAMES.len())
            .map(|i| match selected.iter().position(|&s| s == i) {
                Some(j) => bound[j].clone(),
                None => bind(g, &model.blocks[i], false),
            })
            .collect();
        let b = ModelBound::from_slice(&all)?;
        let (total, _) = batch_loss(g, &b, &mcfg, &w, &scene, &batch, Phase::Dynamic, false, 0)?;
        Ok(total)
    };
    gradcheck(f, &checked, cfg)
}

/// Module names accepted by [`module_checks`].
pub const CHECK_MODULES: [&str; 6] = [
    "diffcore",
    "renderer",
    "flow_field",
    "feature_agg",
    "semantic_heads",
    "trainer",
];

/// `(loss group, blocks)` pairs exercising one module's gradients.
pub fn module_checks(module: &str) -> Result<Vec<(&'static str, Vec<&'static str>)>> {
    Ok(match module {
        "diffcore" => vec![("semantic", vec!["heads"]), ("rgb", vec!["psi_geo"])],
        "renderer" => vec![
            ("rgb", vec!["psi_st", "psi_geo"]),
            ("depth", vec!["psi_st", "psi_geo"]),
        ],
        "flow_field" => vec![
            ("flow", vec!["psi_flow", "e_dy"]),
            ("consistency", vec!["psi_flow"]),
        ],
        "feature_agg" => vec![("rgb", vec!["e_st", "e_dy"]), ("semantic", vec!["e_dy"])],
        "semantic_heads" => vec![
            ("semantic", vec!["heads", "st_sem", "psi_geo"]),
            ("consistency", vec!["heads"]),
        ],
        "trainer" => ["rgb", "semantic", "flow", "consistency"]
            .into_iter()
            .map(|g| (g, Vec::new()))
            .collect(),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "unknown module {module:?}; expected one of {}",
                CHECK_MODULES.join(", ")
            )))
        }
    })
}
