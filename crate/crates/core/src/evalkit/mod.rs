//! Metrics, checkpoint files, rendering to disk and scene editing.

mod checkpoint;
mod metrics;
mod render;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_into, load_model, read_checkpoint, save_checkpoint,
    save_model, sidecar_path, CheckpointEntry, LoadedModel, MAGIC, VERSION,
};
pub use metrics::{
    image_metrics, mean_epe, pixel_metrics, psnr, ssim, ConfusionMatrix, ImageMetrics,
    PixelMetrics, PSNR_CAP,
};
pub use render::{
    evaluate, parse_views, render_frame, render_rays, render_views, write_frame, EvalReport,
    EvalSummary, FrameEval, FrameRender, RayRender, RenderOptions, DEFAULT_CHUNK,
};

#[cfg(test)]
mod tests;
