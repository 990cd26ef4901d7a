//! Camera rays, sample placement, and volume rendering.

mod camera;
pub mod sampling;
mod volume;

pub use camera::{generate_ray, normalize, pixel_ray, Intrinsics, Ray, SceneBox};
pub use sampling::{sample_coarse, sample_fine, sample_fine_with, WEIGHT_FLOOR};
pub use volume::{
    composite_samples, ray_rng, render_batch, render_chunked, render_rays, BatchVars, Composite, FrameInput, Jitter,
    PassVars, RayOutput,
    RenderConfig, RenderOutput,
};
