//! Differentiable volume rendering of color and class distributions, coarse then fine.
//!
//! Quadrature: `α_i = 1 − exp(−σ_i δ_i)`, `T_i = Π_{j<i}(1 − α_j)`, `w_i = T_i α_i`.
//! Leftover transmittance composites the background color and the background class.
//! The same weights accumulate color and per-sample class probabilities.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{positional_encode, AudioWindow};
use crate::error::{Error, Result};
use crate::fields::{overall_at, DeformInput, FieldVars, Pose};
use crate::model::Model;
use crate::numerics::{Graph, Tensor, Var};
use crate::renderer::sampling::{even_uniforms, intervals, merge_sorted, sample_coarse, sample_fine, sample_fine_with};
use crate::renderer::Ray;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub near: f64,
    pub far: f64,
    /// Rays per graph when rendering whole images.
    pub chunk: usize,
}

impl RenderConfig {
    pub fn new(near: f64, far: f64) -> Self {
        Self {
            n_coarse: 32,
            n_fine: 32,
            near,
            far,
            chunk: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_coarse < 2 {
            return Err(Error::Contract("at least two coarse samples are required".into()));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::Contract(format!("invalid bounds [{}, {}]", self.near, self.far)));
        }
        if self.chunk == 0 {
            return Err(Error::Contract("chunk size must be positive".into()));
        }
        Ok(())
    }
}

/// How sample positions are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Jitter {
    /// Stratum midpoints and evenly spaced fine uniforms.
    Deterministic,
    /// Per-ray streams derived from `(seed, stream, pixel)`.
    Random { seed: u64, stream: u64 },
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG stream for one ray.
pub fn ray_rng(seed: u64, stream: u64, pixel: (usize, usize)) -> ChaCha8Rng {
    let key = mix(mix(mix(seed) ^ stream) ^ ((pixel.1 as u64) << 32 | pixel.0 as u64));
    ChaCha8Rng::seed_from_u64(key)
}

/// Per-frame conditioning shared by every ray of a batch.
#[derive(Clone, Copy, Debug)]
pub struct FrameInput<'a> {
    pub time: f64,
    pub head: &'a Pose,
    pub audio: &'a AudioWindow,
}

/// Graph nodes for one rendering pass over `R` rays with `S` samples each.
#[derive(Clone, Debug)]
pub struct PassVars {
    /// `[R, 3]`
    pub color: Var,
    /// `[R, K]`, rows on the simplex
    pub probs: Var,
    /// `[R, S]`
    pub weights: Var,
    /// `[R, 1]`
    pub transmittance: Var,
    /// `[R, S]` transmittance before each sample
    pub sample_transmittance: Var,
    /// Field outputs, `R·S` rows, ray-major
    pub field: FieldVars,
    /// `[R·S, 3]` displacements when deformation is enabled
    pub displacement: Option<Var>,
    pub positions: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct BatchVars {
    pub coarse: PassVars,
    pub fine: Option<PassVars>,
}

impl BatchVars {
    /// The pass whose output is reported as the prediction.
    pub fn output(&self) -> &PassVars {
        self.fine.as_ref().unwrap_or(&self.coarse)
    }
}

struct Shared {
    audio: Var,
    latent_codes: Option<Var>,
    encoded_dirs: Var,
    background: Var,
    background_class: Var,
}

fn check_field(g: &Graph, vars: &FieldVars, samples_per_ray: usize, ray_offset: usize) -> Result<()> {
    for (name, v) in [("density", vars.sigma), ("logits", vars.logits), ("color", vars.color)] {
        let t = g.value(v);
        let cols = t.cols();
        if let Some(i) = t.data().iter().position(|x| !x.is_finite()) {
            let row = i / cols;
            return Err(Error::Render {
                ray: ray_offset + row / samples_per_ray,
                sample: row % samples_per_ray,
                reason: format!("non-finite {name}"),
            });
        }
    }
    Ok(())
}

fn evaluate(
    g: &mut Graph,
    model: &Model,
    frame: &FrameInput<'_>,
    shared: &Shared,
    positions: &[Vec<f64>],
    rays: &[Ray],
) -> Result<(FieldVars, Option<Var>)> {
    let per_ray = positions[0].len();
    let mut pts = Vec::with_capacity(rays.len() * per_ray * 3);
    let mut dir_index = Vec::with_capacity(rays.len() * per_ray);
    for (r, (ray, vs)) in rays.iter().zip(positions).enumerate() {
        for &v in vs {
            pts.extend(model.scene.scene_box.normalize(ray.at(v)));
            dir_index.push(Some(r));
        }
    }
    let points = g.constant(Tensor::matrix(rays.len() * per_ray, 3, pts));
    let dirs = g.gather_rows(shared.encoded_dirs, Arc::new(dir_index));
    let latent = model.latent.as_ref().zip(shared.latent_codes);
    let deform_input = DeformInput {
        time: frame.time,
        head: frame.head,
        canonical: &model.scene.canonical,
    };
    overall_at(
        g,
        &model.store,
        &model.field,
        model.deform.as_ref(),
        deform_input,
        points,
        dirs,
        Some(shared.audio),
        latent,
    )
}

/// Composited quantities of one pass.
#[derive(Clone, Copy, Debug)]
pub struct Composite {
    /// `[R, 3]`
    pub color: Var,
    /// `[R, K]`
    pub probs: Var,
    /// `[R, S]`
    pub weights: Var,
    /// `[R, 1]`
    pub transmittance: Var,
    /// `[R, S]`
    pub sample_transmittance: Var,
}

/// Alpha-composite `R` rays of `S` samples each. `deltas` holds the `R·S` quadrature
/// intervals, `background` is `[R, 3]` and `background_class` is `[R, K]`.
pub fn composite_samples(
    g: &mut Graph,
    field: &FieldVars,
    deltas: Vec<f64>,
    rays: usize,
    background: Var,
    background_class: Var,
) -> Composite {
    let s = deltas.len() / rays;
    let delta = g.constant(Tensor::matrix(rays * s, 1, deltas));
    let tau = g.mul(field.sigma, delta);
    let tau = g.reshape(tau, rays, s);
    let optical_depth = g.cumsum_exclusive(tau);
    let neg_depth = g.neg(optical_depth);
    let trans = g.exp(neg_depth);
    let neg_tau = g.neg(tau);
    let survive = g.exp(neg_tau);
    let not_survive = g.neg(survive);
    let alpha = g.add_scalar(not_survive, 1.0);
    let weights = g.mul(trans, alpha);
    let total = g.row_sum(tau);
    let neg_total = g.neg(total);
    let transmittance = g.exp(neg_total);

    let surface = g.segment_weighted_sum(weights, field.color);
    let backdrop = g.mul_col(background, transmittance);
    let color = g.add(surface, backdrop);

    let class_probs = g.softmax_rows(field.logits);
    let fg = g.segment_weighted_sum(weights, class_probs);
    let bg = g.mul_col(background_class, transmittance);
    let probs = g.add(fg, bg);

    Composite {
        color,
        probs,
        weights,
        transmittance,
        sample_transmittance: trans,
    }
}

fn composite(
    g: &mut Graph,
    shared: &Shared,
    field: FieldVars,
    displacement: Option<Var>,
    positions: Vec<Vec<f64>>,
    rays: &[Ray],
) -> PassVars {
    let mut deltas = Vec::with_capacity(rays.len() * positions[0].len());
    for (ray, vs) in rays.iter().zip(&positions) {
        deltas.extend(intervals(vs, ray.far));
    }
    let c = composite_samples(g, &field, deltas, rays.len(), shared.background, shared.background_class);
    PassVars {
        color: c.color,
        probs: c.probs,
        weights: c.weights,
        transmittance: c.transmittance,
        sample_transmittance: c.sample_transmittance,
        field,
        displacement,
        positions,
    }
}

/// Build coarse and fine rendering passes for a batch of rays from one frame.
/// `backgrounds[i]` is the background color behind ray `i`.
pub fn render_batch(
    g: &mut Graph,
    model: &Model,
    rays: &[Ray],
    backgrounds: &[[f64; 3]],
    frame: &FrameInput<'_>,
    config: &RenderConfig,
    jitter: Jitter,
) -> Result<BatchVars> {
    config.validate()?;
    if rays.is_empty() || rays.len() != backgrounds.len() {
        return Err(Error::Contract("need one background color per ray and at least one ray".into()));
    }
    let k = model.classes();
    let audio = model.audio.encode(g, &model.store, frame.audio)?;
    let latent_codes = model.latent.as_ref().map(|l| l.projected_codes(g, &model.store));
    let dir_cfg = model.field.direction_encoding;
    let mut enc = Vec::with_capacity(rays.len() * dir_cfg.output_dim(3));
    for ray in rays {
        enc.extend(positional_encode(&ray.direction, dir_cfg));
    }
    let encoded_dirs = g.constant(Tensor::matrix(rays.len(), dir_cfg.output_dim(3), enc));
    let background = g.constant(Tensor::matrix(
        rays.len(),
        3,
        backgrounds.iter().flatten().copied().collect(),
    ));
    let mut onehot = vec![0.0; rays.len() * k];
    for r in 0..rays.len() {
        onehot[r * k + model.config.background_class] = 1.0;
    }
    let background_class = g.constant(Tensor::matrix(rays.len(), k, onehot));
    let shared = Shared {
        audio,
        latent_codes,
        encoded_dirs,
        background,
        background_class,
    };

    let mut rngs: Vec<Option<ChaCha8Rng>> = rays
        .iter()
        .map(|ray| match jitter {
            Jitter::Deterministic => None,
            Jitter::Random { seed, stream } => Some(ray_rng(seed, stream, ray.pixel)),
        })
        .collect();

    let coarse_positions: Vec<Vec<f64>> = rays
        .iter()
        .zip(rngs.iter_mut())
        .map(|(ray, rng)| match rng {
            Some(rng) => sample_coarse(ray.near, ray.far, config.n_coarse, || rng.gen::<f64>()),
            None => sample_coarse(ray.near, ray.far, config.n_coarse, || 0.5),
        })
        .collect();
    let (coarse_field, coarse_dx) = evaluate(g, model, frame, &shared, &coarse_positions, rays)?;
    check_field(g, &coarse_field, config.n_coarse, 0)?;
    let coarse = composite(g, &shared, coarse_field, coarse_dx, coarse_positions, rays);

    if config.n_fine == 0 {
        return Ok(BatchVars { coarse, fine: None });
    }

    let weights = g.value(coarse.weights).clone();
    let even = even_uniforms(config.n_fine);
    let fine_positions: Vec<Vec<f64>> = rays
        .iter()
        .zip(rngs.iter_mut())
        .enumerate()
        .map(|(i, (ray, rng))| {
            let w = weights.row_slice(i);
            match rng {
                Some(rng) => sample_fine(ray.near, ray.far, w, config.n_fine, || rng.gen::<f64>()),
                None => sample_fine_with(ray.near, ray.far, w, &even),
            }
        })
        .collect();
    let (fine_field, fine_dx) = evaluate(g, model, frame, &shared, &fine_positions, rays)?;
    check_field(g, &fine_field, config.n_fine, 0)?;

    // merge the coarse and fine evaluations of the shared network, sorted per ray
    let (nc, nf) = (config.n_coarse, config.n_fine);
    let fine_base = rays.len() * nc;
    let mut order = Vec::with_capacity(rays.len() * (nc + nf));
    let mut merged_positions = Vec::with_capacity(rays.len());
    for (r, (c, f)) in coarse.positions.iter().zip(&fine_positions).enumerate() {
        let (vs, src) = merge_sorted(c, f);
        for i in src {
            order.push(Some(if i < nc { r * nc + i } else { fine_base + r * nf + (i - nc) }));
        }
        merged_positions.push(vs);
    }
    let order = Arc::new(order);
    let merge = |a: Var, b: Var, g: &mut Graph| {
        let both = g.concat_rows(&[a, b]);
        g.gather_rows(both, order.clone())
    };
    let field = FieldVars {
        sigma: merge(coarse.field.sigma, fine_field.sigma, g),
        logits: merge(coarse.field.logits, fine_field.logits, g),
        color: merge(coarse.field.color, fine_field.color, g),
    };
    let dx = match (coarse.displacement, fine_dx) {
        (Some(a), Some(b)) => Some(merge(a, b, g)),
        _ => None,
    };
    let fine = composite(g, &shared, field, dx, merged_positions, rays);
    Ok(BatchVars {
        coarse,
        fine: Some(fine),
    })
}

/// Plain values for one rendered ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RayOutput {
    pub color: [f64; 3],
    pub probs: Vec<f64>,
    pub transmittance: f64,
    pub weights: Vec<f64>,
    /// Render-weighted displacement magnitude `Σ_i w_i ‖Δx_i‖` (zero without deformation).
    pub displacement: f64,
}

/// Values for the coarse and (if any) fine pass of one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub coarse: RayOutput,
    pub fine: Option<RayOutput>,
}

impl RenderOutput {
    pub fn output(&self) -> &RayOutput {
        self.fine.as_ref().unwrap_or(&self.coarse)
    }
}

fn extract(g: &Graph, pass: &PassVars, rays: usize) -> Vec<RayOutput> {
    let color = g.value(pass.color);
    let probs = g.value(pass.probs);
    let trans = g.value(pass.transmittance);
    let weights = g.value(pass.weights);
    let s = weights.cols();
    let dx = pass.displacement.map(|v| g.value(v));
    (0..rays)
        .map(|r| {
            let w = weights.row_slice(r);
            let displacement = dx.map_or(0.0, |d| {
                (0..s)
                    .map(|i| {
                        let row = d.row_slice(r * s + i);
                        w[i] * (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt()
                    })
                    .sum()
            });
            RayOutput {
                color: [color.get(r, 0), color.get(r, 1), color.get(r, 2)],
                probs: probs.row_slice(r).to_vec(),
                transmittance: trans.get(r, 0),
                weights: w.to_vec(),
                displacement,
            }
        })
        .collect()
}

/// Render rays (one graph, no gradients kept) and return plain values.
pub fn render_rays(
    model: &Model,
    rays: &[Ray],
    backgrounds: &[[f64; 3]],
    frame: &FrameInput<'_>,
    config: &RenderConfig,
    jitter: Jitter,
) -> Result<Vec<RenderOutput>> {
    let mut g = Graph::new();
    let batch = render_batch(&mut g, model, rays, backgrounds, frame, config, jitter)?;
    let coarse = extract(&g, &batch.coarse, rays.len());
    let fine = batch.fine.as_ref().map(|f| extract(&g, f, rays.len()));
    Ok(match fine {
        Some(fine) => coarse
            .into_iter()
            .zip(fine)
            .map(|(c, f)| RenderOutput { coarse: c, fine: Some(f) })
            .collect(),
        None => coarse
            .into_iter()
            .map(|c| RenderOutput { coarse: c, fine: None })
            .collect(),
    })
}

/// Render a ray list in fixed-size chunks, optionally in parallel. Results do not depend
/// on the parallel flag.
pub fn render_chunked(
    model: &Model,
    rays: &[Ray],
    backgrounds: &[[f64; 3]],
    frame: &FrameInput<'_>,
    config: &RenderConfig,
    jitter: Jitter,
    parallel: bool,
) -> Result<Vec<RenderOutput>> {
    let chunks: Vec<(&[Ray], &[[f64; 3]])> = rays
        .chunks(config.chunk)
        .zip(backgrounds.chunks(config.chunk))
        .collect();
    let render = |(r, b): &(&[Ray], &[[f64; 3]])| render_rays(model, r, b, frame, config, jitter);
    let parts: Vec<Result<Vec<RenderOutput>>> = if parallel {
        chunks.par_iter().map(render).collect()
    } else {
        chunks.iter().map(render).collect()
    };
    let mut out = Vec::with_capacity(rays.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
