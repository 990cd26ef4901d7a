//! Losses and the optimization loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, FrameRecord};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, SceneInfo};
use crate::numerics::{AdamConfig, AdamState, Graph, Init, Tensor, Var};
use crate::renderer::{render_batch, BatchVars, FrameInput, Jitter, RenderConfig};
use crate::scheduler::{self, ClassLossStats, EpochLog};

/// Floor applied inside the semantic log-likelihood.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the semantic term.
    pub lambda: f64,
    /// Rays per iteration.
    pub rays: usize,
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
    /// Rays per graph when rendering full frames.
    pub chunk: usize,
    pub dynamic_sampling: bool,
    /// Save an intermediate checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.04,
            rays: 512,
            iterations: 20_000,
            lr: 5e-4,
            seed: 0,
            chunk: 512,
            dynamic_sampling: true,
            checkpoint_every: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Contract(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.rays == 0 {
            return Err(Error::Contract("need at least one ray per batch".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Contract(format!("invalid learning rate {}", self.lr)));
        }
        Ok(())
    }

    pub fn render_config(&self, near: f64, far: f64) -> RenderConfig {
        RenderConfig {
            n_coarse: self.model.samples.coarse,
            n_fine: self.model.samples.fine,
            near,
            far,
            chunk: self.chunk,
        }
    }
}

/// Batch mean of `‖coarse − target‖² + ‖fine − target‖²`.
pub fn photometric_loss(g: &mut Graph, coarse: Var, fine: Option<Var>, target: Var) -> Var {
    let dc = g.sub(coarse, target);
    let sc = g.square(dc);
    let per = g.row_sum(sc);
    let per = match fine {
        Some(f) => {
            let df = g.sub(f, target);
            let sf = g.square(df);
            let pf = g.row_sum(sf);
            g.add(per, pf)
        }
        None => per,
    };
    g.mean(per)
}

/// Batch mean of `−Σ_k p_k (log q_c,k + log q_f,k)` with the logs floored at [`LOG_FLOOR`].
pub fn semantic_loss(g: &mut Graph, coarse: Var, fine: Option<Var>, onehot: Var) -> Var {
    let lc = g.log_clamped(coarse, LOG_FLOOR);
    let logs = match fine {
        Some(f) => {
            let lf = g.log_clamped(f, LOG_FLOOR);
            g.add(lc, lf)
        }
        None => lc,
    };
    let picked = g.mul(onehot, logs);
    let per = g.row_sum(picked);
    let mean = g.mean(per);
    g.neg(mean)
}

pub fn total_loss(g: &mut Graph, photometric: Var, semantic: Var, lambda: f64) -> Var {
    let weighted = g.scale(semantic, lambda);
    g.add(photometric, weighted)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: usize,
    pub frame: usize,
    pub photometric: f64,
    pub semantic: f64,
    pub total: f64,
    /// Mean per-ray `rgb + semantic` loss of each class in this batch (`None` when absent).
    pub class_loss: Vec<Option<f64>>,
}

/// Graph nodes of one training step.
pub struct StepVars {
    pub batch: BatchVars,
    pub photometric: Var,
    pub semantic: Var,
    pub total: Var,
}

/// Render `pixels` of `frame` and build the training objective.
#[allow(clippy::too_many_arguments)]
pub fn build_step(
    g: &mut Graph,
    model: &Model,
    dataset: &Dataset,
    frame: &FrameRecord,
    pixels: &[usize],
    render: &RenderConfig,
    jitter: Jitter,
    lambda: f64,
) -> Result<StepVars> {
    let k = model.classes();
    let rays = pixels
        .iter()
        .map(|&p| dataset.ray(frame.index, p))
        .collect::<Result<Vec<_>>>()?;
    let backgrounds: Vec<[f64; 3]> = pixels.iter().map(|&p| dataset.background[p]).collect();
    let input = FrameInput {
        time: frame.time,
        head: &frame.pose,
        audio: &frame.audio,
    };
    let batch = render_batch(g, model, &rays, &backgrounds, &input, render, jitter)?;
    let target = g.constant(Tensor::matrix(
        pixels.len(),
        3,
        pixels.iter().flat_map(|&p| frame.image[p]).collect(),
    ));
    let mut onehot = vec![0.0; pixels.len() * k];
    for (r, &p) in pixels.iter().enumerate() {
        onehot[r * k + frame.labels[p] as usize] = 1.0;
    }
    let onehot = g.constant(Tensor::matrix(pixels.len(), k, onehot));
    let fine = batch.fine.as_ref();
    let photometric = photometric_loss(g, batch.coarse.color, fine.map(|f| f.color), target);
    let semantic = semantic_loss(g, batch.coarse.probs, fine.map(|f| f.probs), onehot);
    let total = total_loss(g, photometric, semantic, lambda);
    Ok(StepVars {
        batch,
        photometric,
        semantic,
        total,
    })
}

/// Per-ray `(rgb, semantic)` loss values of a built step.
pub fn per_ray_losses(g: &Graph, step: &StepVars, frame: &FrameRecord, pixels: &[usize]) -> Vec<(f64, f64)> {
    let passes: Vec<_> = std::iter::once(&step.batch.coarse).chain(step.batch.fine.as_ref()).collect();
    pixels
        .iter()
        .enumerate()
        .map(|(r, &p)| {
            let mut rgb = 0.0;
            let mut sem = 0.0;
            for pass in &passes {
                let c = g.value(pass.color).row_slice(r);
                rgb += (0..3).map(|j| (c[j] - frame.image[p][j]).powi(2)).sum::<f64>();
                let q = g.value(pass.probs).get(r, frame.labels[p] as usize);
                sem -= q.max(LOG_FLOOR).ln();
            }
            (rgb, sem)
        })
        .collect()
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine<'a> {
    Iteration(&'a LossReport),
    Epoch(&'a EpochLog),
}

pub fn scene_info(dataset: &Dataset) -> SceneInfo {
    SceneInfo {
        scene_box: dataset.meta.scene_box,
        anchors: dataset.anchors.clone(),
        canonical: dataset.canonical_pose(),
    }
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub last: Option<LossReport>,
}

/// Stateful optimizer loop over a dataset's training frames.
pub struct Trainer<'a> {
    pub dataset: &'a Dataset,
    pub config: TrainConfig,
    pub model: Model,
    adam: AdamState,
    stats: ClassLossStats,
    frames: Vec<FrameRecord>,
    order: Vec<usize>,
    position: usize,
    epoch: usize,
    iteration: usize,
    rng: ChaCha8Rng,
    render: RenderConfig,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.model.field.classes != dataset.meta.classes() {
            return Err(Error::Validation(format!(
                "model has {} classes, dataset has {}",
                config.model.field.classes,
                dataset.meta.classes()
            )));
        }
        if config.model.audio.raw_dim != dataset.meta.audio_dim {
            return Err(Error::Validation(format!(
                "audio encoder expects {} features, dataset has {}",
                config.model.audio.raw_dim, dataset.meta.audio_dim
            )));
        }
        if dataset.meta.train.is_empty() {
            return Err(Error::Validation("no training frames".into()));
        }
        let mut model_config = config.model.clone();
        model_config.background_class = dataset.meta.background_class;
        let model = Model::new(model_config, scene_info(dataset), Init::Random, config.seed)?;
        let adam = AdamState::new(
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            &model.store,
        );
        let frames = dataset
            .meta
            .train
            .iter()
            .map(|&i| dataset.frame(i))
            .collect::<Result<Vec<_>>>()?;
        let render = config.render_config(dataset.meta.near, dataset.meta.far);
        render.validate()?;
        Ok(Self {
            dataset,
            stats: ClassLossStats::new(model.classes()),
            model,
            adam,
            frames,
            order: Vec::new(),
            position: 0,
            epoch: 0,
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_0FF8_A3E5),
            render,
            config,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn stats(&self) -> &ClassLossStats {
        &self.stats
    }

    fn pick_pixels(&mut self, frame: &FrameRecord) -> Result<Vec<usize>> {
        let n = self.dataset.meta.pixels();
        if !self.config.dynamic_sampling || self.epoch == 0 {
            return Ok(scheduler::select_uniform(n, self.config.rays, &mut self.rng));
        }
        let present = scheduler::classes_in(&frame.labels, self.model.classes());
        let rays = self.config.rays.max(present.len());
        let plan = scheduler::allocate(&self.stats, rays, &present)?;
        scheduler::select_pixels(&plan, &frame.labels, &mut self.rng)
    }

    /// One optimizer step. Returns the loss report and, at an epoch boundary, the epoch log.
    pub fn step(&mut self) -> Result<(LossReport, Option<EpochLog>)> {
        if self.position == 0 {
            self.order = (0..self.frames.len()).collect();
            self.order.shuffle(&mut self.rng);
        }
        let slot = self.order[self.position];
        let frame = self.frames[slot].clone();
        let pixels = self.pick_pixels(&frame)?;

        let mut g = Graph::new();
        let jitter = Jitter::Random {
            seed: self.config.seed,
            stream: ((self.iteration as u64) << 20) ^ frame.index as u64,
        };
        let step = build_step(
            &mut g,
            &self.model,
            self.dataset,
            &frame,
            &pixels,
            &self.render,
            jitter,
            self.config.lambda,
        )
        .map_err(|e| match e {
            Error::Render { ray, sample, reason } => Error::Diverged(format!(
                "frame {}, pixel {}, sample {sample}: {reason}",
                frame.index, pixels[ray]
            )),
            other => other,
        })?;
        let photometric = g.value(step.photometric).item();
        let semantic = g.value(step.semantic).item();
        let total = g.value(step.total).item();
        if !(total.is_finite() && photometric.is_finite() && semantic.is_finite()) {
            return Err(Error::Diverged(format!(
                "non-finite loss at iteration {} on frame {} (pixels {:?})",
                self.iteration, frame.index, pixels
            )));
        }

        let k = self.model.classes();
        let mut class_sum = vec![0.0; k];
        let mut class_count = vec![0usize; k];
        for (&p, (rgb, sem)) in pixels.iter().zip(per_ray_losses(&g, &step, &frame, &pixels)) {
            let c = frame.labels[p] as usize;
            self.stats.record_ray_loss(c, rgb, sem)?;
            class_sum[c] += rgb + sem;
            class_count[c] += 1;
        }

        self.model.store.zero_grad();
        g.backward(step.total, &mut self.model.store)?;
        self.adam.step(&mut self.model.store).map_err(|e| match e {
            Error::PoisonedState(name) => Error::Diverged(format!(
                "non-finite gradient in `{name}` at iteration {} on frame {} (pixels {:?})",
                self.iteration, frame.index, pixels
            )),
            other => other,
        })?;

        let report = LossReport {
            iteration: self.iteration,
            frame: frame.index,
            photometric,
            semantic,
            total,
            class_loss: class_sum
                .iter()
                .zip(&class_count)
                .map(|(s, &n)| (n > 0).then(|| s / n as f64))
                .collect(),
        };
        self.iteration += 1;
        self.position += 1;
        let mut epoch_log = None;
        if self.position == self.frames.len() {
            let counts = self.stats.counts().to_vec();
            self.stats.finish_epoch();
            let everyone: Vec<usize> = (0..k).collect();
            let allocation = scheduler::allocate(&self.stats, self.config.rays.max(k), &everyone)
                .map(|p| p.counts)
                .unwrap_or_default();
            epoch_log = Some(EpochLog {
                epoch: self.epoch,
                iteration: self.iteration,
                class_loss: self.stats.averages().to_vec(),
                class_rays: counts,
                allocation,
            });
            self.epoch += 1;
            self.position = 0;
        }
        Ok((report, epoch_log))
    }

    /// Run the configured number of iterations, writing `train_log.jsonl` next to the
    /// checkpoint and the checkpoint itself at `checkpoint`.
    pub fn run(mut self, checkpoint: &Path) -> Result<TrainOutcome> {
        let dir = checkpoint.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log_path = dir.join("train_log.jsonl");
        let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let mut log = BufWriter::new(file);
        let mut write = |line: LogLine<'_>| -> Result<()> {
            let text = serde_json::to_string(&line).expect("log line serializes");
            writeln!(log, "{text}").map_err(|e| Error::io(&log_path, e))
        };
        let mut last = None;
        for _ in 0..self.config.iterations {
            let (report, epoch) = self.step()?;
            write(LogLine::Iteration(&report))?;
            if let Some(e) = &epoch {
                write(LogLine::Epoch(e))?;
            }
            last = Some(report);
            let every = self.config.checkpoint_every;
            if every > 0 && self.iteration.is_multiple_of(every) && self.iteration < self.config.iterations {
                self.model.save(checkpoint)?;
            }
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        drop(log);
        self.model.save(checkpoint)?;
        Ok(TrainOutcome {
            model: self.model,
            checkpoint: checkpoint.to_path_buf(),
            log: log_path,
            last,
        })
    }
}

/// Train from scratch and save the final checkpoint.
pub fn train(dataset: &Dataset, config: TrainConfig, checkpoint: &Path) -> Result<TrainOutcome> {
    Trainer::new(dataset, config)?.run(checkpoint)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn consts(g: &mut Graph, rows: usize, cols: usize, v: &[f64]) -> Var {
        g.constant(Tensor::matrix(rows, cols, v.to_vec()))
    }

    #[test]
    fn perfect_prediction_has_zero_photometric_loss() {
        let mut g = Graph::new();
        let c = consts(&mut g, 2, 3, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let l = photometric_loss(&mut g, c, Some(c), c);
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn fine_offset_costs_its_square() {
        let mut g = Graph::new();
        let c = consts(&mut g, 1, 3, &[0.2, 0.5, 0.7]);
        let f = consts(&mut g, 1, 3, &[0.3, 0.5, 0.7]);
        let l = photometric_loss(&mut g, c, Some(f), c);
        assert!((g.value(l).item() - 0.01).abs() < 1e-15);
        let swapped = photometric_loss(&mut g, f, Some(c), c);
        assert_eq!(g.value(l).item(), g.value(swapped).item());
    }

    #[test]
    fn semantic_loss_values() {
        let mut g = Graph::new();
        let p = consts(&mut g, 1, 2, &[1.0, 0.0]);
        let l = semantic_loss(&mut g, p, Some(p), p);
        assert_eq!(g.value(l).item(), 0.0);
        let half = consts(&mut g, 1, 2, &[0.5, 0.5]);
        let l = semantic_loss(&mut g, half, Some(half), p);
        assert!((g.value(l).item() - 2.0 * 2f64.ln()).abs() < 1e-12);
        let wrong = consts(&mut g, 1, 2, &[0.0, 1.0]);
        let l = semantic_loss(&mut g, wrong, Some(wrong), p);
        assert!((g.value(l).item() + 2.0 * 1e-12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn total_loss_values() {
        let mut g = Graph::new();
        let lp = g.constant(Tensor::scalar(1.0));
        let ls = g.constant(Tensor::scalar(0.5));
        let t = total_loss(&mut g, lp, ls, 0.04);
        assert!((g.value(t).item() - 1.02).abs() < 1e-15);
        let t0 = total_loss(&mut g, lp, ls, 0.0);
        assert_eq!(g.value(t0).item(), 1.0);
        let t2 = total_loss(&mut g, lp, ls, 0.08);
        let (d1, d2) = (g.value(t).item() - 1.0, g.value(t2).item() - 1.0);
        assert!((d2 - 2.0 * d1).abs() < 1e-15);
    }
}
