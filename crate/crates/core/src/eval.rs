//! Image and label metrics, full-frame rendering, deformation heatmaps, and ablation runs.

use std::collections::BTreeMap;
use std::fs;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{self, Dataset, FrameRecord};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::renderer::{render_chunked, FrameInput, Jitter, RenderConfig};
use crate::trainer::{train, TrainConfig};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_size<A, B>(a: &[A], b: &[B]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("image sizes differ: {} vs {} pixels", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Shape("empty image".into()));
    }
    Ok(())
}

fn mse(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (0..3).map(|j| (x[j] - y[j]).powi(2)).sum::<f64>())
        .sum();
    sum / (3 * a.len()) as f64
}

fn psnr_from_mse(m: f64) -> f64 {
    if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / m).log10()
    }
}

/// Peak signal-to-noise ratio for values in `[0, 1]`. Identical images give `f64::INFINITY`.
pub fn psnr(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    same_size(a, b)?;
    Ok(psnr_from_mse(mse(a, b)))
}

/// PSNR over the pixels whose ground-truth class is `class`, if any.
pub fn region_psnr(pred: &[[f64; 3]], truth: &[[f64; 3]], labels: &[u8], class: u8) -> Result<Option<f64>> {
    same_size(pred, truth)?;
    same_size(pred, labels)?;
    let (a, b): (Vec<[f64; 3]>, Vec<[f64; 3]>) = pred
        .iter()
        .zip(truth)
        .zip(labels)
        .filter(|(_, &l)| l == class)
        .map(|((p, t), _)| (*p, *t))
        .unzip();
    Ok((!a.is_empty()).then(|| psnr_from_mse(mse(&a, &b))))
}

pub fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean structural similarity of the luminance channels over every full 11×11 window.
pub fn ssim(a: &[[f64; 3]], b: &[[f64; 3]], width: usize, height: usize) -> Result<f64> {
    same_size(a, b)?;
    if a.len() != width * height {
        return Err(Error::Shape(format!("{} pixels for a {width}x{height} image", a.len())));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::Contract(format!(
            "{width}x{height} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let x: Vec<f64> = a.iter().map(|c| luminance(*c)).collect();
    let y: Vec<f64> = b.iter().map(|c| luminance(*c)).collect();
    let w = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=height - SSIM_WINDOW {
        for c0 in 0..=width - SSIM_WINDOW {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let k = w[i] * w[j];
                    let idx = (r0 + i) * width + c0 + j;
                    let (u, v) = (x[idx], y[idx]);
                    mx += k * u;
                    my += k * v;
                    sxx += k * u * u;
                    syy += k * v * v;
                    sxy += k * u * v;
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Fraction of pixels whose predicted class matches the ground truth.
pub fn semantic_accuracy(pred: &[u8], truth: &[u8]) -> Result<f64> {
    same_size(pred, truth)?;
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// A rendered frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRender {
    pub width: usize,
    pub height: usize,
    pub image: Vec<[f64; 3]>,
    /// Argmax of the rendered class distribution.
    pub classes: Vec<u8>,
    /// Per-pixel `Σ_i w_i ‖Δx_i‖` from the output pass.
    pub displacement: Vec<f64>,
}

/// Render settings stored with the model, bounded by the dataset's near/far planes.
pub fn eval_render_config(model: &Model, dataset: &Dataset) -> RenderConfig {
    model.render_config(dataset.meta.near, dataset.meta.far, 1024)
}

/// Render every pixel of a dataset frame with deterministic sample placement.
pub fn render_frame(
    model: &Model,
    dataset: &Dataset,
    frame: &FrameRecord,
    config: &RenderConfig,
    parallel: bool,
) -> Result<FrameRender> {
    let pixels = dataset.meta.pixels();
    let rays = (0..pixels)
        .map(|p| dataset.ray(frame.index, p))
        .collect::<Result<Vec<_>>>()?;
    let input = FrameInput {
        time: frame.time,
        head: &frame.pose,
        audio: &frame.audio,
    };
    let out = render_chunked(
        model,
        &rays,
        &dataset.background,
        &input,
        config,
        Jitter::Deterministic,
        parallel,
    )?;
    let mut image = Vec::with_capacity(pixels);
    let mut classes = Vec::with_capacity(pixels);
    let mut displacement = Vec::with_capacity(pixels);
    for o in &out {
        let o = o.output();
        image.push(o.color);
        let best = o
            .probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map_or(0, |(k, _)| k);
        classes.push(best as u8);
        displacement.push(o.displacement);
    }
    Ok(FrameRender {
        width: dataset.meta.width,
        height: dataset.meta.height,
        image,
        classes,
        displacement,
    })
}

mod decibels {
    use serde::{Deserialize, Deserializer, Serializer};

    pub const SENTINEL: &str = "inf";

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(SENTINEL)
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) if t == SENTINEL => Ok(f64::INFINITY),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {t}"))),
        }
    }
}

mod decibel_map {
    use std::collections::BTreeMap;

    use serde::ser::SerializeMap;
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(serde::Serialize, Deserialize)]
    struct Db(#[serde(with = "super::decibels")] f64);

    pub fn serialize<S: Serializer>(m: &BTreeMap<String, f64>, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(m.len()))?;
        for (k, v) in m {
            map.serialize_entry(k, &Db(*v))?;
        }
        map.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, f64>, D::Error> {
        let raw = BTreeMap::<String, Db>::deserialize(d)?;
        Ok(raw.into_iter().map(|(k, v)| (k, v.0)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub index: usize,
    #[serde(with = "decibels")]
    pub psnr: f64,
    pub ssim: f64,
    pub sem_acc: f64,
    /// Keyed by class name; classes absent from the frame are omitted.
    #[serde(with = "decibel_map")]
    pub region_psnr: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    #[serde(with = "decibels")]
    pub psnr: f64,
    pub ssim: f64,
    pub sem_acc: f64,
    /// Per-class PSNR of the pooled squared error over all frames.
    #[serde(with = "decibel_map")]
    pub region_psnr: BTreeMap<String, f64>,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: String,
    pub frames: Vec<FrameMetrics>,
    pub aggregate: AggregateMetrics,
}

impl MetricReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Metrics of one rendered frame against its ground truth.
pub fn frame_metrics(render: &FrameRender, truth: &FrameRecord, class_names: &[String]) -> Result<FrameMetrics> {
    let mut region = BTreeMap::new();
    for (k, name) in class_names.iter().enumerate() {
        if let Some(v) = region_psnr(&render.image, &truth.image, &truth.labels, k as u8)? {
            region.insert(name.clone(), v);
        }
    }
    Ok(FrameMetrics {
        index: truth.index,
        psnr: psnr(&render.image, &truth.image)?,
        ssim: ssim(&render.image, &truth.image, render.width, render.height)?,
        sem_acc: semantic_accuracy(&render.classes, &truth.labels)?,
        region_psnr: region,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Holdout,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Holdout => "holdout",
        }
    }

    pub fn indices(self, dataset: &Dataset) -> &[usize] {
        match self {
            Split::Train => &dataset.meta.train,
            Split::Holdout => &dataset.meta.holdout,
        }
    }
}

/// Render and score every frame of a split.
pub fn evaluate(model: &Model, dataset: &Dataset, split: Split, config: &RenderConfig) -> Result<MetricReport> {
    let names = &dataset.meta.class_names;
    let results: Vec<Result<(FrameMetrics, FrameRender, FrameRecord)>> = split
        .indices(dataset)
        .par_iter()
        .map(|&i| {
            let truth = dataset.frame(i)?;
            let render = render_frame(model, dataset, &truth, config, false)?;
            Ok((frame_metrics(&render, &truth, names)?, render, truth))
        })
        .collect();
    let mut frames = Vec::new();
    let mut sq = vec![0.0; names.len()];
    let mut px = vec![0usize; names.len()];
    for r in results {
        let (m, render, truth) = r?;
        for ((p, t), &l) in render.image.iter().zip(&truth.image).zip(&truth.labels) {
            sq[l as usize] += (0..3).map(|j| (p[j] - t[j]).powi(2)).sum::<f64>();
            px[l as usize] += 3;
        }
        frames.push(m);
    }
    let n = frames.len().max(1) as f64;
    let aggregate = AggregateMetrics {
        psnr: frames.iter().map(|f| f.psnr).sum::<f64>() / n,
        ssim: frames.iter().map(|f| f.ssim).sum::<f64>() / n,
        sem_acc: frames.iter().map(|f| f.sem_acc).sum::<f64>() / n,
        region_psnr: names
            .iter()
            .enumerate()
            .filter(|(k, _)| px[*k] > 0)
            .map(|(k, name)| (name.clone(), psnr_from_mse(sq[k] / px[k] as f64)))
            .collect(),
        frames: frames.len(),
    };
    Ok(MetricReport {
        split: split.name().to_string(),
        frames,
        aggregate,
    })
}

/// Sidecar written next to a heatmap PNG.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub frame: usize,
    pub width: usize,
    pub height: usize,
    /// Displacement magnitude mapped to intensity 255; 0 when the map is empty.
    pub scale: f64,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub frame: usize,
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// 8-bit intensities normalized by the maximum.
    pub fn intensities(&self) -> Vec<u8> {
        let scale = self.max();
        self.values
            .iter()
            .map(|v| if scale > 0.0 { (v / scale * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 })
            .collect()
    }

    /// Mean value over the pixels labelled `class`.
    pub fn region_mean(&self, labels: &[u8], class: u8) -> Option<f64> {
        let (sum, n) = self
            .values
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == class)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
        (n > 0).then(|| sum / n as f64)
    }
}

pub fn heatmap(model: &Model, dataset: &Dataset, frame: usize, config: &RenderConfig) -> Result<Heatmap> {
    if frame >= dataset.meta.frames {
        return Err(Error::Contract(format!("frame {frame} outside {} frames", dataset.meta.frames)));
    }
    let record = dataset.frame(frame)?;
    let render = render_frame(model, dataset, &record, config, true)?;
    Ok(Heatmap {
        frame,
        width: render.width,
        height: render.height,
        values: render.displacement,
    })
}

pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

/// Write the heatmap PNG and its JSON sidecar.
pub fn export_heatmap(map: &Heatmap, png: &Path) -> Result<HeatmapSidecar> {
    dataio::write_gray(png, map.width, map.height, map.intensities())?;
    let sidecar = HeatmapSidecar {
        frame: map.frame,
        width: map.width,
        height: map.height,
        scale: map.max(),
        mean: map.values.iter().sum::<f64>() / map.values.len().max(1) as f64,
    };
    let path = sidecar_path(png);
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(sidecar)
}

/// One training variant of the ablation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoDeform,
    NoDynamicSampling,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoDeform, Variant::NoDynamicSampling];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoDeform => "no-deform",
            Variant::NoDynamicSampling => "no-dynamic-sampling",
        }
    }

    pub fn apply(self, mut config: TrainConfig) -> TrainConfig {
        match self {
            Variant::Full => {}
            Variant::NoDeform => config.model.deform = None,
            Variant::NoDynamicSampling => config.dynamic_sampling = false,
        }
        config
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub checkpoint: PathBuf,
    pub train: AggregateMetrics,
    pub holdout: AggregateMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub iterations: usize,
    pub rays: usize,
    pub seed: u64,
    pub variants: Vec<VariantResult>,
}

impl AblationReport {
    pub fn get(&self, variant: Variant) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.variant == variant)
    }
}

/// Hash of every file under the dataset directory, in path order.
fn dataset_fingerprint(dir: &Path) -> Result<String> {
    fn walk(dir: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(&path, files)?;
            } else {
                files.push(path);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, &mut files)?;
    files.sort();
    let mut hasher = DefaultHasher::new();
    for path in &files {
        path.strip_prefix(dir).unwrap_or(path).hash(&mut hasher);
        fs::read(path).map_err(|e| Error::io(path, e))?.hash(&mut hasher);
    }
    Ok(format!("{:016x}", hasher.finish()))
}

/// Train and evaluate each variant under the same budget. A checkpoint already in
/// `out_dir` is reused when the `train_config.json` beside it matches the variant's config
/// and the dataset it was trained on.
pub fn ablate(dataset: &Dataset, base: &TrainConfig, variants: &[Variant], out_dir: &Path) -> Result<AblationReport> {
    let fingerprint = dataset_fingerprint(&dataset.dir)?;
    let mut results = Vec::new();
    for &variant in variants {
        let config = variant.apply(base.clone());
        let dir = out_dir.join(variant.name());
        let ckpt = dir.join("model.json");
        let stamp = dir.join("train_config.json");
        let wanted = serde_json::json!({ "dataset": fingerprint, "config": config });
        let wanted = serde_json::to_string_pretty(&wanted).expect("train config serializes");
        let cached = ckpt.is_file() && fs::read_to_string(&stamp).is_ok_and(|s| s == wanted);
        let model = if cached {
            Model::load(&ckpt)?
        } else {
            let _ = fs::remove_file(&stamp);
            let model = train(dataset, config.clone(), &ckpt)?.model;
            fs::write(&stamp, &wanted).map_err(|e| Error::io(&stamp, e))?;
            model
        };
        let render = eval_render_config(&model, dataset);
        let train_report = evaluate(&model, dataset, Split::Train, &render)?;
        let holdout_report = evaluate(&model, dataset, Split::Holdout, &render)?;
        train_report.save(&dir.join("report_train.json"))?;
        holdout_report.save(&dir.join("report_holdout.json"))?;
        results.push(VariantResult {
            variant,
            checkpoint: ckpt,
            train: train_report.aggregate,
            holdout: holdout_report.aggregate,
        });
    }
    let report = AblationReport {
        iterations: base.iterations,
        rays: base.rays,
        seed: base.seed,
        variants: results,
    };
    let path = out_dir.join("ablation.json");
    let text = serde_json::to_string_pretty(&report).expect("ablation report serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}
