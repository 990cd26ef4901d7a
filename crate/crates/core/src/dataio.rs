//! On-disk dataset layout, validation, and the analytic synthetic portrait generator.
//!
//! ```text
//! meta.json
//! frames/00000.png     8-bit RGB
//! semantic/00000.png   8-bit class ids
//! poses.json           [{ "R": [9 floats, row-major], "tau": [3 floats] }, ...]
//! audio.bin            little-endian f32, [frames, dim]
//! audio.json           { "frames": T, "dim": D }
//! anchors.json         [[x, y, z], ...]
//! background.png       8-bit RGB
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{AudioTrack, AudioWindow};
use crate::error::{Error, Result};
use crate::fields::Pose;
use crate::renderer::{pixel_ray, Intrinsics, Ray, SceneBox};

pub const POSE_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub class_names: Vec<String>,
    pub background_class: usize,
    pub intrinsics: Intrinsics,
    pub near: f64,
    pub far: f64,
    pub scene_box: SceneBox,
    pub audio_dim: usize,
    pub train: Vec<usize>,
    pub holdout: Vec<usize>,
    /// Generator settings when the dataset is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SynthSceneConfig>,
}

impl DatasetMeta {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Normalized frame time: 0 at frame 0, 1 at the last frame.
    pub fn time(&self, frame: usize) -> f64 {
        if self.frames < 2 {
            0.0
        } else {
            frame as f64 / (self.frames - 1) as f64
        }
    }

    fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.frames == 0 {
            return fail("dataset has no frames".into());
        }
        if self.width == 0 || self.height == 0 {
            return fail("image size must be positive".into());
        }
        if self.intrinsics.width != self.width || self.intrinsics.height != self.height {
            return fail("intrinsics size does not match the image size".into());
        }
        if self.classes() == 0 || self.classes() > 256 {
            return fail(format!("{} classes cannot be stored as 8-bit ids", self.classes()));
        }
        if self.background_class >= self.classes() {
            return fail(format!("background class {} is not a class id", self.background_class));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return fail(format!("invalid near/far bounds [{}, {}]", self.near, self.far));
        }
        if (0..3).any(|i| self.scene_box.max[i] <= self.scene_box.min[i]) {
            return fail("scene box is empty".into());
        }
        let mut seen = vec![0u8; self.frames];
        for &i in self.train.iter().chain(&self.holdout) {
            if i >= self.frames {
                return fail(format!("split index {i} outside {} frames", self.frames));
            }
            seen[i] += 1;
        }
        if seen.iter().any(|&c| c != 1) {
            return fail("train and holdout indices must be disjoint and cover every frame".into());
        }
        Ok(())
    }
}

/// Everything needed to render or supervise one frame.
#[derive(Clone, Debug)]
pub struct FrameRecord {
    pub index: usize,
    pub time: f64,
    pub pose: Pose,
    /// Row-major RGB in `[0, 1]`, `width * height` entries.
    pub image: Vec<[f64; 3]>,
    /// Row-major class ids.
    pub labels: Vec<u8>,
    pub audio: AudioWindow,
}

/// A validated dataset directory. Frames are read on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub meta: DatasetMeta,
    pub poses: Vec<Pose>,
    pub audio: AudioTrack,
    pub anchors: Vec<[f64; 3]>,
    pub background: Vec<[f64; 3]>,
    audio_window: usize,
}

#[derive(Serialize, Deserialize)]
struct AudioHeader {
    frames: usize,
    dim: usize,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Validation(format!("missing file {}", path.display())))
    }
}

pub fn frame_path(dir: &Path, frame: usize) -> PathBuf {
    dir.join("frames").join(format!("{frame:05}.png"))
}

pub fn semantic_path(dir: &Path, frame: usize) -> PathBuf {
    dir.join("semantic").join(format!("{frame:05}.png"))
}

fn to_unit(v: u8) -> f64 {
    v as f64 / 255.0
}

pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_rgb(path: &Path, width: usize, height: usize) -> Result<Vec<[f64; 3]>> {
    require(path)?;
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    if img.width() as usize != width || img.height() as usize != height {
        return Err(Error::Validation(format!(
            "{} is {}x{}, expected {width}x{height}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    Ok(img
        .to_rgb8()
        .pixels()
        .map(|p| [to_unit(p[0]), to_unit(p[1]), to_unit(p[2])])
        .collect())
}

pub fn write_rgb(path: &Path, width: usize, height: usize, pixels: &[[f64; 3]]) -> Result<()> {
    let bytes: Vec<u8> = pixels.iter().flat_map(|c| c.map(to_byte)).collect();
    let img = RgbImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::Shape(format!("{} pixels for a {width}x{height} image", pixels.len())))?;
    img.save(path).map_err(|e| Error::image(path, e))
}

pub fn write_gray(path: &Path, width: usize, height: usize, values: Vec<u8>) -> Result<()> {
    let img = GrayImage::from_raw(width as u32, height as u32, values)
        .ok_or_else(|| Error::Shape(format!("wrong pixel count for a {width}x{height} image")))?;
    img.save(path).map_err(|e| Error::image(path, e))
}

fn read_labels(path: &Path, meta: &DatasetMeta, frame: usize) -> Result<Vec<u8>> {
    require(path)?;
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    if img.width() as usize != meta.width || img.height() as usize != meta.height {
        return Err(Error::Validation(format!(
            "semantic map of frame {frame} is {}x{}, expected {}x{}",
            img.width(),
            img.height(),
            meta.width,
            meta.height
        )));
    }
    if img.color() != image::ColorType::L8 {
        return Err(Error::Validation(format!(
            "semantic map of frame {frame} must be 8-bit single channel"
        )));
    }
    let labels = img.into_luma8().into_raw();
    if let Some(i) = labels.iter().position(|&l| l as usize >= meta.classes()) {
        return Err(Error::Validation(format!(
            "semantic map of frame {frame} has class {} at pixel ({}, {}), but only {} classes exist",
            labels[i],
            i % meta.width,
            i / meta.width,
            meta.classes()
        )));
    }
    Ok(labels)
}

fn read_audio(dir: &Path) -> Result<AudioTrack> {
    let header_path = dir.join("audio.json");
    let blob_path = dir.join("audio.bin");
    require(&header_path)?;
    require(&blob_path)?;
    let header: AudioHeader = read_json(&header_path)?;
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if bytes.len() != header.frames * header.dim * 4 {
        return Err(Error::Validation(format!(
            "audio.bin holds {} bytes, expected {} for [{}, {}] f32",
            bytes.len(),
            header.frames * header.dim * 4,
            header.frames,
            header.dim
        )));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("audio.bin contains non-finite values".into()));
    }
    Ok(AudioTrack {
        frames: header.frames,
        dim: header.dim,
        data,
    })
}

fn write_audio(dir: &Path, track: &AudioTrack) -> Result<()> {
    let bytes: Vec<u8> = track.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    let path = dir.join("audio.bin");
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    write_json(
        &dir.join("audio.json"),
        &AudioHeader {
            frames: track.frames,
            dim: track.dim,
        },
    )
}

impl Dataset {
    /// Validate the whole directory and keep the small per-sequence files in memory.
    /// `audio_window` is the number of audio rows handed to each frame.
    pub fn load(dir: &Path, audio_window: usize) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        require(&meta_path)?;
        let meta: DatasetMeta = read_json(&meta_path)?;
        meta.validate()?;

        let poses_path = dir.join("poses.json");
        require(&poses_path)?;
        let poses: Vec<Pose> = read_json(&poses_path)?;
        if poses.len() != meta.frames {
            return Err(Error::Validation(format!(
                "poses.json has {} poses for {} frames",
                poses.len(),
                meta.frames
            )));
        }
        for (i, p) in poses.iter().enumerate() {
            p.validate(POSE_TOLERANCE)
                .map_err(|e| Error::Validation(format!("pose of frame {i}: {e}")))?;
        }

        let audio = read_audio(dir)?;
        if audio.frames != meta.frames || audio.dim != meta.audio_dim {
            return Err(Error::Validation(format!(
                "audio is [{}, {}], expected [{}, {}]",
                audio.frames, audio.dim, meta.frames, meta.audio_dim
            )));
        }

        let anchors_path = dir.join("anchors.json");
        require(&anchors_path)?;
        let anchors: Vec<[f64; 3]> = read_json(&anchors_path)?;
        if anchors.is_empty() || anchors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Validation("anchors.json must hold finite points".into()));
        }

        let background = read_rgb(&dir.join("background.png"), meta.width, meta.height)?;

        let dataset = Self {
            dir: dir.to_path_buf(),
            meta,
            poses,
            audio,
            anchors,
            background,
            audio_window,
        };
        for i in 0..dataset.meta.frames {
            dataset.frame(i)?;
        }
        Ok(dataset)
    }

    pub fn frame(&self, index: usize) -> Result<FrameRecord> {
        if index >= self.meta.frames {
            return Err(Error::Contract(format!(
                "frame {index} outside {} frames",
                self.meta.frames
            )));
        }
        let image = read_rgb(&frame_path(&self.dir, index), self.meta.width, self.meta.height)?;
        let labels = read_labels(&semantic_path(&self.dir, index), &self.meta, index)?;
        Ok(FrameRecord {
            index,
            time: self.meta.time(index),
            pose: self.poses[index],
            image,
            labels,
            audio: self.audio.window(index, self.audio_window),
        })
    }

    pub fn canonical_pose(&self) -> Pose {
        self.poses[0]
    }

    pub fn ray(&self, frame: usize, pixel: usize) -> Result<Ray> {
        let w = self.meta.width;
        pixel_ray(
            &self.poses[frame],
            &self.meta.intrinsics,
            (pixel % w, pixel / w),
            self.meta.time(frame),
            self.meta.near,
            self.meta.far,
        )
    }
}

/// Deterministic train/holdout split. Frame 0 always trains.
pub fn split(frames: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if frames < 2 {
        return Err(Error::Contract(format!("cannot split {frames} frames")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Contract(format!("split ratio {ratio} outside (0, 1)")));
    }
    let n_train = ((ratio * frames as f64).round() as usize).clamp(1, frames - 1);
    let mut rest: Vec<usize> = (1..frames).collect();
    rest.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = vec![0];
    train.extend_from_slice(&rest[..n_train - 1]);
    let mut holdout = rest[n_train - 1..].to_vec();
    train.sort_unstable();
    holdout.sort_unstable();
    Ok((train, holdout))
}

/// Class ids of the synthetic portrait.
pub const BACKGROUND: u8 = 0;
pub const HEAD: u8 = 1;
pub const MOUTH: u8 = 2;
pub const TORSO: u8 = 3;
pub const SYNTH_CLASS_NAMES: [&str; 4] = ["background", "head", "mouth", "torso"];

/// Analytic scene: a head sphere with an audio-driven mouth cap and a torso box that slides
/// sideways over time, seen by a camera orbiting the head. World y points down.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSceneConfig {
    pub frames: usize,
    pub size: usize,
    pub seed: u64,
    pub fov_degrees: f64,
    pub head_center: [f64; 3],
    pub head_radius: f64,
    /// Unit direction from the head centre to the mouth centre.
    pub mouth_direction: [f64; 3],
    /// Angular radius of the mouth cap at zero amplitude, radians.
    pub mouth_min_angle: f64,
    /// Extra angular radius at full amplitude.
    pub mouth_gain: f64,
    pub torso_min: [f64; 3],
    pub torso_max: [f64; 3],
    /// Sideways torso shift `amplitude · sin(2π i / period)` along x.
    pub torso_shift_amplitude: f64,
    pub torso_shift_period: f64,
    pub head_color: [f64; 3],
    pub mouth_color: [f64; 3],
    pub torso_color: [f64; 3],
    pub background_color: [f64; 3],
    pub camera_distance: f64,
    /// Orbit azimuth `yaw · sin(2π i / period)` and elevation `pitch · sin(2π i / (2 period))`,
    /// degrees.
    pub orbit_yaw_degrees: f64,
    pub orbit_pitch_degrees: f64,
    pub orbit_period: f64,
    pub audio_dim: usize,
    pub near: f64,
    pub far: f64,
    pub scene_extent: f64,
    pub anchors: usize,
    pub train_ratio: f64,
}

impl Default for SynthSceneConfig {
    fn default() -> Self {
        Self {
            frames: 50,
            size: 64,
            seed: 0,
            fov_degrees: 30.0,
            head_center: [0.0, -0.25, 0.0],
            head_radius: 0.42,
            mouth_direction: [0.0, 0.4, -0.916_515_138_991_168],
            mouth_min_angle: 0.12,
            mouth_gain: 0.28,
            torso_min: [-0.62, 0.22, -0.3],
            torso_max: [0.62, 0.95, 0.3],
            torso_shift_amplitude: 0.12,
            torso_shift_period: 20.0,
            head_color: [0.902, 0.694, 0.6],
            mouth_color: [0.702, 0.118, 0.18],
            torso_color: [0.2, 0.353, 0.698],
            background_color: [0.949, 0.949, 0.902],
            camera_distance: 3.0,
            orbit_yaw_degrees: 14.0,
            orbit_pitch_degrees: 5.0,
            orbit_period: 31.0,
            audio_dim: 29,
            near: 1.8,
            far: 4.2,
            scene_extent: 1.5,
            anchors: 64,
            train_ratio: 0.8,
        }
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Nearest positive hit of a ray with a sphere.
pub fn intersect_sphere(origin: [f64; 3], dir: [f64; 3], center: [f64; 3], radius: f64) -> Option<f64> {
    let oc = sub(origin, center);
    let b = dot(oc, dir);
    let c = dot(oc, oc) - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    [-b - s, -b + s].into_iter().find(|&t| t > 0.0)
}

/// Slab test against an axis-aligned box; returns the entry distance when positive.
pub fn intersect_box(origin: [f64; 3], dir: [f64; 3], min: [f64; 3], max: [f64; 3]) -> Option<f64> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for i in 0..3 {
        if dir[i] == 0.0 {
            if origin[i] < min[i] || origin[i] > max[i] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[i];
        let (a, b) = ((min[i] - origin[i]) * inv, (max[i] - origin[i]) * inv);
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    if t1 < t0.max(0.0) {
        return None;
    }
    Some(if t0 > 0.0 { t0 } else { t1 })
}

impl SynthSceneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Contract(m.to_string()));
        if self.frames < 2 || self.size < 8 {
            return fail("need at least 2 frames of at least 8x8 pixels");
        }
        if self.head_radius <= 0.0 || (0..3).any(|i| self.torso_max[i] <= self.torso_min[i]) {
            return fail("degenerate head or torso");
        }
        if (dot(self.mouth_direction, self.mouth_direction) - 1.0).abs() > 1e-9 {
            return fail("mouth direction must be a unit vector");
        }
        if self.torso_shift_period <= 0.0 || self.orbit_period <= 0.0 {
            return fail("periods must be positive");
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return fail("invalid near/far bounds");
        }
        if self.anchors == 0 || self.audio_dim == 0 {
            return fail("need anchors and audio features");
        }
        Ok(())
    }

    /// Mouth opening in `[0, 1]`; zero at frame 0.
    pub fn amplitude(&self, frame: usize) -> f64 {
        let i = frame as f64;
        let envelope = 0.6 + 0.4 * (std::f64::consts::TAU * i / 17.0).sin();
        let syllable = 0.5 * (1.0 - (std::f64::consts::TAU * i / 6.0).cos());
        (envelope * syllable).clamp(0.0, 1.0)
    }

    pub fn torso_shift(&self, frame: usize) -> f64 {
        self.torso_shift_amplitude * (std::f64::consts::TAU * frame as f64 / self.torso_shift_period).sin()
    }

    /// Frame with the largest absolute torso shift.
    pub fn max_shift_frame(&self) -> usize {
        (0..self.frames)
            .max_by(|&a, &b| self.torso_shift(a).abs().total_cmp(&self.torso_shift(b).abs()).then(b.cmp(&a)))
            .unwrap_or(0)
    }

    pub fn mouth_angle(&self, amplitude: f64) -> f64 {
        self.mouth_min_angle + self.mouth_gain * amplitude.clamp(0.0, 1.0)
    }

    /// Deterministic sinusoid-bank embedding of the amplitude. Frequencies stay between
    /// 0.5 and 2 half-cycles over the amplitude range.
    pub fn audio_row(&self, amplitude: f64) -> Vec<f32> {
        let span = self.audio_dim.saturating_sub(1).max(1) as f64;
        (0..self.audio_dim)
            .map(|j| {
                let freq = 0.5 + 1.5 * j as f64 / span;
                let phase = 0.7 * j as f64;
                (freq * std::f64::consts::PI * amplitude + phase).sin() as f32
            })
            .collect()
    }

    /// Camera looking at the head centre from an orbit around it.
    pub fn pose(&self, frame: usize) -> Pose {
        let i = frame as f64;
        let yaw = self.orbit_yaw_degrees.to_radians() * (std::f64::consts::TAU * i / self.orbit_period).sin();
        let pitch =
            self.orbit_pitch_degrees.to_radians() * (std::f64::consts::TAU * i / (2.0 * self.orbit_period)).sin();
        let target = [0.0, 0.0, 0.0];
        let eye = [
            self.camera_distance * yaw.sin() * pitch.cos(),
            -self.camera_distance * pitch.sin(),
            -self.camera_distance * yaw.cos() * pitch.cos(),
        ];
        let forward = unit(sub(target, eye));
        let right = unit(cross([0.0, 1.0, 0.0], forward));
        let down = cross(forward, right);
        Pose {
            rotation: [
                right[0], down[0], forward[0], //
                right[1], down[1], forward[1], //
                right[2], down[2], forward[2],
            ],
            translation: eye,
        }
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::from_fov(self.size, self.size, self.fov_degrees)
    }

    /// Points spread over the head sphere (Fibonacci lattice).
    pub fn anchor_points(&self) -> Vec<[f64; 3]> {
        let n = self.anchors as f64;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        (0..self.anchors)
            .map(|k| {
                let y = 1.0 - 2.0 * (k as f64 + 0.5) / n;
                let r = (1.0 - y * y).sqrt();
                let phi = golden * k as f64;
                [
                    self.head_center[0] + self.head_radius * r * phi.cos(),
                    self.head_center[1] + self.head_radius * y,
                    self.head_center[2] + self.head_radius * r * phi.sin(),
                ]
            })
            .collect()
    }

    /// Class and color seen along a ray at `frame`.
    pub fn trace(&self, ray: &Ray, frame: usize) -> (u8, [f64; 3]) {
        let shift = self.torso_shift(frame);
        let tmin = [self.torso_min[0] + shift, self.torso_min[1], self.torso_min[2]];
        let tmax = [self.torso_max[0] + shift, self.torso_max[1], self.torso_max[2]];
        let head = intersect_sphere(ray.origin, ray.direction, self.head_center, self.head_radius);
        let torso = intersect_box(ray.origin, ray.direction, tmin, tmax);
        match (head, torso) {
            (Some(h), t) if t.is_none_or(|t| h <= t) => {
                let n = unit(sub(ray.at(h), self.head_center));
                if dot(n, self.mouth_direction) >= self.mouth_angle(self.amplitude(frame)).cos() {
                    (MOUTH, self.mouth_color)
                } else {
                    (HEAD, self.head_color)
                }
            }
            (_, Some(_)) => (TORSO, self.torso_color),
            _ => (BACKGROUND, self.background_color),
        }
    }

    pub fn meta(&self) -> Result<DatasetMeta> {
        let (train, holdout) = split(self.frames, self.train_ratio, self.seed)?;
        let e = self.scene_extent;
        Ok(DatasetMeta {
            frames: self.frames,
            width: self.size,
            height: self.size,
            class_names: SYNTH_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            background_class: BACKGROUND as usize,
            intrinsics: self.intrinsics(),
            near: self.near,
            far: self.far,
            scene_box: SceneBox {
                min: [-e; 3],
                max: [e; 3],
            },
            audio_dim: self.audio_dim,
            train,
            holdout,
            synthetic: Some(self.clone()),
        })
    }
}

/// Ray-trace the synthetic sequence into `out_dir`.
pub fn generate_synthetic(config: &SynthSceneConfig, out_dir: &Path) -> Result<DatasetMeta> {
    config.validate()?;
    let meta = config.meta()?;
    for sub in ["frames", "semantic"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let intr = meta.intrinsics;
    let mut poses = Vec::with_capacity(config.frames);
    let mut audio = Vec::with_capacity(config.frames * config.audio_dim);
    for f in 0..config.frames {
        let pose = config.pose(f);
        let mut rgb = Vec::with_capacity(meta.pixels());
        let mut labels = Vec::with_capacity(meta.pixels());
        for row in 0..config.size {
            for col in 0..config.size {
                let ray = pixel_ray(&pose, &intr, (col, row), meta.time(f), config.near, config.far)?;
                let (class, color) = config.trace(&ray, f);
                rgb.push(color);
                labels.push(class);
            }
        }
        write_rgb(&frame_path(out_dir, f), config.size, config.size, &rgb)?;
        write_gray(&semantic_path(out_dir, f), config.size, config.size, labels)?;
        poses.push(pose);
        audio.extend(config.audio_row(config.amplitude(f)));
    }
    write_json(&out_dir.join("poses.json"), &poses)?;
    write_audio(
        out_dir,
        &AudioTrack {
            frames: config.frames,
            dim: config.audio_dim,
            data: audio,
        },
    )?;
    write_json(&out_dir.join("anchors.json"), &config.anchor_points())?;
    write_rgb(
        &out_dir.join("background.png"),
        config.size,
        config.size,
        &vec![config.background_color; meta.pixels()],
    )?;
    write_json(&out_dir.join("meta.json"), &meta)?;
    Ok(meta)
}
