use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::Pose;

/// Pinhole intrinsics. Camera looks down +z, image x right, image y down.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Principal point at the image centre, focal length from a horizontal field of view.
    pub fn from_fov(width: usize, height: usize, fov_x_degrees: f64) -> Self {
        let focal = 0.5 * width as f64 / (0.5 * fov_x_degrees.to_radians()).tan();
        Self {
            width,
            height,
            focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        }
    }

    /// Continuous coordinates of the centre of pixel `(col, row)`.
    pub fn pixel_center(col: usize, row: usize) -> (f64, f64) {
        (col as f64 + 0.5, row as f64 + 0.5)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    pub near: f64,
    pub far: f64,
    /// `(col, row)` of the pixel the ray passes through.
    pub pixel: (usize, usize),
    pub time: f64,
}

impl Ray {
    pub fn at(&self, v: f64) -> [f64; 3] {
        [
            self.origin[0] + v * self.direction[0],
            self.origin[1] + v * self.direction[1],
            self.origin[2] + v * self.direction[2],
        ]
    }
}

pub fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Ray through continuous image point `(u, v)`: origin `τ`, direction
/// `normalize(R · K⁻¹ · (u, v, 1))`.
pub fn generate_ray(pose: &Pose, intrinsics: &Intrinsics, uv: (f64, f64), time: f64) -> Result<Ray> {
    let (u, v) = uv;
    if !(0.0..=intrinsics.width as f64).contains(&u) || !(0.0..=intrinsics.height as f64).contains(&v) {
        return Err(Error::Contract(format!(
            "pixel ({u}, {v}) outside {}x{} image",
            intrinsics.width, intrinsics.height
        )));
    }
    let cam = [
        (u - intrinsics.cx) / intrinsics.focal,
        (v - intrinsics.cy) / intrinsics.focal,
        1.0,
    ];
    let pixel = (
        (u.floor() as usize).min(intrinsics.width.saturating_sub(1)),
        (v.floor() as usize).min(intrinsics.height.saturating_sub(1)),
    );
    Ok(Ray {
        origin: pose.translation,
        direction: normalize(pose.rotate(cam)),
        near: 0.0,
        far: 1.0,
        pixel,
        time,
    })
}

/// Ray through the centre of pixel `(col, row)` with the given bounds.
pub fn pixel_ray(pose: &Pose, intrinsics: &Intrinsics, pixel: (usize, usize), time: f64, near: f64, far: f64) -> Result<Ray> {
    let mut ray = generate_ray(pose, intrinsics, Intrinsics::pixel_center(pixel.0, pixel.1), time)?;
    ray.near = near;
    ray.far = far;
    ray.pixel = pixel;
    Ok(ray)
}

/// Axis-aligned world box mapped affinely onto `[-1, 1]^3`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl SceneBox {
    pub fn normalize(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for a in 0..3 {
            out[a] = 2.0 * (p[a] - self.min[a]) / (self.max[a] - self.min[a]) - 1.0;
        }
        out
    }

    pub fn denormalize(&self, q: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for a in 0..3 {
            out[a] = self.min[a] + (q[a] + 1.0) * 0.5 * (self.max[a] - self.min[a]);
        }
        out
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}
