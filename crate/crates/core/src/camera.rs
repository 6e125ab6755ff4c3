//! Pinhole cameras, ray generation and stratified sampling.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Aabb, Vec3};

/// Pinhole camera looking along its local `-z` axis with `+y` up.
/// `cam_to_world` is a row-major 4x4 rigid transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub cam_to_world: [f64; 16],
}

impl Camera {
    /// Camera at `eye` looking at `target`, vertical field of view `fov_y`.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, width: usize, height: usize, fov_y: f64) -> Camera {
        let back = (eye - target).normalized();
        let right = up.cross(back).normalized();
        let true_up = back.cross(right);
        let f = 0.5 * height as f64 / (0.5 * fov_y).tan();
        let mut m = [0.0; 16];
        for r in 0..3 {
            m[r * 4] = right.0[r];
            m[r * 4 + 1] = true_up.0[r];
            m[r * 4 + 2] = back.0[r];
            m[r * 4 + 3] = eye.0[r];
        }
        m[15] = 1.0;
        Camera {
            fx: f,
            fy: f,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
            cam_to_world: m,
        }
    }

    /// Identity pose with square pixels.
    pub fn identity(width: usize, height: usize, focal: f64) -> Camera {
        let mut m = [0.0; 16];
        for i in 0..4 {
            m[i * 5] = 1.0;
        }
        Camera {
            fx: focal,
            fy: focal,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
            cam_to_world: m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::Data("camera intrinsics must be positive".into()));
        }
        for i in 0..3 {
            for j in 0..3 {
                let d = self.axis(i).dot(self.axis(j)) - if i == j { 1.0 } else { 0.0 };
                if d.abs() > 1e-6 {
                    return Err(Error::Data("camera rotation is not orthonormal".into()));
                }
            }
        }
        Ok(())
    }

    /// Column `i` of the rotation block: the camera's local axis in world.
    pub fn axis(&self, i: usize) -> Vec3 {
        let m = &self.cam_to_world;
        Vec3([m[i], m[4 + i], m[8 + i]])
    }

    pub fn position(&self) -> Vec3 {
        let m = &self.cam_to_world;
        Vec3([m[3], m[7], m[11]])
    }

    /// Unit world direction through continuous pixel coordinates `(u, v)`,
    /// with `v` growing downwards.
    pub fn direction(&self, u: f64, v: f64) -> Vec3 {
        let (dx, dy) = ((u - self.cx) / self.fx, -(v - self.cy) / self.fy);
        (self.axis(0) * dx + self.axis(1) * dy - self.axis(2)).normalized()
    }

    /// Continuous coordinates of the centre of pixel `(col, row)`.
    pub fn pixel_center(col: usize, row: usize) -> [f64; 2] {
        [col as f64 + 0.5, row as f64 + 0.5]
    }

    /// Rays through the centres of every pixel, row-major.
    pub fn all_rays(&self) -> Vec<CameraRay> {
        let pixels: Vec<[f64; 2]> = (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| Camera::pixel_center(c, r)))
            .collect();
        generate_rays(self, &pixels)
    }
}

/// A ray clipped to the world bounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

/// A generated camera ray; `span` is `None` when it misses the world bounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraRay {
    pub origin: Vec3,
    pub direction: Vec3,
    pub span: Option<(f64, f64)>,
}

impl CameraRay {
    pub fn ray(&self) -> Option<Ray> {
        self.span.map(|(t_near, t_far)| Ray {
            origin: self.origin,
            direction: self.direction,
            t_near,
            t_far,
        })
    }
}

pub fn generate_rays(camera: &Camera, pixels: &[[f64; 2]]) -> Vec<CameraRay> {
    let origin = camera.position();
    pixels
        .iter()
        .map(|&[u, v]| {
            let direction = camera.direction(u, v);
            CameraRay {
                origin,
                direction,
                span: Aabb::UNIT.intersect(origin, direction),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub ts: Vec<f64>,
    pub positions: Vec<Vec3>,
    pub deltas: Vec<f64>,
    pub view_dir: Vec3,
}

/// Sample depths in `[t_near, t_far]`, one per equal-width bin: bin
/// midpoints without jitter, uniform within the bin with it.
pub fn sample_depths<R: Rng + ?Sized>(t_near: f64, t_far: f64, m: usize, jitter: bool, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let w = (t_far - t_near) / m as f64;
    let ts: Vec<f64> = (0..m)
        .map(|i| {
            let u = if jitter { rng.gen::<f64>() } else { 0.5 };
            t_near + w * (i as f64 + u)
        })
        .collect();
    let deltas = (0..m)
        .map(|i| {
            let next = if i + 1 < m { ts[i + 1] } else { t_far };
            (next - ts[i]).max(1e-12)
        })
        .collect();
    (ts, deltas)
}

pub fn sample_along_ray<R: Rng + ?Sized>(ray: &Ray, m: usize, jitter: bool, rng: &mut R) -> Result<RaySamples> {
    if m < 2 {
        return Err(Error::invalid("need at least 2 samples per ray"));
    }
    let (ts, deltas) = sample_depths(ray.t_near, ray.t_far, m, jitter, rng);
    Ok(RaySamples {
        positions: ts.iter().map(|&t| ray.origin + ray.direction * t).collect(),
        ts,
        deltas,
        view_dir: ray.direction,
    })
}

pub fn save_cameras(path: &Path, cams: &[Camera]) -> Result<()> {
    let text = serde_json::to_string_pretty(cams).expect("cameras serialise");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cams: Vec<Camera> = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })?;
    for c in &cams {
        c.validate()?;
    }
    Ok(cams)
}
