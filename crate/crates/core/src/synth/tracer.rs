use rayon::prelude::*;

use super::scene::SceneSpec;
use crate::camera::Camera;
use crate::geom::Vec3;
use crate::image::{PartMap, RgbImage, BACKGROUND_LABEL};

/// Fixed light direction used for flat shading.
pub fn light_direction() -> Vec3 {
    Vec3::new(0.4, 1.0, 0.6).normalized()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub normal: Vec3,
    pub primitive: usize,
}

/// Nearest primitive hit along a ray.
pub fn trace(scene: &SceneSpec, origin: Vec3, dir: Vec3) -> Option<Hit> {
    scene
        .primitives
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.intersect(origin, dir).map(|(t, normal)| Hit { t, normal, primitive: i }))
        .min_by(|a, b| a.t.total_cmp(&b.t))
}

/// Sub-pixel rays per axis averaged into each colour pixel.
pub const SUPERSAMPLE: usize = 4;

fn shade(scene: &SceneSpec, origin: Vec3, dir: Vec3) -> ([f64; 3], u8) {
    match trace(scene, origin, dir) {
        None => ([1.0; 3], BACKGROUND_LABEL),
        Some(hit) => {
            let p = &scene.primitives[hit.primitive];
            let s = 0.4 + 0.6 * hit.normal.dot(light_direction()).abs();
            (p.albedo.map(|a| a * s), p.part)
        }
    }
}

/// Ground-truth colour image on white and the matching part-index map.
///
/// Colours average a stratified `SUPERSAMPLE x SUPERSAMPLE` grid of rays per
/// pixel; part labels come from the pixel-centre ray.
pub fn raytrace_reference(scene: &SceneSpec, camera: &Camera) -> (RgbImage, PartMap) {
    let (w, h) = (camera.width, camera.height);
    let origin = camera.position();
    let n = SUPERSAMPLE;
    let pixels: Vec<([f64; 3], u8)> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (col, row) = (i % w, i / w);
            let [u, v] = Camera::pixel_center(col, row);
            let (_, label) = shade(scene, origin, camera.direction(u, v));
            let mut rgb = [0.0; 3];
            for a in 0..n {
                for b in 0..n {
                    let su = col as f64 + (a as f64 + 0.5) / n as f64;
                    let sv = row as f64 + (b as f64 + 0.5) / n as f64;
                    let (c, _) = shade(scene, origin, camera.direction(su, sv));
                    for k in 0..3 {
                        rgb[k] += c[k] / (n * n) as f64;
                    }
                }
            }
            (rgb, label)
        })
        .collect();
    let rgb = RgbImage {
        width: w,
        height: h,
        data: pixels.iter().flat_map(|(c, _)| *c).collect(),
    };
    let parts = PartMap {
        width: w,
        height: h,
        labels: pixels.iter().map(|(_, l)| *l).collect(),
    };
    (rgb, parts)
}
