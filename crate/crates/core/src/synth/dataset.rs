use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scene::SceneSpec;
use super::templates::{generate_scene, template_registry, PARTS};
use super::tracer::raytrace_reference;
use crate::camera::{load_cameras, save_cameras, Camera};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::image::{PartMap, RgbImage};
use crate::seed::derive_seed;

pub const MANIFEST_FILE: &str = "manifest.json";
const CAMERA_FILE: &str = "cameras.json";
const HELDOUT_CAMERA_FILE: &str = "cameras_heldout.json";

/// Distance of every camera from the origin.
const CAMERA_RADIUS: f64 = 1.8;
const FOV_Y_DEG: f64 = 45.0;
const ELEVATIONS_DEG: [f64; 2] = [15.0, 40.0];
const HELDOUT_ELEVATION_DEG: f64 = 27.5;

#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub templates: Vec<String>,
    pub objects: usize,
    pub test_objects: usize,
    pub views: usize,
    pub heldout_views: usize,
    pub image_size: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub rgb: String,
    pub part: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub name: String,
    pub template: String,
    pub seed: u64,
    pub split: Split,
    pub scene: String,
    pub views: Vec<ViewEntry>,
    pub heldout: Vec<ViewEntry>,
}

/// Index of a generated dataset; all paths are relative to its directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub image_size: usize,
    pub parts: usize,
    pub cameras: String,
    pub heldout_cameras: String,
    pub objects: Vec<ObjectEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

/// Training or held-out views of one object, loaded into memory.
#[derive(Clone, Debug)]
pub struct ObjectViews {
    pub cameras: Vec<Camera>,
    pub images: Vec<RgbImage>,
    pub parts: Vec<PartMap>,
}

fn ring(count: usize, elevations: &[f64], azimuth_offset: f64, size: usize) -> Vec<Camera> {
    let per_ring = count.div_ceil(elevations.len().max(1));
    (0..count)
        .map(|i| {
            let (r, j) = (i / per_ring, i % per_ring);
            let elev = elevations[r].to_radians();
            let az = std::f64::consts::TAU * (j as f64 + azimuth_offset) / per_ring as f64;
            let eye = Vec3::new(elev.cos() * az.sin(), elev.sin(), elev.cos() * az.cos()) * CAMERA_RADIUS;
            Camera::look_at(eye, Vec3::ZERO, Vec3::new(0.0, 1.0, 0.0), size, size, FOV_Y_DEG.to_radians())
        })
        .collect()
}

/// Training cameras: uniform azimuth on two elevation rings.
pub fn train_cameras(views: usize, size: usize) -> Vec<Camera> {
    ring(views, &ELEVATIONS_DEG, 0.0, size)
}

/// Held-out cameras: an intermediate elevation with azimuths offset by half a step.
pub fn heldout_cameras(views: usize, size: usize) -> Vec<Camera> {
    ring(views, &[HELDOUT_ELEVATION_DEG], 0.5, size)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn render_views(scene: &SceneSpec, cams: &[Camera], dir: &Path, prefix: &str) -> Result<Vec<ViewEntry>> {
    cams.par_iter()
        .enumerate()
        .map(|(i, cam)| {
            let (rgb, part) = raytrace_reference(scene, cam);
            let entry = ViewEntry {
                rgb: format!("{prefix}rgb_{i:03}.ppm"),
                part: format!("{prefix}part_{i:03}.pgm"),
            };
            rgb.save(&dir.join(&entry.rgb))?;
            part.save(&dir.join(&entry.part))?;
            Ok(entry)
        })
        .collect()
}

/// Generates objects, renders every view with the reference tracer and
/// writes images, scene files, cameras and `manifest.json` under `out`.
pub fn make_dataset(spec: &DatasetSpec, out: &Path) -> Result<Manifest> {
    let total = spec.objects + spec.test_objects;
    if total == 0 {
        return Err(Error::invalid("need at least one object"));
    }
    if spec.views == 0 || spec.image_size == 0 || spec.templates.is_empty() {
        return Err(Error::invalid("views, image size and templates must be non-empty"));
    }
    let registry = template_registry();
    for t in &spec.templates {
        if !registry.contains(t) {
            registry.create(t, &())?;
        }
    }
    let cams = train_cameras(spec.views, spec.image_size);
    let held = heldout_cameras(spec.heldout_views, spec.image_size);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_cameras(&out.join(CAMERA_FILE), &cams)?;
    save_cameras(&out.join(HELDOUT_CAMERA_FILE), &held)?;

    let mut objects = Vec::with_capacity(total);
    for i in 0..total {
        let template = &spec.templates[i % spec.templates.len()];
        let seed = derive_seed(spec.seed, i as u64);
        let scene = generate_scene(template, seed)?;
        let name = format!("obj_{i:03}");
        let rel = format!("objects/{name}");
        let dir = out.join(&rel);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let scene_json = serde_json::to_vec_pretty(&scene).map_err(|e| Error::invalid(e.to_string()))?;
        write_bytes(&dir.join("scene.json"), &scene_json)?;
        let prefix_all = |v: Vec<ViewEntry>| {
            v.into_iter()
                .map(|e| ViewEntry {
                    rgb: format!("{rel}/{}", e.rgb),
                    part: format!("{rel}/{}", e.part),
                })
                .collect::<Vec<_>>()
        };
        let views = prefix_all(render_views(&scene, &cams, &dir, "")?);
        let heldout = prefix_all(render_views(&scene, &held, &dir, "heldout_")?);
        objects.push(ObjectEntry {
            name,
            template: template.clone(),
            seed,
            split: if i < spec.objects { Split::Train } else { Split::Test },
            scene: format!("{rel}/scene.json"),
            views,
            heldout,
        });
    }
    let manifest = Manifest {
        image_size: spec.image_size,
        parts: PARTS,
        cameras: CAMERA_FILE.into(),
        heldout_cameras: HELDOUT_CAMERA_FILE.into(),
        objects,
        root: out.to_path_buf(),
    };
    let path = out.join(MANIFEST_FILE);
    let text = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::invalid(e.to_string()))?;
    write_bytes(&path, &text)?;
    Ok(manifest)
}

/// Reads a manifest from a file or from a dataset directory containing one.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let text = fs::read(&file).map_err(|e| Error::io(&file, e))?;
    let mut m: Manifest = serde_json::from_slice(&text).map_err(|source| Error::Json {
        path: file.clone(),
        source,
    })?;
    m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    for o in &m.objects {
        for v in o.views.iter().chain(&o.heldout) {
            for p in [&v.rgb, &v.part] {
                if !m.root.join(p).exists() {
                    return Err(Error::Data(format!("manifest entry {p} does not exist")));
                }
            }
        }
    }
    Ok(m)
}

impl Manifest {
    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn find(&self, name: &str) -> Result<usize> {
        self.objects
            .iter()
            .position(|o| o.name == name)
            .ok_or_else(|| Error::Data(format!("no object named {name}")))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &ObjectEntry)> {
        self.objects.iter().enumerate().filter(move |(_, o)| o.split == split)
    }

    pub fn scene(&self, index: usize) -> Result<SceneSpec> {
        let p = self.path(&self.objects[index].scene);
        let text = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_slice(&text).map_err(|source| Error::Json { path: p, source })
    }

    /// Loads training (`heldout = false`) or held-out views of one object.
    pub fn load_views(&self, index: usize, heldout: bool) -> Result<ObjectViews> {
        let obj = self
            .objects
            .get(index)
            .ok_or_else(|| Error::Data(format!("object index {index} out of range")))?;
        let (cam_file, entries) = if heldout {
            (&self.heldout_cameras, &obj.heldout)
        } else {
            (&self.cameras, &obj.views)
        };
        let cameras = load_cameras(&self.path(cam_file))?;
        if cameras.len() != entries.len() {
            return Err(Error::Data(format!("{} has {} views but {} cameras", obj.name, entries.len(), cameras.len())));
        }
        let images = entries.iter().map(|e| RgbImage::load(&self.path(&e.rgb))).collect::<Result<_>>()?;
        let parts = entries.iter().map(|e| PartMap::load(&self.path(&e.part))).collect::<Result<_>>()?;
        Ok(ObjectViews { cameras, images, parts })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cameras_look_at_origin() {
        for cam in train_cameras(40, 16).iter().chain(&heldout_cameras(10, 16)) {
            cam.validate().unwrap();
            let o = cam.position();
            let d = -cam.axis(2);
            let closest = o + d * (-o.dot(d));
            assert!(closest.norm() < 0.05);
        }
        let ring = train_cameras(40, 16);
        assert!((ring[0].position().y() - ring[20].position().y()).abs() > 0.1);
    }
}
