//! Procedural part-labelled objects, an analytic reference ray tracer and
//! dataset packaging.

mod dataset;
mod scene;
mod templates;
mod tracer;

pub use dataset::{
    heldout_cameras, load_manifest, make_dataset, train_cameras, DatasetSpec, Manifest, ObjectEntry, ObjectViews, Split, ViewEntry, MANIFEST_FILE,
};
pub use scene::{Primitive, SceneSpec, Shape};
pub use templates::{generate_scene, part_names, template_registry, SceneTemplate, PARTS};
pub use tracer::{light_direction, raytrace_reference, trace, Hit};
