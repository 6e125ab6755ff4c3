use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scene::{Primitive, SceneSpec, Shape};
use crate::error::Result;
use crate::geom::Vec3;
use crate::registry::Registry;
use crate::seed::{derive_seed, label_hash};

/// Semantic parts per template.
pub const PARTS: usize = 4;

/// Floor height shared by standing templates.
const FLOOR: f64 = -0.45;

/// Base colour per part label, jittered per object.
const PART_COLORS: [[f64; 3]; PARTS] = [[0.80, 0.22, 0.18], [0.55, 0.36, 0.20], [0.25, 0.65, 0.30], [0.20, 0.35, 0.80]];

/// A family of procedurally varied objects with four named parts.
pub trait SceneTemplate: Send + Sync {
    fn name(&self) -> &'static str;
    fn part_names(&self) -> [&'static str; PARTS];
    /// Primitives in the object frame, before the global yaw. Every local
    /// bounding corner must stay within xz-radius 0.48 and |y| ≤ 0.48.
    fn build(&self, rng: &mut ChaCha8Rng, albedo: &[[f64; 3]; PARTS]) -> Vec<Primitive>;
}

fn cuboid(half: [f64; 3], center: Vec3, part: usize, albedo: &[[f64; 3]; PARTS]) -> Primitive {
    Primitive {
        shape: Shape::Box { half },
        center,
        yaw: 0.0,
        albedo: albedo[part],
        part: part as u8,
    }
}

fn cylinder(radius: f64, half_height: f64, center: Vec3, part: usize, albedo: &[[f64; 3]; PARTS]) -> Primitive {
    Primitive {
        shape: Shape::Cylinder { radius, half_height },
        center,
        yaw: 0.0,
        albedo: albedo[part],
        part: part as u8,
    }
}

struct Stool;

impl SceneTemplate for Stool {
    fn name(&self) -> &'static str {
        "stool"
    }

    fn part_names(&self) -> [&'static str; PARTS] {
        ["seat", "legs", "stretcher", "cushion"]
    }

    fn build(&self, rng: &mut ChaCha8Rng, albedo: &[[f64; 3]; PARTS]) -> Vec<Primitive> {
        let r_seat = rng.gen_range(0.22..0.29);
        let seat_half = rng.gen_range(0.045..0.06);
        let seat_y = rng.gen_range(-0.02..0.1);
        let leg = rng.gen_range(0.03..0.045);
        let a = r_seat * rng.gen_range(0.55..0.65);
        let leg_half = 0.5 * (seat_y - FLOOR);
        let mut out = vec![cylinder(r_seat, seat_half, Vec3::new(0.0, seat_y + seat_half, 0.0), 0, albedo)];
        for (sx, sz) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
            out.push(cuboid([leg, leg_half, leg], Vec3::new(sx * a, FLOOR + leg_half, sz * a), 1, albedo));
        }
        let s = rng.gen_range(0.022..0.03);
        let sy = FLOOR + (seat_y - FLOOR) * rng.gen_range(0.3..0.45);
        out.push(cuboid([a, s, s], Vec3::new(0.0, sy, 0.0), 2, albedo));
        out.push(cuboid([s, s, a], Vec3::new(0.0, sy, 0.0), 2, albedo));
        let cushion_half = rng.gen_range(0.025..0.04);
        out.push(cylinder(
            r_seat * rng.gen_range(0.55..0.7),
            cushion_half,
            Vec3::new(0.0, seat_y + 2.0 * seat_half + cushion_half, 0.0),
            3,
            albedo,
        ));
        out
    }
}

struct Table;

impl SceneTemplate for Table {
    fn name(&self) -> &'static str {
        "table"
    }

    fn part_names(&self) -> [&'static str; PARTS] {
        ["top", "legs", "apron", "vase"]
    }

    fn build(&self, rng: &mut ChaCha8Rng, albedo: &[[f64; 3]; PARTS]) -> Vec<Primitive> {
        let hx = rng.gen_range(0.28..0.34);
        let hz = rng.gen_range(0.18..0.26);
        let th = rng.gen_range(0.02..0.035);
        let top_y = rng.gen_range(0.0..0.12);
        let mut out = vec![cuboid([hx, th, hz], Vec3::new(0.0, top_y + th, 0.0), 0, albedo)];
        let r_leg = rng.gen_range(0.025..0.035);
        let (ix, iz) = (hx - 0.05, hz - 0.05);
        let leg_half = 0.5 * (top_y - FLOOR);
        for (sx, sz) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
            out.push(cylinder(r_leg, leg_half, Vec3::new(sx * ix, FLOOR + leg_half, sz * iz), 1, albedo));
        }
        let ah = rng.gen_range(0.03..0.05);
        let aw = 0.02;
        for s in [-1.0, 1.0] {
            out.push(cuboid([ix, ah, aw], Vec3::new(0.0, top_y - ah, s * iz), 2, albedo));
            out.push(cuboid([aw, ah, iz], Vec3::new(s * ix, top_y - ah, 0.0), 2, albedo));
        }
        let vh = rng.gen_range(0.06..0.1);
        out.push(cylinder(
            rng.gen_range(0.05..0.08),
            vh,
            Vec3::new(rng.gen_range(-0.08..0.08), top_y + 2.0 * th + vh, rng.gen_range(-0.05..0.05)),
            3,
            albedo,
        ));
        out
    }
}

struct Lamp;

impl SceneTemplate for Lamp {
    fn name(&self) -> &'static str {
        "lamp"
    }

    fn part_names(&self) -> [&'static str; PARTS] {
        ["base", "pole", "arm", "shade"]
    }

    fn build(&self, rng: &mut ChaCha8Rng, albedo: &[[f64; 3]; PARTS]) -> Vec<Primitive> {
        let base_half = rng.gen_range(0.025..0.04);
        let base_top = FLOOR + 2.0 * base_half;
        let pole_top = rng.gen_range(0.15..0.28);
        let pole_half = 0.5 * (pole_top - base_top);
        let len = rng.gen_range(0.15..0.24);
        let arm = rng.gen_range(0.02..0.03);
        let shade_r = rng.gen_range(0.08..0.12);
        let shade_half = rng.gen_range(0.05..0.08);
        vec![
            cylinder(rng.gen_range(0.14..0.2), base_half, Vec3::new(0.0, FLOOR + base_half, 0.0), 0, albedo),
            cylinder(rng.gen_range(0.025..0.035), pole_half, Vec3::new(0.0, base_top + pole_half, 0.0), 1, albedo),
            cuboid([0.5 * len, arm, arm], Vec3::new(0.5 * len, pole_top, 0.0), 2, albedo),
            cylinder(shade_r, shade_half, Vec3::new(len, pole_top - 0.5 * shade_half, 0.0), 3, albedo),
        ]
    }
}

struct PlaneToy;

impl SceneTemplate for PlaneToy {
    fn name(&self) -> &'static str {
        "plane-toy"
    }

    fn part_names(&self) -> [&'static str; PARTS] {
        ["fuselage", "wings", "tail", "propeller"]
    }

    fn build(&self, rng: &mut ChaCha8Rng, albedo: &[[f64; 3]; PARTS]) -> Vec<Primitive> {
        let y = rng.gen_range(-0.1..0.1);
        let fl = rng.gen_range(0.25..0.33);
        let fh = rng.gen_range(0.045..0.06);
        let fin = rng.gen_range(0.06..0.09);
        let tail_x = -fl + 0.05;
        vec![
            cuboid([fl, fh, fh], Vec3::new(0.0, y, 0.0), 0, albedo),
            cuboid(
                [rng.gen_range(0.06..0.09), 0.02, rng.gen_range(0.26..0.34)],
                Vec3::new(rng.gen_range(-0.02..0.06), y, 0.0),
                1,
                albedo,
            ),
            cuboid([0.05, fin, 0.02], Vec3::new(tail_x, y + fh + fin, 0.0), 2, albedo),
            cuboid([0.04, 0.02, rng.gen_range(0.1..0.14)], Vec3::new(tail_x, y + fh, 0.0), 2, albedo),
            cuboid([0.015, rng.gen_range(0.07..0.1), 0.025], Vec3::new(fl + 0.015, y, 0.0), 3, albedo),
        ]
    }
}

pub fn template_registry() -> Registry<dyn SceneTemplate> {
    Registry::new("scene template")
        .with("stool", |_| Box::new(Stool) as Box<dyn SceneTemplate>)
        .with("table", |_| Box::new(Table) as Box<dyn SceneTemplate>)
        .with("lamp", |_| Box::new(Lamp) as Box<dyn SceneTemplate>)
        .with("plane-toy", |_| Box::new(PlaneToy) as Box<dyn SceneTemplate>)
}

pub fn part_names(template: &str) -> Result<Vec<String>> {
    let t = template_registry().create(template, &())?;
    Ok(t.part_names().iter().map(|s| s.to_string()).collect())
}

/// Draws one object: template dimensions, per-part colours and a global yaw.
pub fn generate_scene(template: &str, seed: u64) -> Result<SceneSpec> {
    let t = template_registry().create(template, &())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, label_hash(template)));
    let albedo: [[f64; 3]; PARTS] =
        std::array::from_fn(|p| PART_COLORS[p].map(|c: f64| (c + rng.gen_range(-0.08..0.08)).clamp(0.05, 0.95)));
    let mut primitives = t.build(&mut rng, &albedo);
    let yaw = rng.gen_range(0.0..TAU);
    for p in &mut primitives {
        p.center = p.center.rotate_y(yaw);
        p.yaw += yaw;
    }
    let scene = SceneSpec {
        template: template.to_string(),
        seed,
        part_names: t.part_names().iter().map(|s| s.to_string()).collect(),
        primitives,
    };
    scene.validate()?;
    Ok(scene)
}
