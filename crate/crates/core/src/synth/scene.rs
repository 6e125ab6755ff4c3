use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Aabb, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Box { half: [f64; 3] },
    /// Axis along local +y.
    Cylinder { radius: f64, half_height: f64 },
}

/// A solid posed by a translation and a rotation about +y.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub center: Vec3,
    pub yaw: f64,
    pub albedo: [f64; 3],
    pub part: u8,
}

const HIT_EPS: f64 = 1e-9;

impl Primitive {
    pub fn to_local(&self, p: Vec3) -> Vec3 {
        (p - self.center).rotate_y(-self.yaw)
    }

    /// Signed distance from world point `p` to the surface.
    pub fn sdf(&self, p: Vec3) -> f64 {
        let q = self.to_local(p);
        match self.shape {
            Shape::Box { half } => {
                let d = Vec3(std::array::from_fn(|a| q.0[a].abs() - half[a]));
                let outside = d.map(|v| v.max(0.0)).norm();
                outside + d.0.iter().cloned().fold(f64::NEG_INFINITY, f64::max).min(0.0)
            }
            Shape::Cylinder { radius, half_height } => {
                let dr = (q.x() * q.x() + q.z() * q.z()).sqrt() - radius;
                let dy = q.y().abs() - half_height;
                dr.max(dy).min(0.0) + (dr.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt()
            }
        }
    }

    /// Nearest hit `t > 0` along a world ray, with the world-space normal.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<(f64, Vec3)> {
        let o = self.to_local(origin);
        let d = dir.rotate_y(-self.yaw);
        let (t, n) = match self.shape {
            Shape::Box { half } => intersect_box(o, d, half)?,
            Shape::Cylinder { radius, half_height } => intersect_cylinder(o, d, radius, half_height)?,
        };
        Some((t, n.rotate_y(self.yaw)))
    }

    /// Corners of the local bounding box, in world space.
    pub fn corners(&self) -> Vec<Vec3> {
        let h = match self.shape {
            Shape::Box { half } => half,
            Shape::Cylinder { radius, half_height } => [radius, half_height, radius],
        };
        let mut out = Vec::with_capacity(8);
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    out.push(Vec3::new(sx * h[0], sy * h[1], sz * h[2]).rotate_y(self.yaw) + self.center);
                }
            }
        }
        out
    }
}

fn intersect_box(o: Vec3, d: Vec3, half: [f64; 3]) -> Option<(f64, Vec3)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    let mut n0 = Vec3::ZERO;
    let mut n1 = Vec3::ZERO;
    for a in 0..3 {
        if d.0[a].abs() < 1e-300 {
            if o.0[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let (mut lo, mut hi) = ((-half[a] - o.0[a]) / d.0[a], (half[a] - o.0[a]) / d.0[a]);
        let mut normal = Vec3::ZERO;
        normal.0[a] = -d.0[a].signum();
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        if lo > t0 {
            t0 = lo;
            n0 = normal;
        }
        if hi < t1 {
            t1 = hi;
            n1 = -normal;
        }
    }
    if t1 < t0 || t1 <= HIT_EPS {
        return None;
    }
    Some(if t0 > HIT_EPS { (t0, n0) } else { (t1, n1) })
}

fn intersect_cylinder(o: Vec3, d: Vec3, r: f64, h: f64) -> Option<(f64, Vec3)> {
    let mut best: Option<(f64, Vec3)> = None;
    let mut consider = |t: f64, n: Vec3| {
        if t > HIT_EPS && best.map_or(true, |(b, _)| t < b) {
            best = Some((t, n));
        }
    };
    let a = d.x() * d.x() + d.z() * d.z();
    if a > 1e-300 {
        let b = o.x() * d.x() + o.z() * d.z();
        let c = o.x() * o.x() + o.z() * o.z() - r * r;
        let disc = b * b - a * c;
        if disc >= 0.0 {
            let s = disc.sqrt();
            for t in [(-b - s) / a, (-b + s) / a] {
                let y = o.y() + t * d.y();
                if y.abs() <= h {
                    let p = o + d * t;
                    consider(t, Vec3::new(p.x(), 0.0, p.z()) * (1.0 / r));
                }
            }
        }
    }
    if d.y().abs() > 1e-300 {
        for cap in [-h, h] {
            let t = (cap - o.y()) / d.y();
            let p = o + d * t;
            if p.x() * p.x() + p.z() * p.z() <= r * r {
                consider(t, Vec3::new(0.0, cap.signum(), 0.0));
            }
        }
    }
    best
}

/// A generated object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub template: String,
    pub seed: u64,
    pub part_names: Vec<String>,
    pub primitives: Vec<Primitive>,
}

impl SceneSpec {
    pub fn empty() -> Self {
        SceneSpec {
            template: "empty".into(),
            seed: 0,
            part_names: Vec::new(),
            primitives: Vec::new(),
        }
    }

    pub fn parts(&self) -> usize {
        self.part_names.len()
    }

    /// Checks that every primitive fits in the world bounds and labels are in range.
    pub fn validate(&self) -> Result<()> {
        for p in &self.primitives {
            if (p.part as usize) >= self.parts() {
                return Err(Error::Data(format!("part label {} out of range", p.part)));
            }
            if p.corners().iter().any(|c| !Aabb::UNIT.contains(*c, 0.0)) {
                return Err(Error::Data(format!("primitive of part {} leaves the unit cube", p.part)));
            }
        }
        Ok(())
    }
}
