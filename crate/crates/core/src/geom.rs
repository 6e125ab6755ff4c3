//! Small fixed-size vector helpers for cameras and the reference tracer.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3(pub [f64; 3]);

impl Vec3 {
    pub const ZERO: Vec3 = Vec3([0.0; 3]);

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3([x, y, z])
    }

    pub fn x(self) -> f64 {
        self.0[0]
    }

    pub fn y(self) -> f64 {
        self.0[1]
    }

    pub fn z(self) -> f64 {
        self.0[2]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        let [a, b, c] = self.0;
        let [d, e, f] = o.0;
        Vec3([b * f - c * e, c * d - a * f, a * e - b * d])
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        self * (1.0 / self.norm())
    }

    pub fn map(self, f: impl Fn(f64) -> f64) -> Vec3 {
        Vec3(self.0.map(f))
    }

    pub fn is_finite(self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Rotation about +y by `angle` radians.
    pub fn rotate_y(self, angle: f64) -> Vec3 {
        let (s, c) = angle.sin_cos();
        Vec3([c * self.0[0] + s * self.0[2], self.0[1], -s * self.0[0] + c * self.0[2]])
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        self.map(|v| v * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        self.map(|v| -v)
    }
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    /// The shared world bounds `[-0.5, 0.5]^3`.
    pub const UNIT: Aabb = Aabb {
        min: Vec3([-0.5; 3]),
        max: Vec3([0.5; 3]),
    };

    /// Slab test; returns the parametric `(enter, exit)` interval clipped to
    /// `t >= 0`, or `None` when the ray misses.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let (o, d) = (origin.0[a], dir.0[a]);
            if d.abs() < 1e-300 {
                if o < self.min.0[a] || o > self.max.0[a] {
                    return None;
                }
                continue;
            }
            let (mut lo, mut hi) = ((self.min.0[a] - o) / d, (self.max.0[a] - o) / d);
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
        }
        (t1 > t0).then_some((t0, t1))
    }

    pub fn contains(&self, p: Vec3, tol: f64) -> bool {
        (0..3).all(|a| p.0[a] >= self.min.0[a] - tol && p.0[a] <= self.max.0[a] + tol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_and_rotation() {
        let x = Vec3::new(1.0, 0.0, 0.0);
        let y = Vec3::new(0.0, 1.0, 0.0);
        assert_eq!(x.cross(y), Vec3::new(0.0, 0.0, 1.0));
        let r = x.rotate_y(std::f64::consts::FRAC_PI_2);
        assert!((r - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-15);
    }

    #[test]
    fn slab_intersection() {
        let b = Aabb::UNIT;
        let (t0, t1) = b.intersect(Vec3::new(0.0, 0.0, 2.0), Vec3::new(0.0, 0.0, -1.0)).unwrap();
        assert!((t0 - 1.5).abs() < 1e-15 && (t1 - 2.5).abs() < 1e-15);
        let (t0, t1) = b.intersect(Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0)).unwrap();
        assert_eq!((t0, t1), (0.0, 0.5));
        assert!(b.intersect(Vec3::new(0.0, 2.0, 2.0), Vec3::new(0.0, 0.0, -1.0)).is_none());
    }
}
