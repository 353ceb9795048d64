//! Vectors, directions and the room box.

use serde::{Deserialize, Serialize};

use crate::error::{LerisError, Result};

pub type Vec3 = nalgebra::Vector3<f64>;

/// Tolerance below which two points are treated as coincident.
const COINCIDENT_EPS: f64 = 1e-15;

/// Unit vector pointing from `a` to `b`.
pub fn unit_from_to(a: &Vec3, b: &Vec3) -> Result<Vec3> {
    let d = b - a;
    let n = d.norm();
    if !(n > COINCIDENT_EPS) {
        return Err(LerisError::DegenerateGeometry(format!(
            "coincident points {:?} and {:?}",
            [a.x, a.y, a.z],
            [b.x, b.y, b.z]
        )));
    }
    Ok(d / n)
}

/// Cosine of the incidence angle at `receiver` for light coming from `source`.
pub fn incidence_cos(receiver_normal: &Vec3, source: &Vec3, receiver: &Vec3) -> Result<f64> {
    Ok(receiver_normal.dot(&unit_from_to(receiver, source)?))
}

/// Unit vector for polar angle `theta` and azimuth `phi`.
pub fn spherical_direction(theta: f64, phi: f64) -> Result<Vec3> {
    if !(0.0..=std::f64::consts::PI).contains(&theta) {
        return Err(LerisError::InvalidArgument(format!(
            "polar angle {theta} outside [0, pi]"
        )));
    }
    if !(0.0..std::f64::consts::TAU).contains(&phi) {
        return Err(LerisError::InvalidArgument(format!(
            "azimuth {phi} outside [0, 2pi)"
        )));
    }
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    Ok(Vec3::new(st * cp, st * sp, ct))
}

/// Polar and azimuth angles of a direction, azimuth wrapped into [0, 2pi).
pub fn direction_angles(v: &Vec3) -> (f64, f64) {
    let n = v.norm();
    let theta = (v.z / n).clamp(-1.0, 1.0).acos();
    let mut phi = v.y.atan2(v.x);
    if phi < 0.0 {
        phi += std::f64::consts::TAU;
    }
    if phi >= std::f64::consts::TAU {
        phi = 0.0;
    }
    (theta, phi)
}

/// Orthonormal frame attached to a wall-mounted surface.
///
/// `ez` is the surface normal, `ex` is horizontal (up x normal) and
/// `ey = ez x ex` points upward for a vertical wall.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub ex: Vec3,
    pub ey: Vec3,
    pub ez: Vec3,
}

impl Frame {
    pub fn from_normal(normal: &Vec3) -> Result<Frame> {
        let ez = normal
            .try_normalize(1e-12)
            .ok_or_else(|| LerisError::DegenerateGeometry("zero normal".into()))?;
        let up = Vec3::z();
        let mut ex = up.cross(&ez);
        if ex.norm() < 1e-9 {
            // horizontal surface: fall back to the world x axis
            ex = ez.cross(&Vec3::x()).cross(&ez);
        }
        let ex = ex.normalize();
        let ey = ez.cross(&ex);
        Ok(Frame { ex, ey, ez })
    }

    pub fn to_local(&self, v: &Vec3) -> Vec3 {
        Vec3::new(self.ex.dot(v), self.ey.dot(v), self.ez.dot(v))
    }

    pub fn to_world(&self, v: &Vec3) -> Vec3 {
        self.ex * v.x + self.ey * v.y + self.ez * v.z
    }

    /// Azimuth (about `ey`, measured from `ez` toward `ex`) and elevation
    /// (toward `ey`) of a world direction.
    pub fn azimuth_elevation(&self, dir: &Vec3) -> (f64, f64) {
        let l = self.to_local(dir);
        let az = l.x.atan2(l.z);
        let el = (l.y / l.norm()).clamp(-1.0, 1.0).asin();
        (az, el)
    }

    /// World direction for a given azimuth and elevation.
    pub fn direction(&self, azimuth: f64, elevation: f64) -> Vec3 {
        let (sa, ca) = azimuth.sin_cos();
        let (se, ce) = elevation.sin_cos();
        self.to_world(&Vec3::new(ce * sa, se, ce * ca))
    }
}

/// Axis-aligned room box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for Room {
    fn default() -> Self {
        Room {
            min: [0.0; 3],
            max: [10.0, 10.0, 3.0],
        }
    }
}

impl Room {
    pub fn contains(&self, p: &Vec3, tol: f64) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] - tol && p[i] <= self.max[i] + tol)
    }

    pub fn center(&self) -> Vec3 {
        Vec3::new(
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        )
    }

    /// True when `p` lies on one of the six faces.
    pub fn on_boundary(&self, p: &Vec3, tol: f64) -> bool {
        self.contains(p, tol)
            && (0..3).any(|i| (p[i] - self.min[i]).abs() <= tol || (p[i] - self.max[i]).abs() <= tol)
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        for i in 0..3 {
            if !(self.max[i] > self.min[i]) || !self.min[i].is_finite() || !self.max[i].is_finite() {
                v.push(format!("room axis {i} has empty or non-finite extent"));
            }
        }
        v
    }
}
