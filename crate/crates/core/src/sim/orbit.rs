//! Two-body circular orbits in an Earth-centred inertial frame (km, s).

use serde::{Deserialize, Serialize};

pub const EARTH_RADIUS_KM: f64 = 6371.0;
/// Earth gravitational parameter, km^3 / s^2.
pub const MU_EARTH: f64 = 398_600.441_8;

pub type Vec3 = [f64; 3];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn unit(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrbitState {
    pub position: Vec3,
    pub velocity: Vec3,
}

/// Circular orbit. `phase` is the argument of latitude at t = 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Orbit {
    pub radius_km: f64,
    pub inclination: f64,
    pub raan: f64,
    pub phase: f64,
}

impl Orbit {
    pub fn from_altitude(altitude_km: f64, inclination: f64, raan: f64, phase: f64) -> Self {
        Self { radius_km: EARTH_RADIUS_KM + altitude_km, inclination, raan, phase }
    }

    pub fn altitude_km(&self) -> f64 {
        self.radius_km - EARTH_RADIUS_KM
    }

    /// Angular rate `sqrt(mu / r^3)`, rad/s.
    pub fn mean_motion(&self) -> f64 {
        (MU_EARTH / self.radius_km.powi(3)).sqrt()
    }

    pub fn period_s(&self) -> f64 {
        std::f64::consts::TAU / self.mean_motion()
    }

    pub fn propagate(&self, t: f64) -> OrbitState {
        let r = self.radius_km;
        let w = self.mean_motion();
        let u = self.phase + w * t;
        let (su, cu) = u.sin_cos();
        let (so, co) = self.raan.sin_cos();
        let (si, ci) = self.inclination.sin_cos();
        let position = [r * (co * cu - so * su * ci), r * (so * cu + co * su * ci), r * su * si];
        let v = r * w;
        let velocity = [v * (-co * su - so * cu * ci), v * (-so * su + co * cu * ci), v * cu * si];
        OrbitState { position, velocity }
    }

    /// The circular orbit that passes through `position` at time `t`, moving
    /// along `direction` projected onto the local horizontal plane.
    pub fn through(position: Vec3, direction: Vec3, t: f64) -> Orbit {
        let r_hat = unit(position);
        let horizontal = unit(sub(direction, scale(r_hat, dot(direction, r_hat))));
        let h = unit(cross(r_hat, horizontal));
        let inclination = h[2].clamp(-1.0, 1.0).acos();
        let raan = h[0].atan2(-h[1]);
        let node = [raan.cos(), raan.sin(), 0.0];
        let u = dot(r_hat, cross(h, node)).atan2(dot(r_hat, node));
        let mut orbit = Orbit { radius_km: norm(position), inclination, raan, phase: 0.0 };
        orbit.phase = (u - orbit.mean_motion() * t).rem_euclid(std::f64::consts::TAU);
        orbit
    }
}
