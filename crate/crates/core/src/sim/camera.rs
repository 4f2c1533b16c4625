use super::orbit::{cross, dot, scale, sub, unit, OrbitState, Vec3};

pub const FOV_DEG: f64 = 45.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    /// Continuous pixel coordinates; pixel `i` covers `[i, i + 1)`.
    pub x: f64,
    pub y: f64,
    /// Distance along the boresight, km.
    pub depth: f64,
    pub in_frustum: bool,
}

/// Pinhole camera with a square sensor. Image x grows to the right, y downwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub image_size: usize,
    pub focal_px: f64,
    pub position: Vec3,
    pub forward: Vec3,
    pub right: Vec3,
    pub down: Vec3,
}

impl Camera {
    /// `forward` is the boresight; `up` only fixes the roll and is orthogonalized.
    pub fn new(image_size: usize, position: Vec3, forward: Vec3, up: Vec3) -> Self {
        let forward = unit(forward);
        let up = unit(sub(up, scale(forward, dot(up, forward))));
        let down = scale(up, -1.0);
        let half = (FOV_DEG.to_radians() / 2.0).tan();
        Self {
            image_size,
            focal_px: image_size as f64 / 2.0 / half,
            position,
            forward,
            right: cross(down, forward),
            down,
        }
    }

    /// Boresight along the carrier's velocity, image up along the local zenith.
    pub fn onboard(image_size: usize, carrier: &OrbitState) -> Self {
        Self::new(image_size, carrier.position, carrier.velocity, carrier.position)
    }

    pub fn project(&self, p: Vec3) -> Projection {
        let d = sub(p, self.position);
        let depth = dot(d, self.forward);
        let c = self.image_size as f64 / 2.0;
        if depth <= 0.0 {
            return Projection { x: f64::NAN, y: f64::NAN, depth, in_frustum: false };
        }
        let x = c + self.focal_px * dot(d, self.right) / depth;
        let y = c + self.focal_px * dot(d, self.down) / depth;
        let size = self.image_size as f64;
        let in_frustum = (0.0..=size).contains(&x) && (0.0..=size).contains(&y);
        Projection { x, y, depth, in_frustum }
    }

    /// Unit world-frame ray through normalized image coordinates, where
    /// `(+-1, +-1)` are the frame corners.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        let half = (FOV_DEG.to_radians() / 2.0).tan();
        let d = [0, 1, 2].map(|i| self.forward[i] + half * (u * self.right[i] + v * self.down[i]));
        unit(d)
    }

    pub fn range_km(&self, p: Vec3) -> f64 {
        super::orbit::norm(sub(p, self.position))
    }
}
