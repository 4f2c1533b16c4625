//! Sprite rasterization and range-gated annotation.
//!
//! A satellite of physical size `s` at depth `z` projects to a disc of
//! diameter `f * s / z` pixels. A pixel is lit when its centre lies inside the
//! disc or when it contains the projected centre, so sub-pixel objects still
//! leave one pixel. The annotation box is the tight bound of the lit pixels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::camera::Camera;
use super::image::RgbImage;
use super::orbit::Vec3;

pub const RANGE_GATE_KM: f64 = 5.0;
pub const SATELLITE_CLASS: usize = 0;

const GOLD: [f64; 3] = [255.0, 196.0, 84.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SatelliteState {
    pub position: Vec3,
    /// Physical envelope diameter, metres.
    pub size_m: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    /// Fraction of pixels that receive a background star.
    pub star_fraction: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { star_fraction: 0.004 }
    }
}

/// Normalized `(class, cx, cy, w, h)` box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelBox {
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl LabelBox {
    /// Corner form `(x0, y0, x1, y1)` in pixels for an image of the given size.
    pub fn to_pixels(&self, width: usize, height: usize) -> [f64; 4] {
        let (w, h) = (width as f64, height as f64);
        [
            (self.cx - self.w / 2.0) * w,
            (self.cy - self.h / 2.0) * h,
            (self.cx + self.w / 2.0) * w,
            (self.cy + self.h / 2.0) * h,
        ]
    }

    pub fn from_pixels(class: usize, b: [f64; 4], width: usize, height: usize) -> Self {
        let (w, h) = (width as f64, height as f64);
        LabelBox {
            class,
            cx: (b[0] + b[2]) / 2.0 / w,
            cy: (b[1] + b[3]) / 2.0 / h,
            w: (b[2] - b[0]) / w,
            h: (b[3] - b[1]) / h,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sprite {
    pub cx: f64,
    pub cy: f64,
    pub radius_px: f64,
    pub depth_km: f64,
    pub range_km: f64,
}

impl Sprite {
    pub fn new(camera: &Camera, sat: &SatelliteState) -> Option<Sprite> {
        let p = camera.project(sat.position);
        if p.depth <= 0.0 {
            return None;
        }
        Some(Sprite {
            cx: p.x,
            cy: p.y,
            radius_px: camera.focal_px * sat.size_m * 1e-3 / p.depth / 2.0,
            depth_km: p.depth,
            range_km: camera.range_km(sat.position),
        })
    }

    pub fn diameter_px(&self) -> f64 {
        2.0 * self.radius_px
    }

    /// Lit pixels inside a `width x height` frame with their shading in `(0, 1]`.
    pub fn pixels(&self, width: usize, height: usize) -> Vec<(usize, usize, f64)> {
        let r = self.radius_px;
        let lo_x = (self.cx - r - 1.0).floor().max(0.0);
        let lo_y = (self.cy - r - 1.0).floor().max(0.0);
        let hi_x = (self.cx + r + 1.0).ceil().min(width as f64);
        let hi_y = (self.cy + r + 1.0).ceil().min(height as f64);
        if !(lo_x < hi_x && lo_y < hi_y) {
            return Vec::new();
        }
        // Sub-pixel discs are dimmed by their area, down to a floor.
        let coverage = (std::f64::consts::PI * r * r).clamp(0.5, 1.0);
        let mut out = Vec::new();
        for y in lo_y as usize..hi_y as usize {
            for x in lo_x as usize..hi_x as usize {
                let (dx, dy) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
                let d = (dx * dx + dy * dy).sqrt();
                let contains_centre = self.cx.floor() == x as f64 && self.cy.floor() == y as f64;
                if d <= r || contains_centre {
                    let q = if r > 0.0 { (d / r).min(1.0) } else { 1.0 };
                    // Lit from the upper left: limb darkening plus a directional term.
                    let lambert = if r > 0.0 { (-(dx + dy) / (r * std::f64::consts::SQRT_2)).clamp(-1.0, 1.0) } else { 0.0 };
                    let shade = (0.45 + 0.4 * (1.0 - q * q).sqrt() + 0.15 * lambert) * coverage;
                    out.push((x, y, shade.clamp(0.05, 1.0)));
                }
            }
        }
        out
    }

    /// Tight pixel bound `(x0, y0, x1, y1)` of the lit pixels, exclusive upper edges.
    pub fn bounds(&self, width: usize, height: usize) -> Option<[usize; 4]> {
        let px = self.pixels(width, height);
        let first = px.first()?;
        let mut b = [first.0, first.1, first.0 + 1, first.1 + 1];
        for &(x, y, _) in &px {
            b = [b[0].min(x), b[1].min(y), b[2].max(x + 1), b[3].max(y + 1)];
        }
        Some(b)
    }
}

fn shade_rgb(shade: f64) -> [u8; 3] {
    GOLD.map(|c| (c * shade).round().clamp(1.0, 255.0) as u8)
}

/// Star-speckled black frame with one shaded sprite per satellite, far to near.
pub fn render_frame(satellites: &[SatelliteState], camera: &Camera, seed: u64, cfg: &RenderConfig) -> RgbImage {
    let n = camera.image_size;
    let mut img = RgbImage::new(n, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stars = (cfg.star_fraction * (n * n) as f64).round() as usize;
    for _ in 0..stars {
        let (x, y) = (rng.random_range(0..n), rng.random_range(0..n));
        let v: u8 = rng.random_range(30..=150);
        img.put(x, y, [v, v, v]);
    }
    let mut sprites: Vec<Sprite> = satellites.iter().filter_map(|s| Sprite::new(camera, s)).collect();
    sprites.sort_by(|a, b| b.depth_km.total_cmp(&a.depth_km));
    for s in &sprites {
        for (x, y, shade) in s.pixels(n, n) {
            img.put(x, y, shade_rgb(shade));
        }
    }
    img
}

/// One box per satellite within the range gate whose sprite reaches the frame,
/// in input order, with the matching ranges in km.
pub fn annotate(satellites: &[SatelliteState], camera: &Camera) -> (Vec<LabelBox>, Vec<f64>) {
    let n = camera.image_size;
    let mut boxes = Vec::new();
    let mut ranges = Vec::new();
    for sat in satellites {
        let Some(sprite) = Sprite::new(camera, sat) else { continue };
        if sprite.range_km > RANGE_GATE_KM {
            continue;
        }
        if let Some(b) = sprite.bounds(n, n) {
            boxes.push(LabelBox::from_pixels(SATELLITE_CLASS, b.map(|v| v as f64), n, n));
            ranges.push(sprite.range_km);
        }
    }
    (boxes, ranges)
}
