//! Synthetic LEO imaging: circular two-body orbits, an onboard pinhole
//! camera with a 45 degree field of view, sprite rendering and range-gated
//! box annotation.

mod camera;
mod dataset;
mod image;
mod orbit;
mod render;

pub use camera::{Camera, Projection, FOV_DEG};
pub use dataset::{
    format_labels, generate_dataset, generate_frame, parse_labels, scene, AnnotatedFrame, GenConfig, Manifest, ManifestEntry,
    SatelliteRecord, Scene,
};
pub use image::RgbImage;
pub use orbit::{cross, dot, norm, Orbit, OrbitState, Vec3, EARTH_RADIUS_KM, MU_EARTH};
pub use render::{annotate, render_frame, LabelBox, RenderConfig, SatelliteState, Sprite, RANGE_GATE_KM, SATELLITE_CLASS};
