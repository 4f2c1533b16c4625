//! Dataset generation: one onboard camera on a random LEO orbit, a frame every
//! `cadence_s` seconds, and fresh nearby satellites per frame.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::camera::Camera;
use super::image::RgbImage;
use super::orbit::{add, scale, Orbit};
use super::render::{annotate, render_frame, LabelBox, RenderConfig, SatelliteState};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub train_count: usize,
    pub test_count: usize,
    pub image_size: usize,
    /// Mean of the Poisson satellite count per frame.
    pub satellites_mean: f64,
    pub satellites_max: usize,
    pub size_m: [f64; 2],
    /// Sampled log-uniformly; the upper end exceeds the annotation gate so
    /// some frames contain visible but unlabelled objects.
    pub range_km: [f64; 2],
    /// Carrier altitude band. Narrower than 500-600 km so that every target,
    /// placed at most a few km away, also stays inside it.
    pub altitude_km: [f64; 2],
    pub cadence_s: f64,
    /// Targets are placed up to this many half-frames from the centre.
    pub placement_extent: f64,
    pub render: RenderConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_count: 450,
            test_count: 150,
            image_size: 160,
            satellites_mean: 1.5,
            satellites_max: 4,
            size_m: [2.0, 6.0],
            range_km: [0.03, 5.5],
            altitude_km: [506.0, 594.0],
            cadence_s: 5.0,
            placement_extent: 1.1,
            render: RenderConfig::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite();
        if self.image_size == 0 || !ordered(self.size_m) || !ordered(self.range_km) || !ordered(self.altitude_km) {
            return Err(Error::Invalid("generator ranges must be positive and ordered".into()));
        }
        if self.satellites_mean < 0.0 || self.cadence_s < 0.0 || !(0.0..1.0).contains(&self.render.star_fraction) {
            return Err(Error::Invalid("satellite mean, cadence and star fraction out of range".into()));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.train_count + self.test_count
    }

    /// The carrier orbit, drawn from stream 0 of the seed.
    pub fn carrier_orbit(&self) -> Orbit {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let tau = std::f64::consts::TAU;
        Orbit::from_altitude(
            rng.random_range(self.altitude_km[0]..=self.altitude_km[1]),
            rng.random_range(0.0..std::f64::consts::PI),
            rng.random_range(0.0..tau),
            rng.random_range(0.0..tau),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SatelliteRecord {
    pub orbit: Orbit,
    pub size_m: f64,
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub time_s: f64,
    pub camera: Camera,
    pub satellites: Vec<SatelliteRecord>,
    pub render_seed: u64,
}

impl Scene {
    pub fn states(&self) -> Vec<SatelliteState> {
        self.satellites
            .iter()
            .map(|s| SatelliteState { position: s.orbit.propagate(self.time_s).position, size_m: s.size_m })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct AnnotatedFrame {
    pub image: RgbImage,
    pub boxes: Vec<LabelBox>,
    pub ranges_km: Vec<f64>,
    pub time_s: f64,
}

/// Scene for frame `index`; depends only on `(cfg, index)`.
pub fn scene(cfg: &GenConfig, index: usize) -> Scene {
    let time_s = cfg.cadence_s * index as f64;
    let carrier = cfg.carrier_orbit().propagate(time_s);
    let camera = Camera::onboard(cfg.image_size, &carrier);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let count = if cfg.satellites_mean > 0.0 {
        Poisson::new(cfg.satellites_mean).expect("positive mean").sample(&mut rng) as usize
    } else {
        0
    };
    let count = count.min(cfg.satellites_max);
    let jitter = Normal::new(0.0, 0.02).expect("finite std");
    let (ln_lo, ln_hi) = (cfg.range_km[0].ln(), cfg.range_km[1].ln());
    let e = cfg.placement_extent;
    let mut satellites = Vec::with_capacity(count);
    for _ in 0..count {
        let range = rng.random_range(ln_lo..=ln_hi).exp();
        let (u, v) = (rng.random_range(-e..=e), rng.random_range(-e..=e));
        let position = add(camera.position, scale(camera.ray(u, v), range));
        // Nearly co-orbital with the carrier, with a slightly different plane.
        let heading = [0, 1, 2].map(|i| camera.forward[i] + jitter.sample(&mut rng));
        let orbit = Orbit::through(position, heading, time_s);
        let size_m = rng.random_range(cfg.size_m[0]..=cfg.size_m[1]);
        satellites.push(SatelliteRecord { orbit, size_m });
    }
    let render_seed = rng.random();
    Scene { time_s, camera, satellites, render_seed }
}

pub fn generate_frame(cfg: &GenConfig, index: usize) -> AnnotatedFrame {
    let sc = scene(cfg, index);
    let states = sc.states();
    let image = render_frame(&states, &sc.camera, sc.render_seed, &cfg.render);
    let (boxes, ranges_km) = annotate(&states, &sc.camera);
    AnnotatedFrame { image, boxes, ranges_km, time_s: sc.time_s }
}

pub fn format_labels(boxes: &[LabelBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        writeln!(s, "{} {:.6} {:.6} {:.6} {:.6}", b.class, b.cx, b.cy, b.w, b.h).expect("string write");
    }
    s
}

pub fn parse_labels(text: &str) -> Result<Vec<LabelBox>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Format { what: "label file", detail: format!("bad line {line:?}") };
            if f.len() != 5 {
                return Err(bad());
            }
            let v = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            Ok(LabelBox { class: f[0].parse().map_err(|_| bad())?, cx: v(1)?, cy: v(2)?, w: v(3)?, h: v(4)? })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: String,
    pub index: usize,
    pub image: String,
    pub label: String,
    pub objects: usize,
    pub ranges_km: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: GenConfig,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn split<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.files.iter().filter(move |f| f.split == name)
    }
}

/// Writes `train/` and `test/` (PPM image + label file per frame) and
/// `manifest.json` under `out`. Frames `0..train_count` form the training
/// split and the following `test_count` frames the test split.
pub fn generate_dataset(cfg: &GenConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let mut files = Vec::with_capacity(cfg.total());
    for (split, range) in [("train", 0..cfg.train_count), ("test", cfg.train_count..cfg.total())] {
        let dir = out.join(split);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for index in range {
            let frame = generate_frame(cfg, index);
            let stem = format!("frame_{index:05}");
            let image = format!("{split}/{stem}.ppm");
            let label = format!("{split}/{stem}.txt");
            frame.image.save_ppm(&out.join(&image))?;
            let label_path: PathBuf = out.join(&label);
            std::fs::write(&label_path, format_labels(&frame.boxes)).map_err(|e| Error::io(&label_path, e))?;
            files.push(ManifestEntry {
                split: split.into(),
                index,
                image,
                label,
                objects: frame.boxes.len(),
                ranges_km: frame.ranges_km,
            });
        }
    }
    let manifest = Manifest { seed: cfg.seed, config: cfg.clone(), files };
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
