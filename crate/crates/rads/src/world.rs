//! Procedural roadside world: static per-camera backdrops, a rare target
//! walking through on a Poisson schedule, distractors, lighting, and an
//! optional wet-season drift. Every frame is a pure function of
//! `(seed, camera, day, index)`, so frames are regenerated rather than stored.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use rads_core::edge::{FrameRecord, GroundTruthObject};
use rads_core::label::{OracleScene, SceneObject};
use rads_core::math::{hash_str, mix64, rng_for};
use rads_core::raster::{Modality, RasterImage};
use rads_core::{BBox, ImageDims};

pub const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Cassowary,
    Pig,
    Person,
    Vehicle,
    Stump,
}

impl ObjectClass {
    pub fn name(self) -> &'static str {
        match self {
            Self::Cassowary => "cassowary",
            Self::Pig => "pig",
            Self::Person => "person",
            Self::Vehicle => "vehicle",
            Self::Stump => "stump",
        }
    }

    /// Height relative to the target at equal range.
    fn height_factor(self) -> f64 {
        match self {
            Self::Cassowary => 1.0,
            Self::Pig => 0.5,
            Self::Person => 1.1,
            Self::Vehicle => 0.95,
            Self::Stump => 0.75,
        }
    }

    fn aspect(self, style: Style) -> f64 {
        match (self, style) {
            (Self::Cassowary, Style::Field) => 0.7,
            (Self::Cassowary, Style::Web) => 0.95,
            (Self::Pig, _) => 1.7,
            (Self::Person, _) => 0.38,
            (Self::Vehicle, _) => 2.3,
            (Self::Stump, _) => 0.55,
        }
    }
}

/// Field footage versus object-centric web photos of the same class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Field,
    Web,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub id: String,
    pub modality: Modality,
    /// Probability that a sighting passes through this camera's view.
    pub coverage: f64,
    /// Multiplier on a sighting's base range for this camera.
    pub range_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub width: u32,
    pub height: u32,
    pub cameras: Vec<CameraSpec>,
    pub frame_interval_s: f64,
    /// Seconds after midnight when capture starts each day.
    pub day_start_s: f64,
    pub day_length_s: f64,
    pub sightings_per_week: f64,
    pub sighting_duration_s: [f64; 2],
    pub range_m: [f64; 2],
    /// Target pixel height is `size_px_m / range`, clamped.
    pub size_px_m: f64,
    pub min_height_px: f64,
    pub max_height_px: f64,
    pub vehicles_per_hour: f64,
    pub people_per_hour: f64,
    pub pigs_per_day: f64,
    /// Wet-season drift from this day on (fractional days allowed).
    pub drift_day: Option<f64>,
    /// Mean number of wet stumps per camera per day after the drift.
    pub stumps_per_day: f64,
    pub noise_amplitude: u8,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let cam = |id: &str, modality, coverage, range_scale| CameraSpec {
            id: id.into(),
            modality,
            coverage,
            range_scale,
        };
        Self {
            width: 96,
            height: 64,
            cameras: vec![
                cam("rgb0", Modality::Rgb, 0.8, 1.0),
                cam("rgb1", Modality::Rgb, 0.6, 1.15),
                cam("thermal0", Modality::Thermal, 0.7, 0.9),
            ],
            frame_interval_s: 10.0,
            day_start_s: 6.0 * 3600.0,
            day_length_s: 12.0 * 3600.0,
            sightings_per_week: 17.0,
            sighting_duration_s: [240.0, 900.0],
            range_m: [15.0, 200.0],
            size_px_m: 1000.0,
            min_height_px: 4.0,
            max_height_px: 32.0,
            vehicles_per_hour: 2.0,
            people_per_hour: 0.4,
            pigs_per_day: 3.0,
            drift_day: None,
            stumps_per_day: 2.0,
            noise_amplitude: 6,
        }
    }
}

/// One object drawn into a scene, in pixel units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneItem {
    pub class: ObjectClass,
    pub style: Style,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub range_m: f64,
    pub facing_left: bool,
    pub phase: f64,
    /// Per-instance brightness variation.
    pub tone: f64,
    pub color: [u8; 3],
}

impl SceneItem {
    pub fn bbox(&self) -> Option<BBox> {
        BBox::from_xywh(self.x, self.y, self.w, self.h).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backdrop {
    Camera(usize),
    Zoo,
}

/// Everything needed to render one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub backdrop: Backdrop,
    pub modality: Modality,
    pub time: f64,
    pub light: f64,
    pub wet: bool,
    pub noise_seed: u64,
    pub items: Vec<SceneItem>,
}

/// Frame address inside the world stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct FrameKey {
    pub camera: usize,
    pub day: u32,
    pub index: u32,
}

#[derive(Debug, Clone, PartialEq)]
struct Track {
    camera: usize,
    range_m: f64,
    x0: f64,
    x1: f64,
    facing_left: bool,
    tone: f64,
}

/// One appearance of the target, possibly seen by several cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct Sighting {
    pub id: u64,
    pub start: f64,
    pub duration: f64,
    pub base_range_m: f64,
    tracks: Vec<Track>,
}

impl Sighting {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }

    pub fn cameras(&self) -> impl Iterator<Item = usize> + '_ {
        self.tracks.iter().map(|t| t.camera)
    }

    pub fn range_on(&self, camera: usize) -> Option<f64> {
        self.tracks.iter().find(|t| t.camera == camera).map(|t| t.range_m)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Passage {
    class: ObjectClass,
    camera: usize,
    start: f64,
    duration: f64,
    range_m: f64,
    x0: f64,
    x1: f64,
    facing_left: bool,
    tone: f64,
    color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq)]
struct Stump {
    camera: usize,
    x: f64,
    range_m: f64,
    tone: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaySchedule {
    pub sightings: Vec<Sighting>,
    passages: Vec<Passage>,
    stumps: Vec<Stump>,
    light: f64,
}

/// Static per-camera scenery, in float RGB and thermal intensity.
#[derive(Debug, Clone)]
struct BackdropImage {
    rgb: Vec<[f32; 3]>,
    thermal: Vec<f32>,
    horizon: f64,
}

pub(crate) fn poisson(rng: &mut impl Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|p| p.sample(rng) as u64).unwrap_or(0)
}

fn hash_unit(h: u64) -> f32 {
    (mix64(h) >> 40) as f32 / (1u64 << 24) as f32
}

/// Smooth 1-D value noise in [0, 1).
fn value_noise(seed: u64, x: f64, period: f64) -> f64 {
    let p = x / period;
    let i = p.floor();
    let f = p - i;
    let a = f64::from(hash_unit(seed ^ (i as i64 as u64)));
    let b = f64::from(hash_unit(seed ^ ((i as i64 + 1) as u64)));
    let t = f * f * (3.0 - 2.0 * f);
    a + (b - a) * t
}

impl BackdropImage {
    fn camera(seed: u64, camera: usize, w: u32, h: u32) -> Self {
        let key = mix64(seed ^ hash_str("backdrop") ^ (camera as u64) << 32);
        let mut rng = rng_for(key, &[]);
        let (wu, hu) = (w as usize, h as usize);
        let horizon = (0.35 * f64::from(h)).round() + f64::from(rng.random_range(-2i32..=2));
        let road_top = (0.78 * f64::from(h)).round();
        let road_bottom = (0.9 * f64::from(h)).round();
        let mut rgb = vec![[0f32; 3]; wu * hu];
        let mut thermal = vec![0f32; wu * hu];
        let canopy: Vec<f64> = (0..wu)
            .map(|x| horizon - 3.0 - 7.0 * value_noise(key ^ 0xC0FE, x as f64, 9.0) - 2.0 * value_noise(key ^ 0xBEEF, x as f64, 3.0))
            .collect();
        for y in 0..hu {
            for x in 0..wu {
                let tex = hash_unit(key ^ ((y * wu + x) as u64).wrapping_mul(0x9E37)) - 0.5;
                let yf = y as f64;
                let (c, t) = if yf < canopy[x] {
                    let g = (yf / horizon) as f32;
                    ([150.0 + 40.0 * g, 178.0 + 28.0 * g, 214.0 + 10.0 * g], 35.0 + 5.0 * g)
                } else if yf < horizon + 1.0 {
                    ([42.0 + 24.0 * tex, 72.0 + 30.0 * tex, 38.0 + 16.0 * tex], 95.0 + 8.0 * tex)
                } else if yf >= road_top && yf < road_bottom {
                    ([108.0 + 10.0 * tex, 106.0 + 10.0 * tex, 100.0 + 10.0 * tex], 125.0 + 6.0 * tex)
                } else {
                    ([88.0 + 22.0 * tex, 116.0 + 24.0 * tex, 58.0 + 14.0 * tex], 80.0 + 6.0 * tex)
                };
                rgb[y * wu + x] = c;
                thermal[y * wu + x] = t;
            }
        }
        let mut bd = Self { rgb, thermal, horizon };
        // Tree trunks below the canopy and dark bushes in the grass.
        for _ in 0..rng.random_range(2..=4) {
            let x = rng.random_range(0..wu);
            let tw = rng.random_range(1..=2);
            let top = canopy[x].max(0.0) as usize;
            let bottom = (horizon as usize + rng.random_range(2..=7)).min(hu);
            for y in top..bottom {
                for xx in x..(x + tw).min(wu) {
                    bd.rgb[y * wu + xx] = [36.0, 31.0, 26.0];
                    bd.thermal[y * wu + xx] = 100.0;
                }
            }
        }
        for _ in 0..rng.random_range(3..=6) {
            let cx = rng.random_range(0.0..f64::from(w));
            let cy = rng.random_range(horizon + 2.0..road_top);
            let r = rng.random_range(1.5..4.0);
            for y in 0..hu {
                for x in 0..wu {
                    let (dx, dy) = ((x as f64 - cx) / (1.4 * r), (y as f64 - cy) / r);
                    if dx * dx + dy * dy <= 1.0 {
                        bd.rgb[y * wu + x] = [30.0, 54.0, 26.0];
                        bd.thermal[y * wu + x] = 90.0;
                    }
                }
            }
        }
        bd
    }

    fn zoo(seed: u64, w: u32, h: u32) -> Self {
        let (wu, hu) = (w as usize, h as usize);
        let key = mix64(seed ^ hash_str("zoo"));
        let mut rgb = vec![[0f32; 3]; wu * hu];
        let mut thermal = vec![0f32; wu * hu];
        let ground = 0.7 * f64::from(h);
        for y in 0..hu {
            for x in 0..wu {
                let tex = hash_unit(key ^ ((y * wu + x) as u64).wrapping_mul(0x51ED)) - 0.5;
                let (c, t) = if (y as f64) < ground {
                    ([110.0 + 20.0 * tex, 135.0 + 20.0 * tex, 92.0 + 16.0 * tex], 70.0 + 6.0 * tex)
                } else {
                    ([150.0 + 16.0 * tex, 128.0 + 14.0 * tex, 96.0 + 12.0 * tex], 82.0 + 6.0 * tex)
                };
                rgb[y * wu + x] = c;
                thermal[y * wu + x] = t;
            }
        }
        Self { rgb, thermal, horizon: ground }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Part {
    Body,
    Neck,
    Head,
    Wattle,
    Leg,
    Snout,
    Skin,
    Shirt,
    Pants,
    Window,
    Wheel,
    Engine,
    Top,
}

fn in_ellipse(u: f64, v: f64, cu: f64, cv: f64, ru: f64, rv: f64) -> bool {
    let (a, b) = ((u - cu) / ru, (v - cv) / rv);
    a * a + b * b <= 1.0
}

/// Which part of the object covers normalized position `(u, v)`.
fn shape(class: ObjectClass, style: Style, u: f64, v: f64, phase: f64) -> Option<Part> {
    match class {
        ObjectClass::Cassowary => {
            let web = style == Style::Web;
            let stride = 0.06 * phase.sin();
            if v > 0.72 && ((0.30 + stride..0.40 + stride).contains(&u) || (0.52 - stride..0.62 - stride).contains(&u)) {
                return Some(Part::Leg);
            }
            let (bcu, bcv, bru, brv) = if web { (0.44, 0.58, 0.44, 0.24) } else { (0.42, 0.55, 0.38, 0.2) };
            if in_ellipse(u, v, bcu, bcv, bru, brv) {
                return Some(Part::Body);
            }
            if in_ellipse(u, v, 0.74, 0.1, 0.13, 0.09) {
                return Some(Part::Head);
            }
            if (0.27..0.37).contains(&v) && (0.72..0.84).contains(&u) {
                return Some(Part::Wattle);
            }
            if (0.12..0.45).contains(&v) && (0.63..0.8).contains(&u) {
                return Some(Part::Neck);
            }
            None
        }
        ObjectClass::Pig => {
            if v > 0.78 && ((0.18..0.28).contains(&u) || (0.68..0.78).contains(&u)) {
                return Some(Part::Leg);
            }
            if in_ellipse(u, v, 0.92, 0.52, 0.08, 0.12) {
                return Some(Part::Snout);
            }
            in_ellipse(u, v, 0.48, 0.48, 0.44, 0.34).then_some(Part::Body)
        }
        ObjectClass::Person => {
            if in_ellipse(u, v, 0.5, 0.08, 0.22, 0.08) {
                return Some(Part::Skin);
            }
            if (0.16..0.55).contains(&v) && (0.12..0.88).contains(&u) {
                return Some(Part::Shirt);
            }
            let swing = 0.05 * phase.sin();
            ((0.55..1.0).contains(&v) && ((0.18 + swing..0.45 + swing).contains(&u) || (0.55 - swing..0.82 - swing).contains(&u)))
                .then_some(Part::Pants)
        }
        ObjectClass::Vehicle => {
            if in_ellipse(u, v, 0.2, 0.85, 0.09, 0.15) || in_ellipse(u, v, 0.8, 0.85, 0.09, 0.15) {
                return Some(Part::Wheel);
            }
            if (0.3..0.82).contains(&v) {
                return Some(if u > 0.88 { Part::Engine } else { Part::Body });
            }
            ((0.02..0.3).contains(&v) && (0.25..0.75).contains(&u)).then_some(Part::Window)
        }
        ObjectClass::Stump => {
            let inside = (0.15..0.85).contains(&u) && v >= 0.06 && (v > 0.2 || in_ellipse(u, v, 0.5, 0.2, 0.35, 0.14));
            inside.then_some(if v < 0.3 { Part::Top } else { Part::Body })
        }
    }
}

fn part_rgb(class: ObjectClass, style: Style, part: Part, color: [u8; 3]) -> [f32; 3] {
    let c = [f32::from(color[0]), f32::from(color[1]), f32::from(color[2])];
    let web = style == Style::Web;
    match (class, part) {
        (ObjectClass::Cassowary, Part::Body) if web => [46.0, 41.0, 38.0],
        (ObjectClass::Cassowary, Part::Body) => [24.0, 23.0, 27.0],
        (ObjectClass::Cassowary, Part::Neck) if web => [25.0, 110.0, 238.0],
        (ObjectClass::Cassowary, Part::Neck) => [40.0, 82.0, 172.0],
        (ObjectClass::Cassowary, Part::Head) if web => [150.0, 120.0, 72.0],
        (ObjectClass::Cassowary, Part::Head) => [92.0, 78.0, 55.0],
        (ObjectClass::Cassowary, Part::Wattle) => [200.0, 40.0, 40.0],
        (ObjectClass::Cassowary, Part::Leg) if web => [150.0, 132.0, 95.0],
        (ObjectClass::Cassowary, Part::Leg) => [92.0, 84.0, 60.0],
        (ObjectClass::Pig, Part::Snout) => [96.0, 74.0, 68.0],
        (ObjectClass::Pig, _) => [36.0, 31.0, 29.0],
        (ObjectClass::Person, Part::Skin) => [205.0, 165.0, 135.0],
        (ObjectClass::Person, Part::Shirt) => c,
        (ObjectClass::Person, _) => [42.0, 44.0, 66.0],
        (ObjectClass::Vehicle, Part::Window) => [62.0, 72.0, 84.0],
        (ObjectClass::Vehicle, Part::Wheel) => [22.0, 22.0, 22.0],
        (ObjectClass::Vehicle, _) => c,
        (ObjectClass::Stump, Part::Top) => [84.0, 98.0, 124.0],
        (ObjectClass::Stump, _) => [27.0, 26.0, 30.0],
        _ => c,
    }
}

fn part_thermal(class: ObjectClass, style: Style, part: Part) -> f32 {
    let web = style == Style::Web;
    match (class, part) {
        (ObjectClass::Cassowary, Part::Body) if web => 215.0,
        (ObjectClass::Cassowary, Part::Body) => 172.0,
        (ObjectClass::Cassowary, Part::Neck | Part::Head | Part::Wattle) if web => 235.0,
        (ObjectClass::Cassowary, Part::Neck | Part::Head | Part::Wattle) => 192.0,
        (ObjectClass::Cassowary, _) => 150.0,
        (ObjectClass::Pig, _) => 180.0,
        (ObjectClass::Person, Part::Skin) => 215.0,
        (ObjectClass::Person, _) => 188.0,
        (ObjectClass::Vehicle, Part::Engine) => 225.0,
        (ObjectClass::Vehicle, Part::Wheel) => 170.0,
        (ObjectClass::Vehicle, _) => 128.0,
        (ObjectClass::Stump, _) => 60.0,
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub seed: u64,
    backdrops: Vec<BackdropImage>,
    zoo: BackdropImage,
}

impl World {
    pub fn new(config: WorldConfig, seed: u64) -> Self {
        let backdrops =
            (0..config.cameras.len()).map(|c| BackdropImage::camera(seed, c, config.width, config.height)).collect();
        let zoo = BackdropImage::zoo(seed, 64, 64);
        Self { config, seed, backdrops, zoo }
    }

    pub fn dims(&self) -> ImageDims {
        ImageDims { width: self.config.width, height: self.config.height }
    }

    pub fn frames_per_day(&self) -> u32 {
        (self.config.day_length_s / self.config.frame_interval_s).floor() as u32
    }

    pub fn camera(&self, c: usize) -> &CameraSpec {
        &self.config.cameras[c]
    }

    pub fn camera_index(&self, id: &str) -> Option<usize> {
        self.config.cameras.iter().position(|c| c.id == id)
    }

    pub fn frame_id(&self, key: FrameKey) -> String {
        format!("{}-d{}-{}", self.config.cameras[key.camera].id, key.day, key.index)
    }

    pub fn parse_frame_id(&self, id: &str) -> Option<FrameKey> {
        let mut parts = id.rsplitn(3, '-');
        let index = parts.next()?.parse().ok()?;
        let day = parts.next()?.strip_prefix('d')?.parse().ok()?;
        let camera = self.camera_index(parts.next()?)?;
        Some(FrameKey { camera, day, index })
    }

    pub fn frame_time(&self, key: FrameKey) -> f64 {
        f64::from(key.day) * SECONDS_PER_DAY
            + self.config.day_start_s
            + f64::from(key.index) * self.config.frame_interval_s
            + 0.1 * key.camera as f64
    }

    pub fn is_wet(&self, t: f64) -> bool {
        self.config.drift_day.is_some_and(|d| t >= d * SECONDS_PER_DAY)
    }

    /// Pixel height of an object of `class` at `range_m`.
    pub fn pixel_height(&self, class: ObjectClass, range_m: f64) -> f64 {
        (self.config.size_px_m * class.height_factor() / range_m.max(1.0))
            .clamp(self.config.min_height_px * class.height_factor().min(1.0), self.config.max_height_px)
    }

    /// Ground contact row for an object at `range_m` on camera `c`.
    fn foot_y(&self, c: usize, range_m: f64) -> f64 {
        let horizon = self.backdrops[c].horizon;
        horizon + (f64::from(self.config.height) - 2.0 - horizon) * (25.0 / range_m.max(1.0)).min(1.0)
    }

    fn sample_range(&self, rng: &mut impl Rng) -> f64 {
        let [lo, hi] = self.config.range_m;
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        }
    }

    fn span_x(&self, rng: &mut impl Rng, w: f64) -> (f64, f64) {
        let max = (f64::from(self.config.width) - w).max(0.0);
        (rng.random_range(0.0..=max), rng.random_range(0.0..=max))
    }

    pub fn schedule(&self, day: u32) -> DaySchedule {
        let cfg = &self.config;
        let mut rng = rng_for(self.seed, &[hash_str("day"), u64::from(day)]);
        let (t0, len) = (f64::from(day) * SECONDS_PER_DAY + cfg.day_start_s, cfg.day_length_s);
        let light = rng.random_range(0.8..1.05);

        let mut sightings = Vec::new();
        for i in 0..poisson(&mut rng, cfg.sightings_per_week / 7.0) {
            let [dmin, dmax] = cfg.sighting_duration_s;
            let duration = if dmax > dmin { rng.random_range(dmin..dmax) } else { dmin };
            let start = t0 + rng.random_range(0.0..(len - duration).max(1.0));
            let base = self.sample_range(&mut rng);
            let mut tracks = Vec::new();
            for (c, cam) in cfg.cameras.iter().enumerate() {
                let seen = rng.random_bool(cam.coverage.clamp(0.0, 1.0));
                let range_m = (base * cam.range_scale * rng.random_range(0.9..1.1)).max(5.0);
                let h = self.pixel_height(ObjectClass::Cassowary, range_m);
                let (x0, x1) = self.span_x(&mut rng, h * ObjectClass::Cassowary.aspect(Style::Field));
                let tone = rng.random_range(0.85..1.25);
                if seen {
                    tracks.push(Track { camera: c, range_m, x0, x1, facing_left: x1 < x0, tone });
                }
            }
            if !tracks.is_empty() {
                sightings.push(Sighting { id: u64::from(day) * 1000 + i, start, duration, base_range_m: base, tracks });
            }
        }

        let mut passages = Vec::new();
        let hours = len / 3600.0;
        for (c, _) in cfg.cameras.iter().enumerate() {
            for (class, mean, dur) in [
                (ObjectClass::Vehicle, cfg.vehicles_per_hour * hours, [4.0, 15.0]),
                (ObjectClass::Person, cfg.people_per_hour * hours, [30.0, 150.0]),
                (ObjectClass::Pig, cfg.pigs_per_day, [60.0, 300.0]),
            ] {
                for _ in 0..poisson(&mut rng, mean) {
                    let duration = rng.random_range(dur[0]..dur[1]);
                    let start = t0 + rng.random_range(0.0..(len - duration).max(1.0));
                    let range_m = self.sample_range(&mut rng);
                    let h = self.pixel_height(class, range_m);
                    let (x0, x1) = self.span_x(&mut rng, h * class.aspect(Style::Field));
                    let color = [rng.random(), rng.random(), rng.random()];
                    passages.push(Passage {
                        class,
                        camera: c,
                        start,
                        duration,
                        range_m,
                        x0,
                        x1,
                        facing_left: x1 < x0,
                        tone: rng.random_range(0.85..1.2),
                        color,
                    });
                }
            }
        }

        let mut stumps = Vec::new();
        if self.is_wet(t0 + len) {
            for c in 0..cfg.cameras.len() {
                for _ in 0..poisson(&mut rng, cfg.stumps_per_day) {
                    let range_m = rng.random_range(30.0..120.0);
                    let w = self.pixel_height(ObjectClass::Stump, range_m) * ObjectClass::Stump.aspect(Style::Field);
                    let x = rng.random_range(0.0..=(f64::from(cfg.width) - w).max(0.0));
                    stumps.push(Stump { camera: c, x, range_m, tone: rng.random_range(0.85..1.2) });
                }
            }
        }
        DaySchedule { sightings, passages, stumps, light }
    }

    /// A field object standing on the ground plane of camera `camera`.
    pub fn place(&self, camera: usize, class: ObjectClass, range_m: f64, x: f64) -> SceneItem {
        let h = self.pixel_height(class, range_m);
        let w = (h * class.aspect(Style::Field)).max(1.0);
        let y = self.foot_y(camera, range_m) - h;
        SceneItem {
            class,
            style: Style::Field,
            x,
            y,
            w,
            h,
            range_m,
            facing_left: false,
            phase: 0.0,
            tone: 1.0,
            color: [128; 3],
        }
    }

    /// [`World::place`] with motion and appearance filled in.
    #[allow(clippy::too_many_arguments)]
    pub fn item(&self, camera: usize, class: ObjectClass, range_m: f64, x: f64, facing_left: bool, phase: f64, tone: f64, color: [u8; 3]) -> SceneItem {
        SceneItem { facing_left, phase, tone, color, ..self.place(camera, class, range_m, x) }
    }

    /// Diurnal lighting on top of the day's overcast factor.
    pub fn light_at(&self, day_light: f64, t: f64) -> f64 {
        let into = (t.rem_euclid(SECONDS_PER_DAY) - self.config.day_start_s) / self.config.day_length_s;
        day_light * (0.82 + 0.22 * (std::f64::consts::PI * into.clamp(0.0, 1.0)).sin())
    }

    pub fn scene(&self, key: FrameKey, schedule: &DaySchedule) -> Scene {
        let t = self.frame_time(key);
        let c = key.camera;
        let mut items = Vec::new();
        for s in &schedule.sightings {
            if t < s.start || t > s.end() {
                continue;
            }
            for tr in s.tracks.iter().filter(|tr| tr.camera == c) {
                let u = (t - s.start) / s.duration;
                let x = tr.x0 + (tr.x1 - tr.x0) * u;
                items.push(self.item(c, ObjectClass::Cassowary, tr.range_m, x, tr.facing_left, t * 1.7, tr.tone, [0; 3]));
            }
        }
        for p in schedule.passages.iter().filter(|p| p.camera == c && t >= p.start && t <= p.start + p.duration) {
            let u = (t - p.start) / p.duration;
            let x = p.x0 + (p.x1 - p.x0) * u;
            items.push(self.item(c, p.class, p.range_m, x, p.facing_left, t * 2.3, p.tone, p.color));
        }
        for st in schedule.stumps.iter().filter(|s| s.camera == c) {
            items.push(self.item(c, ObjectClass::Stump, st.range_m, st.x, false, 0.0, st.tone, [0; 3]));
        }
        Scene {
            backdrop: Backdrop::Camera(c),
            modality: self.config.cameras[c].modality,
            time: t,
            light: self.light_at(schedule.light, t),
            wet: self.is_wet(t),
            noise_seed: rng_for(self.seed, &[hash_str("noise"), c as u64, u64::from(key.day), u64::from(key.index)])
                .random(),
            items,
        }
    }

    pub fn frame(&self, key: FrameKey, schedule: &DaySchedule) -> FrameRecord {
        let scene = self.scene(key, schedule);
        let image = self.render(&scene);
        FrameRecord {
            id: self.frame_id(key),
            camera: self.config.cameras[key.camera].id.clone(),
            modality: scene.modality,
            timestamp: scene.time,
            ground_truth: ground_truth(&scene, image.dims()),
            image,
        }
    }

    /// A capture with no target in view, for compositing backgrounds.
    pub fn survey_scene(&self, camera: usize, n: u64) -> Scene {
        let mut rng = rng_for(self.seed, &[hash_str("survey"), camera as u64, n]);
        let t = self.config.day_start_s + rng.random_range(0.0..self.config.day_length_s);
        let mut items = Vec::new();
        if rng.random_bool(0.3) {
            let class = [ObjectClass::Vehicle, ObjectClass::Person, ObjectClass::Pig][rng.random_range(0..3)];
            let range = self.sample_range(&mut rng);
            let w = self.pixel_height(class, range) * class.aspect(Style::Field);
            let x = rng.random_range(0.0..=(f64::from(self.config.width) - w).max(0.0));
            let color = [rng.random(), rng.random(), rng.random()];
            items.push(self.item(camera, class, range, x, rng.random(), t, rng.random_range(0.85..1.2), color));
        }
        Scene {
            backdrop: Backdrop::Camera(camera),
            modality: self.config.cameras[camera].modality,
            time: t,
            light: self.light_at(rng.random_range(0.8..1.05), t),
            wet: false,
            noise_seed: rng.random(),
            items,
        }
    }

    /// Object-centric photo of one target, the stand-in for web imagery.
    pub fn web_scene(&self, modality: Modality, n: u64) -> Scene {
        let mut rng = rng_for(self.seed, &[hash_str("web"), modality.channels().into(), n]);
        let h = rng.random_range(34.0..54.0);
        let w = h * ObjectClass::Cassowary.aspect(Style::Web);
        let x = rng.random_range(2.0..(62.0 - w).max(3.0));
        let y = (0.7 * 64.0 + rng.random_range(2.0..10.0) - h).max(1.0);
        Scene {
            backdrop: Backdrop::Zoo,
            modality,
            time: 0.0,
            light: rng.random_range(1.0..1.15),
            wet: false,
            noise_seed: rng.random(),
            items: vec![SceneItem {
                class: ObjectClass::Cassowary,
                style: Style::Web,
                x,
                y,
                w,
                h,
                range_m: 5.0,
                facing_left: rng.random(),
                phase: rng.random_range(0.0..6.3),
                tone: rng.random_range(0.9..1.15),
                color: [0; 3],
            }],
        }
    }

    /// Renders `scene`: backdrop under lighting, objects far to near with
    /// 3x3 supersampled coverage, then per-pixel noise.
    pub fn render(&self, scene: &Scene) -> RasterImage {
        let bd = match scene.backdrop {
            Backdrop::Camera(c) => &self.backdrops[c],
            Backdrop::Zoo => &self.zoo,
        };
        let (w, h) = match scene.backdrop {
            Backdrop::Camera(_) => (self.config.width as usize, self.config.height as usize),
            Backdrop::Zoo => (64, 64),
        };
        let thermal = scene.modality == Modality::Thermal;
        let light = scene.light as f32;
        let wet = scene.wet;
        let channels = if thermal { 1 } else { 3 };
        let mut buf: Vec<f32> = Vec::with_capacity(w * h * channels);
        for i in 0..w * h {
            if thermal {
                buf.push(bd.thermal[i] + 12.0 * (light - 0.95) - if wet { 8.0 } else { 0.0 });
            } else {
                let [r, g, b] = bd.rgb[i];
                if wet {
                    buf.extend([r * light * 0.72, g * light * 0.8, b * light * 0.74]);
                } else {
                    buf.extend([r * light, g * light, b * light]);
                }
            }
        }
        let mut items: Vec<&SceneItem> = scene.items.iter().collect();
        items.sort_by(|a, b| (a.y + a.h).partial_cmp(&(b.y + b.h)).unwrap_or(std::cmp::Ordering::Equal));
        for it in items {
            draw_item(&mut buf, w, h, channels, it, light, thermal);
        }
        let amp = i32::from(self.config.noise_amplitude);
        let pixels: Vec<u8> = buf
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let n = if amp > 0 { (mix64(scene.noise_seed ^ i as u64) % (2 * amp as u64 + 1)) as i32 - amp } else { 0 };
                (v.round() as i32 + n).clamp(0, 255) as u8
            })
            .collect();
        RasterImage::new(ImageDims { width: w as u32, height: h as u32 }, channels as u8, pixels)
            .expect("buffer sized to dims")
    }

    pub fn oracle_scene(&self, scene: &Scene, dims: ImageDims) -> OracleScene {
        OracleScene {
            dims,
            objects: ground_truth(scene, dims)
                .into_iter()
                .map(|g| SceneObject { bbox: g.bbox, class: g.class })
                .collect(),
        }
    }
}

fn draw_item(buf: &mut [f32], w: usize, h: usize, channels: usize, it: &SceneItem, light: f32, thermal: bool) {
    let x0 = it.x.floor().max(0.0) as usize;
    let y0 = it.y.floor().max(0.0) as usize;
    let x1 = ((it.x + it.w).ceil().max(0.0) as usize).min(w);
    let y1 = ((it.y + it.h).ceil().max(0.0) as usize).min(h);
    let tone = it.tone as f32;
    for py in y0..y1 {
        for px in x0..x1 {
            let mut cover = 0.0f32;
            let mut acc = [0f32; 3];
            for sy in 0..3 {
                for sx in 0..3 {
                    let fx = px as f64 + (sx as f64 + 0.5) / 3.0;
                    let fy = py as f64 + (sy as f64 + 0.5) / 3.0;
                    let mut u = (fx - it.x) / it.w;
                    let v = (fy - it.y) / it.h;
                    if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
                        continue;
                    }
                    if it.facing_left {
                        u = 1.0 - u;
                    }
                    let Some(part) = shape(it.class, it.style, u, v, it.phase) else { continue };
                    cover += 1.0;
                    if thermal {
                        acc[0] += part_thermal(it.class, it.style, part) * (0.9 + 0.1 * tone);
                    } else {
                        let c = part_rgb(it.class, it.style, part, it.color);
                        for k in 0..3 {
                            acc[k] += c[k] * tone * light;
                        }
                    }
                }
            }
            if cover == 0.0 {
                continue;
            }
            let a = cover / 9.0;
            let base = (py * w + px) * channels;
            for k in 0..channels {
                let col = acc[k] / cover;
                buf[base + k] = buf[base + k] * (1.0 - a) + col * a;
            }
        }
    }
}

/// Visible object boxes, clipped to the image.
pub fn ground_truth(scene: &Scene, dims: ImageDims) -> Vec<GroundTruthObject> {
    scene
        .items
        .iter()
        .filter_map(|it| {
            let b = it.bbox()?;
            let clipped = rads_core::geom::clip_box(&b, dims).ok()?;
            (clipped.area() >= 0.5 * b.area()).then(|| GroundTruthObject {
                bbox: clipped,
                class: it.class.name().into(),
                range_m: it.range_m,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        World::new(WorldConfig::default(), 7)
    }

    #[test]
    fn frame_ids_round_trip() {
        let w = world();
        let key = FrameKey { camera: 2, day: 3, index: 1234 };
        let id = w.frame_id(key);
        assert_eq!(id, "thermal0-d3-1234");
        assert_eq!(w.parse_frame_id(&id), Some(key));
        assert_eq!(w.parse_frame_id("nope-d1-2"), None);
    }

    #[test]
    fn frames_are_deterministic() {
        let a = world();
        let b = world();
        let key = FrameKey { camera: 0, day: 1, index: 500 };
        let (sa, sb) = (a.schedule(1), b.schedule(1));
        assert_eq!(a.frame(key, &sa), b.frame(key, &sb));
    }

    #[test]
    fn zero_rate_means_no_targets() {
        let cfg = WorldConfig { sightings_per_week: 0.0, ..WorldConfig::default() };
        let w = World::new(cfg, 1);
        for day in 0..14 {
            assert!(w.schedule(day).sightings.is_empty());
        }
    }

    #[test]
    fn targets_shrink_with_range() {
        let w = world();
        let near = w.pixel_height(ObjectClass::Cassowary, 30.0);
        let far = w.pixel_height(ObjectClass::Cassowary, 150.0);
        assert!(near > far);
        assert!(far >= w.config.min_height_px);
    }

    #[test]
    fn target_is_drawn_dark_in_rgb_and_warm_in_thermal() {
        let w = world();
        let mut scene = w.survey_scene(0, 0);
        scene.items = vec![w.item(0, ObjectClass::Cassowary, 30.0, 40.0, false, 0.0, 1.0, [0; 3])];
        let img = w.render(&scene);
        let it = &scene.items[0];
        let (cx, cy) = ((it.x + 0.42 * it.w) as u32, (it.y + 0.55 * it.h) as u32);
        assert!(img.luma(cx, cy) < 60.0);
        scene.modality = Modality::Thermal;
        let th = w.render(&scene);
        assert!(th.pixel(cx, cy)[0] > 150);
        let gt = ground_truth(&scene, img.dims());
        assert_eq!(gt.len(), 1);
        assert_eq!(gt[0].class, "cassowary");
    }
}
