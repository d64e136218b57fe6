//! Procedural multi-view landmark scenes in a clean source domain and a
//! shifted target domain.
//!
//! Terrain is a height field: a low-frequency fractal base, a
//! higher-frequency fractal detail layer, and one radial profile per
//! landmark. Pixels are Lambert-shaded under a directional sun and the target
//! domain applies a [`DomainShift`] on top (gamma, haze, sensor noise, and a
//! gain on the detail layer).

use std::f64::consts::{PI, TAU};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ForgeError, Result};

/// Side of the square world region that landmarks are placed in.
pub const WORLD_EXTENT: f64 = 128.0;
/// World units covered by the image width at `camera_scale = 1`.
pub const VIEW_EXTENT: f64 = 128.0;
pub const MIN_RADIUS: f64 = 9.0;
pub const MAX_RADIUS: f64 = 15.0;
/// Minimum center separation as a multiple of [`MAX_RADIUS`].
pub const SEPARATION: f64 = 1.5;
pub const MIN_IMAGE_SIZE: usize = 32;
const PLACEMENT_ATTEMPTS: usize = 2000;
const VIEW_ATTEMPTS: usize = 64;
const DUNE_ASPECT: f64 = 0.4;
const CRATER_RIM: f64 = 1.1;
const HAZE_LEVEL: f64 = 0.75;
const AMBIENT: f64 = 0.08;
const ALBEDO: f64 = 0.9;

/// SplitMix64 finalizer used to derive independent sub-seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkClass {
    Crater = 0,
    Mountain = 1,
    Dune = 2,
}

impl LandmarkClass {
    pub const ALL: [LandmarkClass; 3] = [Self::Crater, Self::Mountain, Self::Dune];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSpec {
    pub landmark_id: u32,
    pub class_id: LandmarkClass,
    pub world_pos: [f64; 2],
    pub radius: f64,
    /// Signed peak height; negative for depressions.
    pub relief: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub seed: u64,
    pub landmarks: Vec<LandmarkSpec>,
}

impl World {
    pub fn landmark(&self, id: u32) -> Option<&LandmarkSpec> {
        self.landmarks.iter().find(|l| l.landmark_id == id)
    }

    pub fn center(&self) -> [f64; 2] {
        [WORLD_EXTENT / 2.0, WORLD_EXTENT / 2.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewParams {
    pub sun_azimuth: f64,
    pub sun_elevation: f64,
    /// World point mapped to the image center.
    pub camera_offset: [f64; 2],
    pub camera_scale: f64,
    pub camera_rotation: f64,
}

impl ViewParams {
    pub fn nadir(center: [f64; 2]) -> Self {
        Self {
            sun_azimuth: PI / 4.0,
            sun_elevation: PI / 6.0,
            camera_offset: center,
            camera_scale: 1.0,
            camera_rotation: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.5..=2.0).contains(&self.camera_scale) {
            return Err(ForgeError::InvalidArgument(format!(
                "camera_scale {} outside [0.5, 2.0]",
                self.camera_scale
            )));
        }
        if !(self.sun_elevation > 0.0 && self.sun_elevation <= PI / 2.0) {
            return Err(ForgeError::InvalidArgument(format!(
                "sun_elevation {} outside (0, pi/2]",
                self.sun_elevation
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    pub gamma: f64,
    pub noise_sigma: f64,
    pub texture_gain: f64,
    pub haze: f64,
}

impl DomainShift {
    pub const IDENTITY: DomainShift = DomainShift { gamma: 1.0, noise_sigma: 0.0, texture_gain: 1.0, haze: 0.0 };

    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma > 0.0
            && self.noise_sigma >= 0.0
            && (0.0..=1.0).contains(&self.texture_gain)
            && (0.0..=1.0).contains(&self.haze);
        if ok {
            Ok(())
        } else {
            Err(ForgeError::InvalidArgument(format!("invalid domain shift {self:?}")))
        }
    }
}

impl Default for DomainShift {
    fn default() -> Self {
        Self { gamma: 1.8, noise_sigma: 0.05, texture_gain: 0.3, haze: 0.3 }
    }
}

/// Axis-aligned box in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        Self { x_min: v[0], y_min: v[1], x_max: v[2], y_max: v[3] }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    /// True when the box lies inside a `width × height` frame with positive extent.
    pub fn is_valid_in(&self, width: usize, height: usize) -> bool {
        0.0 <= self.x_min
            && self.x_min < self.x_max
            && self.x_max <= width as f64
            && 0.0 <= self.y_min
            && self.y_min < self.y_max
            && self.y_max <= height as f64
    }

    pub fn clip(&self, width: usize, height: usize) -> Self {
        Self::new(
            self.x_min.clamp(0.0, width as f64),
            self.y_min.clamp(0.0, height as f64),
            self.x_max.clamp(0.0, width as f64),
            self.y_max.clamp(0.0, height as f64),
        )
    }
}

/// Grayscale image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width);
        Self { height, width, data }
    }

    pub fn filled(height: usize, width: usize, v: f64) -> Self {
        Self { height, width, data: vec![v; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample with edge clamping at continuous pixel coordinates
    /// (pixel centers at `i + 0.5`).
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
        let top = self.get(y0, x0) * (1.0 - tx) + self.get(y0, x1) * tx;
        let bot = self.get(y1, x0) * (1.0 - tx) + self.get(y1, x1) * tx;
        top * (1.0 - ty) + bot * ty
    }

    pub fn variance(&self) -> f64 {
        let n = self.data.len() as f64;
        let m = self.data.iter().sum::<f64>() / n;
        self.data.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n
    }

    pub fn to_luma8(&self) -> image::GrayImage {
        let bytes = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes).expect("buffer size")
    }

    pub fn from_luma8(img: &image::GrayImage) -> Self {
        let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        Self::new(img.height() as usize, img.width() as usize, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_luma8().save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        Ok(Self::from_luma8(&img))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub image: GrayImage,
    pub boxes: Vec<BBox>,
    pub instance_ids: Vec<u32>,
    pub class_ids: Vec<LandmarkClass>,
    pub domain: Domain,
    pub view_group: u64,
    pub seed: u64,
}

impl SceneSample {
    pub fn box_of(&self, landmark_id: u32) -> Option<BBox> {
        self.instance_ids.iter().position(|&i| i == landmark_id).map(|k| self.boxes[k])
    }
}

// ---- world generation -------------------------------------------------------

/// Places `num_landmarks` landmarks with classes assigned round-robin and then
/// shuffled, so every class appears once `num_landmarks ≥ 3`.
pub fn generate_world(num_landmarks: usize, seed: u64) -> Result<World> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5717));
    let mut classes: Vec<LandmarkClass> =
        (0..num_landmarks).map(|i| LandmarkClass::ALL[i % LandmarkClass::ALL.len()]).collect();
    classes.shuffle(&mut rng);
    let margin = MAX_RADIUS * 0.5;
    let min_dist = SEPARATION * MAX_RADIUS;
    let mut landmarks: Vec<LandmarkSpec> = Vec::with_capacity(num_landmarks);
    for (i, class) in classes.into_iter().enumerate() {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let p = [
                rng.gen_range(margin..WORLD_EXTENT - margin),
                rng.gen_range(margin..WORLD_EXTENT - margin),
            ];
            let clear = landmarks.iter().all(|l| {
                let d = ((l.world_pos[0] - p[0]).powi(2) + (l.world_pos[1] - p[1]).powi(2)).sqrt();
                d >= min_dist
            });
            if clear {
                placed = Some(p);
                break;
            }
        }
        let Some(world_pos) = placed else {
            return Err(ForgeError::Placement { requested: num_landmarks, placed: landmarks.len() });
        };
        let radius = rng.gen_range(MIN_RADIUS..MAX_RADIUS);
        let relief = match class {
            LandmarkClass::Crater => -radius * rng.gen_range(0.45..0.6),
            LandmarkClass::Mountain => radius * rng.gen_range(0.6..0.9),
            LandmarkClass::Dune => radius * rng.gen_range(0.35..0.5),
        };
        landmarks.push(LandmarkSpec { landmark_id: i as u32, class_id: class, world_pos, radius, relief });
    }
    Ok(World { seed, landmarks })
}

// ---- terrain ----------------------------------------------------------------

fn lattice(ix: i64, iy: i64, seed: u64) -> f64 {
    let h = mix_seed(seed, (ix as u64).wrapping_mul(0x1F1F_1F1F) ^ (iy as u64).wrapping_mul(0x7A3B_9C11_0000_0001));
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (tx, ty) = (x - x0, y - y0);
    let (sx, sy) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let a = lattice(ix, iy, seed);
    let b = lattice(ix + 1, iy, seed);
    let c = lattice(ix, iy + 1, seed);
    let d = lattice(ix + 1, iy + 1, seed);
    let top = a + (b - a) * sx;
    let bot = c + (d - c) * sx;
    top + (bot - top) * sy
}

fn fbm(x: f64, y: f64, octaves: usize, seed: u64) -> f64 {
    let (mut amp, mut freq, mut total) = (1.0, 1.0, 0.0);
    for o in 0..octaves {
        total += amp * value_noise(x * freq, y * freq, mix_seed(seed, o as u64));
        amp *= 0.5;
        freq *= 2.0;
    }
    total
}

fn landmark_height(l: &LandmarkSpec, x: f64, y: f64) -> f64 {
    let dx = x - l.world_pos[0];
    let dy = y - l.world_pos[1];
    let r = l.radius;
    match l.class_id {
        LandmarkClass::Crater => {
            let d = (dx * dx + dy * dy).sqrt() / r;
            if d > 2.0 {
                return 0.0;
            }
            let bowl = if d < 1.0 { l.relief * (1.0 - d * d) } else { 0.0 };
            let rim = 0.35 * l.relief.abs() * (-((d - 1.0) / 0.22).powi(2)).exp();
            bowl + rim
        }
        LandmarkClass::Mountain => {
            let d = (dx * dx + dy * dy).sqrt() / r;
            if d < 1.0 {
                l.relief * (1.0 - d).powi(2)
            } else {
                0.0
            }
        }
        LandmarkClass::Dune => {
            let ex = dx / r;
            let ey = dy / (r * DUNE_ASPECT);
            let d2 = ex * ex + ey * ey;
            if d2 < 1.0 {
                l.relief * (1.0 - d2).powi(2)
            } else {
                0.0
            }
        }
    }
}

fn terrain_height(world: &World, texture_gain: f64, x: f64, y: f64) -> f64 {
    let base = 3.0 * fbm(x / 40.0, y / 40.0, 3, mix_seed(world.seed, 1));
    let detail = 0.9 * fbm(x / 5.0, y / 5.0, 3, mix_seed(world.seed, 2));
    let mut h = base + texture_gain * detail;
    for l in &world.landmarks {
        if (x - l.world_pos[0]).abs() < 2.2 * l.radius && (y - l.world_pos[1]).abs() < 2.2 * l.radius {
            h += landmark_height(l, x, y);
        }
    }
    h
}

/// Pixel ↔ world mapping for one view.
#[derive(Debug, Clone, Copy)]
struct Camera {
    cx: f64,
    cy: f64,
    zoom: f64,
    cos: f64,
    sin: f64,
    offset: [f64; 2],
}

impl Camera {
    fn new(view: &ViewParams, height: usize, width: usize) -> Self {
        Self {
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            zoom: view.camera_scale * width.min(height) as f64 / VIEW_EXTENT,
            cos: view.camera_rotation.cos(),
            sin: view.camera_rotation.sin(),
            offset: view.camera_offset,
        }
    }

    fn to_pixel(&self, w: [f64; 2]) -> (f64, f64) {
        let dx = w[0] - self.offset[0];
        let dy = w[1] - self.offset[1];
        (
            self.cx + self.zoom * (self.cos * dx - self.sin * dy),
            self.cy + self.zoom * (self.sin * dx + self.cos * dy),
        )
    }

    fn to_world(&self, px: f64, py: f64) -> [f64; 2] {
        let u = (px - self.cx) / self.zoom;
        let v = (py - self.cy) / self.zoom;
        [self.offset[0] + self.cos * u + self.sin * v, self.offset[1] - self.sin * u + self.cos * v]
    }
}

fn landmark_box(l: &LandmarkSpec, cam: &Camera) -> BBox {
    let (px, py) = cam.to_pixel(l.world_pos);
    let (hw, hh) = match l.class_id {
        LandmarkClass::Crater => {
            let r = CRATER_RIM * l.radius * cam.zoom;
            (r, r)
        }
        LandmarkClass::Mountain => (l.radius * cam.zoom, l.radius * cam.zoom),
        LandmarkClass::Dune => {
            // rotated ellipse with semi-axes (r, aspect·r) along world x/y
            let a = l.radius * cam.zoom;
            let b = DUNE_ASPECT * a;
            (
                ((a * cam.cos).powi(2) + (b * cam.sin).powi(2)).sqrt(),
                ((a * cam.sin).powi(2) + (b * cam.cos).powi(2)).sqrt(),
            )
        }
    };
    BBox::new(px - hw, py - hh, px + hw, py + hh)
}

/// Renders one view of `world`. `seed` drives the sensor noise only; terrain
/// is a function of the world.
pub fn render_view(
    world: &World,
    view: &ViewParams,
    shift: &DomainShift,
    size: (usize, usize),
    domain: Domain,
    seed: u64,
) -> Result<SceneSample> {
    let (height, width) = size;
    if height < MIN_IMAGE_SIZE || width < MIN_IMAGE_SIZE {
        return Err(ForgeError::Size { height, width, reason: "both sides must be at least 32" });
    }
    view.validate()?;
    shift.validate()?;
    let cam = Camera::new(view, height, width);

    // Heights on a one-pixel apron so every pixel gets a central difference.
    let gw = width + 2;
    let mut heights = vec![0.0; (height + 2) * gw];
    for gy in 0..height + 2 {
        for gx in 0..gw {
            let w = cam.to_world(gx as f64 - 0.5, gy as f64 - 0.5);
            heights[gy * gw + gx] = terrain_height(world, shift.texture_gain, w[0], w[1]);
        }
    }
    let sun = [
        view.sun_elevation.cos() * view.sun_azimuth.cos(),
        view.sun_elevation.cos() * view.sun_azimuth.sin(),
        view.sun_elevation.sin(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xA015E));
    let noise = (shift.noise_sigma > 0.0).then(|| Normal::new(0.0, shift.noise_sigma).expect("sigma"));
    let mut data = vec![0.0; height * width];
    for y in 0..height {
        for x in 0..width {
            let (gx, gy) = (x + 1, y + 1);
            let dhx = (heights[gy * gw + gx + 1] - heights[gy * gw + gx - 1]) / 2.0;
            let dhy = (heights[(gy + 1) * gw + gx] - heights[(gy - 1) * gw + gx]) / 2.0;
            // pixel-space slope → world-space slope (the camera map is a similarity)
            let sx = cam.zoom * (cam.cos * dhx + cam.sin * dhy);
            let sy = cam.zoom * (-cam.sin * dhx + cam.cos * dhy);
            let n = (sx * sx + sy * sy + 1.0).sqrt();
            let lambert = ((-sx * sun[0] - sy * sun[1] + sun[2]) / n).max(0.0);
            let mut v = ALBEDO * (AMBIENT + (1.0 - AMBIENT) * lambert);
            v = v.clamp(0.0, 1.0).powf(shift.gamma);
            v = (1.0 - shift.haze) * v + shift.haze * HAZE_LEVEL;
            if let Some(noise) = &noise {
                v += noise.sample(&mut rng);
            }
            data[y * width + x] = v.clamp(0.0, 1.0);
        }
    }

    let mut boxes = Vec::new();
    let mut instance_ids = Vec::new();
    let mut class_ids = Vec::new();
    for l in &world.landmarks {
        let b = landmark_box(l, &cam).clip(width, height);
        if b.is_valid_in(width, height) {
            boxes.push(b);
            instance_ids.push(l.landmark_id);
            class_ids.push(l.class_id);
        }
    }
    Ok(SceneSample {
        image: GrayImage::new(height, width, data),
        boxes,
        instance_ids,
        class_ids,
        domain,
        view_group: world.seed,
        seed,
    })
}

// ---- view pairs -------------------------------------------------------------

/// Half-ranges of random view perturbation around a base view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewJitter {
    pub sun_azimuth: f64,
    pub camera_rotation: f64,
    pub camera_offset: f64,
    /// Absolute `camera_scale` range; `None` keeps the base scale.
    pub camera_scale: Option<[f64; 2]>,
    /// Fraction of an axis' range that at least one axis must differ by
    /// between the two views (ignored when every range is zero).
    pub min_fraction: f64,
}

impl ViewJitter {
    pub fn zero() -> Self {
        Self { sun_azimuth: 0.0, camera_rotation: 0.0, camera_offset: 0.0, camera_scale: None, min_fraction: 0.0 }
    }

    fn is_zero(&self) -> bool {
        self.sun_azimuth == 0.0
            && self.camera_rotation == 0.0
            && self.camera_scale.is_none_or(|[lo, hi]| lo == hi)
    }
}

impl Default for ViewJitter {
    fn default() -> Self {
        Self {
            sun_azimuth: PI / 2.0,
            camera_rotation: PI / 9.0,
            camera_offset: 4.0,
            camera_scale: Some([0.8, 1.25]),
            min_fraction: 0.15,
        }
    }
}

fn jittered(base: &ViewParams, center: [f64; 2], j: &ViewJitter, rng: &mut ChaCha8Rng) -> ViewParams {
    let sym = |rng: &mut ChaCha8Rng, r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
    let mut v = *base;
    v.sun_azimuth = (base.sun_azimuth + sym(rng, j.sun_azimuth)).rem_euclid(TAU);
    v.camera_rotation = base.camera_rotation + sym(rng, j.camera_rotation);
    v.camera_offset = [center[0] + sym(rng, j.camera_offset), center[1] + sym(rng, j.camera_offset)];
    if let Some([lo, hi]) = j.camera_scale {
        v.camera_scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    }
    v
}

fn angle_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

fn differs_enough(a: &ViewParams, b: &ViewParams, j: &ViewJitter) -> bool {
    if j.is_zero() {
        return true;
    }
    let f = j.min_fraction;
    (j.sun_azimuth > 0.0 && angle_gap(a.sun_azimuth, b.sun_azimuth) >= f * 2.0 * j.sun_azimuth)
        || (j.camera_rotation > 0.0
            && (a.camera_rotation - b.camera_rotation).abs() >= f * 2.0 * j.camera_rotation)
        || j.camera_scale.is_some_and(|[lo, hi]| {
            hi > lo && (a.camera_scale - b.camera_scale).abs() >= f * (hi - lo)
        })
}

/// Two jittered views centered on `landmark_id`, sharing a view group.
pub fn make_view_pair(
    world: &World,
    landmark_id: u32,
    base_view: &ViewParams,
    jitter: &ViewJitter,
    shift: &DomainShift,
    size: (usize, usize),
    domain: Domain,
    seed: u64,
) -> Result<(SceneSample, SceneSample)> {
    let views = make_views(world, landmark_id, base_view, jitter, shift, size, domain, seed, 2)?;
    let mut it = views.into_iter();
    Ok((it.next().unwrap(), it.next().unwrap()))
}

/// `count ≥ 2` jittered views of one landmark; every consecutive pair obeys the
/// minimum-jitter rule relative to the first view.
#[allow(clippy::too_many_arguments)]
pub fn make_views(
    world: &World,
    landmark_id: u32,
    base_view: &ViewParams,
    jitter: &ViewJitter,
    shift: &DomainShift,
    size: (usize, usize),
    domain: Domain,
    seed: u64,
    count: usize,
) -> Result<Vec<SceneSample>> {
    let landmark = world
        .landmark(landmark_id)
        .ok_or_else(|| ForgeError::InvalidArgument(format!("unknown landmark {landmark_id}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7A12));
    let mut out: Vec<SceneSample> = Vec::with_capacity(count);
    let mut first: Option<ViewParams> = None;
    for k in 0..count {
        let mut accepted = None;
        for _ in 0..VIEW_ATTEMPTS {
            let v = jittered(base_view, landmark.world_pos, jitter, &mut rng);
            if let Some(f) = &first {
                if !differs_enough(f, &v, jitter) {
                    continue;
                }
            }
            let s = render_view(world, &v, shift, size, domain, mix_seed(seed, 100 + k as u64))?;
            if s.box_of(landmark_id).is_some() {
                accepted = Some((v, s));
                break;
            }
        }
        let Some((v, s)) = accepted else {
            return Err(ForgeError::Visibility { landmark_id, attempts: VIEW_ATTEMPTS });
        };
        first.get_or_insert(v);
        out.push(s);
    }
    Ok(out)
}

// ---- datasets -----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatagenConfig {
    pub image_size: usize,
    pub landmarks_min: usize,
    pub landmarks_max: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub sun_elevation_min: f64,
    pub sun_elevation_max: f64,
    pub camera_scale_min: f64,
    pub camera_scale_max: f64,
    pub camera_offset_jitter: f64,
    pub shift: DomainShift,
    /// Frames in the optional drifting sequence written next to the dataset.
    pub sequence_frames: usize,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            landmarks_min: 4,
            landmarks_max: 7,
            n_source: 512,
            n_target: 512,
            sun_elevation_min: 0.35,
            sun_elevation_max: 1.05,
            camera_scale_min: 0.85,
            camera_scale_max: 1.2,
            camera_offset_jitter: 8.0,
            shift: DomainShift::default(),
            sequence_frames: 0,
        }
    }
}

impl DatagenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ForgeError::Config(format!("datagen: {m}")));
        if self.image_size < MIN_IMAGE_SIZE {
            return bad("image_size must be at least 32");
        }
        if self.landmarks_min > self.landmarks_max {
            return bad("landmarks_min > landmarks_max");
        }
        if !(self.sun_elevation_min > 0.0
            && self.sun_elevation_min <= self.sun_elevation_max
            && self.sun_elevation_max <= PI / 2.0)
        {
            return bad("sun elevation range must lie in (0, pi/2]");
        }
        if !(0.5 <= self.camera_scale_min
            && self.camera_scale_min <= self.camera_scale_max
            && self.camera_scale_max <= 2.0)
        {
            return bad("camera scale range must lie in [0.5, 2]");
        }
        self.shift.validate().map_err(|e| ForgeError::Config(e.to_string()))
    }

    pub fn size(&self) -> (usize, usize) {
        (self.image_size, self.image_size)
    }

    pub fn random_view(&self, rng: &mut ChaCha8Rng) -> ViewParams {
        let j = self.camera_offset_jitter;
        let c = WORLD_EXTENT / 2.0;
        ViewParams {
            sun_azimuth: rng.gen_range(0.0..TAU),
            sun_elevation: rng.gen_range(self.sun_elevation_min..=self.sun_elevation_max),
            camera_offset: [c + rng.gen_range(-j..=j), c + rng.gen_range(-j..=j)],
            camera_scale: rng.gen_range(self.camera_scale_min..=self.camera_scale_max),
            camera_rotation: rng.gen_range(0.0..TAU),
        }
    }
}

/// The `index`-th scene of a domain: its own world and a random view.
pub fn scene_sample(config: &DatagenConfig, domain: Domain, index: usize, seed: u64) -> Result<SceneSample> {
    let tag = match domain {
        Domain::Source => 0x50,
        Domain::Target => 0x7A,
    };
    let s = mix_seed(mix_seed(seed, tag), index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let n = rng.gen_range(config.landmarks_min..=config.landmarks_max);
    let world = generate_world(n, mix_seed(s, 1))?;
    let view = config.random_view(&mut rng);
    let shift = match domain {
        Domain::Source => DomainShift::IDENTITY,
        Domain::Target => config.shift,
    };
    render_view(&world, &view, &shift, config.size(), domain, mix_seed(s, 2))
}

/// A slowly drifting camera pass over one world.
pub fn drift_sequence(
    config: &DatagenConfig,
    frames: usize,
    drift: [f64; 2],
    spin: f64,
    shift: &DomainShift,
    seed: u64,
) -> Result<Vec<SceneSample>> {
    let world = generate_world(config.landmarks_max, mix_seed(seed, 0x5E0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5E1));
    let mut base = config.random_view(&mut rng);
    base.camera_offset = world.center();
    base.camera_scale = 1.0;
    let start = [
        base.camera_offset[0] - drift[0] * frames as f64 / 2.0,
        base.camera_offset[1] - drift[1] * frames as f64 / 2.0,
    ];
    let domain = if *shift == DomainShift::IDENTITY { Domain::Source } else { Domain::Target };
    (0..frames)
        .map(|f| {
            let mut v = base;
            v.camera_offset = [start[0] + drift[0] * f as f64, start[1] + drift[1] * f as f64];
            v.camera_rotation = base.camera_rotation + spin * f as f64;
            render_view(&world, &v, shift, config.size(), domain, mix_seed(seed, 0x1000 + f as u64))
        })
        .collect()
}

/// One line of the dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image: String,
    pub boxes: Vec<BBox>,
    pub instance_ids: Vec<u32>,
    pub class_ids: Vec<u8>,
    pub domain: Domain,
    pub view_group: u64,
    pub seed: u64,
}

impl ManifestRecord {
    pub fn from_sample(image: String, s: &SceneSample) -> Self {
        Self {
            image,
            boxes: s.boxes.clone(),
            instance_ids: s.instance_ids.clone(),
            class_ids: s.class_ids.iter().map(|c| c.index() as u8).collect(),
            domain: s.domain,
            view_group: s.view_group,
            seed: s.seed,
        }
    }

    pub fn into_sample(self, image: GrayImage) -> Result<SceneSample> {
        let class_ids = self
            .class_ids
            .iter()
            .map(|&c| {
                LandmarkClass::from_index(c as usize)
                    .ok_or_else(|| ForgeError::InvalidArgument(format!("class id {c}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if self.boxes.len() != self.instance_ids.len() || self.boxes.len() != class_ids.len() {
            return Err(ForgeError::InvalidArgument("manifest record lengths differ".into()));
        }
        Ok(SceneSample {
            image,
            boxes: self.boxes,
            instance_ids: self.instance_ids,
            class_ids,
            domain: self.domain,
            view_group: self.view_group,
            seed: self.seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    /// Hex SHA-256 of the manifest file bytes.
    pub checksum: String,
}

fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<String> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| ForgeError::io(format!("create {}", path.display()), e))?;
    f.write_all(&buf).map_err(|e| ForgeError::io(format!("write {}", path.display()), e))?;
    Ok(hex::encode(Sha256::digest(&buf)))
}

fn write_samples(out: &Path, prefix: &str, samples: &[(String, SceneSample)]) -> Result<DatasetManifest> {
    fs::create_dir_all(out.join("images")).map_err(|e| ForgeError::io(format!("create {}", out.display()), e))?;
    let mut records = Vec::with_capacity(samples.len());
    for (name, s) in samples {
        let rel = format!("images/{prefix}{name}.png");
        s.image.save_png(&out.join(&rel))?;
        records.push(ManifestRecord::from_sample(rel, s));
    }
    let checksum = write_manifest(&out.join("manifest.jsonl"), &records)?;
    Ok(DatasetManifest { records, checksum })
}

/// Renders `n_source + n_target` scenes to `out/images/` and writes
/// `out/manifest.jsonl`. With `sequence_frames > 0` a drifting sequence goes
/// to `out/sequence/`.
pub fn build_dataset(config: &DatagenConfig, seed: u64, out: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| ForgeError::io(format!("create {}", out.display()), e))?;
    let mut samples = Vec::with_capacity(config.n_source + config.n_target);
    for i in 0..config.n_source {
        samples.push((format!("source_{i:05}"), scene_sample(config, Domain::Source, i, seed)?));
    }
    for i in 0..config.n_target {
        samples.push((format!("target_{i:05}"), scene_sample(config, Domain::Target, i, seed)?));
    }
    let manifest = if samples.is_empty() {
        let checksum = write_manifest(&out.join("manifest.jsonl"), &[])?;
        DatasetManifest { records: Vec::new(), checksum }
    } else {
        write_samples(out, "", &samples)?
    };
    if config.sequence_frames > 0 {
        let frames = drift_sequence(config, config.sequence_frames, [1.5, 0.5], 0.01, &DomainShift::IDENTITY, seed)?;
        let named: Vec<_> = frames.into_iter().enumerate().map(|(i, s)| (format!("{i:05}"), s)).collect();
        write_samples(&out.join("sequence"), "frame_", &named)?;
    }
    Ok(manifest)
}

/// Reads a manifest and its images. Paths are relative to the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<SceneSample>> {
    let text = fs::read_to_string(path).map_err(|e| ForgeError::io(format!("read {}", path.display()), e))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let rec: ManifestRecord = serde_json::from_str(line)?;
            let img = GrayImage::load_png(&dir.join(&rec.image))?;
            rec.into_sample(img)
        })
        .collect()
}
