//! Procedural cross-weather driving scenes.
//!
//! A scene is a ground plane with a sky, a set of billboard landmarks
//! (blocks, posts and canopies) and a gently winding road. Frames are
//! rendered with a pinhole camera driven along the road using painter's
//! order, then a weather post-process is applied. Each frame comes with a
//! mask of the pixels covered by landmarks before any weather overlay.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, Image, ImageDims, ImageSample, LandmarkMask, Pose, Weather, PIXEL_MAX, PIXEL_MIN};
use crate::error::{Error, Result};
use crate::perturb::mix_seed;

const CAMERA_HEIGHT: f64 = 1.5;
const NEAR_PLANE: f64 = 0.5;
/// Focal length as a fraction of image width.
const FOCAL_FRACTION: f64 = 0.6;
const ROAD_CLEARANCE: f64 = 2.5;
const LANDMARK_SPACING: f64 = 1.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkKind {
    Block,
    Post,
    Canopy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    #[serde(default)]
    pub seed: u64,
    pub num_landmarks: usize,
    pub kinds: Vec<LandmarkKind>,
    /// World size along x (driving direction) and y, in scene units.
    pub extent: [f64; 2],
    pub trajectory_frames: usize,
    pub dims: ImageDims,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            num_landmarks: 64,
            kinds: vec![LandmarkKind::Block, LandmarkKind::Post, LandmarkKind::Canopy],
            extent: [60.0, 24.0],
            trajectory_frames: 400,
            dims: ImageDims::DEFAULT,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_landmarks == 0 {
            return Err(Error::invalid("scene needs at least one landmark"));
        }
        if self.kinds.is_empty() {
            return Err(Error::invalid("scene needs at least one landmark kind"));
        }
        if self.trajectory_frames < 2 {
            return Err(Error::invalid("trajectory needs at least 2 frames"));
        }
        if !(self.extent[0] > 4.0 * ROAD_CLEARANCE && self.extent[1] > 4.0 * ROAD_CLEARANCE)
            || !self.extent.iter().all(|e| e.is_finite())
        {
            return Err(Error::invalid(format!("world extent {:?} too small", self.extent)));
        }
        if self.dims.height < 8 || self.dims.width < 8 || !(self.dims.channels == 1 || self.dims.channels == 3) {
            return Err(Error::invalid(format!("unsupported image dims {}", self.dims)));
        }
        Ok(())
    }
}

/// Photometric effects of one weather condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeatherSpec {
    pub tag: Weather,
    /// Scales pixel deviations from mid-grey; below 1 reads as haze.
    #[serde(default = "unit_contrast")]
    pub contrast: f64,
    /// Added to every pixel.
    pub brightness_offset: f64,
    /// Pixels are capped at this level (over-exposure).
    pub exposure_clip_level: f64,
    /// Rain streaks per 1000 pixels.
    pub streak_density: f64,
    /// Snow discs per 1000 pixels.
    pub blob_density: f64,
    /// Standard deviation of additive per-frame pixel noise.
    pub noise_sigma: f64,
}

fn unit_contrast() -> f64 {
    1.0
}

impl WeatherSpec {
    pub fn preset(tag: Weather) -> Self {
        let base = WeatherSpec {
            tag,
            contrast: 1.0,
            brightness_offset: 0.0,
            exposure_clip_level: 255.0,
            streak_density: 0.0,
            blob_density: 0.0,
            noise_sigma: 0.0,
        };
        match tag {
            Weather::Overcast => base,
            Weather::Sunny => WeatherSpec {
                brightness_offset: 40.0,
                ..base
            },
            Weather::Overexposure => WeatherSpec {
                brightness_offset: 80.0,
                exposure_clip_level: 235.0,
                noise_sigma: 2.0,
                ..base
            },
            Weather::Rain => WeatherSpec {
                contrast: 0.7,
                brightness_offset: -40.0,
                streak_density: 5.0,
                noise_sigma: 6.0,
                ..base
            },
            Weather::Snow => WeatherSpec {
                contrast: 0.65,
                brightness_offset: 35.0,
                blob_density: 8.0,
                noise_sigma: 4.0,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.contrast,
            self.brightness_offset,
            self.exposure_clip_level,
            self.streak_density,
            self.blob_density,
            self.noise_sigma,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite(format!("weather spec {self:?}")));
        }
        if !(self.exposure_clip_level > 0.0 && self.exposure_clip_level <= PIXEL_MAX) {
            return Err(Error::invalid(format!(
                "exposure clip level must be in (0, 255], got {}",
                self.exposure_clip_level
            )));
        }
        if self.contrast <= 0.0 {
            return Err(Error::invalid(format!("contrast must be > 0, got {}", self.contrast)));
        }
        if self.streak_density < 0.0 || self.blob_density < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::invalid("weather densities and noise must be >= 0"));
        }
        Ok(())
    }
}

/// Weather specs by tag; missing tags fall back to presets.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeatherTable(pub BTreeMap<Weather, WeatherSpec>);

impl WeatherTable {
    pub fn presets() -> Self {
        WeatherTable(Weather::ALL.iter().map(|&w| (w, WeatherSpec::preset(w))).collect())
    }

    pub fn get(&self, tag: Weather) -> WeatherSpec {
        self.0.get(&tag).cloned().unwrap_or_else(|| WeatherSpec::preset(tag))
    }

    pub fn validate(&self) -> Result<()> {
        for (tag, spec) in &self.0 {
            if spec.tag != *tag {
                return Err(Error::invalid(format!("weather entry `{tag}` carries tag `{}`", spec.tag)));
            }
            spec.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub kind: LandmarkKind,
    /// Ground position (x, y).
    pub position: [f64; 2],
    pub width: f64,
    pub height: f64,
    /// Crown radius for canopies; zero otherwise.
    pub crown: f64,
    pub color: [f64; 3],
    pub accent: [f64; 3],
    pub texture_seed: u64,
}

/// Road centreline `y = amplitude * sin(2π cycles (x - x0) / length + phase)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Road {
    pub x_start: f64,
    pub x_end: f64,
    pub amplitude: f64,
    pub cycles: f64,
    pub phase: f64,
}

impl Road {
    fn omega(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.cycles / (self.x_end - self.x_start)
    }

    pub fn y_at(&self, x: f64) -> f64 {
        self.amplitude * (self.omega() * (x - self.x_start) + self.phase).sin()
    }

    pub fn heading_at(&self, x: f64) -> f64 {
        let slope = self.amplitude * self.omega() * (self.omega() * (x - self.x_start) + self.phase).cos();
        slope.atan()
    }

    /// Camera pose at fraction `s` in `[0, 1]` of the road.
    pub fn pose_at(&self, s: f64) -> Pose {
        let x = self.x_start + s * (self.x_end - self.x_start);
        Pose::planar(x, self.y_at(x), CAMERA_HEIGHT, self.heading_at(x))
    }
}

/// Geometry and appearance of a generated world.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub landmarks: Vec<Landmark>,
    pub road: Road,
    pub sky: [[f64; 3]; 2],
    pub ground: [[f64; 3]; 2],
}

/// Samples along the road; frame `i` sits at fraction `(i + offset) / frames`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub frames: usize,
    #[serde(default)]
    pub offset: f64,
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::invalid("trajectory needs at least 2 frames"));
        }
        if !(0.0..1.0).contains(&self.offset) {
            return Err(Error::invalid(format!("trajectory offset must be in [0, 1), got {}", self.offset)));
        }
        Ok(())
    }
}

fn jitter_color(rng: &mut ChaCha8Rng, base: [f64; 3], spread: f64) -> [f64; 3] {
    base.map(|c| (c + rng.gen_range(-spread..spread)).clamp(10.0, 245.0))
}

/// Builds the world for `spec`. Deterministic per seed.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0x5CE4E));
    let [ex, ey] = spec.extent;
    let road = Road {
        x_start: -0.42 * ex,
        x_end: 0.42 * ex,
        amplitude: 0.12 * ey,
        cycles: 1.25,
        phase: rng.gen_range(0.0..std::f64::consts::TAU),
    };

    let mut landmarks: Vec<Landmark> = Vec::with_capacity(spec.num_landmarks);
    let mut attempts = 0;
    while landmarks.len() < spec.num_landmarks {
        attempts += 1;
        if attempts > 200_000 {
            return Err(Error::invalid(format!(
                "could not place {} landmarks in extent {:?}",
                spec.num_landmarks, spec.extent
            )));
        }
        let x = rng.gen_range(-0.5 * ex..0.5 * ex);
        let y = rng.gen_range(-0.5 * ey..0.5 * ey);
        if (y - road.y_at(x.clamp(road.x_start, road.x_end))).abs() < ROAD_CLEARANCE {
            continue;
        }
        if landmarks
            .iter()
            .any(|l| (l.position[0] - x).hypot(l.position[1] - y) < LANDMARK_SPACING)
        {
            continue;
        }
        let kind = spec.kinds[rng.gen_range(0..spec.kinds.len())];
        let lm = match kind {
            LandmarkKind::Block => Landmark {
                kind,
                position: [x, y],
                width: rng.gen_range(1.8..3.6),
                height: rng.gen_range(2.5..5.5),
                crown: 0.0,
                color: jitter_color(&mut rng, [150.0, 95.0, 75.0], 55.0),
                accent: jitter_color(&mut rng, [60.0, 70.0, 90.0], 30.0),
                texture_seed: rng.gen(),
            },
            LandmarkKind::Post => Landmark {
                kind,
                position: [x, y],
                width: rng.gen_range(0.25..0.45),
                height: rng.gen_range(2.5..4.5),
                crown: 0.0,
                color: jitter_color(&mut rng, [225.0, 225.0, 215.0], 20.0),
                accent: jitter_color(&mut rng, [40.0, 40.0, 45.0], 20.0),
                texture_seed: rng.gen(),
            },
            LandmarkKind::Canopy => Landmark {
                kind,
                position: [x, y],
                width: rng.gen_range(0.3..0.5),
                height: rng.gen_range(1.2..2.2),
                crown: rng.gen_range(0.9..1.6),
                color: jitter_color(&mut rng, [60.0, 130.0, 55.0], 35.0),
                accent: jitter_color(&mut rng, [95.0, 65.0, 40.0], 20.0),
                texture_seed: rng.gen(),
            },
        };
        landmarks.push(lm);
    }

    Ok(Scene {
        spec: spec.clone(),
        landmarks,
        road,
        sky: [[150.0, 172.0, 200.0], [196.0, 202.0, 208.0]],
        ground: [[124.0, 120.0, 112.0], [88.0, 86.0, 80.0]],
    })
}

impl Scene {
    pub fn trajectory(&self, traj: &TrajectorySpec) -> Result<Vec<Pose>> {
        traj.validate()?;
        Ok((0..traj.frames)
            .map(|i| self.road.pose_at((i as f64 + traj.offset) / traj.frames as f64))
            .collect())
    }

    /// Pose halfway along the road.
    pub fn median_pose(&self) -> Pose {
        self.road.pose_at(0.5)
    }

    fn contains(&self, pose: &Pose) -> bool {
        let [ex, ey] = self.spec.extent;
        pose.t[0].abs() <= 0.5 * ex && pose.t[1].abs() <= 0.5 * ey
    }
}

#[inline]
fn hash2(seed: u64, a: i64, b: i64) -> u64 {
    mix_seed(mix_seed(seed, a as u64), b as u64)
}

/// Landmark colour at texture coordinates `(a, b)` in `[0, 1]²`, `b = 0` at the top.
fn texture(lm: &Landmark, a: f64, b: f64, crown: bool) -> [f64; 3] {
    match lm.kind {
        LandmarkKind::Block => {
            let cols = 2 + (lm.texture_seed % 3) as i64;
            let rows = 3 + (lm.texture_seed / 3 % 4) as i64;
            let fa = (a * cols as f64).fract();
            let fb = (b * rows as f64).fract();
            let window = (0.25..0.75).contains(&fa) && (0.2..0.65).contains(&fb);
            if window {
                lm.accent
            } else {
                lm.color
            }
        }
        LandmarkKind::Post => {
            let bands = 4 + (lm.texture_seed % 4) as i64;
            if ((b * bands as f64) as i64) % 2 == 0 {
                lm.color
            } else {
                lm.accent
            }
        }
        LandmarkKind::Canopy => {
            if !crown {
                return lm.accent;
            }
            let cell = hash2(lm.texture_seed, (a * 6.0) as i64, (b * 6.0) as i64);
            let shade = 0.7 + 0.45 * ((cell % 1000) as f64 / 1000.0);
            lm.color.map(|c| (c * shade).min(PIXEL_MAX))
        }
    }
}

struct Camera {
    focal: f64,
    cx: f64,
    cy: f64,
    x: f64,
    y: f64,
    cos: f64,
    sin: f64,
}

impl Camera {
    fn new(dims: ImageDims, pose: &Pose) -> Self {
        // planar rendering: heading is read from the z log-quaternion component
        let yaw = 2.0 * pose.w[2];
        Camera {
            focal: FOCAL_FRACTION * dims.width as f64,
            cx: 0.5 * dims.width as f64,
            cy: 0.5 * dims.height as f64,
            x: pose.t[0],
            y: pose.t[1],
            cos: yaw.cos(),
            sin: yaw.sin(),
        }
    }

    /// Depth and image column of a ground point.
    fn project(&self, p: [f64; 2]) -> (f64, f64) {
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        let depth = dx * self.cos + dy * self.sin;
        let lateral = -dx * self.sin + dy * self.cos;
        (depth, self.cx - self.focal * lateral / depth)
    }

    fn row_of(&self, depth: f64, z: f64) -> f64 {
        self.cy + self.focal * (CAMERA_HEIGHT - z) / depth
    }
}

/// Renders the weather-free view from `pose`: integer-valued pixels and the landmark mask.
fn render_geometry(scene: &Scene, pose: &Pose) -> (Image, LandmarkMask) {
    let dims = scene.spec.dims;
    let (h, w, c) = (dims.height, dims.width, dims.channels);
    let cam = Camera::new(dims, pose);
    let mut rgb = vec![[0.0_f64; 3]; h * w];
    let mut mask = LandmarkMask::empty(h, w);

    for r in 0..h {
        let v = r as f64 + 0.5;
        let color = if v < cam.cy {
            let t = v / cam.cy;
            lerp3(scene.sky[0], scene.sky[1], t)
        } else {
            let t = (v - cam.cy) / (h as f64 - cam.cy);
            lerp3(scene.ground[0], scene.ground[1], t)
        };
        for px in &mut rgb[r * w..(r + 1) * w] {
            *px = color;
        }
    }

    let mut visible: Vec<(f64, f64, &Landmark)> = scene
        .landmarks
        .iter()
        .filter_map(|lm| {
            let (depth, u) = cam.project(lm.position);
            (depth > NEAR_PLANE).then_some((depth, u, lm))
        })
        .collect();
    // far to near
    visible.sort_by(|a, b| b.0.total_cmp(&a.0));

    for (depth, u, lm) in visible {
        let half = 0.5 * cam.focal * lm.width / depth;
        let (u0, u1) = (u - half, u + half);
        let (v_top, v_base) = (cam.row_of(depth, lm.height), cam.row_of(depth, 0.0));
        let mut paint = |r: usize, col: usize, colr: [f64; 3]| {
            rgb[r * w + col] = colr;
            mask.mask[r * w + col] = true;
        };
        if u1 > 0.0 && u0 < w as f64 && v_base > 0.0 && v_top < h as f64 {
            let c0 = u0.max(0.0).floor() as usize;
            let c1 = (u1.ceil() as usize).min(w);
            let r0 = v_top.max(0.0).floor() as usize;
            let r1 = (v_base.ceil() as usize).min(h);
            for r in r0..r1 {
                let v = r as f64 + 0.5;
                if v < v_top || v >= v_base {
                    continue;
                }
                for col in c0..c1 {
                    let uu = col as f64 + 0.5;
                    if uu < u0 || uu >= u1 {
                        continue;
                    }
                    let a = (uu - u0) / (u1 - u0);
                    let b = (v - v_top) / (v_base - v_top);
                    paint(r, col, texture(lm, a, b, false));
                }
            }
        }
        if lm.kind == LandmarkKind::Canopy {
            let radius = cam.focal * lm.crown / depth;
            let vc = cam.row_of(depth, lm.height + 0.7 * lm.crown);
            let r0 = (vc - radius).max(0.0).floor() as usize;
            let r1 = ((vc + radius).ceil().max(0.0) as usize).min(h);
            let c0 = (u - radius).max(0.0).floor() as usize;
            let c1 = ((u + radius).ceil().max(0.0) as usize).min(w);
            for r in r0..r1 {
                for col in c0..c1 {
                    let du = col as f64 + 0.5 - u;
                    let dv = r as f64 + 0.5 - vc;
                    if du * du + dv * dv <= radius * radius {
                        let a = 0.5 + 0.5 * du / radius;
                        let b = 0.5 + 0.5 * dv / radius;
                        paint(r, col, texture(lm, a, b, true));
                    }
                }
            }
        }
    }

    let mut data = Vec::with_capacity(dims.len());
    for px in &rgb {
        if c == 1 {
            data.push((0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]).round().clamp(PIXEL_MIN, PIXEL_MAX));
        } else {
            data.extend(px.iter().map(|v| v.round().clamp(PIXEL_MIN, PIXEL_MAX)));
        }
    }
    (Image::new(dims, data).expect("rendered size"), mask)
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    std::array::from_fn(|k| a[k] + (b[k] - a[k]) * t)
}

/// Applies a weather post-process in place: brightness, rain streaks, snow
/// discs, exposure cap, noise, then clamping and rounding to 8-bit levels.
fn apply_weather(img: &mut Image, weather: &WeatherSpec, seed: u64) {
    let dims = img.dims();
    let (h, w, c) = (dims.height, dims.width, dims.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = img.data_mut();

    if weather.contrast != 1.0 || weather.brightness_offset != 0.0 {
        let mid = 0.5 * (PIXEL_MIN + PIXEL_MAX);
        for v in data.iter_mut() {
            *v = mid + weather.contrast * (*v - mid) + weather.brightness_offset;
        }
    }

    let area = (h * w) as f64 / 1000.0;
    let streaks = (weather.streak_density * area).round() as usize;
    for _ in 0..streaks {
        let len = rng.gen_range(6..13);
        let mut x = rng.gen_range(0.0..w as f64 + 4.0);
        let y0 = rng.gen_range(-4i64..h as i64);
        for k in 0..len {
            let y = y0 + k;
            if y >= 0 && (y as usize) < h && x >= 0.0 && (x as usize) < w {
                for ch in 0..c {
                    let i = dims.index(y as usize, x as usize, ch);
                    data[i] = 0.35 * data[i] + 0.65 * 215.0;
                }
            }
            x -= 0.5;
        }
    }

    let blobs = (weather.blob_density * area).round() as usize;
    for _ in 0..blobs {
        let radius: f64 = rng.gen_range(0.7..1.8);
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let r0 = (cy - radius).floor().max(0.0) as usize;
        let r1 = ((cy + radius).ceil() as usize).min(h);
        let c0 = (cx - radius).floor().max(0.0) as usize;
        let c1 = ((cx + radius).ceil() as usize).min(w);
        for r in r0..r1 {
            for col in c0..c1 {
                let d = (col as f64 + 0.5 - cx).hypot(r as f64 + 0.5 - cy);
                if d <= radius {
                    for ch in 0..c {
                        data[dims.index(r, col, ch)] = 245.0;
                    }
                }
            }
        }
    }

    if weather.exposure_clip_level < PIXEL_MAX {
        for v in data.iter_mut() {
            *v = v.min(weather.exposure_clip_level);
        }
    }

    if weather.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, weather.noise_sigma).expect("validated sigma");
        for v in data.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }

    for v in data.iter_mut() {
        *v = v.round().clamp(PIXEL_MIN, PIXEL_MAX);
    }
}

/// Renders frame `frame_index` at `pose` under `weather`.
pub fn render_frame(
    scene: &Scene,
    pose: &Pose,
    weather: &WeatherSpec,
    frame_index: u64,
) -> Result<(ImageSample, LandmarkMask)> {
    if !pose.is_finite() || !scene.contains(pose) {
        return Err(Error::invalid(format!(
            "pose {:?} outside world extent {:?}",
            pose.t, scene.spec.extent
        )));
    }
    weather.validate()?;
    let (mut img, mask) = render_geometry(scene, pose);
    let seed = mix_seed(mix_seed(scene.spec.seed, frame_index), weather.tag as u64 + 1);
    apply_weather(&mut img, weather, seed);
    Ok((ImageSample::new(img, *pose, weather.tag, frame_index), mask))
}

/// Splits `frames` into contiguous per-weather counts (largest remainder).
pub fn weather_counts(mix: &BTreeMap<Weather, f64>, frames: usize) -> Result<Vec<(Weather, usize)>> {
    if mix.is_empty() {
        return Err(Error::invalid("empty weather mix"));
    }
    if mix.values().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::invalid(format!("weather fractions must lie in [0, 1]: {mix:?}")));
    }
    let sum: f64 = mix.values().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("weather fractions sum to {sum}, expected 1")));
    }
    let exact: Vec<(Weather, f64)> = mix.iter().map(|(&w, &f)| (w, f * frames as f64)).collect();
    let mut counts: Vec<(Weather, usize)> = exact
        .iter()
        .map(|&(w, e)| (w, (e + 1e-9).floor() as usize))
        .collect();
    let assigned: usize = counts.iter().map(|c| c.1).sum();
    let mut order: Vec<usize> = (0..exact.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a].1 - counts[a].1 as f64;
        let fb = exact[b].1 - counts[b].1 as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(frames.saturating_sub(assigned)) {
        counts[i].1 += 1;
    }
    Ok(counts)
}

/// Renders a trajectory with contiguous weather segments and windows it into tuples.
pub fn generate_dataset(
    scene: &Scene,
    trajectory: &TrajectorySpec,
    mix: &BTreeMap<Weather, f64>,
    weathers: &WeatherTable,
    tuple_len: usize,
) -> Result<Dataset> {
    weathers.validate()?;
    let poses = scene.trajectory(trajectory)?;
    let counts = weather_counts(mix, poses.len())?;
    let mut tags = Vec::with_capacity(poses.len());
    for (w, n) in counts {
        tags.extend(std::iter::repeat(w).take(n));
    }
    let rendered: Vec<Result<(ImageSample, LandmarkMask)>> = poses
        .par_iter()
        .zip(tags.par_iter())
        .enumerate()
        .map(|(i, (pose, tag))| render_frame(scene, pose, &weathers.get(*tag), i as u64))
        .collect();
    let mut frames = Vec::with_capacity(rendered.len());
    let mut masks = Vec::with_capacity(rendered.len());
    for r in rendered {
        let (f, m) = r?;
        frames.push(f);
        masks.push(m);
    }
    Dataset::new(frames, masks, tuple_len, scene.spec.seed)
}
