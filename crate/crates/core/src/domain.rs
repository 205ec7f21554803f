//! Value types shared across the crate: poses, images, samples and datasets.
//!
//! Poses carry translation in scene units and rotation as a log-quaternion
//! (the 3-vector logarithm of a unit quaternion). Images store real-valued
//! pixels in height × width × channel order, in the raw `[0, 255]` domain.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PIXEL_MIN: f64 = 0.0;
pub const PIXEL_MAX: f64 = 255.0;

/// 6-DoF camera pose: translation `t` and log-quaternion rotation `w`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub t: [f64; 3],
    pub w: [f64; 3],
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        t: [0.0; 3],
        w: [0.0; 3],
    };

    pub fn new(t: [f64; 3], w: [f64; 3]) -> Result<Self> {
        let pose = Pose { t, w };
        if !pose.is_finite() {
            return Err(Error::NonFinite(format!("pose {pose:?}")));
        }
        Ok(pose)
    }

    /// Planar pose at `(x, y, z)` with heading `yaw` about +z; roll and pitch are zero.
    pub fn planar(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Pose {
            t: [x, y, z],
            w: [0.0, 0.0, 0.5 * yaw],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.t.iter().chain(self.w.iter()).all(|v| v.is_finite())
    }

    /// Flattened `[t, w]` vector, the order used by the regression head.
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.t[0], self.t[1], self.t[2], self.w[0], self.w[1], self.w[2],
        ]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Pose {
            t: [v[0], v[1], v[2]],
            w: [v[3], v[4], v[5]],
        }
    }

    pub fn quaternion(&self) -> [f64; 4] {
        log_quat_to_quat(self.w)
    }
}

/// Componentwise difference between two poses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativePose {
    pub dt: [f64; 3],
    pub dw: [f64; 3],
}

impl RelativePose {
    /// View as a pose-shaped value so it can be fed to the pose loss.
    pub fn as_pose(&self) -> Pose {
        Pose {
            t: self.dt,
            w: self.dw,
        }
    }
}

/// Relative pose `(t_i - t_j, w_i - w_j)`.
///
/// The rotation part is a plain componentwise difference of log-quaternions,
/// not a geodesic rotation difference.
pub fn pose_compose_relative(p_i: &Pose, p_j: &Pose) -> RelativePose {
    RelativePose {
        dt: std::array::from_fn(|k| p_i.t[k] - p_j.t[k]),
        dw: std::array::from_fn(|k| p_i.w[k] - p_j.w[k]),
    }
}

/// Exponential map from a log-quaternion to a unit quaternion `(w, x, y, z)`.
pub fn log_quat_to_quat(w: [f64; 3]) -> [f64; 4] {
    let n = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    if n < 1e-12 {
        // sin(n)/n -> 1 as n -> 0
        let q = [1.0, w[0], w[1], w[2]];
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        return q.map(|v| v / qn);
    }
    let s = n.sin() / n;
    [n.cos(), w[0] * s, w[1] * s, w[2] * s]
}

/// Logarithm of a unit quaternion `(w, x, y, z)`, taken on the `w >= 0` hemisphere.
pub fn quat_to_log_quat(q: [f64; 4]) -> [f64; 3] {
    let q = if q[0] < 0.0 { q.map(|v| -v) } else { q };
    let v = (q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if v < 1e-12 {
        return [q[1], q[2], q[3]];
    }
    let angle = v.atan2(q[0]);
    [q[1] / v * angle, q[2] / v * angle, q[3] / v * angle]
}

/// Angular distance `2·acos(|q_a·q_b|)` between two rotations, in degrees.
pub fn rotation_error_degrees(w_a: [f64; 3], w_b: [f64; 3]) -> Result<f64> {
    if !w_a.iter().chain(w_b.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "rotation error of {w_a:?} and {w_b:?}"
        )));
    }
    let qa = log_quat_to_quat(w_a);
    let qb = log_quat_to_quat(w_b);
    let dot: f64 = qa.iter().zip(qb.iter()).map(|(a, b)| a * b).sum();
    let s = if dot < 0.0 { -1.0 } else { 1.0 };
    // 2·acos(|dot|), via the half-angle form that stays accurate near 0
    let diff = (0..4).map(|k| (qa[k] - s * qb[k]).powi(2)).sum::<f64>().sqrt();
    let sum = (0..4).map(|k| (qa[k] + s * qb[k]).powi(2)).sum::<f64>().sqrt();
    Ok((4.0 * diff.atan2(sum)).to_degrees())
}

/// Weather condition attached to every frame.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Weather {
    Overcast,
    Sunny,
    Overexposure,
    Rain,
    Snow,
}

impl Weather {
    pub const ALL: [Weather; 5] = [
        Weather::Overcast,
        Weather::Sunny,
        Weather::Overexposure,
        Weather::Rain,
        Weather::Snow,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Weather::Overcast => "overcast",
            Weather::Sunny => "sunny",
            Weather::Overexposure => "overexposure",
            Weather::Rain => "rain",
            Weather::Snow => "snow",
        }
    }

    /// Human-facing column label.
    pub fn label(&self) -> &'static str {
        match self {
            Weather::Overexposure => "over-exposure",
            other => other.as_str(),
        }
    }
}

impl fmt::Display for Weather {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Weather {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overcast" => Ok(Weather::Overcast),
            "sunny" => Ok(Weather::Sunny),
            "overexposure" | "over-exposure" => Ok(Weather::Overexposure),
            "rain" => Ok(Weather::Rain),
            "snow" => Ok(Weather::Snow),
            other => Err(Error::invalid(format!("unknown weather tag `{other}`"))),
        }
    }
}

/// Image dimensions (height, width, channels).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageDims {
    pub const DEFAULT: ImageDims = ImageDims {
        height: 64,
        width: 64,
        channels: 3,
    };

    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        ImageDims {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }
}

impl Default for ImageDims {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl fmt::Display for ImageDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// Dense real-valued image in HWC order.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    dims: ImageDims,
    data: Vec<f64>,
}

impl Image {
    pub fn new(dims: ImageDims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::shape(dims.len(), data.len()));
        }
        Ok(Image { dims, data })
    }

    pub fn filled(dims: ImageDims, value: f64) -> Self {
        Image {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.dims.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        let i = self.dims.index(row, col, ch);
        self.data[i] = v;
    }

    pub fn in_pixel_range(&self) -> bool {
        self.data.iter().all(|v| (PIXEL_MIN..=PIXEL_MAX).contains(v))
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// One camera frame: pixels, ground-truth pose and weather tag.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub pixels: Arc<Image>,
    pub pose: Pose,
    pub weather: Weather,
    pub frame_index: u64,
}

impl ImageSample {
    pub fn new(pixels: Image, pose: Pose, weather: Weather, frame_index: u64) -> Self {
        ImageSample {
            pixels: Arc::new(pixels),
            pose,
            weather,
            frame_index,
        }
    }

    pub fn dims(&self) -> ImageDims {
        self.pixels.dims()
    }

    /// Same metadata, new pixels.
    pub fn with_pixels(&self, pixels: Image) -> Self {
        ImageSample {
            pixels: Arc::new(pixels),
            pose: self.pose,
            weather: self.weather,
            frame_index: self.frame_index,
        }
    }
}

/// Additive per-pixel delta, shaped like the image it was computed for.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    dims: ImageDims,
    delta: Vec<f64>,
}

impl Perturbation {
    pub fn new(dims: ImageDims, delta: Vec<f64>) -> Result<Self> {
        if delta.len() != dims.len() {
            return Err(Error::shape(dims.len(), delta.len()));
        }
        Ok(Perturbation { dims, delta })
    }

    pub fn zeros(dims: ImageDims) -> Self {
        Perturbation {
            dims,
            delta: vec![0.0; dims.len()],
        }
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    pub fn delta_mut(&mut self) -> &mut [f64] {
        &mut self.delta
    }

    pub fn max_abs(&self) -> f64 {
        self.delta.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, c: f64) -> Self {
        Perturbation {
            dims: self.dims,
            delta: self.delta.iter().map(|v| v * c).collect(),
        }
    }
}

/// Boolean mask marking pixels rendered from landmarks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LandmarkMask {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
}

impl LandmarkMask {
    pub fn new(height: usize, width: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != height * width {
            return Err(Error::shape(height * width, mask.len()));
        }
        Ok(LandmarkMask {
            height,
            width,
            mask,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        LandmarkMask {
            height,
            width,
            mask: vec![false; height * width],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn coverage(&self) -> f64 {
        self.count() as f64 / self.mask.len() as f64
    }
}

/// Consecutive frames whose poses are coupled by the relative-pose loss.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTuple {
    samples: Vec<ImageSample>,
}

impl SampleTuple {
    pub fn new(samples: Vec<ImageSample>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::invalid(format!(
                "tuple needs at least 2 samples, got {}",
                samples.len()
            )));
        }
        let dims = samples[0].dims();
        for pair in samples.windows(2) {
            if pair[1].frame_index != pair[0].frame_index + 1 {
                return Err(Error::invalid(format!(
                    "tuple frame indices must increase by 1 ({} then {})",
                    pair[0].frame_index, pair[1].frame_index
                )));
            }
            if pair[1].dims() != dims {
                return Err(Error::shape(dims, pair[1].dims()));
            }
        }
        Ok(SampleTuple { samples })
    }

    /// Builds a tuple whose samples are already known to be consecutive;
    /// used when swapping in perturbed pixels.
    pub(crate) fn from_parts(samples: Vec<ImageSample>) -> Self {
        SampleTuple { samples }
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dims(&self) -> ImageDims {
        self.samples[0].dims()
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.samples.iter().map(|s| s.pose).collect()
    }

    pub fn first_frame(&self) -> u64 {
        self.samples[0].frame_index
    }
}

/// Descriptive metadata carried alongside a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub scene_seed: u64,
    pub dims: ImageDims,
    pub tuple_len: usize,
    /// Frame count per weather tag.
    pub weather_counts: BTreeMap<Weather, usize>,
}

/// A sequence of frames, their landmark masks, and overlapping tuples over them.
#[derive(Clone, Debug)]
pub struct Dataset {
    frames: Vec<ImageSample>,
    masks: Vec<LandmarkMask>,
    tuples: Vec<SampleTuple>,
    metadata: DatasetMetadata,
}

impl Dataset {
    /// Builds the dataset and its tuples as sliding windows of `tuple_len`
    /// frames over runs of consecutive frame indices.
    pub fn new(
        frames: Vec<ImageSample>,
        masks: Vec<LandmarkMask>,
        tuple_len: usize,
        scene_seed: u64,
    ) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::invalid("dataset has no frames"));
        }
        if !masks.is_empty() && masks.len() != frames.len() {
            return Err(Error::shape(frames.len(), masks.len()));
        }
        if tuple_len < 2 {
            return Err(Error::invalid("tuple length must be at least 2"));
        }
        let dims = frames[0].dims();
        if let Some(bad) = frames.iter().find(|f| f.dims() != dims) {
            return Err(Error::shape(dims, bad.dims()));
        }
        let mut tuples = Vec::new();
        for window in frames.windows(tuple_len) {
            let consecutive = window
                .windows(2)
                .all(|p| p[1].frame_index == p[0].frame_index + 1);
            if consecutive {
                tuples.push(SampleTuple::from_parts(window.to_vec()));
            }
        }
        if tuples.is_empty() {
            return Err(Error::invalid(format!(
                "{} frames cannot form a tuple of length {tuple_len}",
                frames.len()
            )));
        }
        let mut weather_counts = BTreeMap::new();
        for f in &frames {
            *weather_counts.entry(f.weather).or_insert(0) += 1;
        }
        Ok(Dataset {
            frames,
            masks,
            tuples,
            metadata: DatasetMetadata {
                scene_seed,
                dims,
                tuple_len,
                weather_counts,
            },
        })
    }

    pub fn frames(&self) -> &[ImageSample] {
        &self.frames
    }

    pub fn masks(&self) -> &[LandmarkMask] {
        &self.masks
    }

    pub fn tuples(&self) -> &[SampleTuple] {
        &self.tuples
    }

    pub fn metadata(&self) -> &DatasetMetadata {
        &self.metadata
    }

    pub fn dims(&self) -> ImageDims {
        self.metadata.dims
    }

    /// Keeps only the first `n` tuples (and the frames they touch).
    pub fn truncated(&self, n_tuples: usize) -> Result<Self> {
        let n = n_tuples.min(self.tuples.len());
        let n_frames = n + self.metadata.tuple_len - 1;
        let masks = if self.masks.is_empty() {
            Vec::new()
        } else {
            self.masks[..n_frames].to_vec()
        };
        Dataset::new(
            self.frames[..n_frames].to_vec(),
            masks,
            self.metadata.tuple_len,
            self.metadata.scene_seed,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(idx: u64) -> ImageSample {
        ImageSample::new(
            Image::filled(ImageDims::new(4, 4, 3), 10.0),
            Pose::planar(idx as f64, 0.0, 0.0, 0.0),
            Weather::Overcast,
            idx,
        )
    }

    #[test]
    fn relative_pose_identity_is_zero() {
        let p = Pose::new([1.0, -2.0, 0.5], [0.1, 0.2, -0.3]).unwrap();
        let r = pose_compose_relative(&p, &p);
        assert_eq!(r.dt, [0.0; 3]);
        assert_eq!(r.dw, [0.0; 3]);
    }

    #[test]
    fn relative_pose_componentwise() {
        let w = [0.1, 0.0, 0.2];
        let pi = Pose::new([1.0, 2.0, 3.0], w).unwrap();
        let pj = Pose::new([1.0, 0.0, 3.0], w).unwrap();
        let r = pose_compose_relative(&pi, &pj);
        assert_eq!(r.dt, [0.0, 2.0, 0.0]);
        assert_eq!(r.dw, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn pose_rejects_nan() {
        assert!(Pose::new([f64::NAN, 0.0, 0.0], [0.0; 3]).is_err());
    }

    #[test]
    fn rotation_error_identity_and_antipodal() {
        let w = [0.3, -0.1, 0.2];
        assert!(rotation_error_degrees(w, w).unwrap().abs() < 1e-6);
        // identity vs. 180 degrees about z
        let half_turn = [0.0, 0.0, std::f64::consts::FRAC_PI_2];
        let e = rotation_error_degrees([0.0; 3], half_turn).unwrap();
        assert!((e - 180.0).abs() < 1e-9, "{e}");
    }

    #[test]
    fn rotation_error_rejects_non_finite() {
        assert!(rotation_error_degrees([f64::INFINITY, 0.0, 0.0], [0.0; 3]).is_err());
    }

    #[test]
    fn quaternion_log_round_trip() {
        let w = [0.2, -0.4, 0.7];
        let back = quat_to_log_quat(log_quat_to_quat(w));
        for k in 0..3 {
            assert!((w[k] - back[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn tuple_requires_consecutive_frames() {
        assert!(SampleTuple::new(vec![sample(0), sample(1), sample(2)]).is_ok());
        assert!(SampleTuple::new(vec![sample(0), sample(2)]).is_err());
        assert!(SampleTuple::new(vec![sample(0)]).is_err());
    }

    #[test]
    fn dataset_windows_tuples() {
        let frames: Vec<_> = (0..10).map(sample).collect();
        let ds = Dataset::new(frames, Vec::new(), 3, 0).unwrap();
        assert_eq!(ds.tuples().len(), 8);
        for t in ds.tuples() {
            let idx: Vec<u64> = t.samples().iter().map(|s| s.frame_index).collect();
            assert_eq!(idx, vec![idx[0], idx[0] + 1, idx[0] + 2]);
        }
    }

    #[test]
    fn dataset_rejects_empty() {
        assert!(Dataset::new(Vec::new(), Vec::new(), 3, 0).is_err());
    }

    #[test]
    fn weather_parses_labels() {
        for w in Weather::ALL {
            assert_eq!(w.as_str().parse::<Weather>().unwrap(), w);
            assert_eq!(w.label().parse::<Weather>().unwrap(), w);
        }
    }
}
