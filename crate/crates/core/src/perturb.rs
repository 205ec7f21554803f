//! Adversarial and baseline perturbations.
//!
//! Gradient-based methods share one formula, `delta = eps * sign(g) * |g|^pow`:
//! `pow = 0` is the fast gradient sign method, `pow = 1` the fast gradient
//! method, and `pow > 1` concentrates the perturbation on the pixels the
//! model is most sensitive to. The result can be clamped to a per-batch
//! threshold derived from the pixel range, and the perturbed image clipped
//! back into `[0, 255]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{Image, ImageSample, Perturbation, SampleTuple, PIXEL_MAX, PIXEL_MIN};
use crate::error::{Error, Result};
use crate::loss::{sign0, LossParams};
use crate::model::{InputGradient, PoseModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Rada,
    Fgsm,
    Fgm,
    Gaussian,
    None,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Rada => "rada",
            Method::Fgsm => "fgsm",
            Method::Fgm => "fgm",
            Method::Gaussian => "gaussian",
            Method::None => "none",
        }
    }

    pub fn uses_gradient(&self) -> bool {
        matches!(self, Method::Rada | Method::Fgsm | Method::Fgm)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rada" => Ok(Method::Rada),
            "fgsm" => Ok(Method::Fgsm),
            "fgm" => Ok(Method::Fgm),
            "gaussian" => Ok(Method::Gaussian),
            "none" => Ok(Method::None),
            other => Err(Error::invalid(format!("unknown perturbation method `{other}`"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Pixel set the threshold range is taken over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdScope {
    /// All pixels of all images in the batch.
    #[default]
    Batch,
    /// Each image separately.
    Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturberConfig {
    pub method: Method,
    /// Step size.
    pub epsilon: f64,
    /// Exponent on the gradient magnitude.
    pub pow: f64,
    /// Number of threshold divisions of the pixel range.
    pub eta: u32,
    pub use_threshold: bool,
    pub use_clip: bool,
    /// Mean of the Gaussian baseline in normalised `[0, 1]` units.
    pub gaussian_mean: f64,
    /// Variance of the Gaussian baseline in normalised `[0, 1]` units.
    pub gaussian_var: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub threshold_scope: ThresholdScope,
}

impl Default for PerturberConfig {
    fn default() -> Self {
        Self::rada()
    }
}

impl PerturberConfig {
    pub fn rada() -> Self {
        PerturberConfig {
            method: Method::Rada,
            epsilon: 158.0,
            pow: 1.5,
            eta: 10,
            use_threshold: true,
            use_clip: true,
            gaussian_mean: 0.0,
            gaussian_var: 0.05,
            seed: 0,
            threshold_scope: ThresholdScope::Batch,
        }
    }

    pub fn fgsm() -> Self {
        PerturberConfig {
            method: Method::Fgsm,
            epsilon: 0.3,
            pow: 0.0,
            use_threshold: false,
            ..Self::rada()
        }
    }

    pub fn fgm() -> Self {
        PerturberConfig {
            method: Method::Fgm,
            pow: 1.0,
            use_threshold: false,
            ..Self::rada()
        }
    }

    pub fn gaussian() -> Self {
        PerturberConfig {
            method: Method::Gaussian,
            use_threshold: false,
            ..Self::rada()
        }
    }

    pub fn none() -> Self {
        PerturberConfig {
            method: Method::None,
            use_threshold: false,
            use_clip: false,
            ..Self::rada()
        }
    }

    /// Preset for `method` with default constants.
    pub fn preset(method: Method) -> Self {
        match method {
            Method::Rada => Self::rada(),
            Method::Fgsm => Self::fgsm(),
            Method::Fgm => Self::fgm(),
            Method::Gaussian => Self::gaussian(),
            Method::None => Self::none(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be finite and >= 0, got {}", self.epsilon));
        }
        if !(self.pow >= 0.0 && self.pow.is_finite()) {
            return bad(format!("pow must be finite and >= 0, got {}", self.pow));
        }
        if self.eta == 0 {
            return bad("eta must be a positive integer".into());
        }
        if !(self.gaussian_var >= 0.0 && self.gaussian_var.is_finite()) || !self.gaussian_mean.is_finite() {
            return bad(format!(
                "gaussian mean/var must be finite with var >= 0, got {}/{}",
                self.gaussian_mean, self.gaussian_var
            ));
        }
        match self.method {
            Method::Rada if self.pow <= 1.0 => bad(format!("rada requires pow > 1, got {}", self.pow)),
            Method::Fgsm if self.pow != 0.0 => bad(format!("fgsm requires pow = 0, got {}", self.pow)),
            Method::Fgm if self.pow != 1.0 => bad(format!("fgm requires pow = 1, got {}", self.pow)),
            _ => Ok(()),
        }
    }
}

/// Perturbation cap `(x_max - x_min) / eta` and the range it came from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdValue {
    pub eta_th: f64,
    pub x_min: f64,
    pub x_max: f64,
}

/// Threshold over every pixel of every image in `images`.
pub fn compute_threshold<'a, I>(images: I, eta: u32) -> Result<ThresholdValue>
where
    I: IntoIterator<Item = &'a Image>,
{
    if eta == 0 {
        return Err(Error::invalid("eta must be >= 1"));
    }
    let mut seen = false;
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for img in images {
        if img.data().is_empty() {
            continue;
        }
        seen = true;
        let (lo, hi) = img.min_max();
        x_min = x_min.min(lo);
        x_max = x_max.max(hi);
    }
    if !seen {
        return Err(Error::invalid("threshold of an empty batch"));
    }
    Ok(ThresholdValue {
        eta_th: (x_max - x_min) / eta as f64,
        x_min,
        x_max,
    })
}

/// Threshold over the samples of a batch of tuples.
pub fn batch_threshold(batch: &[SampleTuple], eta: u32) -> Result<ThresholdValue> {
    compute_threshold(
        batch.iter().flat_map(|t| t.samples().iter().map(|s| s.pixels.as_ref())),
        eta,
    )
}

/// `eps * sign(g) * |g|^pow`, elementwise, with `sign(0) = 0`.
pub fn raw_perturbation(grad: &InputGradient, epsilon: f64, pow: f64) -> Result<Perturbation> {
    if !(pow >= 0.0) {
        return Err(Error::invalid(format!("pow must be >= 0, got {pow}")));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("input gradient".into()));
    }
    let delta = grad
        .grad()
        .iter()
        .map(|&g| {
            let s = sign0(g);
            if s == 0.0 {
                0.0
            } else {
                epsilon * s * g.abs().powf(pow)
            }
        })
        .collect();
    Perturbation::new(grad.dims(), delta)
}

/// Clamps every element into `[-eta_th, eta_th]`.
pub fn apply_threshold(delta: &Perturbation, th: &ThresholdValue) -> Perturbation {
    let cap = th.eta_th;
    let mut out = delta.clone();
    for d in out.delta_mut() {
        *d = d.clamp(-cap, cap);
    }
    out
}

/// `x + delta`, optionally clipped into the valid pixel range.
pub fn make_adversarial(x: &ImageSample, delta: &Perturbation, use_clip: bool) -> Result<ImageSample> {
    if x.dims() != delta.dims() {
        return Err(Error::shape(x.dims(), delta.dims()));
    }
    let data = x
        .pixels
        .data()
        .iter()
        .zip(delta.delta())
        .map(|(&p, &d)| {
            let v = p + d;
            if use_clip {
                v.clamp(PIXEL_MIN, PIXEL_MAX)
            } else {
                v
            }
        })
        .collect();
    Ok(x.with_pixels(Image::new(x.dims(), data)?))
}

/// I.i.d. normal noise drawn in normalised units and scaled to pixel units.
pub fn gaussian_noise(dims: crate::domain::ImageDims, mean: f64, var: f64, seed: u64) -> Result<Perturbation> {
    if !(var >= 0.0) {
        return Err(Error::invalid(format!("variance must be >= 0, got {var}")));
    }
    if var == 0.0 {
        return Perturbation::new(dims, vec![mean * PIXEL_MAX; dims.len()]);
    }
    let normal = Normal::new(mean, var.sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let delta = (0..dims.len()).map(|_| normal.sample(&mut rng) * PIXEL_MAX).collect();
    Perturbation::new(dims, delta)
}

/// Adds Gaussian noise and clips to `[0, 255]`.
pub fn gaussian_perturb(x: &ImageSample, mean: f64, var: f64, seed: u64) -> Result<ImageSample> {
    let noise = gaussian_noise(x.dims(), mean, var, seed)?;
    make_adversarial(x, &noise, true)
}

/// SplitMix64 finaliser, used to derive independent per-image seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One stage of the perturbation pipeline, in execution order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum StageEvent {
    Threshold {
        eta_th: f64,
        x_min: f64,
        x_max: f64,
    },
    Gradient {
        loss: f64,
        checksum_before: String,
        checksum_after: String,
    },
    Clamp {
        eta_th: Option<f64>,
        max_abs_delta: f64,
    },
    Clip {
        enabled: bool,
        min_pixel: f64,
        max_pixel: f64,
    },
}

/// Perturbation applied to one image of one tuple.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationRecord {
    pub tuple: usize,
    pub position: usize,
    pub frame_index: u64,
    pub delta: Perturbation,
    /// Threshold in force for this image, when thresholding was applied.
    pub eta_th: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct PerturbedBatch {
    pub tuples: Vec<SampleTuple>,
    pub records: Vec<PerturbationRecord>,
    pub events: Vec<StageEvent>,
}

impl PerturbedBatch {
    pub fn max_abs_delta(&self) -> f64 {
        self.records.iter().fold(0.0, |m, r| m.max(r.delta.max_abs()))
    }
}

/// Per-call knobs that vary while a config stays fixed.
#[derive(Clone, Copy, Debug, Default)]
pub struct PerturbOptions {
    /// Noise stream index (e.g. the epoch) mixed into Gaussian seeds.
    pub stream: u64,
    /// Use this threshold instead of computing one from the batch.
    pub fixed_threshold: Option<ThresholdValue>,
}

/// Runs the full perturbation pipeline over a batch of tuples.
///
/// Gradient methods: threshold (when enabled), frozen-weight input gradient,
/// raw perturbation, clamp (when enabled), then `x + delta` with optional
/// clipping. Gaussian skips gradients; `none` returns the batch unchanged.
pub fn perturb_batch<M: PoseModel + ?Sized>(
    model: &M,
    batch: &[SampleTuple],
    params: &LossParams,
    cfg: &PerturberConfig,
    opts: PerturbOptions,
) -> Result<PerturbedBatch> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::invalid("perturbation of an empty batch"));
    }
    let mut events = Vec::new();
    let mut records = Vec::new();
    let mut tuples = Vec::with_capacity(batch.len());

    match cfg.method {
        Method::None => {
            for (ti, t) in batch.iter().enumerate() {
                for (pi, s) in t.samples().iter().enumerate() {
                    records.push(PerturbationRecord {
                        tuple: ti,
                        position: pi,
                        frame_index: s.frame_index,
                        delta: Perturbation::zeros(s.dims()),
                        eta_th: None,
                    });
                }
            }
            tuples.extend_from_slice(batch);
        }
        Method::Gaussian => {
            for (ti, t) in batch.iter().enumerate() {
                let mut samples = Vec::with_capacity(t.len());
                for (pi, s) in t.samples().iter().enumerate() {
                    let seed = mix_seed(mix_seed(cfg.seed, opts.stream), s.frame_index);
                    let noise = gaussian_noise(s.dims(), cfg.gaussian_mean, cfg.gaussian_var, seed)?;
                    samples.push(make_adversarial(s, &noise, true)?);
                    records.push(PerturbationRecord {
                        tuple: ti,
                        position: pi,
                        frame_index: s.frame_index,
                        delta: noise,
                        eta_th: None,
                    });
                }
                tuples.push(SampleTuple::from_parts(samples));
            }
            push_clip_event(&mut events, true, &tuples);
        }
        Method::Rada | Method::Fgsm | Method::Fgm => {
            let batch_th = if cfg.use_threshold && cfg.threshold_scope == ThresholdScope::Batch {
                let th = match opts.fixed_threshold {
                    Some(th) => th,
                    None => batch_threshold(batch, cfg.eta)?,
                };
                events.push(StageEvent::Threshold {
                    eta_th: th.eta_th,
                    x_min: th.x_min,
                    x_max: th.x_max,
                });
                Some(th)
            } else if cfg.use_threshold {
                // per-image scope: report the widest per-image cap
                let mut widest: Option<ThresholdValue> = None;
                for s in batch.iter().flat_map(|t| t.samples()) {
                    let th = compute_threshold([s.pixels.as_ref()], cfg.eta)?;
                    if widest.map_or(true, |w| th.eta_th > w.eta_th) {
                        widest = Some(th);
                    }
                }
                let w = widest.expect("non-empty batch");
                events.push(StageEvent::Threshold {
                    eta_th: w.eta_th,
                    x_min: w.x_min,
                    x_max: w.x_max,
                });
                None
            } else {
                None
            };

            let checksum_before = model.checksum();
            let mut grads = Vec::with_capacity(batch.len());
            let mut loss_sum = 0.0;
            for t in batch {
                let (loss, g) = model.input_gradient(t, params)?;
                loss_sum += loss.total;
                grads.push(g);
            }
            events.push(StageEvent::Gradient {
                loss: loss_sum / batch.len() as f64,
                checksum_before,
                checksum_after: model.checksum(),
            });

            let mut deltas = Vec::with_capacity(batch.len());
            let mut max_abs = 0.0_f64;
            for (ti, (t, g)) in batch.iter().zip(&grads).enumerate() {
                let mut per_tuple = Vec::with_capacity(t.len());
                for (pi, (s, gi)) in t.samples().iter().zip(g).enumerate() {
                    let raw = raw_perturbation(gi, cfg.epsilon, cfg.pow)?;
                    let th = match (cfg.use_threshold, batch_th) {
                        (false, _) => None,
                        (true, Some(th)) => Some(th),
                        (true, None) => Some(compute_threshold([s.pixels.as_ref()], cfg.eta)?),
                    };
                    let delta = match th {
                        Some(th) => apply_threshold(&raw, &th),
                        None => raw,
                    };
                    max_abs = max_abs.max(delta.max_abs());
                    per_tuple.push(delta);
                    records.push(PerturbationRecord {
                        tuple: ti,
                        position: pi,
                        frame_index: s.frame_index,
                        delta: Perturbation::zeros(s.dims()),
                        eta_th: th.map(|t| t.eta_th),
                    });
                }
                deltas.push(per_tuple);
            }
            events.push(StageEvent::Clamp {
                eta_th: batch_th.map(|t| t.eta_th),
                max_abs_delta: max_abs,
            });

            let mut rec = records.iter_mut();
            for (t, ds) in batch.iter().zip(deltas) {
                let mut samples = Vec::with_capacity(t.len());
                for (s, d) in t.samples().iter().zip(ds) {
                    samples.push(make_adversarial(s, &d, cfg.use_clip)?);
                    rec.next().expect("record per sample").delta = d;
                }
                tuples.push(SampleTuple::from_parts(samples));
            }
            push_clip_event(&mut events, cfg.use_clip, &tuples);
        }
    }
    Ok(PerturbedBatch {
        tuples,
        records,
        events,
    })
}

fn push_clip_event(events: &mut Vec<StageEvent>, enabled: bool, tuples: &[SampleTuple]) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in tuples.iter().flat_map(|t| t.samples()) {
        let (a, b) = s.pixels.min_max();
        lo = lo.min(a);
        hi = hi.max(b);
    }
    events.push(StageEvent::Clip {
        enabled,
        min_pixel: lo,
        max_pixel: hi,
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ImageDims, Pose, Weather};

    fn grad(values: &[f64]) -> InputGradient {
        InputGradient::new(ImageDims::new(1, values.len(), 1), values.to_vec()).unwrap()
    }

    fn sample_with(values: &[f64]) -> ImageSample {
        ImageSample::new(
            Image::new(ImageDims::new(1, values.len(), 1), values.to_vec()).unwrap(),
            Pose::IDENTITY,
            Weather::Overcast,
            0,
        )
    }

    #[test]
    fn full_range_threshold() {
        let img = Image::new(ImageDims::new(1, 3, 1), vec![0.0, 100.0, 255.0]).unwrap();
        let th = compute_threshold([&img], 10).unwrap();
        assert!((th.eta_th - 25.5).abs() < 1e-12);
    }

    #[test]
    fn constant_batch_threshold_is_zero() {
        let img = Image::filled(ImageDims::new(4, 4, 3), 128.0);
        assert_eq!(compute_threshold([&img, &img], 10).unwrap().eta_th, 0.0);
    }

    #[test]
    fn narrow_range_threshold() {
        let a = Image::new(ImageDims::new(1, 2, 1), vec![50.0, 90.0]).unwrap();
        let b = Image::new(ImageDims::new(1, 2, 1), vec![120.0, 150.0]).unwrap();
        assert_eq!(compute_threshold([&a, &b], 4).unwrap().eta_th, 25.0);
    }

    #[test]
    fn empty_batch_threshold_errors() {
        assert!(compute_threshold(std::iter::empty::<&Image>(), 10).is_err());
        assert!(batch_threshold(&[], 10).is_err());
    }

    #[test]
    fn fgsm_is_signed_step() {
        let d = raw_perturbation(&grad(&[0.2, -0.5, 0.0]), 0.3, 0.0).unwrap();
        assert_eq!(d.delta(), &[0.3, -0.3, 0.0]);
    }

    #[test]
    fn rada_magnitude() {
        let d = raw_perturbation(&grad(&[0.04]), 158.0, 1.5).unwrap();
        assert!((d.delta()[0] - 1.264).abs() < 5e-5, "{}", d.delta()[0]);
    }

    #[test]
    fn zero_gradient_zero_perturbation() {
        let d = raw_perturbation(&grad(&[0.0; 5]), 158.0, 1.5).unwrap();
        assert!(d.delta().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn negative_pow_rejected() {
        assert!(raw_perturbation(&grad(&[1.0]), 1.0, -0.5).is_err());
    }

    #[test]
    fn threshold_clamps_symmetrically() {
        let th = ThresholdValue {
            eta_th: 25.5,
            x_min: 0.0,
            x_max: 255.0,
        };
        let d = Perturbation::new(ImageDims::new(1, 3, 1), vec![40.0, -40.0, 10.0]).unwrap();
        assert_eq!(apply_threshold(&d, &th).delta(), &[25.5, -25.5, 10.0]);
    }

    #[test]
    fn clip_to_nearest_boundary() {
        let x = sample_with(&[250.0, 3.0]);
        let d = Perturbation::new(x.dims(), vec![20.0, -10.0]).unwrap();
        assert_eq!(make_adversarial(&x, &d, true).unwrap().pixels.data(), &[255.0, 0.0]);
        assert_eq!(make_adversarial(&x, &d, false).unwrap().pixels.data(), &[270.0, -7.0]);
    }

    #[test]
    fn zero_delta_is_identity() {
        let x = sample_with(&[1.5, 200.25, 0.0]);
        let y = make_adversarial(&x, &Perturbation::zeros(x.dims()), true).unwrap();
        assert_eq!(x.pixels.data(), y.pixels.data());
        assert_eq!(x.pose, y.pose);
        assert_eq!(x.weather, y.weather);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let x = sample_with(&[1.0, 2.0]);
        let d = Perturbation::zeros(ImageDims::new(1, 3, 1));
        assert!(make_adversarial(&x, &d, true).is_err());
    }

    #[test]
    fn zero_variance_gaussian_is_identity() {
        let x = sample_with(&[0.0, 17.0, 254.0, 255.0]);
        let y = gaussian_perturb(&x, 0.0, 0.0, 42).unwrap();
        assert_eq!(x.pixels.data(), y.pixels.data());
    }

    #[test]
    fn gaussian_mean_matches_expectation() {
        let dims = ImageDims::new(64, 64, 3);
        let (mean, var) = (0.1, 0.05);
        let noise = gaussian_noise(dims, mean, var, 7).unwrap();
        let n = dims.len() as f64;
        let m = noise.delta().iter().sum::<f64>() / n;
        let sigma = var.sqrt() * 255.0;
        assert!((m - mean * 255.0).abs() < 3.0 * sigma / n.sqrt(), "{m}");
    }

    #[test]
    fn gaussian_clips_at_top() {
        let x = sample_with(&[254.0; 64]);
        let y = gaussian_perturb(&x, 0.5, 0.05, 1).unwrap();
        assert!(y.pixels.data().iter().all(|&v| v <= 255.0));
        assert!(y.pixels.data().contains(&255.0));
    }

    #[test]
    fn gaussian_is_deterministic_per_seed() {
        let x = sample_with(&[100.0; 32]);
        assert_eq!(gaussian_perturb(&x, 0.0, 0.05, 3).unwrap(), gaussian_perturb(&x, 0.0, 0.05, 3).unwrap());
        assert_ne!(gaussian_perturb(&x, 0.0, 0.05, 3).unwrap(), gaussian_perturb(&x, 0.0, 0.05, 4).unwrap());
    }

    #[test]
    fn config_invariants() {
        for m in [Method::Rada, Method::Fgsm, Method::Fgm, Method::Gaussian, Method::None] {
            PerturberConfig::preset(m).validate().unwrap();
        }
        let mut c = PerturberConfig::rada();
        c.pow = 1.0;
        assert!(c.validate().is_err());
        let mut c = PerturberConfig::fgsm();
        c.pow = 0.5;
        assert!(c.validate().is_err());
        let mut c = PerturberConfig::rada();
        c.eta = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn preset_defaults() {
        let r = PerturberConfig::rada();
        assert_eq!((r.epsilon, r.pow, r.eta), (158.0, 1.5, 10));
        assert_eq!(PerturberConfig::fgsm().epsilon, 0.3);
        let g = PerturberConfig::gaussian();
        assert_eq!((g.gaussian_mean, g.gaussian_var), (0.0, 0.05));
    }
}
