//! Spatial distribution of perturbations: 3×3 sub-square histograms and
//! concentration on landmark pixels.

use serde::{Deserialize, Serialize};

use crate::domain::{Image, ImageDims, LandmarkMask, Perturbation, SampleTuple, PIXEL_MAX, PIXEL_MIN};
use crate::error::{Error, Result};
use crate::loss::LossParams;
use crate::model::PoseModel;
use crate::perturb::{perturb_batch, Method, PerturbOptions, PerturberConfig};

/// Default magnitude at or below which a pixel counts as unperturbed.
pub const DEFAULT_THRESHOLD_ABS: f64 = 1e-6;

/// What a histogram cell accumulates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistogramMode {
    /// Sum of `|delta|`.
    #[default]
    Mass,
    /// Number of perturbed values.
    Count,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsquareHistogram {
    /// `grid[row_band][col_band]`, normalised to sum to 1 unless `empty`.
    pub grid: [[f64; 3]; 3],
    /// No value exceeded the threshold; the grid is all zeros.
    pub empty: bool,
    pub threshold_abs: f64,
    pub mode: HistogramMode,
}

impl SubsquareHistogram {
    pub fn cells(&self) -> impl Iterator<Item = f64> + '_ {
        self.grid.iter().flatten().copied()
    }

    /// Shannon entropy of the cell distribution, in nats (0 when empty).
    pub fn entropy(&self) -> f64 {
        self.cells().filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum()
    }
}

/// Band index of `pos` along an axis of `len` split into three; the
/// remainder goes to the last band.
fn band(pos: usize, len: usize) -> usize {
    (pos / (len / 3)).min(2)
}

pub fn subsquare_histogram(delta: &Perturbation, threshold_abs: f64, mode: HistogramMode) -> Result<SubsquareHistogram> {
    let dims = delta.dims();
    if dims.height < 3 || dims.width < 3 {
        return Err(Error::invalid(format!("histogram needs at least 3×3 pixels, got {dims}")));
    }
    if !(threshold_abs >= 0.0) {
        return Err(Error::invalid("threshold_abs must be >= 0"));
    }
    let mut grid = [[0.0; 3]; 3];
    let mut total = 0.0;
    for row in 0..dims.height {
        let rb = band(row, dims.height);
        for col in 0..dims.width {
            let cb = band(col, dims.width);
            for ch in 0..dims.channels {
                let a = delta.delta()[dims.index(row, col, ch)].abs();
                if a > threshold_abs {
                    let v = match mode {
                        HistogramMode::Mass => a,
                        HistogramMode::Count => 1.0,
                    };
                    grid[rb][cb] += v;
                    total += v;
                }
            }
        }
    }
    let empty = total == 0.0;
    if !empty {
        for v in grid.iter_mut().flatten() {
            *v /= total;
        }
    }
    Ok(SubsquareHistogram {
        grid,
        empty,
        threshold_abs,
        mode,
    })
}

/// Cell-wise mean over non-empty histograms.
pub fn mean_histogram(hists: &[SubsquareHistogram]) -> Option<[[f64; 3]; 3]> {
    let used: Vec<_> = hists.iter().filter(|h| !h.empty).collect();
    if used.is_empty() {
        return None;
    }
    let mut grid = [[0.0; 3]; 3];
    for h in &used {
        for (g, v) in grid.iter_mut().flatten().zip(h.cells()) {
            *g += v / used.len() as f64;
        }
    }
    Some(grid)
}

/// Share of perturbation mass landing on landmark pixels versus their share of the image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    /// `None` when the perturbation is all zeros.
    pub landmark_mass_fraction: Option<f64>,
    pub landmark_pixel_fraction: f64,
    /// Mass fraction over pixel fraction; `None` when either is undefined or
    /// the mask is empty.
    pub concentration_ratio: Option<f64>,
}

pub fn concentration(delta: &Perturbation, mask: &LandmarkMask) -> Result<ConcentrationReport> {
    let dims = delta.dims();
    if (mask.height, mask.width) != (dims.height, dims.width) {
        return Err(Error::shape(
            format!("{}x{} mask", dims.height, dims.width),
            format!("{}x{}", mask.height, mask.width),
        ));
    }
    let (mut on, mut total) = (0.0, 0.0);
    for row in 0..dims.height {
        for col in 0..dims.width {
            let m: f64 = (0..dims.channels)
                .map(|ch| delta.delta()[dims.index(row, col, ch)].abs())
                .sum();
            total += m;
            if mask.get(row, col) {
                on += m;
            }
        }
    }
    let pixel_fraction = mask.coverage();
    let mass_fraction = (total > 0.0).then(|| on / total);
    Ok(ConcentrationReport {
        landmark_mass_fraction: mass_fraction,
        landmark_pixel_fraction: pixel_fraction,
        concentration_ratio: mass_fraction.filter(|_| pixel_fraction > 0.0).map(|f| f / pixel_fraction),
    })
}

/// Analysis of one perturbation method on one tuple.
#[derive(Clone, Debug, Serialize)]
pub struct MethodComparison {
    pub method: Method,
    pub config: PerturberConfig,
    /// Frame indices of the tuple, aligned with `histograms` and `reports`.
    pub frames: Vec<u64>,
    pub histograms: Vec<SubsquareHistogram>,
    pub reports: Vec<ConcentrationReport>,
    /// One row per frame: `x | Δx | x'`. `Δx` is mid-grey at zero and
    /// scaled so the largest magnitude reaches black or white.
    #[serde(skip)]
    pub strip: Image,
}

/// Perturbs `tuple` with every method and analyses each result.
/// `masks` holds one landmark mask per tuple sample.
pub fn compare_methods<M: PoseModel + ?Sized>(
    model: &M,
    tuple: &SampleTuple,
    masks: &[LandmarkMask],
    params: &LossParams,
    methods: &[PerturberConfig],
    threshold_abs: f64,
    mode: HistogramMode,
) -> Result<Vec<MethodComparison>> {
    if masks.len() != tuple.len() {
        return Err(Error::shape(format!("{} masks", tuple.len()), masks.len()));
    }
    methods
        .iter()
        .map(|cfg| {
            let pb = perturb_batch(model, std::slice::from_ref(tuple), params, cfg, PerturbOptions::default())?;
            let mut histograms = Vec::with_capacity(tuple.len());
            let mut reports = Vec::with_capacity(tuple.len());
            for (rec, mask) in pb.records.iter().zip(masks) {
                histograms.push(subsquare_histogram(&rec.delta, threshold_abs, mode)?);
                reports.push(concentration(&rec.delta, mask)?);
            }
            let deltas: Vec<&Perturbation> = pb.records.iter().map(|r| &r.delta).collect();
            Ok(MethodComparison {
                method: cfg.method,
                config: cfg.clone(),
                frames: tuple.samples().iter().map(|s| s.frame_index).collect(),
                histograms,
                reports,
                strip: render_strip(tuple, &pb.tuples[0], &deltas)?,
            })
        })
        .collect()
}

fn render_strip(original: &SampleTuple, perturbed: &SampleTuple, deltas: &[&Perturbation]) -> Result<Image> {
    let d = original.dims();
    let rows = original.len();
    let mut img = Image::filled(ImageDims::new(d.height * rows, d.width * 3, d.channels), 0.0);
    let max_abs = deltas.iter().fold(0.0f64, |m, p| m.max(p.max_abs()));
    let mid = 0.5 * (PIXEL_MIN + PIXEL_MAX);
    let scale = if max_abs > 0.0 { mid / max_abs } else { 0.0 };
    for (k, ((x, xp), delta)) in original
        .samples()
        .iter()
        .zip(perturbed.samples())
        .zip(deltas)
        .enumerate()
    {
        for row in 0..d.height {
            for col in 0..d.width {
                for ch in 0..d.channels {
                    let i = d.index(row, col, ch);
                    let r = k * d.height + row;
                    let values = [
                        x.pixels.data()[i],
                        mid + scale * delta.delta()[i],
                        xp.pixels.data()[i],
                    ];
                    for (panel, v) in values.into_iter().enumerate() {
                        img.set(r, panel * d.width + col, ch, v.clamp(PIXEL_MIN, PIXEL_MAX));
                    }
                }
            }
        }
    }
    Ok(img)
}
