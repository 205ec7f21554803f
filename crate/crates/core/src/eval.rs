//! Localisation accuracy per weather condition and trajectory export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{rotation_error_degrees, Dataset, Image, ImageDims, Pose, Weather};
use crate::error::{Error, Result};
use crate::model::PoseModel;
use crate::storage::write_png;

/// Error of one predicted frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameError {
    pub frame_index: u64,
    pub weather: Weather,
    /// Euclidean translation error, metres.
    pub t_err: f64,
    /// Geodesic rotation error, degrees.
    pub r_err: f64,
}

/// Mean and median errors over a set of frames.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub frames: usize,
    pub mean_t_err: f64,
    pub mean_r_err: f64,
    pub median_t_err: f64,
    pub median_r_err: f64,
}

impl ErrorStats {
    pub fn from_errors(errors: &[FrameError]) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::invalid("no frames to summarise"));
        }
        let n = errors.len() as f64;
        let t: Vec<f64> = errors.iter().map(|e| e.t_err).collect();
        let r: Vec<f64> = errors.iter().map(|e| e.r_err).collect();
        Ok(ErrorStats {
            frames: errors.len(),
            mean_t_err: t.iter().sum::<f64>() / n,
            mean_r_err: r.iter().sum::<f64>() / n,
            median_t_err: median(t),
            median_r_err: median(r),
        })
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_weather: BTreeMap<Weather, ErrorStats>,
    /// Frame-weighted over every evaluated frame.
    pub overall: ErrorStats,
}

impl EvalResult {
    pub fn from_errors(errors: &[FrameError]) -> Result<Self> {
        let mut groups: BTreeMap<Weather, Vec<FrameError>> = BTreeMap::new();
        for e in errors {
            groups.entry(e.weather).or_default().push(*e);
        }
        let per_weather = groups
            .iter()
            .map(|(w, g)| ErrorStats::from_errors(g).map(|s| (*w, s)))
            .collect::<Result<_>>()?;
        Ok(EvalResult {
            per_weather,
            overall: ErrorStats::from_errors(errors)?,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Mean errors as a fixed-width table, one row per weather then the average.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<14} {:>7} {:>10} {:>10}", "weather", "frames", "t_err[m]", "r_err[deg]");
        for (w, s) in &self.per_weather {
            let _ = writeln!(
                out,
                "{:<14} {:>7} {:>10.3} {:>10.2}",
                w.label(),
                s.frames,
                s.mean_t_err,
                s.mean_r_err
            );
        }
        let s = &self.overall;
        let _ = writeln!(
            out,
            "{:<14} {:>7} {:>10.3} {:>10.2}",
            "average", s.frames, s.mean_t_err, s.mean_r_err
        );
        out
    }
}

/// Errors between a prediction and ground truth.
pub fn pose_errors(pred: &Pose, truth: &Pose) -> Result<(f64, f64)> {
    let t = pred
        .t
        .iter()
        .zip(&truth.t)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let r = rotation_error_degrees(pred.w, truth.w)?;
    if !t.is_finite() {
        return Err(Error::NonFinite("translation error".into()));
    }
    Ok((t, r))
}

/// Predicted pose of every frame, in frame order.
pub fn predict_all<M: PoseModel + ?Sized>(model: &M, dataset: &Dataset) -> Result<Vec<Pose>> {
    dataset.frames().par_iter().map(|f| model.predict(f)).collect()
}

pub fn frame_errors<M: PoseModel + ?Sized>(model: &M, dataset: &Dataset) -> Result<Vec<FrameError>> {
    let preds = predict_all(model, dataset)?;
    dataset
        .frames()
        .iter()
        .zip(&preds)
        .map(|(f, p)| {
            let (t_err, r_err) = pose_errors(p, &f.pose)?;
            Ok(FrameError {
                frame_index: f.frame_index,
                weather: f.weather,
                t_err,
                r_err,
            })
        })
        .collect()
}

pub fn evaluate<M: PoseModel + ?Sized>(model: &M, dataset: &Dataset) -> Result<EvalResult> {
    EvalResult::from_errors(&frame_errors(model, dataset)?)
}

/// Writes `frame_index,weather,gt_x,gt_y,gt_z,pred_x,pred_y,pred_z` rows.
pub fn write_trajectory_csv(path: &Path, dataset: &Dataset, preds: &[Pose]) -> Result<()> {
    if preds.len() != dataset.frames().len() {
        return Err(Error::shape(dataset.frames().len(), preds.len()));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "frame_index,weather,gt_x,gt_y,gt_z,pred_x,pred_y,pred_z")?;
    for (f, p) in dataset.frames().iter().zip(preds) {
        let [gx, gy, gz] = f.pose.t;
        let [px, py, pz] = p.t;
        writeln!(out, "{},{},{gx},{gy},{gz},{px},{py},{pz}", f.frame_index, f.weather)?;
    }
    out.flush()?;
    Ok(())
}

/// Top-down plot: ground truth in black, predictions in red.
pub fn render_trajectory_plot(dataset: &Dataset, preds: &[Pose], size: usize) -> Result<Image> {
    if preds.len() != dataset.frames().len() {
        return Err(Error::shape(dataset.frames().len(), preds.len()));
    }
    if size < 16 {
        return Err(Error::invalid("plot too small"));
    }
    let dims = ImageDims::new(size, size, 3);
    let mut img = Image::filled(dims, 255.0);
    let pts = dataset.frames().iter().map(|f| f.pose.t).chain(preds.iter().map(|p| p.t));
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for t in pts {
        for k in 0..2 {
            if t[k].is_finite() {
                lo[k] = lo[k].min(t[k]);
                hi[k] = hi[k].max(t[k]);
            }
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-6);
    let margin = 4.0;
    let scale = (size as f64 - 2.0 * margin) / span;
    let mut plot = |t: [f64; 3], rgb: [f64; 3]| {
        if !(t[0].is_finite() && t[1].is_finite()) {
            return;
        }
        let col = (margin + (t[0] - lo[0]) * scale).round() as isize;
        let row = (size as f64 - margin - (t[1] - lo[1]) * scale).round() as isize;
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (r, c) = (row + dr, col + dc);
                if r >= 0 && c >= 0 && (r as usize) < size && (c as usize) < size {
                    for (ch, v) in rgb.iter().enumerate() {
                        img.set(r as usize, c as usize, ch, *v);
                    }
                }
            }
        }
    };
    for f in dataset.frames() {
        plot(f.pose.t, [0.0, 0.0, 0.0]);
    }
    for p in preds {
        plot(p.t, [220.0, 30.0, 30.0]);
    }
    Ok(img)
}

/// Writes the trajectory CSV and, when `plot` is given, a PNG plot.
pub fn export_trajectory<M: PoseModel + ?Sized>(
    model: &M,
    dataset: &Dataset,
    csv: &Path,
    plot: Option<&Path>,
) -> Result<()> {
    let preds = predict_all(model, dataset)?;
    write_trajectory_csv(csv, dataset, &preds)?;
    if let Some(p) = plot {
        write_png(p, &render_trajectory_plot(dataset, &preds, 256)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fe(w: Weather, t: f64, r: f64) -> FrameError {
        FrameError {
            frame_index: 0,
            weather: w,
            t_err: t,
            r_err: r,
        }
    }

    #[test]
    fn stats_mean_and_median() {
        let s = ErrorStats::from_errors(&[
            fe(Weather::Rain, 1.0, 3.0),
            fe(Weather::Rain, 2.0, 1.0),
            fe(Weather::Rain, 9.0, 2.0),
            fe(Weather::Rain, 4.0, 6.0),
        ])
        .unwrap();
        assert_eq!(s.frames, 4);
        assert_eq!(s.mean_t_err, 4.0);
        assert_eq!(s.median_t_err, 3.0);
        assert_eq!(s.median_r_err, 2.5);
    }

    #[test]
    fn overall_is_frame_weighted() {
        let mut errs = vec![fe(Weather::Sunny, 1.0, 0.0)];
        errs.extend(std::iter::repeat(fe(Weather::Snow, 4.0, 0.0)).take(3));
        let r = EvalResult::from_errors(&errs).unwrap();
        assert_eq!(r.overall.mean_t_err, 13.0 / 4.0);
        assert_eq!(r.per_weather.len(), 2);
        let table = r.table();
        let sunny = table.find("sunny").unwrap();
        let snow = table.find("snow").unwrap();
        let avg = table.find("average").unwrap();
        assert!(sunny < snow && snow < avg);
    }

    #[test]
    fn empty_errors_rejected() {
        assert!(ErrorStats::from_errors(&[]).is_err());
    }

    #[test]
    fn pose_error_values() {
        let a = Pose::planar(0.0, 0.0, 0.0, 0.0);
        let b = Pose::planar(3.0, 4.0, 0.0, 10f64.to_radians());
        let (t, r) = pose_errors(&a, &b).unwrap();
        assert!((t - 5.0).abs() < 1e-12);
        assert!((r - 10.0).abs() < 1e-9);
    }
}
