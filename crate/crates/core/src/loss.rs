//! Pose-regression loss with learnable homoscedastic weighting and a
//! relative-pose consistency term between neighbouring frames.
//!
//! For one pose pair the term is
//! `h = |t - t*|_1 e^{-beta} + beta + |w - w*|_1 e^{-gamma} + gamma`,
//! and a tuple's loss is the sum of `h` over its frames plus `alpha` times
//! the sum of `h` over relative poses of frame pairs.

use serde::{Deserialize, Serialize};

use crate::domain::{pose_compose_relative, Pose};
use crate::error::{Error, Result};

/// Which ordered frame pairs enter the relative term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Ordered pairs `(i, j)` with `|i - j| = 1`.
    #[default]
    Adjacent,
    /// Every ordered pair with `i != j`; each unordered pair counts twice.
    AllPairs,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossParams {
    /// Translation weighting, trained alongside the network.
    pub beta: f64,
    /// Rotation weighting, trained alongside the network.
    pub gamma: f64,
    /// Fixed weight of the relative-pose term.
    pub alpha: f64,
    #[serde(default)]
    pub pairing: PairMode,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            beta: 0.0,
            gamma: -3.0,
            alpha: 1.0,
            pairing: PairMode::Adjacent,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if self.beta.is_finite() && self.gamma.is_finite() && self.alpha.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("loss params {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub absolute_term: f64,
    pub relative_term: f64,
}

/// Derivatives of a tuple loss with respect to each predicted pose
/// (`[t, w]` order) and the two weighting parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGradient {
    pub poses: Vec<[f64; 6]>,
    pub beta: f64,
    pub gamma: f64,
}

/// Sign with `sign(0) = 0`, the L1 subgradient used throughout.
#[inline]
pub(crate) fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn l1(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Weighted L1 pose discrepancy with bias terms.
pub fn pairwise_term(p: &Pose, p_star: &Pose, params: &LossParams) -> f64 {
    l1(&p.t, &p_star.t) * (-params.beta).exp()
        + params.beta
        + l1(&p.w, &p_star.w) * (-params.gamma).exp()
        + params.gamma
}

/// Ordered index pairs contributing to the relative term for `n` frames.
pub fn relative_pairs(n: usize, mode: PairMode) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let keep = match mode {
                PairMode::Adjacent => i.abs_diff(j) == 1,
                PairMode::AllPairs => i != j,
            };
            if keep {
                out.push((i, j));
            }
        }
    }
    out
}

fn check_lengths(predicted: &[Pose], truth: &[Pose]) -> Result<()> {
    if predicted.len() != truth.len() {
        return Err(Error::shape(
            format!("{} truth poses", predicted.len()),
            truth.len(),
        ));
    }
    if predicted.is_empty() {
        return Err(Error::invalid("tuple loss needs at least one pose"));
    }
    Ok(())
}

pub fn tuple_loss(predicted: &[Pose], truth: &[Pose], params: &LossParams) -> Result<LossBreakdown> {
    check_lengths(predicted, truth)?;
    let absolute_term = predicted
        .iter()
        .zip(truth)
        .map(|(p, q)| pairwise_term(p, q, params))
        .sum::<f64>();
    let relative_term = relative_pairs(predicted.len(), params.pairing)
        .into_iter()
        .map(|(i, j)| {
            let v = pose_compose_relative(&predicted[i], &predicted[j]).as_pose();
            let v_star = pose_compose_relative(&truth[i], &truth[j]).as_pose();
            pairwise_term(&v, &v_star, params)
        })
        .sum::<f64>();
    Ok(LossBreakdown {
        total: absolute_term + params.alpha * relative_term,
        absolute_term,
        relative_term,
    })
}

/// Accumulates `scale * dh/d(pose difference)` into `out` and returns the
/// contributions to `d/dbeta` and `d/dgamma`.
fn pairwise_grad(p: &Pose, p_star: &Pose, params: &LossParams, scale: f64, out: &mut [f64; 6]) -> (f64, f64) {
    let eb = (-params.beta).exp();
    let eg = (-params.gamma).exp();
    for k in 0..3 {
        out[k] += scale * sign0(p.t[k] - p_star.t[k]) * eb;
        out[3 + k] += scale * sign0(p.w[k] - p_star.w[k]) * eg;
    }
    let dbeta = 1.0 - l1(&p.t, &p_star.t) * eb;
    let dgamma = 1.0 - l1(&p.w, &p_star.w) * eg;
    (scale * dbeta, scale * dgamma)
}

/// Loss value together with its (sub)gradient.
pub fn tuple_loss_with_grad(
    predicted: &[Pose],
    truth: &[Pose],
    params: &LossParams,
) -> Result<(LossBreakdown, LossGradient)> {
    let breakdown = tuple_loss(predicted, truth, params)?;
    let n = predicted.len();
    let mut poses = vec![[0.0; 6]; n];
    let mut beta = 0.0;
    let mut gamma = 0.0;
    for i in 0..n {
        let (db, dg) = pairwise_grad(&predicted[i], &truth[i], params, 1.0, &mut poses[i]);
        beta += db;
        gamma += dg;
    }
    for (i, j) in relative_pairs(n, params.pairing) {
        let v = pose_compose_relative(&predicted[i], &predicted[j]).as_pose();
        let v_star = pose_compose_relative(&truth[i], &truth[j]).as_pose();
        let mut g = [0.0; 6];
        let (db, dg) = pairwise_grad(&v, &v_star, params, params.alpha, &mut g);
        beta += db;
        gamma += dg;
        for k in 0..6 {
            poses[i][k] += g[k];
            poses[j][k] -= g[k];
        }
    }
    Ok((breakdown, LossGradient { poses, beta, gamma }))
}
