// SPDX-License-Identifier: MIT OR Apache-2.0

//! Perturbation methods over token positions.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Condition number above which the LIME system is reported as unstable.
pub const LIME_CONDITION_WARNING: f64 = 1e12;

/// Scores a function with some positions replaced by a baseline token.
pub trait MaskedScorer: Sync {
    fn n_positions(&self) -> usize;
    /// `keep[i] == false` replaces position `i`.
    fn score(&self, keep: &[bool]) -> Result<f64>;
    /// True when replacing position `i` would not change the input.
    fn is_baseline(&self, _i: usize) -> bool {
        false
    }
}

/// `f(x) − f(x with position i replaced)` for each position. Positions that
/// already hold the baseline score 0 without a forward pass.
pub fn occlusion<S: MaskedScorer + ?Sized>(scorer: &S) -> Result<Vec<f64>> {
    let n = scorer.n_positions();
    let full = scorer.score(&vec![true; n])?;
    (0..n)
        .map(|i| {
            if scorer.is_baseline(i) {
                return Ok(0.0);
            }
            let mut keep = vec![true; n];
            keep[i] = false;
            Ok(full - scorer.score(&keep)?)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimeConfig {
    pub n_samples: usize,
    pub kernel_width: f64,
    pub ridge_lambda: f64,
    pub seed: u64,
}

impl Default for LimeConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            kernel_width: 1.0,
            ridge_lambda: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimeResult {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub condition_number: f64,
}

/// Cosine distance between a binary mask with `kept` ones out of `d` and
/// the all-ones mask. The empty mask is treated as maximally distant.
pub fn mask_distance(kept: usize, d: usize) -> f64 {
    if kept == 0 {
        1.0
    } else {
        1.0 - (kept as f64 / d as f64).sqrt()
    }
}

pub fn kernel_weight(distance: f64, width: f64) -> f64 {
    (-(distance * distance) / (width * width)).exp()
}

/// Samples random keep-masks: the first is all ones, every other bit is
/// kept with probability one half.
pub fn sample_masks(d: usize, n: usize, seed: u64) -> Vec<Vec<bool>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks = vec![vec![true; d]];
    masks.extend((1..n).map(|_| (0..d).map(|_| rng.random_bool(0.5)).collect()));
    masks
}

/// Weighted ridge regression of scores on sampled masks.
pub fn lime<S: MaskedScorer + ?Sized>(scorer: &S, config: LimeConfig) -> Result<LimeResult> {
    let d = scorer.n_positions();
    if config.n_samples < d + 1 {
        return Err(Error::Method(format!(
            "lime needs at least {} samples for {d} tokens, got {}",
            d + 1,
            config.n_samples
        )));
    }
    if !(config.ridge_lambda > 0.0) || !(config.kernel_width > 0.0) {
        return Err(Error::Method("lime needs positive ridge lambda and kernel width".into()));
    }
    let masks = sample_masks(d, config.n_samples, config.seed);
    let scores = masks.iter().map(|m| scorer.score(m)).collect::<Result<Vec<_>>>()?;
    let weights: Vec<f64> = masks
        .iter()
        .map(|m| kernel_weight(mask_distance(m.iter().filter(|&&b| b).count(), d), config.kernel_width))
        .collect();
    fit_weighted_ridge(&masks, &scores, &weights, config.ridge_lambda)
}

/// Solves `(ZᵀWZ + λI′)β = ZᵀWy` where column 0 of `Z` is the unpenalised
/// intercept.
pub fn fit_weighted_ridge(masks: &[Vec<bool>], y: &[f64], w: &[f64], lambda: f64) -> Result<LimeResult> {
    let n = masks.len();
    let d = masks.first().map_or(0, Vec::len);
    let z = DMatrix::from_fn(n, d + 1, |r, c| {
        if c == 0 || masks[r][c - 1] {
            1.0
        } else {
            0.0
        }
    });
    let wz = DMatrix::from_fn(n, d + 1, |r, c| z[(r, c)] * w[r]);
    let mut a = z.transpose() * &wz;
    for i in 1..=d {
        a[(i, i)] += lambda;
    }
    let b = wz.transpose() * DVector::from_column_slice(y);
    let singular = a.clone().singular_values();
    let (max, min) = singular
        .iter()
        .fold((0.0f64, f64::INFINITY), |(hi, lo), &s| (hi.max(s), lo.min(s)));
    let condition_number = if min > 0.0 { max / min } else { f64::INFINITY };
    if condition_number > LIME_CONDITION_WARNING {
        log::warn!("lime regression is ill-conditioned (condition number {condition_number:.3e})");
    }
    let beta = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Method("lime regression system is singular".into()))?;
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "lime" });
    }
    Ok(LimeResult {
        coefficients: beta.iter().skip(1).copied().collect(),
        intercept: beta[0],
        condition_number,
    })
}
