// SPDX-License-Identifier: MIT OR Apache-2.0

//! Gradient-based methods over any differentiable scalar function of a
//! list of input tensors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Convergence threshold on the completeness gap of integrated gradients.
pub const IG_TOLERANCE: f64 = 0.05;

/// A scalar function of several input tensors with gradients.
pub trait DifferentiableTarget: Sync {
    fn value(&self, inputs: &[Tensor]) -> Result<f64>;
    /// Value and one gradient per input.
    fn value_and_grad(&self, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)>;
}

/// `∂f/∂x` for every input.
pub fn gradient<T: DifferentiableTarget + ?Sized>(target: &T, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    Ok(target.value_and_grad(inputs)?.1)
}

/// `x ⊙ ∂f/∂x` for every input.
pub fn input_x_gradient<T: DifferentiableTarget + ?Sized>(target: &T, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    let grads = gradient(target, inputs)?;
    inputs.iter().zip(&grads).map(|(x, g)| x.mul(g)).collect()
}

/// Knobs of integrated gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IgConfig {
    pub n_steps: usize,
    pub internal_batch_size: usize,
    /// Upper bound for automatic step doubling; doubling is off when this
    /// is not above `n_steps`.
    pub max_steps: usize,
}

impl Default for IgConfig {
    fn default() -> Self {
        Self {
            n_steps: 50,
            internal_batch_size: 50,
            max_steps: 1600,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IgResult {
    pub attributions: Vec<Tensor>,
    /// `|Σ attributions − (f(x) − f(baseline))|`.
    pub delta: f64,
    /// Number of interpolation points of the reported estimate.
    pub n_steps: usize,
}

fn interpolate(baseline: &[Tensor], inputs: &[Tensor], alpha: f64) -> Result<Vec<Tensor>> {
    baseline.iter().zip(inputs).map(|(b, x)| b.lerp(x, alpha)).collect()
}

/// Sums per-point gradients in point order, independent of how the points
/// were scheduled.
fn sum_in_order(per_point: Vec<Vec<Tensor>>, like: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut acc: Vec<Tensor> = like.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for grads in per_point {
        for (a, g) in acc.iter_mut().zip(&grads) {
            *a = a.add(g)?;
        }
    }
    Ok(acc)
}

fn gradients_at<T: DifferentiableTarget + ?Sized>(
    target: &T,
    points: &[Vec<Tensor>],
    chunk: usize,
) -> Result<Vec<Vec<Tensor>>> {
    let chunks: Vec<Vec<Vec<Tensor>>> = points
        .par_chunks(chunk.max(1))
        .map(|c| {
            c.iter()
                .map(|p| target.value_and_grad(p).map(|(_, g)| g))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

fn ig_once<T: DifferentiableTarget + ?Sized>(
    target: &T,
    inputs: &[Tensor],
    baseline: &[Tensor],
    n_steps: usize,
    chunk: usize,
    gap: f64,
) -> Result<IgResult> {
    let points = (0..n_steps)
        .map(|k| interpolate(baseline, inputs, k as f64 / n_steps as f64))
        .collect::<Result<Vec<_>>>()?;
    let summed = sum_in_order(gradients_at(target, &points, chunk)?, inputs)?;
    let attributions = summed
        .iter()
        .zip(inputs.iter().zip(baseline))
        .map(|(g, (x, b))| x.sub(b)?.mul(&g.scale(1.0 / n_steps as f64)))
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = attributions.iter().map(Tensor::sum).sum();
    Ok(IgResult {
        attributions,
        delta: (total - gap).abs(),
        n_steps,
    })
}

/// Left-Riemann integrated gradients from `baseline` to `inputs`. The
/// number of points doubles while the completeness gap is at least
/// [`IG_TOLERANCE`] and the cap allows it.
pub fn integrated_gradients<T: DifferentiableTarget + ?Sized>(
    target: &T,
    inputs: &[Tensor],
    baseline: &[Tensor],
    config: IgConfig,
) -> Result<IgResult> {
    if config.n_steps == 0 || config.internal_batch_size == 0 {
        return Err(Error::Method("n_steps and internal_batch_size must be at least 1".into()));
    }
    if inputs.len() != baseline.len() || inputs.iter().zip(baseline).any(|(x, b)| x.shape() != b.shape()) {
        return Err(Error::shape("integrated_gradients", "baseline does not match inputs"));
    }
    let gap = target.value(inputs)? - target.value(baseline)?;
    let mut n = config.n_steps;
    loop {
        let result = ig_once(target, inputs, baseline, n, config.internal_batch_size, gap)?;
        if result.delta < IG_TOLERANCE || n * 2 > config.max_steps {
            return Ok(result);
        }
        n *= 2;
    }
}

/// Expected gradients with optional Gaussian noise: the mean over
/// `n_samples` of `(x − x̃) ⊙ ∂f/∂x` at `x̃ + u·(x − x̃) + ε`.
pub fn gradient_shap<T: DifferentiableTarget + ?Sized>(
    target: &T,
    inputs: &[Tensor],
    baseline: &[Tensor],
    n_samples: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Vec<Tensor>> {
    if n_samples == 0 {
        return Err(Error::Method("gradient_shap needs at least one sample".into()));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::Method(format!("noise standard deviation {noise_std} is negative")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std).expect("validated std");
    let mut points = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let u: f64 = rng.random();
        let mut point = interpolate(baseline, inputs, u)?;
        if noise_std > 0.0 {
            point = point
                .into_iter()
                .map(|t| {
                    let shape = t.shape().to_vec();
                    let data = t.into_data().into_iter().map(|v| v + noise.sample(&mut rng)).collect();
                    Tensor::new(shape, data)
                })
                .collect::<Result<_>>()?;
        }
        points.push(point);
    }
    let summed = sum_in_order(gradients_at(target, &points, 16)?, inputs)?;
    summed
        .iter()
        .zip(inputs.iter().zip(baseline))
        .map(|(g, (x, b))| x.sub(b)?.mul(&g.scale(1.0 / n_samples as f64)))
        .collect()
}
