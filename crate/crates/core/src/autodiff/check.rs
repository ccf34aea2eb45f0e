// SPDX-License-Identifier: MIT OR Apache-2.0

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Coordinates whose relu activation pattern changes within this distance
/// are treated as sitting on a kink and are excluded from the comparison.
pub const KINK_TOLERANCE: f64 = 1e-4;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDifferenceReport {
    /// `max_j |analytic_j - central_j| / max(1, |central_j|)` over checked coordinates.
    pub max_rel_error: f64,
    /// Coordinates skipped because a relu breakpoint lies within [`KINK_TOLERANCE`].
    pub skipped: Vec<usize>,
    pub checked: usize,
}

fn evaluate<F>(f: &F, x: &Tensor) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let input = tape.constant(x.clone());
    let out = f(&mut tape, input)?;
    let value = tape.value(out).item()?;
    Ok((value, tape.relu_pattern().to_vec()))
}

fn nudged(x: &Tensor, j: usize, delta: f64) -> Tensor {
    let mut data = x.data().to_vec();
    data[j] += delta;
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// Checks the gradient of scalar function `f` at `x` against central
/// differences with step `h`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<FiniteDifferenceReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::domain("finite_difference_check", "h must be positive"));
    }
    let (first, pattern) = evaluate(&f, x)?;
    let (second, _) = evaluate(&f, x)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "two evaluations at the same point returned {first} and {second}"
        )));
    }

    let mut tape = Tape::new();
    let input = tape.leaf(x.clone(), true);
    let out = f(&mut tape, input)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(input)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let has_kinks = !pattern.is_empty();
    let mut report = FiniteDifferenceReport {
        max_rel_error: 0.0,
        skipped: Vec::new(),
        checked: 0,
    };
    for j in 0..x.numel() {
        let (plus, plus_pattern) = evaluate(&f, &nudged(x, j, h))?;
        let (minus, minus_pattern) = evaluate(&f, &nudged(x, j, -h))?;
        if has_kinks {
            let near_kink = plus_pattern != pattern
                || minus_pattern != pattern
                || evaluate(&f, &nudged(x, j, KINK_TOLERANCE))?.1 != pattern
                || evaluate(&f, &nudged(x, j, -KINK_TOLERANCE))?.1 != pattern;
            if near_kink {
                report.skipped.push(j);
                continue;
            }
        }
        let central = (plus - minus) / (2.0 * h);
        let err = (analytic[j] - central).abs() / central.abs().max(1.0);
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    Ok(report)
}
