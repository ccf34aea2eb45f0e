// SPDX-License-Identifier: MIT OR Apache-2.0

//! Kendall's τ-b with tie correction.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest n for which the exact permutation p-value may be requested.
pub const EXACT_MAX_N: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMethod {
    #[default]
    Normal,
    /// Enumerates every permutation of `ys`; only for n ≤ [`EXACT_MAX_N`].
    ExactPermutation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KendallTau {
    pub tau: f64,
    /// Two-sided.
    pub p_value: f64,
    pub n: usize,
}

/// Pair statistics shared by the fast path and the brute-force oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PairCounts {
    /// Concordant minus discordant.
    s: i64,
    pairs: i64,
    /// Pairs tied in x (including joint ties).
    tied_x: i64,
    tied_y: i64,
}

impl PairCounts {
    fn tau(&self) -> Result<f64> {
        let dx = self.pairs - self.tied_x;
        let dy = self.pairs - self.tied_y;
        if dx == 0 || dy == 0 {
            return Err(Error::Statistics("kendall tau is undefined when one input is constant".into()));
        }
        Ok(self.s as f64 / ((dx as f64) * (dy as f64)).sqrt())
    }
}

fn check(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::Statistics(format!("lengths differ: {} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::Statistics("kendall tau needs at least two observations".into()));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(Error::Statistics("NaN in kendall tau input".into()));
    }
    Ok(())
}

/// Sum of `t·(t−1)/2` over runs of equal values in a sorted slice.
fn tied_pairs<T: PartialEq>(sorted: &[T]) -> i64 {
    let mut total = 0;
    let mut run = 1i64;
    for i in 1..=sorted.len() {
        if i < sorted.len() && sorted[i] == sorted[i - 1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total
}

/// Run lengths of equal values in a sorted slice.
fn runs(sorted: &[f64]) -> Vec<i64> {
    let mut out = Vec::new();
    let mut run = 1i64;
    for i in 1..=sorted.len() {
        if i < sorted.len() && sorted[i] == sorted[i - 1] {
            run += 1;
        } else {
            out.push(run);
            run = 1;
        }
    }
    out
}

/// Merge sort counting exchanges (strict inversions).
fn sort_counting_swaps(v: &mut [f64], buf: &mut Vec<f64>) -> i64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = sort_counting_swaps(&mut v[..mid], buf) + sort_counting_swaps(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as i64;
            buf.push(v[j]);
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// Knight's O(n log n) pair counting.
fn pair_counts(xs: &[f64], ys: &[f64]) -> PairCounts {
    let n = xs.len() as i64;
    let mut pairs: Vec<(f64, f64)> = xs.iter().copied().zip(ys.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let tied_x = tied_pairs(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let tied_xy = tied_pairs(&pairs);
    let mut y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let len = y.len();
    let swaps = sort_counting_swaps(&mut y, &mut Vec::with_capacity(len));
    let tied_y = tied_pairs(&y);
    let total = n * (n - 1) / 2;
    PairCounts {
        s: total - tied_x - tied_y + tied_xy - 2 * swaps,
        pairs: total,
        tied_x,
        tied_y,
    }
}

/// Brute-force pair counting; the reference for [`pair_counts`].
fn pair_counts_naive(xs: &[f64], ys: &[f64]) -> PairCounts {
    let n = xs.len();
    let (mut s, mut tied_x, mut tied_y) = (0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = xs[i].partial_cmp(&xs[j]).unwrap();
            let dy = ys[i].partial_cmp(&ys[j]).unwrap();
            use std::cmp::Ordering::Equal;
            match (dx, dy) {
                (Equal, Equal) => {
                    tied_x += 1;
                    tied_y += 1;
                }
                (Equal, _) => tied_x += 1,
                (_, Equal) => tied_y += 1,
                (a, b) if a == b => s += 1,
                _ => s -= 1,
            }
        }
    }
    PairCounts {
        s,
        pairs: (n * (n - 1) / 2) as i64,
        tied_x,
        tied_y,
    }
}

/// Variance of S under independence with tie correction.
fn s_variance(n: usize, x_runs: &[i64], y_runs: &[i64]) -> f64 {
    let n = n as f64;
    let f = |t: f64| t * (t - 1.0) * (2.0 * t + 5.0);
    let v0 = f(n);
    let vt: f64 = x_runs.iter().map(|&t| f(t as f64)).sum();
    let vu: f64 = y_runs.iter().map(|&u| f(u as f64)).sum();
    let pair = |r: &[i64]| r.iter().map(|&t| (t * (t - 1)) as f64).sum::<f64>();
    let triple = |r: &[i64]| r.iter().map(|&t| (t * (t - 1) * (t - 2)) as f64).sum::<f64>();
    let v1 = pair(x_runs) * pair(y_runs) / (2.0 * n * (n - 1.0));
    let v2 = if n > 2.0 {
        triple(x_runs) * triple(y_runs) / (9.0 * n * (n - 1.0) * (n - 2.0))
    } else {
        0.0
    };
    (v0 - vt - vu) / 18.0 + v1 + v2
}

fn normal_p(xs: &[f64], ys: &[f64], s: i64) -> f64 {
    let sorted = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    let var = s_variance(xs.len(), &runs(&sorted(xs)), &runs(&sorted(ys)));
    if !(var > 0.0) {
        return 1.0;
    }
    let z = s as f64 / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * (1.0 - normal.cdf(z.abs()))).clamp(0.0, 1.0)
}

/// Fraction of permutations of `ys` whose |S| reaches the observed |S|.
fn exact_p(xs: &[f64], ys: &[f64], s: i64) -> f64 {
    let mut perm: Vec<f64> = ys.to_vec();
    let n = perm.len();
    let (mut hits, mut total) = (0u64, 0u64);
    // Heap's algorithm.
    let mut c = vec![0usize; n];
    let mut visit = |p: &[f64]| {
        total += 1;
        if pair_counts(xs, p).s.abs() >= s.abs() {
            hits += 1;
        }
    };
    visit(&perm);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            visit(&perm);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    hits as f64 / total as f64
}

/// τ-b of two samples with a normal-approximation p-value.
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> Result<KendallTau> {
    kendall_tau_with(xs, ys, PValueMethod::Normal)
}

pub fn kendall_tau_with(xs: &[f64], ys: &[f64], method: PValueMethod) -> Result<KendallTau> {
    check(xs, ys)?;
    let counts = pair_counts(xs, ys);
    let tau = counts.tau()?;
    let p_value = match method {
        PValueMethod::Normal => normal_p(xs, ys, counts.s),
        PValueMethod::ExactPermutation if xs.len() <= EXACT_MAX_N => exact_p(xs, ys, counts.s),
        PValueMethod::ExactPermutation => {
            return Err(Error::Statistics(format!(
                "exact p-value is limited to n ≤ {EXACT_MAX_N}, got {}",
                xs.len()
            )))
        }
    };
    Ok(KendallTau {
        tau,
        p_value,
        n: xs.len(),
    })
}

/// τ-b by direct enumeration of all pairs.
pub fn kendall_tau_naive(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check(xs, ys)?;
    pair_counts_naive(xs, ys).tau()
}
