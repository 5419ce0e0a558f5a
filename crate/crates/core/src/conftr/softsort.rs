//! Soft sorting by projection onto the permutahedron, solved with
//! pool-adjacent-violators.
//!
//! The descending soft sort of `θ` is `z - v` where `z = (n, n-1, …, 1) / ε`
//! and `v` is the non-increasing isotonic fit of `z` against the hard-sorted
//! `w = sort_desc(θ)`. On a block `B` the fitted value is
//! `mean(z_B) - mean(w_B)` (quadratic) or `lse(z_B) - lse(w_B)` (entropic).
//! When no block pools the result is exactly the hard sort.

use serde::{Deserialize, Serialize};

use crate::error::{CpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularization {
    Quadratic,
    #[default]
    Entropic,
}

/// Ascending soft sort with its Jacobian.
#[derive(Debug, Clone)]
pub struct SoftSort {
    pub values: Vec<f64>,
    // jacobian[i * n + j] = d values[i] / d theta[j]
    jacobian: Vec<f64>,
}

impl SoftSort {
    pub fn jacobian(&self, i: usize, j: usize) -> f64 {
        self.jacobian[i * self.values.len() + j]
    }

    /// `d (Σ_i g_i values_i) / d theta`.
    pub fn vjp(&self, g: &[f64]) -> Vec<f64> {
        let n = self.values.len();
        let mut out = vec![0.0; n];
        for (i, gi) in g.iter().enumerate() {
            if *gi == 0.0 {
                continue;
            }
            for (o, jij) in out.iter_mut().zip(&self.jacobian[i * n..(i + 1) * n]) {
                *o += gi * jij;
            }
        }
        out
    }
}

fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn block_value(z: &[f64], w: &[f64], reg: Regularization) -> f64 {
    match reg {
        Regularization::Quadratic => {
            let n = z.len() as f64;
            (z.iter().sum::<f64>() - w.iter().sum::<f64>()) / n
        }
        Regularization::Entropic => lse(z) - lse(w),
    }
}

/// Blocks `[start, end)` of the non-increasing isotonic fit.
fn pav_blocks(z: &[f64], w: &[f64], reg: Regularization) -> Vec<(usize, usize, f64)> {
    let mut blocks: Vec<(usize, usize, f64)> = Vec::with_capacity(z.len());
    for i in 0..z.len() {
        let mut cur = (i, i + 1, z[i] - w[i]);
        while let Some(&(s, _, prev)) = blocks.last() {
            if prev >= cur.2 {
                break;
            }
            blocks.pop();
            cur = (s, cur.1, block_value(&z[s..cur.1], &w[s..cur.1], reg));
        }
        blocks.push(cur);
    }
    blocks
}

/// Ascending soft sort of `theta` with dispersion `epsilon`.
pub fn soft_sort(theta: &[f64], epsilon: f64, reg: Regularization) -> Result<SoftSort> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(CpError::config(format!("dispersion must be positive, got {epsilon}")));
    }
    if let Some((index, &value)) = theta.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(CpError::NonFinite { index, value });
    }
    let n = theta.len();
    // Descending sort of -theta, stable.
    let u: Vec<f64> = theta.iter().map(|t| -t).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| u[b].total_cmp(&u[a]));
    let w: Vec<f64> = order.iter().map(|&i| u[i]).collect();
    let z: Vec<f64> = (0..n).map(|i| (n - i) as f64 / epsilon).collect();

    let mut desc = vec![0.0; n];
    // d desc[i] / d w[j], nonzero only within a block
    let mut jac_w = vec![0.0; n * n];
    for (s, e, gamma) in pav_blocks(&z, &w, reg) {
        let weights: Vec<f64> = match reg {
            Regularization::Quadratic => vec![1.0 / (e - s) as f64; e - s],
            Regularization::Entropic => {
                let l = lse(&w[s..e]);
                w[s..e].iter().map(|x| (x - l).exp()).collect()
            }
        };
        for i in s..e {
            // a singleton block reproduces w exactly; avoid z - (z - w) rounding
            desc[i] = if e - s == 1 { w[i] } else { z[i] - gamma };
            for (j, wt) in (s..e).zip(&weights) {
                jac_w[i * n + j] = *wt;
            }
        }
    }

    // ascending = -desc; the two negations cancel in the Jacobian.
    let values = desc.iter().map(|d| -d).collect();
    let mut jacobian = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            jacobian[i * n + order[j]] = jac_w[i * n + j];
        }
    }
    symmetrize_ties(theta, &mut jacobian);
    Ok(SoftSort { values, jacobian })
}

/// Averages Jacobian columns over exactly tied inputs, so tied inputs
/// receive identical gradients regardless of sort order.
fn symmetrize_ties(theta: &[f64], jacobian: &mut [f64]) {
    let n = theta.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| theta[a].total_cmp(&theta[b]));
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && theta[order[end]] == theta[order[start]] {
            end += 1;
        }
        if end - start > 1 {
            let group = &order[start..end];
            for i in 0..n {
                let mean = group.iter().map(|&j| jacobian[i * n + j]).sum::<f64>() / group.len() as f64;
                for &j in group {
                    jacobian[i * n + j] = mean;
                }
            }
        }
        start = end;
    }
}

/// Smooth quantile: the soft-sorted values linearly interpolated at the
/// one-based position `level * n`, clamped to `[1, n]`. Returns the value
/// and its gradient with respect to `scores`.
pub fn smooth_quantile(scores: &[f64], level: f64, epsilon: f64, reg: Regularization) -> Result<(f64, Vec<f64>)> {
    let n = scores.len();
    if n < 2 {
        return Err(CpError::config("smooth quantile needs at least 2 scores"));
    }
    if !level.is_finite() {
        return Err(CpError::config(format!("quantile level must be finite, got {level}")));
    }
    let sorted = soft_sort(scores, epsilon, reg)?;
    let h = (level * n as f64).clamp(1.0, n as f64);
    let lo = (h.floor() as usize).min(n - 1); // one-based lower neighbour
    let frac = h - lo as f64;
    let mut weights = vec![0.0; n];
    weights[lo - 1] = 1.0 - frac;
    weights[lo] = frac;
    let value = (1.0 - frac) * sorted.values[lo - 1] + frac * sorted.values[lo];
    Ok((value, sorted.vjp(&weights)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_pooling_is_hard_sort() {
        let s = soft_sort(&[0.3, 0.1, 0.2], 0.1, Regularization::Entropic).unwrap();
        assert_eq!(s.values, vec![0.1, 0.2, 0.3]);
        assert_eq!(s.jacobian(0, 1), 1.0);
        assert_eq!(s.jacobian(2, 0), 1.0);
    }

    #[test]
    fn large_dispersion_pools_to_mean() {
        let theta = [3.0, -1.0, 0.5, 2.0];
        let s = soft_sort(&theta, 1e6, Regularization::Quadratic).unwrap();
        for v in &s.values {
            assert!((v - 1.125).abs() < 1e-4);
        }
    }

    #[test]
    fn quadratic_sum_is_preserved() {
        let theta = [0.9, -0.4, 2.2, 0.0, 1.1];
        let s = soft_sort(&theta, 1.5, Regularization::Quadratic).unwrap();
        let total: f64 = s.values.iter().sum();
        assert!((total - theta.iter().sum::<f64>()).abs() < 1e-12);
        assert!(s.values.windows(2).all(|w| w[0] <= w[1] + 1e-12));
    }

    #[test]
    fn tied_pair_splits_gradient() {
        let (q, g) = smooth_quantile(&[0.4, 0.4], 0.5, 0.1, Regularization::Entropic).unwrap();
        assert_eq!(q, 0.4);
        assert_eq!(g, vec![0.5, 0.5]);
    }

    #[test]
    fn bad_dispersion() {
        assert!(matches!(
            smooth_quantile(&[1.0, 2.0], 0.5, 0.0, Regularization::Entropic),
            Err(CpError::Config(_))
        ));
        assert!(smooth_quantile(&[1.0], 0.5, 0.1, Regularization::Entropic).is_err());
    }
}
