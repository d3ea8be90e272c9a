//! Parameter error modulo relabeling of mixture components.

use itertools::Itertools;

use crate::error::{Error, Result};
use crate::model::MixParams;

/// Largest `k` for which all `k!` permutations are enumerated.
pub const MAX_EXHAUSTIVE_K: usize = 8;

fn check_shapes(truth: &MixParams, est: &MixParams) -> Result<()> {
    if truth.k() != est.k() || truth.d() != est.d() {
        return Err(Error::Dimension(format!(
            "cannot align (d={}, k={}) with (d={}, k={})",
            truth.d(),
            truth.k(),
            est.d(),
            est.k()
        )));
    }
    Ok(())
}

/// Squared distance between column `h` of `truth` and column `g` of `est`,
/// with the mixture weight appended as an extra row.
fn column_cost(truth: &MixParams, est: &MixParams, h: usize, g: usize) -> f64 {
    let db = (truth.coefficients().column(h) - est.coefficients().column(g)).norm_squared();
    let dw = truth.weights()[h] - est.weights()[g];
    db + dw * dw
}

/// `min_perm sqrt(||B - B_perm||_F^2 + ||pi - pi_perm||^2)` over all
/// permutations of the estimated components.
pub fn aligned_error(truth: &MixParams, est: &MixParams) -> Result<f64> {
    check_shapes(truth, est)?;
    let k = truth.k();
    if k > MAX_EXHAUSTIVE_K {
        return Err(Error::TooManyComponents(k));
    }
    let cost: Vec<Vec<f64>> = (0..k)
        .map(|h| (0..k).map(|g| column_cost(truth, est, h, g)).collect())
        .collect();
    let best = (0..k)
        .permutations(k)
        .min_by(|p, q| {
            let cp: f64 = p.iter().enumerate().map(|(h, &g)| cost[h][g]).sum();
            let cq: f64 = q.iter().enumerate().map(|(h, &g)| cost[h][g]).sum();
            cp.total_cmp(&cq)
        })
        .expect("k >= 1");
    Ok(distance(truth, &est.permuted(&best)))
}

/// Frobenius distance of the stacked `[B; pi^T]` blocks, no relabeling.
pub fn distance(truth: &MixParams, est: &MixParams) -> f64 {
    let db = (truth.coefficients() - est.coefficients()).norm_squared();
    let dw = (truth.weights() - est.weights()).norm_squared();
    (db + dw).sqrt()
}

/// Greedy matching: repeatedly pairs the closest remaining columns. An upper
/// bound on [`aligned_error`]; exact only when the greedy choice is optimal.
pub fn aligned_error_greedy(truth: &MixParams, est: &MixParams) -> Result<f64> {
    check_shapes(truth, est)?;
    let k = truth.k();
    let mut pairs: Vec<(f64, usize, usize)> = (0..k)
        .cartesian_product(0..k)
        .map(|(h, g)| (column_cost(truth, est, h, g), h, g))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut used_t, mut used_e) = (vec![false; k], vec![false; k]);
    let mut total = 0.0;
    for (c, h, g) in pairs {
        if !used_t[h] && !used_e[g] {
            used_t[h] = true;
            used_e[g] = true;
            total += c;
        }
    }
    Ok(total.sqrt())
}
