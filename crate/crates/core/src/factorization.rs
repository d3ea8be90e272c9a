//! Recovery of mixture parameters from the second and third compound moments:
//! whitening, the robust tensor power method, and unwhitening.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MixParams;
use crate::seed::derive_seed;
use crate::tensor::SymTensor;

/// Eigenvalues at or below this are treated as zero when whitening.
pub const RANK_THRESHOLD: f64 = 1e-10;

/// `W` with `W^T M2 W = I_k`, plus the unwhitening map `(W^T)^+`.
#[derive(Clone, Debug)]
pub struct Whitener {
    /// `d x k`
    pub w: DMatrix<f64>,
    /// `(W^T)^+ = U_k S_k^{1/2}`, `d x k`.
    pub unwhiten: DMatrix<f64>,
    pub k: usize,
    /// Eigenvalues kept, descending.
    pub eigenvalues: Vec<f64>,
    /// Negative eigenvalues outside the top `k`, which whitening discards.
    pub discarded_negative: Vec<f64>,
}

/// Whitens a symmetric second moment using its top-`k` eigenpairs by
/// magnitude, all of which must be positive.
pub fn whiten(m2: &SymTensor, k: usize) -> Result<Whitener> {
    let mat = m2.to_matrix()?;
    if k == 0 || k > mat.nrows() {
        return Err(Error::InvalidArgument(format!(
            "rank k={k} must be in 1..={}",
            mat.nrows()
        )));
    }
    let d = mat.nrows();
    let eig = mat.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .abs()
            .total_cmp(&eig.eigenvalues[a].abs())
            .then(eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]))
    });
    let spectrum: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let kept = &order[..k];
    if kept.iter().any(|&i| !(eig.eigenvalues[i] > RANK_THRESHOLD)) {
        return Err(Error::RankDeficient { k, spectrum });
    }
    let discarded_negative: Vec<f64> = spectrum[k..].iter().copied().filter(|&v| v < 0.0).collect();
    if !discarded_negative.is_empty() {
        log::debug!("whitening discards negative eigenvalues {discarded_negative:?}");
    }
    let mut w = DMatrix::zeros(d, k);
    let mut unwhiten = DMatrix::zeros(d, k);
    for (col, &i) in kept.iter().enumerate() {
        let s = eig.eigenvalues[i];
        let v = eig.eigenvectors.column(i);
        w.set_column(col, &(v / s.sqrt()));
        unwhiten.set_column(col, &(v * s.sqrt()));
    }
    Ok(Whitener {
        w,
        unwhiten,
        k,
        eigenvalues: kept.iter().map(|&i| eig.eigenvalues[i]).collect(),
        discarded_negative,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PowerMethodConfig {
    /// Random restarts per deflation round.
    pub restarts: usize,
    /// Power iterations per restart, and again for polishing.
    pub iters: usize,
    pub seed: u64,
}

impl Default for PowerMethodConfig {
    fn default() -> Self {
        Self {
            restarts: 60,
            iters: 120,
            seed: 0,
        }
    }
}

/// Eigenpairs from the robust tensor power method, in extraction order.
#[derive(Clone, Debug)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    /// Column `h` is `v_h`.
    pub vectors: DMatrix<f64>,
    /// Best `|T(u,u,u)|` among the restarts of each round, before polishing.
    pub best_restart_objective: Vec<f64>,
    /// Set when some round produced a non-positive eigenvalue.
    pub nonpositive: bool,
}

impl EigenPairs {
    /// Largest `|v_h . v_h'|` over distinct pairs.
    pub fn max_overlap(&self) -> f64 {
        let k = self.values.len();
        let mut worst = 0.0f64;
        for a in 0..k {
            for b in a + 1..k {
                worst = worst.max(self.vectors.column(a).dot(&self.vectors.column(b)).abs());
            }
        }
        worst
    }
}

fn power_iterate(t: &SymTensor, mut u: DVector<f64>, iters: usize) -> DVector<f64> {
    for _ in 0..iters {
        let next = t.contract_twice(&u);
        let norm = next.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            break;
        }
        u = next / norm;
    }
    u
}

/// Extracts `k` eigenpairs of a symmetric order-3 tensor by restarted power
/// iteration with deflation. Deterministic for a fixed seed.
pub fn robust_tensor_power(
    t: &SymTensor,
    k: usize,
    cfg: &PowerMethodConfig,
) -> Result<EigenPairs> {
    if t.order() != 3 {
        return Err(Error::Dimension(format!(
            "power method needs an order-3 tensor, got order {}",
            t.order()
        )));
    }
    if k == 0 || k > t.dim() {
        return Err(Error::InvalidArgument(format!(
            "cannot extract {k} eigenpairs from a tensor of dim {}",
            t.dim()
        )));
    }
    if cfg.restarts == 0 {
        return Err(Error::InvalidArgument("need at least one restart".into()));
    }
    let dim = t.dim();
    let mut residual = t.clone();
    let mut values = Vec::with_capacity(k);
    let mut vectors = DMatrix::zeros(dim, k);
    let mut best_restart_objective = Vec::with_capacity(k);
    let mut nonpositive = false;

    for h in 0..k {
        let mut best: Option<(f64, DVector<f64>)> = None;
        for l in 0..cfg.restarts {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[h as u64, l as u64]));
            let mut u = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
            let norm = u.norm();
            if norm > 0.0 {
                u /= norm;
            }
            let u = power_iterate(&residual, u, cfg.iters);
            let score = residual.contract_thrice(&u).abs();
            // strict comparison keeps the lowest restart index on ties
            if best.as_ref().is_none_or(|(s, _)| score > *s) {
                best = Some((score, u));
            }
        }
        let (score, u) = best.expect("restarts >= 1");
        best_restart_objective.push(score);
        let mut u = power_iterate(&residual, u, cfg.iters);
        let mut a = residual.contract_thrice(&u);
        if a < 0.0 {
            u = -u;
            a = -a;
        }
        if !(a > 0.0) {
            nonpositive = true;
            log::warn!("tensor power method: eigenvalue a_{h} = {a:e} is not positive");
        }
        residual.axpy(-a, &SymTensor::tensor_power(&u, 3)?)?;
        values.push(a);
        vectors.set_column(h, &u);
    }
    Ok(EigenPairs {
        values,
        vectors,
        best_restart_objective,
        nonpositive,
    })
}

/// Parameters recovered from eigenpairs, with diagnostics.
#[derive(Clone, Debug)]
pub struct Recovery {
    /// Components sorted by descending weight; weights renormalized.
    pub params: MixParams,
    /// `a_h^{-2}` before renormalization, in the same order as `params`.
    pub raw_weights: Vec<f64>,
}

impl Recovery {
    pub fn raw_weight_sum(&self) -> f64 {
        self.raw_weights.iter().sum()
    }
}

/// `pi_h = a_h^{-2}` (renormalized) and `beta_h = (W^T)^+ (a_h v_h)`.
pub fn recover_params(whitener: &Whitener, pairs: &EigenPairs) -> Result<Recovery> {
    let k = pairs.values.len();
    if k != whitener.k {
        return Err(Error::Dimension(format!(
            "{k} eigenpairs for a rank-{} whitener",
            whitener.k
        )));
    }
    if let Some((index, &value)) = pairs
        .values
        .iter()
        .enumerate()
        .find(|(_, &a)| !(a > 0.0) || !a.is_finite())
    {
        return Err(Error::NonPositiveEigenvalue { index, value });
    }
    let raw: Vec<f64> = pairs.values.iter().map(|a| a.powi(-2)).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| raw[b].total_cmp(&raw[a]));
    let total: f64 = raw.iter().sum();
    let d = whitener.unwhiten.nrows();
    let mut coefficients = DMatrix::zeros(d, k);
    for (col, &h) in order.iter().enumerate() {
        let scaled = pairs.vectors.column(h) * pairs.values[h];
        coefficients.set_column(col, &(&whitener.unwhiten * scaled));
    }
    let weights = DVector::from_iterator(k, order.iter().map(|&h| raw[h] / total));
    Ok(Recovery {
        params: MixParams::new(weights, coefficients)?,
        raw_weights: order.iter().map(|&h| raw[h]).collect(),
    })
}

/// Full tensor factorization output.
#[derive(Clone, Debug)]
pub struct Factorization {
    pub recovery: Recovery,
    pub whitener: Whitener,
    pub pairs: EigenPairs,
}

impl Factorization {
    pub fn params(&self) -> &MixParams {
        &self.recovery.params
    }
}

/// Whiten, decompose the whitened third moment, unwhiten.
pub fn factorize(
    m2: &SymTensor,
    m3: &SymTensor,
    k: usize,
    cfg: &PowerMethodConfig,
) -> Result<Factorization> {
    if m3.order() != 3 || m2.order() != 2 || m2.dim() != m3.dim() {
        return Err(Error::Dimension(
            "factorize expects matching order-2 and order-3 moments".into(),
        ));
    }
    let whitener = whiten(m2, k)?;
    let t = m3.multilinear_map(&whitener.w)?;
    let pairs = robust_tensor_power(&t, k, cfg)?;
    let recovery = recover_params(&whitener, &pairs)?;
    Ok(Factorization {
        recovery,
        whitener,
        pairs,
    })
}
