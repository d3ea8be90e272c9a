//! Expectation maximization for mixtures of linear regressions with gaussian
//! observation noise.
//!
//! Sums over components are taken in sorted order, so relabeling the
//! components of the initialization relabels the output bit-for-bit.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, MixParams};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Sigma2Mode {
    /// Hold the noise variance at a known value.
    Fixed { sigma2: f64 },
    /// Update the noise variance in each M-step, starting from the sample
    /// variance of the responses.
    Estimated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EMConfig {
    pub max_iter: usize,
    /// Relative log-likelihood change that declares convergence.
    pub loglik_tol: f64,
    pub sigma2_mode: Sigma2Mode,
    /// Floor applied to responsibilities before renormalization.
    pub min_responsibility: f64,
}

impl EMConfig {
    pub fn fixed(sigma2: f64) -> Self {
        Self {
            max_iter: 1000,
            loglik_tol: 1e-9,
            sigma2_mode: Sigma2Mode::Fixed { sigma2 },
            min_responsibility: 1e-12,
        }
    }

    pub fn estimated() -> Self {
        Self {
            sigma2_mode: Sigma2Mode::Estimated,
            ..Self::fixed(1.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("EM max_iter must be >= 1".into()));
        }
        if !(self.loglik_tol >= 0.0) || !(0.0..1.0).contains(&self.min_responsibility) {
            return Err(Error::InvalidArgument(format!("bad EM config {self:?}")));
        }
        if let Sigma2Mode::Fixed { sigma2 } = self.sigma2_mode {
            if !(sigma2 > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "fixed sigma2 must be > 0, got {sigma2}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EMResult {
    pub params: MixParams,
    pub sigma2: f64,
    /// Log marginal likelihood at the initialization and after each iteration.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl EMResult {
    pub fn trace_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.loglik_trace)?)
    }
}

fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    values.iter().sum()
}

/// Per-record, per-component log joint densities `log pi_h + log N(y; beta_h.x, sigma2)`.
fn log_joint(data: &Dataset, params: &MixParams, sigma2: f64) -> DMatrix<f64> {
    let pred = &data.xs * params.coefficients();
    let norm = -0.5 * (LN_2PI + sigma2.ln());
    let log_pi: Vec<f64> = params.weights().iter().map(|w| w.ln()).collect();
    DMatrix::from_fn(data.n(), params.k(), |i, h| {
        let r = data.ys[i] - pred[(i, h)];
        log_pi[h] + norm - r * r / (2.0 * sigma2)
    })
}

fn log_sum_exp(row: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let mut terms: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    max + sorted_sum(&mut terms).ln()
}

fn check_shapes(data: &Dataset, params: &MixParams) -> Result<()> {
    if params.d() != data.d() {
        return Err(Error::Dimension(format!(
            "parameters have d={}, data has d={}",
            params.d(),
            data.d()
        )));
    }
    Ok(())
}

/// `sum_i log sum_h pi_h N(y_i; beta_h.x_i, sigma2)`.
pub fn loglik(data: &Dataset, params: &MixParams, sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma2 must be > 0, got {sigma2}")));
    }
    check_shapes(data, params)?;
    let lj = log_joint(data, params, sigma2);
    let mut row = vec![0.0; params.k()];
    let mut total = 0.0;
    for i in 0..data.n() {
        row.iter_mut().enumerate().for_each(|(h, v)| *v = lj[(i, h)]);
        total += log_sum_exp(&mut row);
    }
    Ok(total)
}

/// E-step: floored, row-normalized responsibilities and the log-likelihood.
pub fn responsibilities(
    data: &Dataset,
    params: &MixParams,
    sigma2: f64,
    floor: f64,
) -> Result<(DMatrix<f64>, f64)> {
    check_shapes(data, params)?;
    let k = params.k();
    let mut gamma = log_joint(data, params, sigma2);
    let mut row = vec![0.0; k];
    let mut ll = 0.0;
    for i in 0..data.n() {
        row.iter_mut().enumerate().for_each(|(h, v)| *v = gamma[(i, h)]);
        let lse = log_sum_exp(&mut row);
        ll += lse;
        for h in 0..k {
            row[h] = (gamma[(i, h)] - lse).exp().max(floor);
        }
        let mut sorted = row.clone();
        let total = sorted_sum(&mut sorted);
        for h in 0..k {
            gamma[(i, h)] = row[h] / total;
        }
    }
    if !ll.is_finite() {
        return Err(Error::Numeric(format!("log-likelihood is {ll}")));
    }
    Ok((gamma, ll))
}

/// Weighted least squares for one component.
fn weighted_ls(data: &Dataset, weights: &[f64], h: usize) -> Result<DVector<f64>> {
    let mut scaled = data.xs.clone();
    for (i, mut r) in scaled.row_iter_mut().enumerate() {
        r *= weights[i];
    }
    let gram = scaled.tr_mul(&data.xs);
    let rhs = scaled.tr_mul(&data.ys);
    let chol = Cholesky::new(gram).ok_or(Error::ComponentCollapse(h))?;
    let beta = chol.solve(&rhs);
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::ComponentCollapse(h));
    }
    Ok(beta)
}

fn m_step(data: &Dataset, gamma: &DMatrix<f64>) -> Result<MixParams> {
    let (n, k) = (data.n(), gamma.ncols());
    let mut weights = DVector::zeros(k);
    let mut coefficients = DMatrix::zeros(data.d(), k);
    for h in 0..k {
        let col: Vec<f64> = gamma.column(h).iter().copied().collect();
        weights[h] = col.iter().sum::<f64>() / n as f64;
        coefficients.set_column(h, &weighted_ls(data, &col, h)?);
    }
    let mut w: Vec<f64> = weights.iter().copied().collect();
    let total = sorted_sum(&mut w);
    MixParams::new(weights / total, coefficients)
}

fn residual_variance(data: &Dataset, params: &MixParams, gamma: &DMatrix<f64>, floor: f64) -> f64 {
    let pred = &data.xs * params.coefficients();
    let mut total = 0.0;
    let mut row = vec![0.0; params.k()];
    for i in 0..data.n() {
        for (h, v) in row.iter_mut().enumerate() {
            let r = data.ys[i] - pred[(i, h)];
            *v = gamma[(i, h)] * r * r;
        }
        total += sorted_sum(&mut row);
    }
    (total / data.n() as f64).max(floor)
}

/// Runs EM from `init` until the relative log-likelihood change drops below
/// `cfg.loglik_tol` or `cfg.max_iter` iterations have run.
pub fn em_fit(data: &Dataset, k: usize, init: &MixParams, cfg: &EMConfig) -> Result<EMResult> {
    cfg.validate()?;
    if k == 0 || init.k() != k {
        return Err(Error::Dimension(format!(
            "initialization has k={}, expected {k}",
            init.k()
        )));
    }
    check_shapes(data, init)?;
    let mut sigma2 = match cfg.sigma2_mode {
        Sigma2Mode::Fixed { sigma2 } => sigma2,
        Sigma2Mode::Estimated => {
            let mean = data.ys.mean();
            (data.ys.map(|y| (y - mean).powi(2)).sum() / data.n() as f64).max(1e-12)
        }
    };
    let mut params = init.clone();
    let (mut gamma, mut ll) = responsibilities(data, &params, sigma2, cfg.min_responsibility)?;
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    for iter in 1..=cfg.max_iter {
        iterations = iter;
        params = m_step(data, &gamma)?;
        if cfg.sigma2_mode == Sigma2Mode::Estimated {
            sigma2 = residual_variance(data, &params, &gamma, 1e-12);
        }
        let (g, next) = responsibilities(data, &params, sigma2, cfg.min_responsibility)?;
        gamma = g;
        trace.push(next);
        let change = (next - ll).abs() / ll.abs().max(1.0);
        ll = next;
        if change < cfg.loglik_tol {
            converged = true;
            break;
        }
    }
    Ok(EMResult {
        params,
        sigma2,
        loglik_trace: trace,
        iterations,
        converged,
    })
}

/// Standard normal coefficients and uniform proportions with a small
/// absolute-normal perturbation.
pub fn init_random(k: usize, d: usize, seed: u64) -> Result<MixParams> {
    if k == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!("need k, d >= 1, got k={k}, d={d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coefficients = DMatrix::from_fn(d, k, |_, _| StandardNormal.sample(&mut rng));
    let raw: Vec<f64> = (0..k)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            1.0 / k as f64 + 0.01 * z.abs()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    MixParams::new(DVector::from_iterator(k, raw.iter().map(|w| w / total)), coefficients)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sample_dataset, FeatureMap, NoiseSpec};
    use crate::regression::estimate_m1;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn sparse_poly_map() -> FeatureMap {
        FeatureMap::new(1, &["1", "t", "t^4", "t^7"]).unwrap()
    }

    fn instance(k: usize, seed: u64, n: usize, sigma2: f64) -> (MixParams, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = MixParams::random_ground_truth(k, 4, &mut rng).unwrap();
        let noise = NoiseSpec::gaussian(sigma2).unwrap();
        let ds = sample_dataset(&params, &sparse_poly_map(), &noise, n, seed + 500).unwrap();
        (params, ds)
    }

    /// Error-free transformation: `a + b = s + e` exactly.
    fn two_sum(a: f64, b: f64) -> (f64, f64) {
        let s = a + b;
        let bb = s - a;
        (s, (a - (s - bb)) + (b - bb))
    }

    #[test]
    fn truth_is_a_fixed_point_on_noiseless_data() {
        // well-conditioned map, so the responsibility floor moves nothing visibly
        let fmap = FeatureMap::new(1, &["1", "t", "t^2"]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = MixParams::random_ground_truth(2, 3, &mut rng).unwrap();
        let ds = sample_dataset(&params, &fmap, &NoiseSpec::gaussian(0.0).unwrap(), 2000, 2).unwrap();
        let res = em_fit(&ds, 2, &params, &EMConfig::fixed(1e-8)).unwrap();
        assert!(res.converged);
        assert!(res.iterations <= 2);
        let db = (res.params.coefficients() - params.coefficients()).norm();
        assert!(db < 1e-9, "coefficient error {db:e}");
    }

    #[test]
    fn single_component_is_ols() {
        let (_, ds) = instance(2, 3, 3000, 0.1);
        let init = init_random(1, 4, 4).unwrap();
        let res = em_fit(&ds, 1, &init, &EMConfig::fixed(0.1)).unwrap();
        let ols = estimate_m1(&ds).unwrap();
        assert!((res.params.beta(0) - ols).norm() < 1e-10);
        assert_eq!(res.params.weights()[0], 1.0);
    }

    #[test]
    fn loglik_single_component_closed_form() {
        let (_, ds) = instance(2, 5, 200, 0.1);
        let beta = DMatrix::from_column_slice(4, 1, &[0.1, 0.2, -0.3, 0.4]);
        let params = MixParams::new(DVector::from_vec(vec![1.0]), beta.clone()).unwrap();
        let sigma2 = 0.7;
        let r = &ds.ys - &ds.xs * beta.column(0);
        let n = ds.n() as f64;
        let expect = -0.5 * n * (2.0 * std::f64::consts::PI * sigma2).ln()
            - r.norm_squared() / (2.0 * sigma2);
        assert_relative_eq!(loglik(&ds, &params, sigma2).unwrap(), expect, max_relative = 1e-12);
    }

    #[test]
    fn loglik_matches_compensated_oracle() {
        let (params, ds) = instance(3, 6, 100, 0.3);
        let sigma2 = 0.3;
        // direct density sum per record, accumulated in double-double
        let (mut hi, mut lo) = (0.0f64, 0.0f64);
        for i in 0..ds.n() {
            let x = ds.x(i);
            let dens: f64 = (0..3)
                .map(|h| {
                    let r = ds.ys[i] - params.beta(h).dot(&x);
                    params.weights()[h] * (-r * r / (2.0 * sigma2)).exp()
                        / (2.0 * std::f64::consts::PI * sigma2).sqrt()
                })
                .sum();
            let (s, e) = two_sum(hi, dens.ln());
            hi = s;
            lo += e;
        }
        let oracle = hi + lo;
        assert_relative_eq!(loglik(&ds, &params, sigma2).unwrap(), oracle, max_relative = 1e-10);
    }

    #[test]
    fn loglik_rejects_nonpositive_variance() {
        let (params, ds) = instance(2, 7, 10, 0.1);
        assert!(matches!(loglik(&ds, &params, 0.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn loglik_is_permutation_invariant() {
        let (params, ds) = instance(3, 8, 500, 0.1);
        let a = loglik(&ds, &params, 0.1).unwrap();
        let b = loglik(&ds, &params.permuted(&[2, 0, 1]), 0.1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn responsibilities_rows_sum_to_one() {
        let (params, ds) = instance(3, 9, 1000, 0.1);
        let init = init_random(3, 4, 10).unwrap();
        for p in [&params, &init] {
            let (gamma, _) = responsibilities(&ds, p, 0.1, 1e-12).unwrap();
            for row in gamma.row_iter() {
                assert!((row.sum() - 1.0).abs() <= 1e-12);
                assert!(row.iter().all(|&g| g > 0.0));
            }
        }
    }

    #[test]
    fn loglik_trace_is_monotone() {
        for seed in 0..6 {
            let (_, ds) = instance(3, 20 + seed, 5000, 0.1);
            let init = init_random(3, 4, seed).unwrap();
            for cfg in [EMConfig::fixed(0.1), EMConfig::estimated()] {
                let res = em_fit(&ds, 3, &init, &cfg).unwrap();
                for w in res.loglik_trace.windows(2) {
                    assert!(w[1] >= w[0] - 1e-8, "seed {seed}: {} -> {}", w[0], w[1]);
                }
            }
        }
    }

    #[test]
    fn relabeling_init_relabels_output_exactly() {
        let (_, ds) = instance(3, 30, 3000, 0.1);
        let init = init_random(3, 4, 31).unwrap();
        let perm = [1, 2, 0];
        let cfg = EMConfig {
            max_iter: 50,
            ..EMConfig::fixed(0.1)
        };
        let a = em_fit(&ds, 3, &init, &cfg).unwrap();
        let b = em_fit(&ds, 3, &init.permuted(&perm), &cfg).unwrap();
        assert_eq!(a.params.permuted(&perm), b.params);
        assert_eq!(a.loglik_trace, b.loglik_trace);
    }

    #[test]
    fn estimated_variance_tracks_noise() {
        let (params, ds) = instance(2, 40, 20_000, 0.1);
        let res = em_fit(&ds, 2, &params, &EMConfig::estimated()).unwrap();
        assert!((res.sigma2 - 0.1).abs() < 0.01, "sigma2 {}", res.sigma2);
    }

    #[test]
    fn collinear_design_reports_collapse() {
        let mut xs = DMatrix::from_fn(100, 3, |i, j| ((i * (j + 3)) as f64).sin());
        let c = xs.column(0).into_owned();
        xs.set_column(1, &c);
        let ds = Dataset::new(xs, DVector::from_fn(100, |i, _| i as f64 * 0.01)).unwrap();
        let init = init_random(2, 3, 1).unwrap();
        assert!(matches!(
            em_fit(&ds, 2, &init, &EMConfig::fixed(0.1)),
            Err(Error::ComponentCollapse(_))
        ));
    }

    #[test]
    fn mismatched_init_is_rejected() {
        let (_, ds) = instance(2, 41, 50, 0.1);
        let init = init_random(2, 3, 1).unwrap();
        assert!(em_fit(&ds, 2, &init, &EMConfig::fixed(0.1)).is_err());
        let init = init_random(2, 4, 1).unwrap();
        assert!(em_fit(&ds, 3, &init, &EMConfig::fixed(0.1)).is_err());
        let cfg = EMConfig {
            max_iter: 0,
            ..EMConfig::fixed(0.1)
        };
        assert!(em_fit(&ds, 2, &init, &cfg).is_err());
    }

    #[test]
    fn init_random_is_deterministic_with_shape() {
        let a = init_random(3, 5, 99).unwrap();
        assert_eq!(a, init_random(3, 5, 99).unwrap());
        assert_eq!(a.coefficients().shape(), (5, 3));
        assert_ne!(a, init_random(3, 5, 100).unwrap());
    }

    #[test]
    fn init_random_weights_near_uniform() {
        for k in 1..=5 {
            for seed in 0..100 {
                let p = init_random(k, 4, seed).unwrap();
                let u = 1.0 / k as f64;
                assert!(p.weights().iter().all(|&w| (w - u).abs() <= 0.05));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn em_never_decreases_loglik(seed in 0u64..1000, k in 1usize..4) {
            let (_, ds) = instance(k.max(2), seed, 400, 0.2);
            let init = init_random(k, 4, seed ^ 0xabc).unwrap();
            let cfg = EMConfig { max_iter: 100, ..EMConfig::fixed(0.2) };
            let res = em_fit(&ds, k, &init, &cfg).unwrap();
            for w in res.loglik_trace.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-8);
            }
        }
    }
}
