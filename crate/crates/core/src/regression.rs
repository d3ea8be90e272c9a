//! Moment regressions: ordinary least squares for the first compound moment,
//! nuclear-norm-penalized least squares (ADMM) for the second and third.
//!
//! All regressions run in collapsed (cvec) coordinates. For symmetric `M`,
//! `<M, x^{⊗p}> = <cvec M, cvec x^{⊗p}>`, so the Gram matrix of the design is
//! exactly the moment covariance used by the identifiability check.
//!
//! The penalized solve splits `M` from its mode-0 unfolding `Z`:
//!
//! ```text
//! min_M,Z  (1/2n) sum_i (<M, x_i^{⊗p}> - r_i)^2 + lambda ||Z||_*   s.t.  Z = unfold(M)
//! ```
//!
//! The unfolding of a symmetric tensor is an isometry in cvec coordinates and
//! its adjoint is `cvec` itself, so the `M`-update is a single linear system
//! `(G + rho I) m = g + rho cvec(Z - U)` whose matrix only changes with `rho`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, NoiseSpec, PowerFeatures};
use crate::tensor::{CollapsedVec, SymTensor, Tensor, Unfolding};

/// Minimum eigenvalue of the first-order design covariance accepted by OLS.
pub const MIN_DESIGN_EIGENVALUE: f64 = 1e-10;

/// Automatic penalty as a multiple of the regularization strength.
pub const RHO_PER_LAMBDA: f64 = 30.0;
/// Automatic penalty floor relative to the largest Gram diagonal entry.
const RHO_FLOOR: f64 = 1e-9;
const RHO_MIN: f64 = 1e-14;
const RHO_MAX: f64 = 1e10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// ADMM penalty. `None` picks `RHO_PER_LAMBDA * lambda`, floored relative
    /// to the Gram diagonal.
    pub rho: Option<f64>,
    pub max_iter: usize,
    pub tol_primal: f64,
    pub tol_dual: f64,
    pub record_objective: bool,
    /// Residual balancing: rescale `rho` when one residual dominates the other.
    pub adaptive_rho: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rho: None,
            max_iter: 5000,
            tol_primal: 1e-7,
            tol_dual: 1e-7,
            record_objective: false,
            adaptive_rho: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rho.is_some_and(|r| !(r > 0.0)) || !(self.tol_primal > 0.0) || !(self.tol_dual > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "solver config needs rho, tolerances > 0: {self:?}"
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

/// How the known-noise bias is handled in the `y^2`, `y^3` regressions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    /// Subtract the bias computed from the known noise moments.
    #[default]
    Known,
    /// Fit the bias as extra unpenalized coefficients.
    Estimated,
}

/// One regression `r_i ~ <M, x_i^{⊗p}>` with adjusted targets.
#[derive(Clone, Debug)]
pub struct MomentRegressionProblem {
    pub order: usize,
    pub covariates: DMatrix<f64>,
    pub targets: DVector<f64>,
    pub lambda: f64,
    /// Unpenalized extra regressors, one column each (bias estimation).
    pub extra: Option<DMatrix<f64>>,
}

impl MomentRegressionProblem {
    pub fn n(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn d(&self) -> usize {
        self.covariates.ncols()
    }

    fn extra_cols(&self) -> usize {
        self.extra.as_ref().map_or(0, |e| e.ncols())
    }

    /// Residuals `r_i - <M, x_i^{⊗p}>`.
    pub fn residuals(&self, m: &SymTensor) -> Result<DVector<f64>> {
        if m.order() != self.order || m.dim() != self.d() {
            return Err(Error::Dimension("tensor does not match problem".into()));
        }
        let feats = PowerFeatures::new(self.d(), self.order)?;
        let z = feats.design(&self.covariates);
        Ok(&self.targets - z * m.cvec().values)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub objective: f64,
    pub primal_res: f64,
    pub dual_res: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    /// Hit `max_iter`; the last iterate is still returned.
    MaxIterations { primal_res: f64, dual_res: f64 },
}

#[derive(Clone, Debug)]
pub struct NuclearSolution {
    pub tensor: SymTensor,
    /// Coefficients on the extra regressors, if any.
    pub extra_coeffs: DVector<f64>,
    pub status: SolveStatus,
    pub iterations: usize,
    pub primal_res: f64,
    pub dual_res: f64,
    pub final_rho: f64,
    pub trace: Vec<IterRecord>,
}

impl NuclearSolution {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    /// JSON array of `{iter, objective, primal_res, dual_res}`.
    pub fn trace_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.trace)?)
    }
}

/// Output of the three moment regressions.
#[derive(Clone, Debug)]
pub struct CompoundEstimates {
    pub m1: DVector<f64>,
    pub m2: SymTensor,
    pub m3: SymTensor,
    pub m2_solve: NuclearSolution,
    pub m3_solve: NuclearSolution,
}

/// `(lambda_2, lambda_3) = (1 / (1e5 sqrt n), 1 / (1e3 sqrt n))`.
pub fn default_lambdas(n: usize) -> (f64, f64) {
    let s = (n.max(1) as f64).sqrt();
    (1.0 / (1e5 * s), 1.0 / (1e3 * s))
}

/// Least squares estimate of `M_1` from `min (1/2n) sum (<M_1, x> - y)^2`.
pub fn estimate_m1(data: &Dataset) -> Result<DVector<f64>> {
    let n = data.n() as f64;
    let gram = data.xs.transpose() * &data.xs / n;
    let gram = (&gram + gram.transpose()) * 0.5;
    let sigma_min = gram
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if !(sigma_min > MIN_DESIGN_EIGENVALUE) {
        return Err(Error::Identifiability {
            order: 1,
            sigma_min,
        });
    }
    let rhs = data.xs.transpose() * &data.ys / n;
    let chol = Cholesky::new(gram).ok_or_else(|| Error::Identifiability {
        order: 1,
        sigma_min,
    })?;
    Ok(chol.solve(&rhs))
}

/// Builds the order-`p` regression with the noise bias removed from the targets:
/// `r = y^2 - E[eps^2]` for `p = 2` and
/// `r = y^3 - 3 E[eps^2] <M1_hat, x> - E[eps^3]` for `p = 3`.
pub fn build_problem(
    data: &Dataset,
    order: usize,
    noise: &NoiseSpec,
    m1_hat: Option<&DVector<f64>>,
    lambda: f64,
    bias: BiasMode,
) -> Result<MomentRegressionProblem> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    let (m2, m3) = (noise.m2(), noise.m3());
    let (targets, extra) = match order {
        2 => match bias {
            BiasMode::Known => (data.ys.map(|y| y * y - m2), None),
            BiasMode::Estimated => (
                data.ys.map(|y| y * y),
                Some(DMatrix::from_element(data.n(), 1, 1.0)),
            ),
        },
        3 => {
            let m1 = m1_hat.ok_or_else(|| {
                Error::InvalidArgument("third-order regression needs an M1 estimate".into())
            })?;
            if m1.len() != data.d() {
                return Err(Error::Dimension(format!(
                    "M1 estimate has length {}, data has d={}",
                    m1.len(),
                    data.d()
                )));
            }
            let proj = &data.xs * m1;
            match bias {
                BiasMode::Known => (
                    DVector::from_fn(data.n(), |i, _| {
                        data.ys[i].powi(3) - 3.0 * m2 * proj[i] - m3
                    }),
                    None,
                ),
                BiasMode::Estimated => {
                    let mut extra = DMatrix::from_element(data.n(), 2, 1.0);
                    extra.set_column(0, &proj);
                    (data.ys.map(|y| y.powi(3)), Some(extra))
                }
            }
        }
        other => return Err(Error::UnsupportedOrder(other)),
    };
    Ok(MomentRegressionProblem {
        order,
        covariates: data.xs.clone(),
        targets,
        lambda,
        extra,
    })
}

/// Sufficient statistics of the quadratic loss in (cvec, extra) coordinates.
struct Quadratic {
    gram: DMatrix<f64>,
    rhs: DVector<f64>,
    /// `(1/2n) sum r_i^2`
    offset: f64,
    n_tensor: usize,
}

impl Quadratic {
    fn new(problem: &MomentRegressionProblem) -> Result<Self> {
        let feats = PowerFeatures::new(problem.d(), problem.order)?;
        let n_tensor = feats.len();
        let q = problem.extra_cols();
        let (g, r) = feats.moments(&problem.covariates, Some(&problem.targets));
        let total = n_tensor + q;
        let mut gram = DMatrix::zeros(total, total);
        let mut rhs = DVector::zeros(total);
        gram.view_mut((0, 0), (n_tensor, n_tensor)).copy_from(&g);
        rhs.rows_mut(0, n_tensor).copy_from(&r);
        if let Some(extra) = &problem.extra {
            let n = problem.n() as f64;
            let z = feats.design(&problem.covariates);
            let cross = z.transpose() * extra / n;
            let ee = extra.transpose() * extra / n;
            gram.view_mut((0, n_tensor), (n_tensor, q)).copy_from(&cross);
            gram.view_mut((n_tensor, 0), (q, n_tensor)).copy_from(&cross.transpose());
            gram.view_mut((n_tensor, n_tensor), (q, q)).copy_from(&ee);
            rhs.rows_mut(n_tensor, q)
                .copy_from(&(extra.transpose() * &problem.targets / n));
        }
        let offset = problem.targets.norm_squared() / (2.0 * problem.n() as f64);
        Ok(Self {
            gram,
            rhs,
            offset,
            n_tensor,
        })
    }

    fn loss(&self, w: &DVector<f64>) -> f64 {
        0.5 * w.dot(&(&self.gram * w)) - self.rhs.dot(w) + self.offset
    }

    fn factor(&self, rho: f64) -> Result<Cholesky<f64, Dyn>> {
        let mut a = self.gram.clone();
        for i in 0..self.n_tensor {
            a[(i, i)] += rho;
        }
        Cholesky::new(a).ok_or_else(|| {
            Error::Numeric("regression system is not positive definite".into())
        })
    }
}

fn unfold_cvec(values: &DVector<f64>, order: usize, dim: usize) -> Result<DMatrix<f64>> {
    let m = SymTensor::from_cvec(&CollapsedVec {
        order,
        dim,
        values: values.clone(),
    })?;
    Ok(m.unfold(0)?.matrix)
}

fn cvec_of_unfolding(z: &DMatrix<f64>, order: usize) -> Result<DVector<f64>> {
    let t = Tensor::refold(
        &Unfolding {
            mode: 0,
            matrix: z.clone(),
        },
        order,
    )?;
    Ok(t.cvec().values)
}

/// Singular value soft-thresholding.
pub fn singular_value_threshold(z: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    if tau <= 0.0 {
        return z.clone();
    }
    let svd = z.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let mut out = DMatrix::zeros(z.nrows(), z.ncols());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        let shrunk = s - tau;
        if shrunk > 0.0 {
            out += shrunk * u.column(i) * vt.row(i);
        }
    }
    out
}

/// Nuclear-norm-penalized least squares by ADMM on the mode-0 unfolding.
pub fn solve_nuclear(
    problem: &MomentRegressionProblem,
    cfg: &SolverConfig,
) -> Result<NuclearSolution> {
    cfg.validate()?;
    if !(problem.lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be >= 0, got {}",
            problem.lambda
        )));
    }
    if !(2..=3).contains(&problem.order) {
        return Err(Error::UnsupportedOrder(problem.order));
    }
    let (order, dim) = (problem.order, problem.d());
    let quad = Quadratic::new(problem)?;
    let nt = quad.n_tensor;
    let total = quad.gram.nrows();

    let gram_scale = quad.gram.diagonal().amax().max(f64::MIN_POSITIVE);
    let mut rho = cfg
        .rho
        .unwrap_or_else(|| (RHO_PER_LAMBDA * problem.lambda).max(RHO_FLOOR * gram_scale));
    let mut chol = quad.factor(rho)?;
    let mut w = DVector::zeros(total);
    let cols = dim.pow(order as u32 - 1);
    let mut z = DMatrix::zeros(dim, cols);
    let mut u = DMatrix::zeros(dim, cols);
    let mut trace = Vec::new();
    let (mut primal, mut dual) = (f64::INFINITY, f64::INFINITY);
    let mut status = SolveStatus::MaxIterations {
        primal_res: primal,
        dual_res: dual,
    };
    let mut iterations = 0;
    // balancing stops halfway so the tail runs with a fixed penalty
    let adapt_until = cfg.max_iter / 2;

    for iter in 1..=cfg.max_iter {
        iterations = iter;
        let mut b = quad.rhs.clone();
        let target = cvec_of_unfolding(&(&z - &u), order)?;
        for i in 0..nt {
            b[i] += rho * target[i];
        }
        w = chol.solve(&b);
        let m = w.rows(0, nt).into_owned();
        let am = unfold_cvec(&m, order, dim)?;

        let z_old = std::mem::replace(
            &mut z,
            singular_value_threshold(&(&am + &u), problem.lambda / rho),
        );
        u += &am - &z;

        primal = (&am - &z).norm();
        // change of the split variable; independent of the penalty scale
        dual = cvec_of_unfolding(&(&z - &z_old), order)?.norm();

        if cfg.record_objective {
            let nuclear = am.singular_values().sum();
            trace.push(IterRecord {
                iter,
                objective: quad.loss(&w) + problem.lambda * nuclear,
                primal_res: primal,
                dual_res: dual,
            });
        }

        if primal < cfg.tol_primal && dual < cfg.tol_dual {
            status = SolveStatus::Converged;
            break;
        }

        if cfg.adaptive_rho && iter < adapt_until && iter % 10 == 0 {
            let new_rho = if primal > 10.0 * dual {
                (rho * 2.0).min(RHO_MAX)
            } else if dual > 10.0 * primal {
                (rho / 2.0).max(RHO_MIN)
            } else {
                rho
            };
            if new_rho != rho {
                // scaled dual variable tracks y / rho
                u *= rho / new_rho;
                rho = new_rho;
                chol = quad.factor(rho)?;
            }
        }
    }
    if status != SolveStatus::Converged {
        status = SolveStatus::MaxIterations {
            primal_res: primal,
            dual_res: dual,
        };
        log::warn!(
            "nuclear-norm ADMM (p={order}) stopped at max_iter={} with primal {primal:.3e}, dual {dual:.3e}",
            cfg.max_iter
        );
    }
    let m = w.rows(0, nt).into_owned();
    let tensor = SymTensor::from_cvec(&CollapsedVec {
        order,
        dim,
        values: m,
    })?;
    Ok(NuclearSolution {
        tensor,
        extra_coeffs: w.rows(nt, total - nt).into_owned(),
        status,
        iterations,
        primal_res: primal,
        dual_res: dual,
        final_rho: rho,
        trace,
    })
}

/// `(1/n) || sum_i (r_i - <M, x_i^{⊗p}>) x_i^{⊗p} ||_op`, compared against
/// the regularization strength to judge whether it dominates the noise.
pub fn adjoint_diagnostic(problem: &MomentRegressionProblem, m: &SymTensor) -> Result<f64> {
    let res = problem.residuals(m)?;
    let feats = PowerFeatures::new(problem.d(), problem.order)?;
    let z = feats.design(&problem.covariates);
    let summed = CollapsedVec {
        order: problem.order,
        dim: problem.d(),
        values: z.transpose() * res / problem.n() as f64,
    };
    Ok(SymTensor::from_cvec(&summed)?.op_norm())
}

/// Which datasets feed the three regressions.
pub enum MomentData<'a> {
    Shared(&'a Dataset),
    Independent([&'a Dataset; 3]),
}

/// Runs the three regressions: OLS for `M_1`, penalized solves for `M_2`, `M_3`.
pub fn estimate_compound(
    data: MomentData<'_>,
    noise: &NoiseSpec,
    lambdas: (f64, f64),
    bias: BiasMode,
    cfg: &SolverConfig,
) -> Result<CompoundEstimates> {
    let [d1, d2, d3] = match data {
        MomentData::Shared(d) => [d, d, d],
        MomentData::Independent(ds) => ds,
    };
    let m1 = estimate_m1(d1)?;
    let p2 = build_problem(d2, 2, noise, None, lambdas.0, bias)?;
    let p3 = build_problem(d3, 3, noise, Some(&m1), lambdas.1, bias)?;
    let m2_solve = solve_nuclear(&p2, cfg)?;
    let m3_solve = solve_nuclear(&p3, cfg)?;
    Ok(CompoundEstimates {
        m1,
        m2: m2_solve.tensor.clone(),
        m3: m3_solve.tensor.clone(),
        m2_solve,
        m3_solve,
    })
}
