//! Mixture of linear regressions: parameters, feature maps, noise, sampling,
//! exact compound moments and the moment identifiability diagnostic.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{count_profiles, SymTensor};

/// Default threshold on the smallest eigenvalue of the moment covariance.
pub const IDENTIFIABILITY_THRESHOLD: f64 = 1e-8;

/// Formats a float with 17 significant digits.
pub(crate) fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Mixture proportions `pi` and coefficient matrix `B = [beta_1 | ... | beta_k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixParams {
    weights: DVector<f64>,
    coefficients: DMatrix<f64>,
}

impl MixParams {
    pub fn new(weights: DVector<f64>, coefficients: DMatrix<f64>) -> Result<Self> {
        if weights.len() != coefficients.ncols() || weights.is_empty() {
            return Err(Error::Dimension(format!(
                "{} weights for {} coefficient columns",
                weights.len(),
                coefficients.ncols()
            )));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "mixture weights must be positive: {:?}",
                weights.as_slice()
            )));
        }
        let total = weights.sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        if coefficients.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite regression coefficient".into()));
        }
        Ok(Self {
            weights,
            coefficients,
        })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn d(&self) -> usize {
        self.coefficients.nrows()
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn coefficients(&self) -> &DMatrix<f64> {
        &self.coefficients
    }

    pub fn beta(&self, h: usize) -> DVector<f64> {
        self.coefficients.column(h).into_owned()
    }

    /// Reorders components by the given permutation (`new[h] = old[perm[h]]`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let weights = DVector::from_fn(self.k(), |h, _| self.weights[perm[h]]);
        let coefficients =
            DMatrix::from_fn(self.d(), self.k(), |i, h| self.coefficients[(i, perm[h])]);
        Self {
            weights,
            coefficients,
        }
    }

    /// Checks that `B` has full column rank.
    pub fn check_rank(&self) -> Result<()> {
        let sv = self.coefficients.singular_values();
        let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
        if self.k() > self.d() || min <= 1e-10 {
            return Err(Error::InvalidArgument(format!(
                "coefficient matrix is rank deficient (singular values {:?})",
                sv.as_slice()
            )));
        }
        Ok(())
    }

    /// Ground truth for experiments: standard normal coefficients and
    /// proportions drawn from a symmetric Dirichlet(100), i.e. uniform plus a
    /// small perturbation.
    pub fn random_ground_truth(k: usize, d: usize, rng: &mut impl Rng) -> Result<Self> {
        if k == 0 || k > d {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= k <= d, got k={k}, d={d}"
            )));
        }
        let gamma = Gamma::new(100.0, 1.0).expect("valid gamma");
        loop {
            let coefficients = DMatrix::from_fn(d, k, |_, _| rng.sample(StandardNormal));
            let g: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
            let total: f64 = g.iter().sum();
            let weights = DVector::from_iterator(k, g.iter().map(|v| v / total));
            let params = Self::new(weights, coefficients)?;
            if params.check_rank().is_ok() {
                return Ok(params);
            }
        }
    }
}

/// Observation-noise distribution with known second and third moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    Gaussian { variance: f64 },
    /// Uniform on `[-half_width, half_width]`.
    Uniform { half_width: f64 },
    /// Resamples from a fixed, mean-centered pool.
    Empirical { samples: Vec<f64> },
}

impl NoiseSpec {
    pub fn gaussian(variance: f64) -> Result<Self> {
        let n = NoiseSpec::Gaussian { variance };
        n.validate()?;
        Ok(n)
    }

    /// Builds an empirical noise spec, centering the pool to mean zero.
    pub fn empirical(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty noise pool".into()));
        }
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        Ok(NoiseSpec::Empirical {
            samples: samples.iter().map(|s| s - mean).collect(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            NoiseSpec::Gaussian { variance } => variance.is_finite() && *variance >= 0.0,
            NoiseSpec::Uniform { half_width } => half_width.is_finite() && *half_width >= 0.0,
            NoiseSpec::Empirical { samples } => {
                !samples.is_empty() && samples.iter().all(|s| s.is_finite())
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid noise spec {self:?}")))
        }
    }

    /// `E[eps^2]`.
    pub fn m2(&self) -> f64 {
        match self {
            NoiseSpec::Gaussian { variance } => *variance,
            NoiseSpec::Uniform { half_width } => half_width * half_width / 3.0,
            NoiseSpec::Empirical { samples } => {
                samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64
            }
        }
    }

    /// `E[eps^3]`.
    pub fn m3(&self) -> f64 {
        match self {
            NoiseSpec::Gaussian { .. } | NoiseSpec::Uniform { .. } => 0.0,
            NoiseSpec::Empirical { samples } => {
                samples.iter().map(|s| s * s * s).sum::<f64>() / samples.len() as f64
            }
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match self {
            NoiseSpec::Gaussian { variance } => {
                if *variance == 0.0 {
                    0.0
                } else {
                    let z: f64 = rng.sample(StandardNormal);
                    variance.sqrt() * z
                }
            }
            NoiseSpec::Uniform { half_width } => {
                if *half_width == 0.0 {
                    0.0
                } else {
                    rng.random_range(-half_width..=*half_width)
                }
            }
            NoiseSpec::Empirical { samples } => samples[rng.random_range(0..samples.len())],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Func {
    Sin,
    Cos,
    Exp,
    Abs,
}

#[derive(Clone, Debug, PartialEq)]
struct Factor {
    func: Option<Func>,
    var: usize,
    power: i32,
}

/// One feature expression: a coefficient times a product of (possibly
/// wrapped) powers of base coordinates, e.g. `t^4`, `t1*t2^2`, `cos(t2)`, `1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExpr {
    source: String,
    coeff: f64,
    factors: Vec<Factor>,
}

impl FeatureExpr {
    pub fn parse(src: &str, base_dim: usize) -> Result<Self> {
        let err = |reason: &str| Error::FeatureParse {
            expr: src.to_string(),
            reason: reason.to_string(),
        };
        let mut coeff = 1.0;
        let mut factors = Vec::new();
        let compact: String = src.chars().filter(|c| !c.is_whitespace()).collect();
        if compact.is_empty() {
            return Err(err("empty expression"));
        }
        for part in compact.split('*') {
            if part.is_empty() {
                return Err(err("empty factor"));
            }
            if let Ok(c) = part.parse::<f64>() {
                coeff *= c;
                continue;
            }
            let (base, power) = match part.rsplit_once('^') {
                Some((b, p)) if !b.ends_with(')') || b.contains('(') => {
                    let p: i32 = p.parse().map_err(|_| err("bad exponent"))?;
                    if p < 0 {
                        return Err(err("negative exponent"));
                    }
                    (b, p)
                }
                _ => (part, 1),
            };
            let (func, var_src) = if let Some(open) = base.find('(') {
                if !base.ends_with(')') {
                    return Err(err("unbalanced parenthesis"));
                }
                let f = match &base[..open] {
                    "sin" => Func::Sin,
                    "cos" => Func::Cos,
                    "exp" => Func::Exp,
                    "abs" => Func::Abs,
                    _ => return Err(err("unknown function")),
                };
                (Some(f), &base[open + 1..base.len() - 1])
            } else {
                (None, base)
            };
            let var = match var_src.strip_prefix('t') {
                Some("") if base_dim == 1 => 0,
                Some("") => return Err(err("bare `t` is ambiguous when b > 1")),
                Some(num) => {
                    let i: usize = num.parse().map_err(|_| err("bad variable index"))?;
                    if i == 0 || i > base_dim {
                        return Err(err("variable index out of range"));
                    }
                    i - 1
                }
                None => return Err(err("expected a number or a variable t, t1, t2, ...")),
            };
            factors.push(Factor { func, var, power });
        }
        Ok(Self {
            source: src.trim().to_string(),
            coeff,
            factors,
        })
    }

    pub fn eval(&self, t: &[f64]) -> f64 {
        self.factors.iter().fold(self.coeff, |acc, f| {
            let v = t[f.var];
            let inner = match f.func {
                None => v,
                Some(Func::Sin) => v.sin(),
                Some(Func::Cos) => v.cos(),
                Some(Func::Exp) => v.exp(),
                Some(Func::Abs) => v.abs(),
            };
            acc * inner.powi(f.power)
        })
    }
}

impl fmt::Display for FeatureExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

/// Closed interval `[lo, hi]` removed from every base coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

/// Maps base variables `t in [-1, 1]^b` to covariates `x in R^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    base_dim: usize,
    exprs: Vec<FeatureExpr>,
    excluded: Vec<Interval>,
}

impl FeatureMap {
    pub fn new<S: AsRef<str>>(base_dim: usize, exprs: &[S]) -> Result<Self> {
        if base_dim == 0 {
            return Err(Error::InvalidArgument("base dimension must be >= 1".into()));
        }
        if exprs.is_empty() {
            return Err(Error::InvalidArgument("feature map has no features".into()));
        }
        let exprs = exprs
            .iter()
            .map(|e| FeatureExpr::parse(e.as_ref(), base_dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            base_dim,
            exprs,
            excluded: Vec::new(),
        })
    }

    pub fn with_excluded(mut self, excluded: Vec<Interval>) -> Self {
        self.excluded = excluded;
        self
    }

    /// The held-out region used for misspecification runs.
    pub fn misspecified(self) -> Self {
        self.with_excluded(vec![
            Interval { lo: -0.5, hi: -0.25 },
            Interval { lo: 0.25, hi: 0.5 },
        ])
    }

    pub fn base_dim(&self) -> usize {
        self.base_dim
    }

    pub fn out_dim(&self) -> usize {
        self.exprs.len()
    }

    pub fn excluded(&self) -> &[Interval] {
        &self.excluded
    }

    pub fn expressions(&self) -> Vec<String> {
        self.exprs.iter().map(|e| e.to_string()).collect()
    }

    pub fn apply(&self, t: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.exprs.len(), self.exprs.iter().map(|e| e.eval(t)))
    }

    fn is_excluded(&self, t: &[f64]) -> bool {
        t.iter()
            .any(|&v| self.excluded.iter().any(|iv| v >= iv.lo && v <= iv.hi))
    }

    /// Errors if the excluded region leaves nothing of `[-1, 1]` to sample.
    fn check_support(&self) -> Result<()> {
        let mut ivs: Vec<(f64, f64)> = self
            .excluded
            .iter()
            .map(|iv| (iv.lo.max(-1.0), iv.hi.min(1.0)))
            .filter(|(lo, hi)| lo <= hi)
            .collect();
        ivs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut reach = -1.0;
        for (lo, hi) in ivs {
            if lo > reach {
                return Ok(());
            }
            reach = f64::max(reach, hi);
        }
        if reach < 1.0 {
            Ok(())
        } else {
            Err(Error::Sampling(
                "excluded region covers all of [-1, 1]".into(),
            ))
        }
    }

    /// Draws `t` uniformly from `[-1, 1]^b` minus the excluded region.
    pub fn sample_base(&self, rng: &mut impl Rng) -> Result<Vec<f64>> {
        const MAX_REJECTIONS: usize = 100_000;
        let mut t = vec![0.0; self.base_dim];
        for _ in 0..MAX_REJECTIONS {
            for v in t.iter_mut() {
                *v = rng.random_range(-1.0..=1.0);
            }
            if !self.is_excluded(&t) {
                return Ok(t);
            }
        }
        Err(Error::Sampling(format!(
            "no admissible point after {MAX_REJECTIONS} draws"
        )))
    }

    /// Draws `n` covariate vectors as rows of a matrix.
    pub fn sample_covariates(&self, n: usize, seed: u64) -> Result<DMatrix<f64>> {
        self.check_support()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = DMatrix::zeros(n, self.out_dim());
        for i in 0..n {
            let x = self.apply(&self.sample_base(&mut rng)?);
            xs.row_mut(i).copy_from(&x.transpose());
        }
        Ok(xs)
    }
}

/// Latent generation record for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEntry {
    pub component: usize,
    pub noise: f64,
}

/// Covariate/response pairs, one row of `xs` per record.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub xs: DMatrix<f64>,
    pub ys: DVector<f64>,
    pub trace: Option<Vec<TraceEntry>>,
    pub seed: u64,
}

impl Dataset {
    pub fn new(xs: DMatrix<f64>, ys: DVector<f64>) -> Result<Self> {
        if xs.nrows() != ys.len() {
            return Err(Error::Dimension(format!(
                "{} covariate rows vs {} responses",
                xs.nrows(),
                ys.len()
            )));
        }
        if xs.nrows() == 0 {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        Ok(Self {
            xs,
            ys,
            trace: None,
            seed: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.xs.nrows()
    }

    pub fn d(&self) -> usize {
        self.xs.ncols()
    }

    pub fn x(&self, i: usize) -> DVector<f64> {
        self.xs.row(i).transpose()
    }

    /// Records `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Dataset {
        Dataset {
            xs: self.xs.rows(start, len).into_owned(),
            ys: self.ys.rows(start, len).into_owned(),
            trace: self
                .trace
                .as_ref()
                .map(|t| t[start..start + len].to_vec()),
            seed: self.seed,
        }
    }

    /// CSV with header `x_1,...,x_d,y[,h,eps]`; floats use 17 significant digits.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        let mut header: Vec<String> = (1..=self.d()).map(|i| format!("x_{i}")).collect();
        header.push("y".into());
        if self.trace.is_some() {
            header.push("h".into());
            header.push("eps".into());
        }
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.n() {
            let mut row: Vec<String> = self.xs.row(i).iter().map(|&v| fmt17(v)).collect();
            row.push(fmt17(self.ys[i]));
            if let Some(trace) = &self.trace {
                row.push(trace[i].component.to_string());
                row.push(fmt17(trace[i].noise));
            }
            writeln!(w, "{}", row.join(","))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::InvalidArgument("empty dataset file".into()))?
            .split(',')
            .collect();
        let y_col = header
            .iter()
            .position(|h| *h == "y")
            .ok_or_else(|| Error::InvalidArgument("missing `y` column".into()))?;
        let has_trace = header.len() == y_col + 3;
        let bad = |line: usize| Error::InvalidArgument(format!("malformed row {line}"));
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut trace = Vec::new();
        for (ln, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != header.len() {
                return Err(bad(ln + 2));
            }
            for c in &cells[..y_col] {
                xs.push(c.trim().parse::<f64>().map_err(|_| bad(ln + 2))?);
            }
            ys.push(cells[y_col].trim().parse::<f64>().map_err(|_| bad(ln + 2))?);
            if has_trace {
                trace.push(TraceEntry {
                    component: cells[y_col + 1].trim().parse().map_err(|_| bad(ln + 2))?,
                    noise: cells[y_col + 2].trim().parse().map_err(|_| bad(ln + 2))?,
                });
            }
        }
        let n = ys.len();
        let mut ds = Dataset::new(DMatrix::from_row_slice(n, y_col, &xs), DVector::from_vec(ys))?;
        if has_trace {
            ds.trace = Some(trace);
        }
        Ok(ds)
    }
}

/// Draws `n` i.i.d. records from the mixture. Deterministic given `seed`.
pub fn sample_dataset(
    params: &MixParams,
    fmap: &FeatureMap,
    noise: &NoiseSpec,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    if fmap.out_dim() != params.d() {
        return Err(Error::Dimension(format!(
            "feature map produces {} features, parameters have d={}",
            fmap.out_dim(),
            params.d()
        )));
    }
    noise.validate()?;
    fmap.check_support()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = params.k();
    let cumulative: Vec<f64> = params
        .weights()
        .iter()
        .scan(0.0, |acc, &w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    let mut xs = DMatrix::zeros(n, params.d());
    let mut ys = DVector::zeros(n);
    let mut trace = Vec::with_capacity(n);
    for i in 0..n {
        let x = fmap.apply(&fmap.sample_base(&mut rng)?);
        let u: f64 = rng.random::<f64>() * cumulative[k - 1];
        let h = cumulative.iter().position(|&c| u < c).unwrap_or(k - 1);
        let eps = noise.sample(&mut rng);
        let mean = params.coefficients().column(h).dot(&x);
        let y = mean + eps;
        xs.row_mut(i).copy_from(&x.transpose());
        ys[i] = y;
        // store the realized residual so that y - beta_h . x reproduces it bit-exactly
        trace.push(TraceEntry {
            component: h,
            noise: y - mean,
        });
    }
    Ok(Dataset {
        xs,
        ys,
        trace: Some(trace),
        seed,
    })
}

/// Exact compound moment `M_p = sum_h pi_h beta_h^{⊗p}`.
pub fn compound_moment(params: &MixParams, order: usize) -> Result<SymTensor> {
    let betas: Vec<DVector<f64>> = (0..params.k()).map(|h| params.beta(h)).collect();
    SymTensor::weighted_power_sum(params.weights().as_slice(), &betas, order)
}

/// Evaluates `cvec(x^{⊗p})` directly from `x` without forming the tensor.
#[derive(Clone, Debug)]
pub struct PowerFeatures {
    order: usize,
    dim: usize,
    terms: Vec<(Vec<usize>, f64)>,
}

impl PowerFeatures {
    pub fn new(dim: usize, order: usize) -> Result<Self> {
        if !(1..=3).contains(&order) {
            return Err(Error::UnsupportedOrder(order));
        }
        let terms = count_profiles(dim, order)
            .into_iter()
            .map(|cp| (cp.indices, (cp.multiplicity as f64).sqrt()))
            .collect();
        Ok(Self { order, dim, terms })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        for (slot, (idx, scale)) in out.iter_mut().zip(&self.terms) {
            *slot = idx.iter().fold(*scale, |acc, &i| acc * x[i]);
        }
    }

    /// Rows of the returned matrix are `cvec(x_i^{⊗p})` for rows `x_i` of `xs`.
    pub fn design(&self, xs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(xs.nrows(), self.len());
        let mut buf = vec![0.0; self.len()];
        let mut row = vec![0.0; xs.ncols()];
        for i in 0..xs.nrows() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = xs[(i, j)];
            }
            self.eval_into(&row, &mut buf);
            for (j, &v) in buf.iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        out
    }

    /// `(1/n) sum_i z_i z_i^T` and `(1/n) sum_i r_i z_i` with `z_i = cvec(x_i^{⊗p})`,
    /// accumulated in row blocks to bound memory.
    pub fn moments(&self, xs: &DMatrix<f64>, targets: Option<&DVector<f64>>) -> (DMatrix<f64>, DVector<f64>) {
        const BLOCK: usize = 4096;
        let n = xs.nrows();
        let m = self.len();
        let mut gram = DMatrix::zeros(m, m);
        let mut rhs = DVector::zeros(m);
        let mut start = 0;
        while start < n {
            let len = BLOCK.min(n - start);
            let z = self.design(&xs.rows(start, len).into_owned());
            gram.gemm_tr(1.0, &z, &z, 1.0);
            if let Some(r) = targets {
                rhs.gemv_tr(1.0, &z, &r.rows(start, len), 1.0);
            }
            start += len;
        }
        let inv_n = 1.0 / n as f64;
        gram *= inv_n;
        rhs *= inv_n;
        // exact symmetry for the eigen solvers
        gram = (&gram + gram.transpose()) * 0.5;
        (gram, rhs)
    }
}

/// Outcome of the moment identifiability diagnostic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentifiabilityReport {
    pub order: usize,
    pub sigma_min: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Smallest eigenvalue of `(1/n) sum_i cvec(x_i^{⊗p}) cvec(x_i^{⊗p})^T`.
pub fn identifiability_check(
    xs: &DMatrix<f64>,
    order: usize,
    threshold: f64,
) -> Result<IdentifiabilityReport> {
    if xs.nrows() == 0 {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let feats = PowerFeatures::new(xs.ncols(), order)?;
    let (gram, _) = feats.moments(xs, None);
    let sigma_min = gram
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    Ok(IdentifiabilityReport {
        order,
        sigma_min,
        threshold,
        pass: sigma_min > threshold,
    })
}

/// Monte-Carlo version of [`identifiability_check`] on a feature map.
pub fn identifiability_check_map(
    fmap: &FeatureMap,
    n_mc: usize,
    order: usize,
    seed: u64,
    threshold: f64,
) -> Result<IdentifiabilityReport> {
    let xs = fmap.sample_covariates(n_mc, seed)?;
    identifiability_check(&xs, order, threshold)
}
