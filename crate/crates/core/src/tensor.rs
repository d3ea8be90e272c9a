//! Dense symmetric tensors of order 1 to 3.
//!
//! Entries are stored as a flat row-major array of length `dim^order`, so the
//! storage order coincides with the lexicographic vectorization
//! `(X_111, X_112, ..., X_ddd)`. Collapsed vectorizations are computed on
//! demand from the dense storage.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const MAX_ORDER: usize = 3;

fn check_order(order: usize) -> Result<()> {
    if (1..=MAX_ORDER).contains(&order) {
        Ok(())
    } else {
        Err(Error::UnsupportedOrder(order))
    }
}

/// Dense order-`p` array over `R^d`, not necessarily symmetric.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    order: usize,
    dim: usize,
    data: Vec<f64>,
}

/// A tensor whose entries are invariant under any permutation of the indices.
///
/// Only constructors that produce exactly symmetric storage are exposed.
#[derive(Clone, Debug, PartialEq)]
pub struct SymTensor(Tensor);

/// Mode-`i` matricization: row `j` holds every entry whose `i`-th index is `j`,
/// columns run over the remaining indices in lexicographic order.
#[derive(Clone, Debug, PartialEq)]
pub struct Unfolding {
    pub mode: usize,
    pub matrix: DMatrix<f64>,
}

/// One coordinate of a collapsed vectorization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountProfile {
    /// Sorted index tuple `i_1 <= ... <= i_p` representing the multiset.
    pub indices: Vec<usize>,
    /// `counts[i]` is the number of times index `i` occurs.
    pub counts: Vec<usize>,
    /// `|K(c)|`, the number of distinct index tuples with this profile.
    pub multiplicity: usize,
}

/// Collapsed vectorization of a tensor, one value per count profile.
#[derive(Clone, Debug, PartialEq)]
pub struct CollapsedVec {
    pub order: usize,
    pub dim: usize,
    pub values: DVector<f64>,
}

/// `N(d, p) = C(d + p - 1, p)`.
pub fn collapsed_len(dim: usize, order: usize) -> usize {
    let mut num: u128 = 1;
    let mut den: u128 = 1;
    for i in 0..order as u128 {
        num *= dim as u128 + i;
        den *= i + 1;
    }
    (num / den) as usize
}

fn factorial(n: usize) -> usize {
    (1..=n).product()
}

/// Count profiles of order `p` over `d` indices.
///
/// Ordered lexicographically by the sorted index tuple, which is the same as
/// descending lexicographic order on the count vectors `(c_1, ..., c_d)`.
pub fn count_profiles(dim: usize, order: usize) -> Vec<CountProfile> {
    let mut out = Vec::with_capacity(collapsed_len(dim, order));
    let mut current = Vec::with_capacity(order);
    fn rec(
        dim: usize,
        order: usize,
        start: usize,
        current: &mut Vec<usize>,
        out: &mut Vec<CountProfile>,
    ) {
        if current.len() == order {
            let mut counts = vec![0; dim];
            for &i in current.iter() {
                counts[i] += 1;
            }
            let multiplicity =
                factorial(order) / counts.iter().map(|&c| factorial(c)).product::<usize>();
            out.push(CountProfile {
                indices: current.clone(),
                counts,
                multiplicity,
            });
            return;
        }
        for i in start..dim {
            current.push(i);
            rec(dim, order, i, current, out);
            current.pop();
        }
    }
    rec(dim, order, 0, &mut current, &mut out);
    out
}

/// Distinct permutations of an index tuple.
fn distinct_permutations(idx: &[usize]) -> Vec<Vec<usize>> {
    let mut perms: Vec<Vec<usize>> = match idx.len() {
        1 => vec![idx.to_vec()],
        2 => vec![vec![idx[0], idx[1]], vec![idx[1], idx[0]]],
        3 => {
            let (a, b, c) = (idx[0], idx[1], idx[2]);
            vec![
                vec![a, b, c],
                vec![a, c, b],
                vec![b, a, c],
                vec![b, c, a],
                vec![c, a, b],
                vec![c, b, a],
            ]
        }
        _ => unreachable!("order checked on construction"),
    };
    perms.sort_unstable();
    perms.dedup();
    perms
}

impl Tensor {
    pub fn zeros(order: usize, dim: usize) -> Result<Self> {
        check_order(order)?;
        if dim == 0 {
            return Err(Error::Dimension("tensor dimension must be >= 1".into()));
        }
        Ok(Self {
            order,
            dim,
            data: vec![0.0; dim.pow(order as u32)],
        })
    }

    pub fn from_vec(order: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        check_order(order)?;
        if dim == 0 || data.len() != dim.pow(order as u32) {
            return Err(Error::Dimension(format!(
                "expected {} entries for order {order}, dim {dim}; got {}",
                dim.pow(order as u32),
                data.len()
            )));
        }
        Ok(Self { order, dim, data })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.order);
        idx.iter().fold(0, |acc, &i| acc * self.dim + i)
    }

    fn unravel(&self, mut flat: usize, out: &mut [usize]) {
        for slot in out.iter_mut().rev() {
            *slot = flat % self.dim;
            flat /= self.dim;
        }
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.order != other.order || self.dim != other.dim {
            return Err(Error::Dimension(format!(
                "shape (order {}, dim {}) vs (order {}, dim {})",
                self.order, self.dim, other.order, other.dim
            )));
        }
        Ok(())
    }

    /// Generalized dot product `sum_k X_k Y_k`.
    pub fn inner(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Lexicographic flattening `(X_1..1, X_1..2, ..., X_d..d)`.
    pub fn vvec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.data)
    }

    /// Collapsed vectorization. Preserves inner products whenever at least
    /// one of the two operands is symmetric.
    pub fn cvec(&self) -> CollapsedVec {
        let values: Vec<f64> = count_profiles(self.dim, self.order)
            .iter()
            .map(|cp| {
                let sum: f64 = distinct_permutations(&cp.indices)
                    .iter()
                    .map(|k| self.get(k))
                    .sum();
                sum / (cp.multiplicity as f64).sqrt()
            })
            .collect();
        CollapsedVec {
            order: self.order,
            dim: self.dim,
            values: DVector::from_vec(values),
        }
    }

    pub fn unfold(&self, mode: usize) -> Result<Unfolding> {
        if mode >= self.order {
            return Err(Error::ModeOutOfRange {
                mode,
                order: self.order,
            });
        }
        let d = self.dim;
        let cols = d.pow(self.order as u32 - 1);
        let mut matrix = DMatrix::zeros(d, cols);
        let mut idx = vec![0; self.order];
        for (flat, &v) in self.data.iter().enumerate() {
            self.unravel(flat, &mut idx);
            let col = idx
                .iter()
                .enumerate()
                .filter(|&(m, _)| m != mode)
                .fold(0, |acc, (_, &i)| acc * d + i);
            matrix[(idx[mode], col)] = v;
        }
        Ok(Unfolding { mode, matrix })
    }

    /// Inverse of [`Tensor::unfold`].
    pub fn refold(unfolding: &Unfolding, order: usize) -> Result<Tensor> {
        check_order(order)?;
        let d = unfolding.matrix.nrows();
        let mode = unfolding.mode;
        if mode >= order {
            return Err(Error::ModeOutOfRange { mode, order });
        }
        if unfolding.matrix.ncols() != d.pow(order as u32 - 1) {
            return Err(Error::Dimension(format!(
                "unfolding of shape {}x{} is not a mode-{mode} unfolding of order {order}",
                d,
                unfolding.matrix.ncols()
            )));
        }
        let mut out = Tensor::zeros(order, d)?;
        let mut idx = vec![0; order];
        for flat in 0..out.data.len() {
            out.unravel(flat, &mut idx);
            let col = idx
                .iter()
                .enumerate()
                .filter(|&(m, _)| m != mode)
                .fold(0, |acc, (_, &i)| acc * d + i);
            out.data[flat] = unfolding.matrix[(idx[mode], col)];
        }
        Ok(out)
    }

    fn unfolding_singular_values(&self) -> Vec<DVector<f64>> {
        (0..self.order)
            .map(|m| {
                self.unfold(m)
                    .expect("mode in range")
                    .matrix
                    .singular_values()
            })
            .collect()
    }

    /// Average nuclear norm over all mode unfoldings.
    pub fn nuclear_norm(&self) -> f64 {
        let svs = self.unfolding_singular_values();
        svs.iter().map(|s| s.sum()).sum::<f64>() / self.order as f64
    }

    /// Average operator norm over all mode unfoldings.
    pub fn op_norm(&self) -> f64 {
        let svs = self.unfolding_singular_values();
        svs.iter().map(|s| s.max()).sum::<f64>() / self.order as f64
    }

    /// Projection onto symmetric tensors: each entry becomes the mean over
    /// its permutation orbit. Orbits that are already constant are copied
    /// unchanged, which makes the map exactly idempotent.
    pub fn symmetrize(&self) -> SymTensor {
        let mut out = self.clone();
        for cp in count_profiles(self.dim, self.order) {
            let orbit = distinct_permutations(&cp.indices);
            let first = self.get(&orbit[0]);
            if orbit.iter().all(|k| self.get(k) == first) {
                continue;
            }
            let mean = orbit.iter().map(|k| self.get(k)).sum::<f64>() / orbit.len() as f64;
            for k in &orbit {
                out.set(k, mean);
            }
        }
        SymTensor(out)
    }

    /// Largest absolute deviation between an entry and its permuted copies.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for cp in count_profiles(self.dim, self.order) {
            let orbit = distinct_permutations(&cp.indices);
            let first = self.get(&orbit[0]);
            for k in &orbit[1..] {
                worst = worst.max((self.get(k) - first).abs());
            }
        }
        worst
    }

    /// `result_{a..} = sum_{i..} X_{i..} W_{i a} ...`, applying `w` along every mode.
    pub fn multilinear_map(&self, w: &DMatrix<f64>) -> Result<Tensor> {
        let (d, k) = (self.dim, w.ncols());
        if w.nrows() != d {
            return Err(Error::Dimension(format!(
                "map has {} rows, tensor dim is {d}",
                w.nrows()
            )));
        }
        let x = &self.data;
        let data = match self.order {
            1 => (w.transpose() * DVector::from_column_slice(x)).as_slice().to_vec(),
            2 => {
                let m = DMatrix::from_row_slice(d, d, x);
                let r = w.transpose() * m * w;
                // row-major flattening
                r.transpose().as_slice().to_vec()
            }
            _ => {
                // contract one mode at a time: (i,j,l) -> (a,j,l) -> (a,b,l) -> (a,b,c)
                let mut s1 = vec![0.0; k * d * d];
                for a in 0..k {
                    for i in 0..d {
                        let wia = w[(i, a)];
                        if wia == 0.0 {
                            continue;
                        }
                        for jl in 0..d * d {
                            s1[a * d * d + jl] += wia * x[i * d * d + jl];
                        }
                    }
                }
                let mut s2 = vec![0.0; k * k * d];
                for a in 0..k {
                    for b in 0..k {
                        for j in 0..d {
                            let wjb = w[(j, b)];
                            for l in 0..d {
                                s2[(a * k + b) * d + l] += wjb * s1[a * d * d + j * d + l];
                            }
                        }
                    }
                }
                let mut s3 = vec![0.0; k * k * k];
                for ab in 0..k * k {
                    for c in 0..k {
                        s3[ab * k + c] = (0..d).map(|l| s2[ab * d + l] * w[(l, c)]).sum();
                    }
                }
                s3
            }
        };
        Tensor::from_vec(self.order, k, data)
    }
}

impl CollapsedVec {
    /// Value at the coordinate with the given count vector, if it exists.
    pub fn get(&self, counts: &[usize]) -> Option<f64> {
        count_profiles(self.dim, self.order)
            .iter()
            .position(|cp| cp.counts == counts)
            .map(|i| self.values[i])
    }

    pub fn dot(&self, other: &CollapsedVec) -> f64 {
        self.values.dot(&other.values)
    }
}

impl Deref for SymTensor {
    type Target = Tensor;

    fn deref(&self) -> &Tensor {
        &self.0
    }
}

impl SymTensor {
    pub fn zeros(order: usize, dim: usize) -> Result<Self> {
        Tensor::zeros(order, dim).map(SymTensor)
    }

    /// `x^{⊗p}`: entry `(i_1, ..., i_p)` is `x_{i_1} ... x_{i_p}`.
    pub fn tensor_power(x: &DVector<f64>, order: usize) -> Result<Self> {
        check_order(order)?;
        let d = x.len();
        if d == 0 {
            return Err(Error::Dimension("empty vector".into()));
        }
        let mut t = Tensor::zeros(order, d)?;
        let mut idx = vec![0; order];
        for flat in 0..t.data.len() {
            t.unravel(flat, &mut idx);
            // multiply in sorted index order so every permutation rounds identically
            let mut sorted = idx.clone();
            sorted.sort_unstable();
            t.data[flat] = sorted.iter().map(|&i| x[i]).product();
        }
        Ok(SymTensor(t))
    }

    pub fn from_vector(x: &DVector<f64>) -> Result<Self> {
        Self::tensor_power(x, 1)
    }

    /// Wraps a matrix that must be exactly symmetric.
    pub fn from_symmetric_matrix(m: &DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Dimension(format!(
                "matrix is {}x{}, not square",
                m.nrows(),
                m.ncols()
            )));
        }
        if m != &m.transpose() {
            return Err(Error::InvalidArgument("matrix is not symmetric".into()));
        }
        let d = m.nrows();
        Tensor::from_vec(2, d, m.transpose().as_slice().to_vec()).map(SymTensor)
    }

    /// Inverse of [`Tensor::cvec`] on symmetric tensors.
    pub fn from_cvec(c: &CollapsedVec) -> Result<Self> {
        let profiles = count_profiles(c.dim, c.order);
        if profiles.len() != c.values.len() {
            return Err(Error::Dimension(format!(
                "collapsed vector has {} values, expected {}",
                c.values.len(),
                profiles.len()
            )));
        }
        let mut t = Tensor::zeros(c.order, c.dim)?;
        for (cp, &v) in profiles.iter().zip(c.values.iter()) {
            let entry = v / (cp.multiplicity as f64).sqrt();
            for k in distinct_permutations(&cp.indices) {
                t.set(&k, entry);
            }
        }
        Ok(SymTensor(t))
    }

    /// `sum_h w_h x_h^{⊗p}`.
    pub fn weighted_power_sum(
        weights: &[f64],
        vectors: &[DVector<f64>],
        order: usize,
    ) -> Result<Self> {
        let first = vectors
            .first()
            .ok_or_else(|| Error::InvalidArgument("no vectors".into()))?;
        let mut acc = SymTensor::zeros(order, first.len())?;
        for (&w, v) in weights.iter().zip(vectors) {
            acc.axpy(w, &SymTensor::tensor_power(v, order)?)?;
        }
        Ok(acc)
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn scale(&mut self, alpha: f64) {
        self.0.data.iter_mut().for_each(|v| *v *= alpha);
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &SymTensor) -> Result<()> {
        self.0.check_same_shape(&other.0)?;
        for (a, b) in self.0.data.iter_mut().zip(&other.0.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &SymTensor) -> Result<SymTensor> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    /// Nuclear norm computed from the mode-0 unfolding (all unfoldings coincide).
    pub fn nuclear_norm(&self) -> f64 {
        self.unfold(0)
            .expect("mode 0 exists")
            .matrix
            .singular_values()
            .sum()
    }

    /// Operator norm computed from the mode-0 unfolding.
    pub fn op_norm(&self) -> f64 {
        self.unfold(0)
            .expect("mode 0 exists")
            .matrix
            .singular_values()
            .max()
    }

    /// Multilinear map along every mode; symmetrized to remove rounding asymmetry.
    pub fn multilinear_map(&self, w: &DMatrix<f64>) -> Result<SymTensor> {
        Ok(self.0.multilinear_map(w)?.symmetrize())
    }

    pub fn to_vector(&self) -> Result<DVector<f64>> {
        if self.order != 1 {
            return Err(Error::Dimension(format!("order {} is not a vector", self.order)));
        }
        Ok(DVector::from_column_slice(&self.data))
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.order != 2 {
            return Err(Error::Dimension(format!("order {} is not a matrix", self.order)));
        }
        Ok(DMatrix::from_row_slice(self.dim, self.dim, &self.data))
    }

    /// `T(I, u, u)` for an order-3 tensor.
    pub fn contract_twice(&self, u: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(self.order, 3);
        let d = self.dim;
        DVector::from_fn(d, |a, _| {
            let mut s = 0.0;
            for b in 0..d {
                let row = &self.data[(a * d + b) * d..(a * d + b + 1) * d];
                let inner: f64 = row.iter().zip(u.iter()).map(|(t, uc)| t * uc).sum();
                s += u[b] * inner;
            }
            s
        })
    }

    /// `T(u, u, u)` for an order-3 tensor.
    pub fn contract_thrice(&self, u: &DVector<f64>) -> f64 {
        self.contract_twice(u).dot(u)
    }
}
