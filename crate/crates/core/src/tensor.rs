//! Dense symmetric tensor algebra.
//!
//! A symmetric tensor of order `t` over `R^d` is stored by its distinct
//! entries, keyed by non-decreasing multi-indices of length `t` over `[d]`.
//! Evaluation against rank-one directions, symmetrized outer products,
//! weighted moment tensors and square flattenings are the operations the
//! rest of the crate is built on.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use once_cell::sync::Lazy;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("order mismatch: expected {expected}, got {got}")]
    OrderMismatch { expected: usize, got: usize },
    #[error("flattening requires an even order, got {0}")]
    OddOrder(usize),
    #[error("weights must sum to a positive value")]
    ZeroTotalWeight,
    #[error("empty point set")]
    EmptyPointSet,
}

/// Index table for one (dim, order) shape, shared between tensors.
///
/// `keys[r]` is the r-th non-decreasing multi-index in lexicographic order;
/// `multiplicity[r]` counts its distinct permutations (t! / prod of
/// repetition factorials).
#[derive(Debug)]
pub struct IndexTable {
    pub dim: usize,
    pub order: usize,
    pub keys: Vec<Vec<u8>>,
    pub multiplicity: Vec<f64>,
    rank: HashMap<Vec<u8>, usize>,
}

impl IndexTable {
    fn build(dim: usize, order: usize) -> Self {
        let mut keys = Vec::new();
        let mut cur = vec![0u8; order];
        enumerate_keys(dim, order, 0, 0, &mut cur, &mut keys);
        let mut rank = HashMap::with_capacity(keys.len());
        let mut multiplicity = Vec::with_capacity(keys.len());
        for (r, k) in keys.iter().enumerate() {
            rank.insert(k.clone(), r);
            multiplicity.push(perm_count(k));
        }
        IndexTable {
            dim,
            order,
            keys,
            multiplicity,
            rank,
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Rank of a multi-index; sorts a copy, so any permutation is accepted.
    pub fn rank_of(&self, idx: &[u8]) -> usize {
        debug_assert_eq!(idx.len(), self.order);
        let mut k = idx.to_vec();
        k.sort_unstable();
        self.rank[&k]
    }
}

fn enumerate_keys(
    dim: usize,
    order: usize,
    pos: usize,
    min: u8,
    cur: &mut Vec<u8>,
    out: &mut Vec<Vec<u8>>,
) {
    if pos == order {
        out.push(cur.clone());
        return;
    }
    for v in min..dim as u8 {
        cur[pos] = v;
        enumerate_keys(dim, order, pos + 1, v, cur, out);
    }
}

/// Number of distinct permutations of a sorted multi-index.
fn perm_count(key: &[u8]) -> f64 {
    let mut count = factorial(key.len());
    let mut i = 0;
    while i < key.len() {
        let mut j = i;
        while j < key.len() && key[j] == key[i] {
            j += 1;
        }
        count /= factorial(j - i);
        i = j;
    }
    count
}

pub fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc.round()
}

static TABLE_CACHE: Lazy<Mutex<HashMap<(usize, usize), Arc<IndexTable>>>> =
    Lazy::new(|| Mutex::new(HashMap::new()));

pub fn index_table(dim: usize, order: usize) -> Arc<IndexTable> {
    let mut cache = TABLE_CACHE.lock().unwrap();
    cache
        .entry((dim, order))
        .or_insert_with(|| Arc::new(IndexTable::build(dim, order)))
        .clone()
}

/// Dense symmetric tensor of a given order and dimension.
#[derive(Debug, Clone)]
pub struct SymmetricTensor {
    table: Arc<IndexTable>,
    entries: Vec<f64>,
}

impl SymmetricTensor {
    pub fn zeros(dim: usize, order: usize) -> Self {
        let table = index_table(dim, order);
        let entries = vec![0.0; table.len()];
        SymmetricTensor { table, entries }
    }

    /// Order-0 tensor holding a scalar.
    pub fn scalar(dim: usize, value: f64) -> Self {
        let mut t = Self::zeros(dim, 0);
        t.entries[0] = value;
        t
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        let mut t = Self::zeros(v.len(), 1);
        for i in 0..v.len() {
            t.entries[i] = v[i];
        }
        t
    }

    /// Order-2 tensor from a symmetric matrix.
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let d = m.nrows();
        assert_eq!(d, m.ncols(), "matrix must be square");
        let mut t = Self::zeros(d, 2);
        for r in 0..t.table.len() {
            let k = &t.table.keys[r];
            t.entries[r] = 0.5 * (m[(k[0] as usize, k[1] as usize)] + m[(k[1] as usize, k[0] as usize)]);
        }
        t
    }

    /// Order-2 tensor back to a symmetric matrix.
    pub fn to_matrix(&self) -> Result<DMatrix<f64>, TensorError> {
        if self.order() != 2 {
            return Err(TensorError::OrderMismatch {
                expected: 2,
                got: self.order(),
            });
        }
        let d = self.dim();
        let mut m = DMatrix::zeros(d, d);
        for r in 0..self.table.len() {
            let k = &self.table.keys[r];
            m[(k[0] as usize, k[1] as usize)] = self.entries[r];
            m[(k[1] as usize, k[0] as usize)] = self.entries[r];
        }
        Ok(m)
    }

    /// v^{⊗t}.
    pub fn rank_one(v: &DVector<f64>, order: usize) -> Self {
        let mut t = Self::zeros(v.len(), order);
        for r in 0..t.table.len() {
            let mut p = 1.0;
            for &i in &t.table.keys[r] {
                p *= v[i as usize];
            }
            t.entries[r] = p;
        }
        t
    }

    /// Fully symmetric identity tensor of even order 2k: Sym(I^{⊗k}),
    /// the unique symmetric tensor with ⟨T, v^{⊗2k}⟩ = ‖v‖^{2k}.
    pub fn identity(dim: usize, order: usize) -> Self {
        assert!(order % 2 == 0, "identity tensor needs an even order");
        let k = order / 2;
        if k == 0 {
            return Self::scalar(dim, 1.0);
        }
        let eye = Self::from_matrix(&DMatrix::identity(dim, dim));
        let mut acc = eye.clone();
        for _ in 1..k {
            acc = acc.sym_outer(&eye).expect("same dim");
        }
        acc
    }

    pub fn dim(&self) -> usize {
        self.table.dim
    }

    pub fn order(&self) -> usize {
        self.table.order
    }

    pub fn table(&self) -> &IndexTable {
        &self.table
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn entry(&self, idx: &[u8]) -> f64 {
        self.entries[self.table.rank_of(idx)]
    }

    pub fn set_entry(&mut self, idx: &[u8], value: f64) {
        let r = self.table.rank_of(idx);
        self.entries[r] = value;
    }

    pub fn scale(&mut self, c: f64) {
        for e in &mut self.entries {
            *e *= c;
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut t = self.clone();
        t.scale(c);
        t
    }

    /// self += c * other (same shape).
    pub fn add_scaled(&mut self, c: f64, other: &Self) -> Result<(), TensorError> {
        self.check_same_shape(other)?;
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            *a += c * b;
        }
        Ok(())
    }

    fn check_same_shape(&self, other: &Self) -> Result<(), TensorError> {
        if self.dim() != other.dim() {
            return Err(TensorError::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        if self.order() != other.order() {
            return Err(TensorError::OrderMismatch {
                expected: self.order(),
                got: other.order(),
            });
        }
        Ok(())
    }

    /// Frobenius norm over the full (permutation-expanded) entry set.
    pub fn frobenius_norm(&self) -> f64 {
        self.entries
            .iter()
            .zip(&self.table.multiplicity)
            .map(|(e, m)| m * e * e)
            .sum::<f64>()
            .sqrt()
    }

    /// Frobenius inner product ⟨A, B⟩ over the full entry set.
    pub fn frobenius_dot(&self, other: &Self) -> Result<f64, TensorError> {
        self.check_same_shape(other)?;
        Ok(self
            .entries
            .iter()
            .zip(&other.entries)
            .zip(&self.table.multiplicity)
            .map(|((a, b), m)| m * a * b)
            .sum())
    }

    /// ⟨T, v^{⊗t}⟩.
    pub fn eval_direction(&self, v: &DVector<f64>) -> Result<f64, TensorError> {
        if v.len() != self.dim() {
            return Err(TensorError::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        let mut acc = 0.0;
        for r in 0..self.table.len() {
            let mut p = self.table.multiplicity[r] * self.entries[r];
            if p == 0.0 {
                continue;
            }
            for &i in &self.table.keys[r] {
                p *= v[i as usize];
            }
            acc += p;
        }
        Ok(acc)
    }

    /// Gradient of the polynomial q(u) = ⟨T, u^{⊗t}⟩.
    pub fn poly_gradient(&self, u: &DVector<f64>) -> DVector<f64> {
        let d = self.dim();
        let mut g = DVector::zeros(d);
        for r in 0..self.table.len() {
            let coeff = self.table.multiplicity[r] * self.entries[r];
            if coeff == 0.0 {
                continue;
            }
            let key = &self.table.keys[r];
            // d/du_i of the monomial u^key
            let mut j = 0;
            while j < key.len() {
                let i = key[j] as usize;
                let mut cnt = 0;
                while j < key.len() && key[j] as usize == i {
                    cnt += 1;
                    j += 1;
                }
                let mut p = coeff * cnt as f64;
                let mut taken = false;
                for &q in key.iter() {
                    if q as usize == i && !taken {
                        taken = true;
                        continue;
                    }
                    p *= u[q as usize];
                }
                g[i] += p;
            }
        }
        g
    }

    /// Hessian of the polynomial q(u) = ⟨T, u^{⊗t}⟩.
    pub fn poly_hessian(&self, u: &DVector<f64>) -> DMatrix<f64> {
        let d = self.dim();
        let mut h = DMatrix::zeros(d, d);
        for r in 0..self.table.len() {
            let coeff = self.table.multiplicity[r] * self.entries[r];
            if coeff == 0.0 {
                continue;
            }
            let key = &self.table.keys[r];
            // distinct values with counts
            let mut vals: Vec<(usize, usize)> = Vec::new();
            for &q in key.iter() {
                let q = q as usize;
                match vals.last_mut() {
                    Some((v, c)) if *v == q => *c += 1,
                    _ => vals.push((q, 1)),
                }
            }
            let monom_without = |skip: &[(usize, usize)]| -> f64 {
                let mut p = 1.0;
                for &(v, c) in &vals {
                    let removed: usize = skip
                        .iter()
                        .filter(|(sv, _)| *sv == v)
                        .map(|(_, sc)| *sc)
                        .sum();
                    for _ in 0..(c - removed) {
                        p *= u[v];
                    }
                }
                p
            };
            for a in 0..vals.len() {
                let (i, ci) = vals[a];
                if ci >= 2 {
                    h[(i, i)] += coeff * (ci * (ci - 1)) as f64 * monom_without(&[(i, 2)]);
                }
                for b in (a + 1)..vals.len() {
                    let (j, cj) = vals[b];
                    let term = coeff * (ci * cj) as f64 * monom_without(&[(i, 1), (j, 1)]);
                    h[(i, j)] += term;
                    h[(j, i)] += term;
                }
            }
        }
        h
    }

    /// Weighted central moment tensor: sum_i w_i (x_i - center)^{⊗t} / sum_i w_i.
    pub fn moment_tensor(
        points: &[DVector<f64>],
        weights: &[f64],
        center: &DVector<f64>,
        order: usize,
    ) -> Result<Self, TensorError> {
        if points.is_empty() {
            return Err(TensorError::EmptyPointSet);
        }
        let d = center.len();
        for p in points {
            if p.len() != d {
                return Err(TensorError::DimensionMismatch {
                    expected: d,
                    got: p.len(),
                });
            }
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(TensorError::ZeroTotalWeight);
        }
        let mut t = Self::zeros(d, order);
        let mut centered = DVector::zeros(d);
        for (p, &w) in points.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            for i in 0..d {
                centered[i] = p[i] - center[i];
            }
            for r in 0..t.table.len() {
                let mut prod = w;
                for &i in &t.table.keys[r] {
                    prod *= centered[i as usize];
                }
                t.entries[r] += prod;
            }
        }
        t.scale(1.0 / total);
        Ok(t)
    }

    /// Symmetrized outer product: ⟨Sym(a⊗b), v^{⊗(s+t)}⟩ = ⟨a, v^{⊗s}⟩⟨b, v^{⊗t}⟩.
    pub fn sym_outer(&self, other: &Self) -> Result<Self, TensorError> {
        if self.dim() != other.dim() {
            return Err(TensorError::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        let s = self.order();
        let t = other.order();
        let mut out = Self::zeros(self.dim(), s + t);
        if s == 0 {
            out = other.scaled(self.entries[0]);
            return Ok(out);
        }
        if t == 0 {
            out = self.scaled(other.entries[0]);
            return Ok(out);
        }
        let total_choose = binomial(s + t, s);
        let mut left = vec![0u8; s];
        let mut right = vec![0u8; t];
        for r in 0..out.table.len() {
            let key = &out.table.keys[r];
            // distinct values and their counts in key
            let mut vals: Vec<(u8, usize)> = Vec::new();
            for &q in key.iter() {
                match vals.last_mut() {
                    Some((v, c)) if *v == q => *c += 1,
                    _ => vals.push((q, 1)),
                }
            }
            let mut acc = 0.0;
            // enumerate sub-multisets of size s
            let mut take = vec![0usize; vals.len()];
            split_rec(
                &vals,
                0,
                s,
                &mut take,
                &mut |take: &[usize]| {
                    let mut weight = 1.0;
                    let mut li = 0;
                    let mut ri = 0;
                    for (vi, &(v, c)) in vals.iter().enumerate() {
                        weight *= binomial(c, take[vi]);
                        for _ in 0..take[vi] {
                            left[li] = v;
                            li += 1;
                        }
                        for _ in 0..(c - take[vi]) {
                            right[ri] = v;
                            ri += 1;
                        }
                    }
                    acc += weight * self.entry(&left) * other.entry(&right);
                },
            );
            out.entries[r] = acc / total_choose;
        }
        Ok(out)
    }

    /// Flatten an even-order tensor into a symmetric d^k × d^k matrix with
    /// ⟨v^{⊗k}, F v^{⊗k}⟩ = ⟨T, v^{⊗2k}⟩.
    pub fn flatten(&self) -> Result<FlattenedMatrix, TensorError> {
        if self.order() % 2 != 0 {
            return Err(TensorError::OddOrder(self.order()));
        }
        let k = self.order() / 2;
        let d = self.dim();
        let side = d.pow(k as u32);
        let mut m = DMatrix::zeros(side, side);
        let mut combined = vec![0u8; 2 * k];
        let mut row_idx = vec![0u8; k];
        let mut col_idx = vec![0u8; k];
        for row in 0..side {
            decode_index(row, d, &mut row_idx);
            for col in row..side {
                decode_index(col, d, &mut col_idx);
                combined[..k].copy_from_slice(&row_idx);
                combined[k..].copy_from_slice(&col_idx);
                let v = if k == 0 {
                    self.entries[0]
                } else {
                    self.entry(&combined)
                };
                m[(row, col)] = v;
                m[(col, row)] = v;
            }
        }
        Ok(FlattenedMatrix {
            dim: d,
            half_order: k,
            matrix: m,
        })
    }
}

fn split_rec(
    vals: &[(u8, usize)],
    pos: usize,
    remaining: usize,
    take: &mut [usize],
    f: &mut impl FnMut(&[usize]),
) {
    if pos == vals.len() {
        if remaining == 0 {
            f(take);
        }
        return;
    }
    let max_here = vals[pos].1.min(remaining);
    // make sure the rest can absorb what's left
    let rest_cap: usize = vals[pos + 1..].iter().map(|(_, c)| *c).sum();
    for k in 0..=max_here {
        if remaining - k > rest_cap {
            continue;
        }
        take[pos] = k;
        split_rec(vals, pos + 1, remaining - k, take, f);
    }
    take[pos] = 0;
}

fn decode_index(mut code: usize, dim: usize, out: &mut [u8]) {
    for slot in out.iter_mut().rev() {
        *slot = (code % dim) as u8;
        code /= dim;
    }
}

/// Square flattening of an even-order symmetric tensor.
#[derive(Debug, Clone)]
pub struct FlattenedMatrix {
    pub dim: usize,
    pub half_order: usize,
    pub matrix: DMatrix<f64>,
}

impl FlattenedMatrix {
    /// ⟨v^{⊗k}, F v^{⊗k}⟩.
    pub fn quadratic_form(&self, v: &DVector<f64>) -> f64 {
        let vk = kron_power(v, self.half_order);
        (vk.transpose() * &self.matrix * &vk)[(0, 0)]
    }
}

/// v^{⊗k} unrolled to a d^k vector (row-major index order).
pub fn kron_power(v: &DVector<f64>, k: usize) -> DVector<f64> {
    let d = v.len();
    let mut out = DVector::from_element(1, 1.0);
    for _ in 0..k {
        let mut next = DVector::zeros(out.len() * d);
        for i in 0..out.len() {
            for j in 0..d {
                next[i * d + j] = out[i] * v[j];
            }
        }
        out = next;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_vec(d: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_tensor(d: usize, order: usize, rng: &mut ChaCha8Rng) -> SymmetricTensor {
        let mut t = SymmetricTensor::zeros(d, order);
        for e in &mut t.entries {
            *e = rng.random_range(-1.0..1.0);
        }
        t
    }

    /// Naive full-index-loop evaluation oracle.
    fn naive_eval(t: &SymmetricTensor, v: &DVector<f64>) -> f64 {
        let d = t.dim();
        let order = t.order();
        let total = d.pow(order as u32);
        let mut idx = vec![0u8; order];
        let mut acc = 0.0;
        for code in 0..total {
            decode_index(code, d, &mut idx);
            let mut p = if order == 0 {
                t.entries()[0]
            } else {
                t.entry(&idx)
            };
            for &i in &idx {
                p *= v[i as usize];
            }
            acc += p;
        }
        acc
    }

    #[test]
    fn entry_count_matches_binomial() {
        for (d, t) in [(2usize, 3usize), (3, 4), (5, 2), (4, 0), (6, 1)] {
            let tab = index_table(d, t);
            assert_eq!(tab.len() as f64, binomial(d + t.max(1) - 1, t));
        }
    }

    #[test]
    fn moment_tensor_two_point_order2() {
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        let points = vec![e1.clone(), -e1.clone()];
        let m = SymmetricTensor::moment_tensor(&points, &[1.0, 1.0], &DVector::zeros(2), 2)
            .unwrap();
        let mat = m.to_matrix().unwrap();
        assert_eq!(mat, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn moment_tensor_odd_symmetry_vanishes() {
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        let points = vec![e1.clone(), -e1.clone()];
        let m = SymmetricTensor::moment_tensor(&points, &[1.0, 1.0], &DVector::zeros(2), 3)
            .unwrap();
        assert!(m.frobenius_norm() < 1e-15);
    }

    #[test]
    fn moment_tensor_matches_enumeration_oracle() {
        let mut r = rng(7);
        let points: Vec<_> = (0..5).map(|_| random_vec(3, &mut r)).collect();
        let weights = [0.2; 5];
        let center = random_vec(3, &mut r);
        let m = SymmetricTensor::moment_tensor(&points, &weights, &center, 4).unwrap();
        // brute-force expectation over the discrete support, full index loop
        let mut idx = vec![0u8; 4];
        for code in 0..81 {
            decode_index(code, 3, &mut idx);
            let expected: f64 = points
                .iter()
                .map(|p| idx.iter().map(|&i| p[i as usize] - center[i as usize]).product::<f64>())
                .sum::<f64>()
                / 5.0;
            assert!((m.entry(&idx) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn moment_tensor_rejects_zero_weight() {
        let points = vec![DVector::zeros(2)];
        let err = SymmetricTensor::moment_tensor(&points, &[0.0], &DVector::zeros(2), 2)
            .unwrap_err();
        assert_eq!(err, TensorError::ZeroTotalWeight);
    }

    #[test]
    fn moment_tensor_rejects_dim_mismatch() {
        let points = vec![DVector::zeros(3)];
        let err = SymmetricTensor::moment_tensor(&points, &[1.0], &DVector::zeros(2), 2)
            .unwrap_err();
        assert!(matches!(err, TensorError::DimensionMismatch { .. }));
    }

    #[test]
    fn sym_outer_scalar_case() {
        let mut r = rng(1);
        let b = random_tensor(3, 2, &mut r);
        let a = SymmetricTensor::scalar(3, 2.0);
        let out = a.sym_outer(&b).unwrap();
        let mut expected = b.clone();
        expected.scale(2.0);
        for (x, y) in out.entries().iter().zip(expected.entries()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn sym_outer_vectors() {
        let e1 = SymmetricTensor::from_vector(&DVector::from_vec(vec![1.0, 0.0]));
        let out = e1.sym_outer(&e1).unwrap();
        assert_eq!(out.entry(&[0, 0]), 1.0);
        assert_eq!(out.entry(&[0, 1]), 0.0);
        assert_eq!(out.entry(&[1, 1]), 0.0);
    }

    #[test]
    fn sym_outer_evaluation_identity() {
        let mut r = rng(42);
        let a = random_tensor(3, 2, &mut r);
        let b = random_tensor(3, 2, &mut r);
        let ab = a.sym_outer(&b).unwrap();
        for _ in 0..100 {
            let v = random_vec(3, &mut r);
            let lhs = ab.eval_direction(&v).unwrap();
            let rhs = a.eval_direction(&v).unwrap() * b.eval_direction(&v).unwrap();
            assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn sym_outer_associative_under_evaluation() {
        let mut r = rng(9);
        let a = random_tensor(2, 1, &mut r);
        let b = random_tensor(2, 2, &mut r);
        let c = random_tensor(2, 1, &mut r);
        let left = a.sym_outer(&b).unwrap().sym_outer(&c).unwrap();
        let right = a.sym_outer(&b.sym_outer(&c).unwrap()).unwrap();
        for _ in 0..50 {
            let v = random_vec(2, &mut r);
            let l = left.eval_direction(&v).unwrap();
            let rr = right.eval_direction(&v).unwrap();
            assert!((l - rr).abs() < 1e-12 * (1.0 + rr.abs()));
        }
    }

    #[test]
    fn flatten_order2_is_matrix() {
        let mut r = rng(3);
        let t = random_tensor(3, 2, &mut r);
        let f = t.flatten().unwrap();
        assert_eq!(f.matrix, t.to_matrix().unwrap());
    }

    #[test]
    fn flatten_rejects_odd_order() {
        let t = SymmetricTensor::zeros(2, 3);
        assert_eq!(t.flatten().unwrap_err(), TensorError::OddOrder(3));
    }

    #[test]
    fn flatten_evaluation_identity() {
        let mut r = rng(11);
        let t = random_tensor(3, 4, &mut r);
        let f = t.flatten().unwrap();
        for _ in 0..100 {
            let v = random_vec(3, &mut r);
            let lhs = f.quadratic_form(&v);
            let rhs = t.eval_direction(&v).unwrap();
            assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn eval_direction_identity_matrix() {
        let t = SymmetricTensor::from_matrix(&DMatrix::identity(4, 4));
        let v = DVector::from_vec(vec![0.5, 0.5, 0.5, 0.5]);
        assert!((t.eval_direction(&v).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn eval_direction_matches_naive_loop() {
        let mut r = rng(5);
        for order in [0usize, 1, 2, 3, 4] {
            let t = random_tensor(3, order, &mut r);
            let v = random_vec(3, &mut r);
            let fast = t.eval_direction(&v).unwrap();
            let slow = naive_eval(&t, &v);
            assert!((fast - slow).abs() < 1e-11 * (1.0 + slow.abs()));
        }
    }

    #[test]
    fn identity_tensor_is_norm_power() {
        let mut r = rng(12);
        for k in [1usize, 2, 3] {
            let t = SymmetricTensor::identity(3, 2 * k);
            for _ in 0..20 {
                let v = random_vec(3, &mut r);
                let expected = v.norm_squared().powi(k as i32);
                let got = t.eval_direction(&v).unwrap();
                assert!((got - expected).abs() < 1e-11 * (1.0 + expected.abs()));
            }
        }
    }

    #[test]
    fn centered_order1_moment_vanishes() {
        let mut r = rng(8);
        let points: Vec<_> = (0..7).map(|_| random_vec(4, &mut r)).collect();
        let weights: Vec<f64> = (0..7).map(|_| r.random_range(0.1..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let mut mean = DVector::zeros(4);
        for (p, &w) in points.iter().zip(&weights) {
            mean += p * (w / total);
        }
        let m1 = SymmetricTensor::moment_tensor(&points, &weights, &mean, 1).unwrap();
        assert!(m1.frobenius_norm() < 1e-12);
    }

    #[test]
    fn gradient_and_hessian_match_finite_differences() {
        let mut r = rng(21);
        let t = random_tensor(3, 4, &mut r);
        let u = random_vec(3, &mut r);
        let g = t.poly_gradient(&u);
        let h = t.poly_hessian(&u);
        let eps = 1e-5;
        for i in 0..3 {
            let mut up = u.clone();
            let mut um = u.clone();
            up[i] += eps;
            um[i] -= eps;
            let fd = (t.eval_direction(&up).unwrap() - t.eval_direction(&um).unwrap()) / (2.0 * eps);
            assert!((g[i] - fd).abs() < 1e-6 * (1.0 + fd.abs()));
            let gp = t.poly_gradient(&up);
            let gm = t.poly_gradient(&um);
            for j in 0..3 {
                let fd2 = (gp[j] - gm[j]) / (2.0 * eps);
                assert!((h[(i, j)] - fd2).abs() < 1e-5 * (1.0 + fd2.abs()));
            }
        }
    }
}
