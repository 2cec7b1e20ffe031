//! Degree-2t pseudodistributions on the unit sphere and the SOS norm of
//! even-order symmetric tensors.
//!
//! A pseudodistribution is stored as a moment vector indexed by monomials
//! of degree ≤ 2t; the moment matrix over the degree-≤t monomial basis is
//! a linear image of that vector, so entry consistency holds by
//! construction. The SOS norm is computed by an ADMM loop that alternates
//! a KKT solve in moment space (diagonal Hessian, cached Cholesky of the
//! constraint system) with a PSD projection of the moment matrix, and
//! returns a Gram-matrix dual certificate alongside the optimizer.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::sdp::{self, SdpError};
use crate::tensor::SymmetricTensor;

#[derive(Debug, Error)]
pub enum PseudoError {
    #[error("tensor order {got} exceeds the state's degree bound {max}")]
    OrderTooHigh { got: usize, max: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("sos_norm needs an even tensor order, got {0}")]
    OddOrder(usize),
    #[error("input vector is not unit length (|norm - 1| = {0:.3e})")]
    NotUnit(f64),
    #[error("solver did not converge: primal residual {primal:.3e}, dual residual {dual:.3e} after {iterations} iterations")]
    NoConvergence {
        primal: f64,
        dual: f64,
        iterations: usize,
    },
    #[error(transparent)]
    Sdp(#[from] SdpError),
}

/// Monomials of total degree ≤ max_degree over d variables, graded
/// lexicographic, constant first.
#[derive(Debug, Clone)]
pub struct MonomialBasis {
    pub dim: usize,
    pub max_degree: usize,
    pub exponents: Vec<Vec<u8>>,
    index: HashMap<Vec<u8>, usize>,
}

impl MonomialBasis {
    pub fn new(dim: usize, max_degree: usize) -> Self {
        let mut exponents = Vec::new();
        for deg in 0..=max_degree {
            let mut cur = vec![0u8; dim];
            gen_degree(dim, deg, 0, &mut cur, &mut exponents);
        }
        let index = exponents
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, e)| (e, i))
            .collect();
        MonomialBasis {
            dim,
            max_degree,
            exponents,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn position(&self, expo: &[u8]) -> Option<usize> {
        self.index.get(expo).copied()
    }

    /// Evaluate every monomial at v.
    pub fn eval(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.len(), |r, _| {
            self.exponents[r]
                .iter()
                .enumerate()
                .map(|(i, &e)| v[i].powi(e as i32))
                .product()
        })
    }
}

fn gen_degree(dim: usize, remaining: usize, pos: usize, cur: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
    if pos == dim {
        if remaining == 0 {
            out.push(cur.clone());
        }
        return;
    }
    if pos == dim - 1 {
        cur[pos] = remaining as u8;
        out.push(cur.clone());
        cur[pos] = 0;
        return;
    }
    // lexicographic within a degree: larger leading exponents first
    for e in (0..=remaining).rev() {
        cur[pos] = e as u8;
        gen_degree(dim, remaining - e, pos + 1, cur, out);
    }
    cur[pos] = 0;
}

/// Exponent vector of a sorted multi-index key.
fn key_to_exponent(dim: usize, key: &[u8]) -> Vec<u8> {
    let mut e = vec![0u8; dim];
    for &i in key {
        e[i as usize] += 1;
    }
    e
}

/// Moment-vector representation of a degree-2t pseudodistribution on the
/// unit sphere.
#[derive(Debug, Clone)]
pub struct PseudoMomentState {
    pub basis: MonomialBasis,
    pub full_basis: MonomialBasis,
    pub moment_vector: DVector<f64>,
    pub moment_matrix: DMatrix<f64>,
    pub degree: usize,
}

impl PseudoMomentState {
    pub(crate) fn from_moment_vector(dim: usize, t: usize, y: DVector<f64>) -> Self {
        let basis = MonomialBasis::new(dim, t);
        let full_basis = MonomialBasis::new(dim, 2 * t);
        let b = basis.len();
        let mut m = DMatrix::zeros(b, b);
        for r in 0..b {
            for c in 0..b {
                let mut sum = basis.exponents[r].clone();
                for (i, &e) in basis.exponents[c].iter().enumerate() {
                    sum[i] += e;
                }
                m[(r, c)] = y[full_basis.position(&sum).unwrap()];
            }
        }
        PseudoMomentState {
            basis,
            full_basis,
            moment_vector: y,
            moment_matrix: m,
            degree: 2 * t,
        }
    }

    pub fn dim(&self) -> usize {
        self.basis.dim
    }

    /// pE[⟨T, v^{⊗s}⟩] for s ≤ 2t.
    pub fn pseudo_expect(&self, t: &SymmetricTensor) -> Result<f64, PseudoError> {
        if t.dim() != self.dim() {
            return Err(PseudoError::DimensionMismatch {
                expected: self.dim(),
                got: t.dim(),
            });
        }
        if t.order() > self.degree {
            return Err(PseudoError::OrderTooHigh {
                got: t.order(),
                max: self.degree,
            });
        }
        let table = t.table();
        let mut acc = 0.0;
        for r in 0..table.len() {
            let coeff = table.multiplicity[r] * t.entries()[r];
            if coeff == 0.0 {
                continue;
            }
            let expo = key_to_exponent(self.dim(), &table.keys[r]);
            acc += coeff * self.moment_vector[self.full_basis.position(&expo).unwrap()];
        }
        Ok(acc)
    }

    /// Worst violation of the defining constraints (normalization, sphere
    /// ideal, moment-matrix PSD-ness); useful for validation.
    pub fn constraint_violation(&self) -> f64 {
        let mut worst = (self.moment_vector[0] - 1.0).abs();
        let lower = MonomialBasis::new(self.dim(), self.degree.saturating_sub(2));
        for delta in &lower.exponents {
            let mut sum = -self.moment_vector[self.full_basis.position(delta).unwrap()];
            for i in 0..self.dim() {
                let mut up = delta.clone();
                up[i] += 2;
                sum += self.moment_vector[self.full_basis.position(&up).unwrap()];
            }
            worst = worst.max(sum.abs());
        }
        let min_eig = sdp::min_eig(&self.moment_matrix).unwrap_or(f64::NEG_INFINITY);
        worst.max((-min_eig).max(0.0))
    }
}

/// Pseudodistribution of an actual point mass at a unit vector.
pub fn point_mass_state(v: &DVector<f64>, t: usize) -> Result<PseudoMomentState, PseudoError> {
    let gap = (v.norm() - 1.0).abs();
    if gap > 1e-10 {
        return Err(PseudoError::NotUnit(gap));
    }
    let full = MonomialBasis::new(v.len(), 2 * t);
    let y = full.eval(v);
    Ok(PseudoMomentState::from_moment_vector(v.len(), t, y))
}

/// Dual certificate for an SOS-norm value: on the unit sphere,
/// T(v) = bound − z(v)ᵀ S z(v) with S ⪰ 0 (z = degree-≤t monomials),
/// plus a multiple of (‖v‖²−1) recorded through the sphere multipliers.
#[derive(Debug, Clone)]
pub struct SosCertificate {
    pub bound: f64,
    pub gram: DMatrix<f64>,
    pub sphere_multipliers: DVector<f64>,
    pub stationarity_residual: f64,
}

#[derive(Debug, Clone)]
pub struct SosNormResult {
    pub value: f64,
    pub witness: PseudoMomentState,
    pub certificate: SosCertificate,
    pub iterations: usize,
}

struct SphereProgram {
    basis: MonomialBasis,
    full: MonomialBasis,
    /// full-basis monomial index at each moment-matrix position
    pos_mono: Vec<Vec<usize>>,
    /// how many matrix positions map to each monomial
    position_count: DVector<f64>,
    /// constraint rows over the full basis; row 0 is normalization
    rows: Vec<Vec<(usize, f64)>>,
    rhs: DVector<f64>,
    kkt: Cholesky<f64, nalgebra::Dyn>,
}

impl SphereProgram {
    fn new(dim: usize, t: usize) -> Result<Self, PseudoError> {
        let basis = MonomialBasis::new(dim, t);
        let full = MonomialBasis::new(dim, 2 * t);
        let b = basis.len();
        let n = full.len();
        let mut pos_mono = vec![vec![0usize; b]; b];
        let mut position_count = DVector::zeros(n);
        for r in 0..b {
            for c in 0..b {
                let mut sum = basis.exponents[r].clone();
                for (i, &e) in basis.exponents[c].iter().enumerate() {
                    sum[i] += e;
                }
                let m = full.position(&sum).unwrap();
                pos_mono[r][c] = m;
                position_count[m] += 1.0;
            }
        }

        let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
        rows.push(vec![(0, 1.0)]);
        let lower = MonomialBasis::new(dim, 2 * t - 2);
        for delta in &lower.exponents {
            let mut row = vec![(full.position(delta).unwrap(), -1.0)];
            for i in 0..dim {
                let mut up = delta.clone();
                up[i] += 2;
                row.push((full.position(&up).unwrap(), 1.0));
            }
            rows.push(row);
        }
        let rhs = DVector::from_fn(rows.len(), |j, _| if j == 0 { 1.0 } else { 0.0 });

        // G = A K^{-1} Aᵀ with K = diag(position_count)
        let m = rows.len();
        let mut g = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in i..m {
                let mut acc = 0.0;
                for &(mi, vi) in &rows[i] {
                    for &(mj, vj) in &rows[j] {
                        if mi == mj {
                            acc += vi * vj / position_count[mi];
                        }
                    }
                }
                g[(i, j)] = acc;
                g[(j, i)] = acc;
            }
        }
        for i in 0..m {
            g[(i, i)] += 1e-12 * (1.0 + g[(i, i)]);
        }
        let kkt = Cholesky::new(g).ok_or(SdpError::SingularConstraints)?;
        Ok(SphereProgram {
            basis,
            full,
            pos_mono,
            position_count,
            rows,
            rhs,
            kkt,
        })
    }

    fn apply_rows(&self, y: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.rows.len(), |j, _| {
            self.rows[j].iter().map(|&(m, v)| v * y[m]).sum()
        })
    }

    fn apply_rows_transpose(&self, lam: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.full.len());
        for (j, row) in self.rows.iter().enumerate() {
            for &(m, v) in row {
                out[m] += v * lam[j];
            }
        }
        out
    }

    /// Accumulate matrix entries per monomial: (M^T Z)_m.
    fn matrix_to_monomials(&self, z: &DMatrix<f64>) -> DVector<f64> {
        let b = self.basis.len();
        let mut out = DVector::zeros(self.full.len());
        for r in 0..b {
            for c in 0..b {
                out[self.pos_mono[r][c]] += z[(r, c)];
            }
        }
        out
    }

    fn monomials_to_matrix(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let b = self.basis.len();
        DMatrix::from_fn(b, b, |r, c| y[self.pos_mono[r][c]])
    }
}

/// SOS norm of an even-order symmetric tensor: the maximum pseudo-expected
/// value of ⟨T, v^{⊗2t}⟩ over degree-2t pseudodistributions on the sphere.
pub fn sos_norm(t: &SymmetricTensor, tolerance: f64) -> Result<SosNormResult, PseudoError> {
    sos_norm_with_iters(t, tolerance, 200_000)
}

pub fn sos_norm_with_iters(
    tensor: &SymmetricTensor,
    tolerance: f64,
    max_iter: usize,
) -> Result<SosNormResult, PseudoError> {
    let order = tensor.order();
    if order % 2 != 0 || order == 0 {
        return Err(PseudoError::OddOrder(order));
    }
    let t = order / 2;
    let dim = tensor.dim();
    let prog = SphereProgram::new(dim, t)?;
    let n = prog.full.len();
    let b = prog.basis.len();

    // objective in moment space: c_m = multiplicity · entry for the unique
    // degree-2t monomial of each key
    let mut c: DVector<f64> = DVector::zeros(n);
    let table = tensor.table();
    for r in 0..table.len() {
        let expo = key_to_exponent(dim, &table.keys[r]);
        c[prog.full.position(&expo).unwrap()] += table.multiplicity[r] * tensor.entries()[r];
    }
    let c_scale = c.norm().max(1e-12);
    let c_unit = &c / c_scale;

    let rho = 1.0;
    // start from the uniform-ish point mass state of e_1 — feasible moments
    let mut y: DVector<f64> = {
        let e1 = DVector::from_fn(dim, |i, _| if i == 0 { 1.0 } else { 0.0 });
        prog.full.eval(&e1)
    };
    let mut x = prog.monomials_to_matrix(&y);
    let mut u = DMatrix::zeros(b, b);
    let res_tol = tolerance.min(1e-7).max(1e-11);

    let mut iterations = 0;
    let mut converged = false;
    let mut lam = DVector::zeros(prog.rows.len());
    while iterations < max_iter {
        iterations += 1;
        // y-update: equality-constrained quadratic with diagonal Hessian
        let target = prog.matrix_to_monomials(&(&x - &u));
        let mut q = DVector::zeros(n);
        for m in 0..n {
            q[m] = (c_unit[m] / rho + target[m]) / prog.position_count[m];
        }
        let rhs = prog.apply_rows(&q) - &prog.rhs;
        let mu = prog.kkt.solve(&rhs);
        let correction = prog.apply_rows_transpose(&mu);
        for m in 0..n {
            y[m] = q[m] - correction[m] / prog.position_count[m];
        }
        lam = mu * rho;

        // X-update: PSD projection, over-relaxed
        let my = prog.monomials_to_matrix(&y);
        let relaxed = &my * 1.6 - &x * 0.6;
        let x_new = sdp::psd_projection(&(&relaxed + &u));
        let dual_res = rho * (&x_new - &x).norm();
        u += relaxed - &x_new;
        x = x_new;

        if iterations % 20 == 0 {
            let primal_res = (&my - &x).norm();
            if primal_res <= res_tol * (1.0 + x.norm()) && dual_res <= res_tol * (1.0 + u.norm()) {
                converged = true;
                break;
            }
        }
    }

    let my = prog.monomials_to_matrix(&y);
    let primal_res = (&my - &x).norm();
    if !converged && primal_res > 1e3 * res_tol * (1.0 + x.norm()) {
        return Err(PseudoError::NoConvergence {
            primal: primal_res,
            dual: 0.0,
            iterations,
        });
    }

    let value = c.dot(&y);
    // dual certificate: S = −ρU is PSD at convergence and satisfies
    // c_unit = −M^*(S) + Aᵀλ, so on the sphere T(v)/c_scale = λ_0 − zᵀSz.
    let s_unit = (&u + u.transpose()) * (-0.5 * rho);
    let stat = {
        let mut r = prog.matrix_to_monomials(&s_unit);
        r += &c_unit;
        r -= prog.apply_rows_transpose(&lam);
        r.norm()
    };
    let certificate = SosCertificate {
        bound: lam[0] * c_scale,
        gram: s_unit * c_scale,
        sphere_multipliers: lam.rows(1, lam.len() - 1).into_owned() * c_scale,
        stationarity_residual: stat * c_scale,
    };

    Ok(SosNormResult {
        value,
        witness: PseudoMomentState::from_moment_vector(dim, t, y),
        certificate,
        iterations,
    })
}
