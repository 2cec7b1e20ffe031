//! Spectral certification of moment-tensor injective norms.
//!
//! The central object is the tensor-valued polynomial F_t(x): an
//! alternating sum over tuples of lower moments whose expected derivatives
//! of all orders below t vanish. The empirical covariance of the flattened
//! F_t values gives a spectral bound λ_t, and a short recursion over the
//! coalesced lower-order terms turns the per-level λ values into certified
//! bounds B_{2s} with ⟨M_{2s}, v^{⊗2s}⟩ ≤ B_{2s}^{2s}‖v‖^{2s}.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::sdp;
use crate::tensor::{factorial, SymmetricTensor, TensorError};

#[derive(Debug, Error)]
pub enum CertError {
    #[error("need moments of orders 2..={needed}, got orders up to {got}")]
    MissingMoment { needed: usize, got: usize },
    #[error("probabilities sum to {0}, expected 1")]
    BadProbabilities(f64),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("t = {0} unsupported; certification covers t in 1..=4")]
    UnsupportedLevel(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eigen(#[from] sdp::SdpError),
}

/// The tuples (i_0, i_1, …, i_r) with i_0 ≥ 0, i_s ≥ 2 for s ≥ 1 and
/// Σ i_s = t, together with sign (−1)^r and the multinomial coefficient
/// t!/(i_0!·…·i_r!). Orderings of the parts i_1..i_r count separately.
#[derive(Debug, Clone)]
pub struct TupleFamily {
    pub t: usize,
    pub tuples: Vec<(Vec<usize>, f64)>,
}

impl TupleFamily {
    pub fn new(t: usize) -> Self {
        let mut tuples = Vec::new();
        for i0 in 0..=t {
            let mut parts = Vec::new();
            compositions(t - i0, &mut parts, &mut |parts: &[usize]| {
                let mut tuple = Vec::with_capacity(parts.len() + 1);
                tuple.push(i0);
                tuple.extend_from_slice(parts);
                let sign = if parts.len() % 2 == 0 { 1.0 } else { -1.0 };
                let mut coeff = factorial(t) / factorial(i0);
                for &p in parts {
                    coeff /= factorial(p);
                }
                tuples.push((tuple, sign * coeff));
            });
        }
        TupleFamily { t, tuples }
    }
}

/// Ordered compositions of `total` into parts ≥ 2 (empty composition when
/// total = 0).
fn compositions(total: usize, parts: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
    if total == 0 {
        f(parts);
        return;
    }
    for p in 2..=total {
        if total - p == 1 {
            continue;
        }
        parts.push(p);
        compositions(total - p, parts, f);
        parts.pop();
    }
}

/// F_t(x) given the central moments M_2..M_t of the underlying
/// distribution: Σ over tuples of sign·coeff·(x−μ)^{⊗i_0} ⊗ M_{i_1} ⊗ ….
///
/// `moments[k]` must hold M_{k+2}; pass an empty slice for t ≤ 1.
pub fn f_tensor(
    x: &DVector<f64>,
    mean: &DVector<f64>,
    moments: &[SymmetricTensor],
    t: usize,
) -> Result<SymmetricTensor, CertError> {
    let d = mean.len();
    let max_order = moments.len() + 1;
    if t >= 2 && max_order < t {
        return Err(CertError::MissingMoment {
            needed: t,
            got: max_order,
        });
    }
    let centered = x - mean;
    let family = TupleFamily::new(t);
    let mut out = SymmetricTensor::zeros(d, t);
    for (tuple, coeff) in &family.tuples {
        let mut term = SymmetricTensor::rank_one(&centered, tuple[0]);
        for &part in &tuple[1..] {
            term = term.sym_outer(&moments[part - 2])?;
        }
        out.add_scaled(*coeff, &term)?;
    }
    Ok(out)
}

/// An exact discrete distribution: atoms with probabilities.
#[derive(Debug, Clone)]
pub struct DiscreteDistribution {
    pub atoms: Vec<DVector<f64>>,
    pub probs: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn uniform(atoms: Vec<DVector<f64>>) -> Self {
        let n = atoms.len();
        DiscreteDistribution {
            atoms,
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn validate(&self) -> Result<(), CertError> {
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(CertError::BadProbabilities(total));
        }
        Ok(())
    }

    pub fn mean(&self) -> DVector<f64> {
        let d = self.atoms[0].len();
        let mut m = DVector::zeros(d);
        for (a, &p) in self.atoms.iter().zip(&self.probs) {
            m += a * p;
        }
        m
    }

    /// Central moments M_2..M_max, exactly.
    pub fn central_moments(&self, max: usize) -> Result<Vec<SymmetricTensor>, CertError> {
        let mean = self.mean();
        (2..=max)
            .map(|k| {
                SymmetricTensor::moment_tensor(&self.atoms, &self.probs, &mean, k)
                    .map_err(CertError::from)
            })
            .collect()
    }
}

/// Frobenius norms of E[∇^j F_t] for j = 0..t−1, computed exactly over the
/// atoms. The j-th derivative reduces to t!/(t−j)! times F_{t−j} with j
/// identity factors attached, so the residual is the falling factorial
/// times ‖E[F_{t−j}]‖_F; all must vanish. The order-t derivative is the
/// constant t!·Sym(I^{⊗t}) and carries no residual.
pub fn check_derivatives_vanish(
    dist: &DiscreteDistribution,
    t: usize,
) -> Result<Vec<f64>, CertError> {
    dist.validate()?;
    let mean = dist.mean();
    let moments = dist.central_moments(t.max(2))?;
    let mut residuals = Vec::with_capacity(t);
    for j in 0..t {
        let s = t - j;
        let d = mean.len();
        let mut acc = SymmetricTensor::zeros(d, s);
        for (a, &p) in dist.atoms.iter().zip(&dist.probs) {
            let f = f_tensor(a, &mean, &moments[..s.saturating_sub(1)], s)?;
            acc.add_scaled(p, &f)?;
        }
        let falling = factorial(t) / factorial(s);
        residuals.push(falling * acc.frobenius_norm());
    }
    Ok(residuals)
}

/// Full d^t unrolling of a symmetric tensor.
fn unroll(t: &SymmetricTensor) -> DVector<f64> {
    let d = t.dim();
    let order = t.order();
    let size = d.pow(order as u32);
    let mut idx = vec![0u8; order];
    DVector::from_fn(size, |code, _| {
        let mut c = code;
        for slot in idx.iter_mut().rev() {
            *slot = (c % d) as u8;
            c /= d;
        }
        if order == 0 {
            t.entries()[0]
        } else {
            t.entry(&idx)
        }
    })
}

/// λ_t: the largest eigenvalue of the empirical second-moment matrix of
/// the unrolled F_t values, (1/n) Σ vec(F_t(x_i)) vec(F_t(x_i))ᵀ. Uses the
/// n×n Gram matrix instead when that side is smaller.
pub fn f_covariance_bound(
    points: &[DVector<f64>],
    mean: &DVector<f64>,
    moments: &[SymmetricTensor],
    t: usize,
) -> Result<f64, CertError> {
    if points.len() < 2 {
        return Err(CertError::TooFewPoints {
            needed: 2,
            got: points.len(),
        });
    }
    let n = points.len();
    let d = mean.len();
    let side = d.pow(t as u32);
    if side <= n.min(4096) {
        let mut m = DMatrix::zeros(side, side);
        for x in points {
            let f = f_tensor(x, mean, moments, t)?;
            let v = unroll(&f);
            m.ger(1.0 / n as f64, &v, &v, 1.0);
        }
        let (lam, _) = sdp::max_eig(&m)?;
        Ok(lam.max(0.0))
    } else {
        let fs: Vec<SymmetricTensor> = points
            .iter()
            .map(|x| f_tensor(x, mean, moments, t))
            .collect::<Result<_, _>>()?;
        let mut g = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = fs[i].frobenius_dot(&fs[j])? / n as f64;
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        let (lam, _) = sdp::max_eig(&g)?;
        Ok(lam.max(0.0))
    }
}

/// One certified level: ⟨M_{2s}, v^{⊗2s}⟩ ≤ b_pow·‖v‖^{2s} with
/// b_pow = B_{2s}^{2s}.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CertLevel {
    pub s: usize,
    pub lambda: f64,
    pub b_pow: f64,
    pub b: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct CertificationReport {
    pub t: usize,
    pub dim: usize,
    pub n: usize,
    pub levels: Vec<CertLevel>,
}

impl CertificationReport {
    /// B_{2t}, the top-level certified bound.
    pub fn b(&self) -> f64 {
        self.levels.last().map(|l| l.b).unwrap_or(0.0)
    }

    pub fn b_pow(&self) -> f64 {
        self.levels.last().map(|l| l.b_pow).unwrap_or(0.0)
    }
}

/// Bound the injective norms of the empirical moment tensors M_2..M_{2t}:
/// B_2² is the top covariance eigenvalue, and each higher level combines
/// the spectral bound λ_s on E[F_s F_sᵀ] with the coalesced lower-order
/// contribution 2(s/2+1)^s·B_{2s−2}^{2s−2}·B_2².
pub fn certify(points: &[DVector<f64>], t: usize) -> Result<CertificationReport, CertError> {
    if !(1..=4).contains(&t) {
        return Err(CertError::UnsupportedLevel(t));
    }
    if points.len() < 2 {
        return Err(CertError::TooFewPoints {
            needed: 2,
            got: points.len(),
        });
    }
    let n = points.len();
    let d = points[0].len();
    let mut mean = DVector::zeros(d);
    for p in points {
        mean += p;
    }
    mean /= n as f64;
    let weights = vec![1.0; n];
    let moments: Vec<SymmetricTensor> = (2..=t.max(2))
        .map(|k| SymmetricTensor::moment_tensor(points, &weights, &mean, k))
        .collect::<Result<_, _>>()?;

    let m2 = moments[0].to_matrix()?;
    let (b2_sq, _) = sdp::max_eig(&m2)?;
    let b2_sq = b2_sq.max(0.0);
    let mut levels = vec![CertLevel {
        s: 1,
        lambda: b2_sq,
        b_pow: b2_sq,
        b: b2_sq.sqrt(),
    }];
    for s in 2..=t {
        let lambda = f_covariance_bound(points, &mean, &moments[..s - 1], s)?;
        let prev = levels.last().unwrap().b_pow;
        let multiplier = 2.0 * (s as f64 / 2.0 + 1.0).powi(s as i32);
        let b_pow = lambda + multiplier * prev * b2_sq;
        levels.push(CertLevel {
            s,
            lambda,
            b_pow,
            b: b_pow.powf(1.0 / (2.0 * s as f64)),
        });
    }
    Ok(CertificationReport {
        t,
        dim: d,
        n,
        levels,
    })
}

/// Evaluate the two-variable nonnegative combinations used to coalesce
/// mixed moment products, at `samples` random (x, y) pairs. `a + b` must
/// be even and a ≤ b; the polynomial depends only on the parity class.
/// Returns the most negative value seen (≥ −1e−10 when the decomposition
/// is correct) after also checking the explicit square factorization.
pub fn coalesce_check(a: usize, b: usize, u: i32, samples: usize) -> f64 {
    assert!((a + b) % 2 == 0 && a <= b && (u == 1 || u == -1));
    let odd = a % 2 == 1;
    let r = if odd { b - a + 2 } else { b - a + 4 };
    let uf = u as f64;
    let mut rng_state = 0x2545F4914F6CDD1Du64 ^ (a as u64) << 8 ^ (b as u64);
    let mut next = move || {
        // xorshift is plenty for a value sweep
        rng_state ^= rng_state << 13;
        rng_state ^= rng_state >> 7;
        rng_state ^= rng_state << 17;
        (rng_state >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
    };
    let mut min_val = f64::INFINITY;
    for _ in 0..samples {
        let x: f64 = next();
        let y: f64 = next();
        let val = if odd {
            x.powi(r as i32) - uf * x.powi(r as i32 - 1) * y - uf * x * y.powi(r as i32 - 1)
                + y.powi(r as i32)
        } else {
            // u = −1 makes the middle terms positive; still nonnegative
            let middle = x.powi(r as i32 - 2) * y * y + x * x * y.powi(r as i32 - 2);
            x.powi(r as i32) - uf.min(1.0) * middle + y.powi(r as i32)
        };
        min_val = min_val.min(val);
        if odd && u == 1 {
            // explicit square decomposition must reproduce the value
            let half = r / 2;
            let mut sos = (x - y).powi(2)
                * (x.powi(half as i32 - 1).powi(2) + y.powi(half as i32 - 1).powi(2));
            for i in 1..half {
                let term = x.powi((half - i) as i32) * y.powi(i as i32 - 1)
                    + x.powi((half - i) as i32 - 1) * y.powi(i as i32);
                sos += (x - y).powi(2) * term * term;
            }
            sos *= 0.5;
            let gap = (sos - val).abs();
            if gap > 1e-9 * (1.0 + val.abs()) {
                min_val = min_val.min(-gap);
            }
        }
    }
    min_val
}

/// Max deviation (under evaluation at random unit directions) between
/// E[F_3 ⊗ F_3] computed by enumeration and its closed form
/// M_6 + 9·M_2⊗M_2⊗M_2 − 6·M_4⊗M_2 − M_3⊗M_3.
pub fn f3_square_identity(dist: &DiscreteDistribution, directions: usize) -> Result<f64, CertError> {
    dist.validate()?;
    let mean = dist.mean();
    let d = mean.len();
    let moments = dist.central_moments(6)?;
    let m2 = &moments[0];
    let m3 = &moments[1];
    let m4 = &moments[2];
    let m6 = &moments[4];

    let mut lhs = SymmetricTensor::zeros(d, 6);
    for (a, &p) in dist.atoms.iter().zip(&dist.probs) {
        let f3 = f_tensor(a, &mean, &moments[..2], 3)?;
        lhs.add_scaled(p, &f3.sym_outer(&f3)?)?;
    }

    let mut rhs = m6.clone();
    rhs.add_scaled(9.0, &m2.sym_outer(m2)?.sym_outer(m2)?)?;
    rhs.add_scaled(-6.0, &m4.sym_outer(m2)?)?;
    rhs.add_scaled(-1.0, &m3.sym_outer(m3)?)?;

    let scale = lhs.frobenius_norm().max(rhs.frobenius_norm()).max(1e-12);
    let mut state = 0x9E3779B97F4A7C15u64;
    let mut max_dev: f64 = 0.0;
    for _ in 0..directions {
        let v = DVector::from_fn(d, |_, _| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
        .normalize();
        let dev = (lhs.eval_direction(&v)? - rhs.eval_direction(&v)?).abs();
        max_dev = max_dev.max(dev);
    }
    Ok(max_dev / scale)
}
