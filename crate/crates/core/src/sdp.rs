//! Minimal semidefinite optimization by operator splitting.
//!
//! Maximizes ⟨C, X⟩ over an affine slice of the PSD cone, alternating a
//! projection onto the affine constraint set (cached Cholesky of the
//! constraint Gram system) with a projection onto the PSD cone
//! (eigenvalue clamping). An optional diagonal cap X ⪯ D is handled by a
//! congruence transform. Small and self-contained; adequate for cone
//! sides up to a few hundred.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SdpError {
    #[error("constraint list is empty")]
    NoConstraints,
    #[error("matrix is not square or sizes disagree: {0}")]
    BadShape(String),
    #[error("non-finite entries in input")]
    NonFinite,
    #[error("constraint system is singular or inconsistent")]
    SingularConstraints,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

/// maximize ⟨C, X⟩  s.t.  ⟨A_j, X⟩ = b_j,  X ⪰ 0,  optionally X ⪯ diag(cap).
#[derive(Debug, Clone)]
pub struct SdpProblem {
    pub objective: DMatrix<f64>,
    pub constraints: Vec<(DMatrix<f64>, f64)>,
    pub diag_cap: Option<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub x: DMatrix<f64>,
    pub value: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    pub status: SdpStatus,
}

pub const DEFAULT_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 50_000;

/// Largest eigenvalue and a unit eigenvector of a symmetric matrix.
pub fn max_eig(m: &DMatrix<f64>) -> Result<(f64, DVector<f64>), SdpError> {
    if m.nrows() != m.ncols() {
        return Err(SdpError::BadShape(format!("{}x{}", m.nrows(), m.ncols())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(SdpError::NonFinite);
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut best = 0;
    for i in 1..eig.eigenvalues.len() {
        if eig.eigenvalues[i] > eig.eigenvalues[best] {
            best = i;
        }
    }
    let v = eig.eigenvectors.column(best).into_owned();
    Ok((eig.eigenvalues[best], v))
}

pub fn min_eig(m: &DMatrix<f64>) -> Result<f64, SdpError> {
    let (v, _) = max_eig(&(-m))?;
    Ok(-v)
}

/// Projection onto the PSD cone (clamp negative eigenvalues).
pub fn psd_projection(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let n = eig.eigenvalues.len();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        let lam = eig.eigenvalues[i];
        if lam > 0.0 {
            let v = eig.eigenvectors.column(i);
            out.ger(lam, &v, &v, 1.0);
        }
    }
    (&out + out.transpose()) * 0.5
}

/// Projection onto {M : 0 ⪯ M ⪯ I} (clamp eigenvalues into [0,1]).
pub fn box_psd_projection(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let n = eig.eigenvalues.len();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        let lam = eig.eigenvalues[i].clamp(0.0, 1.0);
        if lam > 0.0 {
            let v = eig.eigenvectors.column(i);
            out.ger(lam, &v, &v, 1.0);
        }
    }
    (&out + out.transpose()) * 0.5
}

fn frob_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Affine projector onto {X : ⟨A_j, X⟩ = b_j} with a cached factorization
/// of the constraint Gram matrix.
struct AffineProjector<'a> {
    constraints: &'a [(DMatrix<f64>, f64)],
    chol: Cholesky<f64, nalgebra::Dyn>,
}

impl<'a> AffineProjector<'a> {
    fn new(constraints: &'a [(DMatrix<f64>, f64)]) -> Result<Self, SdpError> {
        let m = constraints.len();
        let mut gram = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in i..m {
                let g = frob_dot(&constraints[i].0, &constraints[j].0);
                gram[(i, j)] = g;
                gram[(j, i)] = g;
            }
        }
        // tiny ridge keeps redundant constraint lists workable
        for i in 0..m {
            gram[(i, i)] += 1e-12 * (1.0 + gram[(i, i)]);
        }
        let chol = Cholesky::new(gram).ok_or(SdpError::SingularConstraints)?;
        Ok(AffineProjector { constraints, chol })
    }

    fn residual(&self, x: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_fn(self.constraints.len(), |j, _| {
            frob_dot(&self.constraints[j].0, x) - self.constraints[j].1
        })
    }

    fn project(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let r = self.residual(x);
        let mult = self.chol.solve(&r);
        let mut out = x.clone();
        for (j, (a, _)) in self.constraints.iter().enumerate() {
            out -= a * mult[j];
        }
        out
    }
}

/// Douglas–Rachford style splitting between the affine set and the PSD cone,
/// with the objective folded in as a gradient step on the affine half.
pub fn solve(
    p: &SdpProblem,
    tolerance: f64,
    max_iter: usize,
) -> Result<SdpSolution, SdpError> {
    solve_warm(p, tolerance, max_iter, None)
}

pub fn solve_warm(
    p: &SdpProblem,
    tolerance: f64,
    max_iter: usize,
    x0: Option<&DMatrix<f64>>,
) -> Result<SdpSolution, SdpError> {
    let n = p.objective.nrows();
    if p.objective.ncols() != n {
        return Err(SdpError::BadShape("objective not square".into()));
    }
    if p.constraints.is_empty() {
        return Err(SdpError::NoConstraints);
    }
    for (a, _) in &p.constraints {
        if a.nrows() != n || a.ncols() != n {
            return Err(SdpError::BadShape("constraint size".into()));
        }
    }
    if p.objective.iter().any(|v| !v.is_finite()) {
        return Err(SdpError::NonFinite);
    }

    // Reduce the capped problem X ⪯ diag(cap) by X = D^{1/2} X' D^{1/2},
    // which turns the cap into X' ⪯ I.
    if let Some(cap) = &p.diag_cap {
        let sqrt = DVector::from_fn(n, |i, _| cap[i].max(0.0).sqrt());
        let scale = |m: &DMatrix<f64>| {
            DMatrix::from_fn(n, n, |i, j| m[(i, j)] * sqrt[i] * sqrt[j])
        };
        let inner = SdpProblem {
            objective: scale(&p.objective),
            constraints: p
                .constraints
                .iter()
                .map(|(a, b)| (scale(a), *b))
                .collect(),
            diag_cap: None,
        };
        let mut sol = solve_capped_unit(&inner, tolerance, max_iter, x0)?;
        sol.x = DMatrix::from_fn(n, n, |i, j| sol.x[(i, j)] * sqrt[i] * sqrt[j]);
        return Ok(sol);
    }

    solve_core(p, tolerance, max_iter, x0, false)
}

fn solve_capped_unit(
    p: &SdpProblem,
    tolerance: f64,
    max_iter: usize,
    x0: Option<&DMatrix<f64>>,
) -> Result<SdpSolution, SdpError> {
    solve_core(p, tolerance, max_iter, x0, true)
}

fn solve_core(
    p: &SdpProblem,
    tolerance: f64,
    max_iter: usize,
    x0: Option<&DMatrix<f64>>,
    unit_cap: bool,
) -> Result<SdpSolution, SdpError> {
    let n = p.objective.nrows();
    let proj = AffineProjector::new(&p.constraints)?;
    let b_norm = p
        .constraints
        .iter()
        .map(|(_, b)| b * b)
        .sum::<f64>()
        .sqrt();
    let obj_scale = p.objective.norm().max(1.0);
    // gradient step size on the affine half; conservative, annealed below
    let mut step = 0.1 / obj_scale;

    let mut x = match x0 {
        Some(x0) if x0.nrows() == n => x0.clone(),
        _ => DMatrix::identity(n, n) * (b_norm.max(1.0) / n as f64),
    };
    let mut z = x.clone();
    let mut u = DMatrix::zeros(n, n);

    let mut last_value = f64::NEG_INFINITY;
    let mut value_window: Vec<f64> = Vec::new();
    let mut res_history: Vec<f64> = Vec::new();
    let mut iterations = 0;
    let mut status = SdpStatus::MaxIter;

    while iterations < max_iter {
        iterations += 1;
        // affine half with objective ascent
        let target = &z - &u + &p.objective * step;
        x = proj.project(&target);
        // cone half
        let w = &x + &u;
        z = if unit_cap {
            box_psd_projection(&w)
        } else {
            psd_projection(&w)
        };
        u += &x - &z;

        if iterations % 25 == 0 || iterations == max_iter {
            let value = frob_dot(&p.objective, &z);
            let pr = proj.residual(&z).norm();
            let cone_gap = (&x - &z).norm();
            res_history.push(pr + cone_gap);
            value_window.push(value);
            if value_window.len() > 4 {
                value_window.remove(0);
            }
            let flat = value_window.len() == 4
                && value_window
                    .iter()
                    .all(|v| (v - value).abs() <= 10.0 * tolerance * (1.0 + value.abs()));
            if pr <= tolerance * (1.0 + b_norm) && cone_gap <= tolerance * (1.0 + z.norm()) && flat
            {
                status = SdpStatus::Optimal;
                last_value = value;
                break;
            }
            // diverging residuals: declare infeasible
            if res_history.len() > 40 {
                let old = res_history[res_history.len() - 41];
                let new = res_history[res_history.len() - 1];
                if new > 10.0 * old && new > 1.0 + b_norm {
                    status = SdpStatus::Infeasible;
                    last_value = value;
                    break;
                }
            }
            // slow progress: shrink the objective step to let feasibility win
            if iterations % 5000 == 0 {
                step *= 0.5;
            }
            last_value = value;
        }
    }

    let pr = proj.residual(&z).norm();
    let dr = (&x - &z).norm();
    if status == SdpStatus::MaxIter
        && pr <= tolerance * (1.0 + b_norm)
        && dr <= tolerance * (1.0 + z.norm())
    {
        // feasible but the value window never settled; report the looser status
        status = SdpStatus::MaxIter;
    }
    Ok(SdpSolution {
        value: if last_value.is_finite() {
            frob_dot(&p.objective, &z)
        } else {
            frob_dot(&p.objective, &z)
        },
        x: z,
        primal_residual: pr,
        dual_residual: dr,
        iterations,
        status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_sym(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |_, _, | rng.random_range(-1.0..1.0));
        (&m + m.transpose()) * 0.5
    }

    fn trace_constraint(n: usize) -> (DMatrix<f64>, f64) {
        (DMatrix::identity(n, n), 1.0)
    }

    #[test]
    fn max_eig_diag() {
        let (v, vec) = max_eig(&DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0])))
            .unwrap();
        assert!((v - 2.0).abs() < 1e-12);
        assert!((vec[0].abs() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn max_eig_identity_degenerate() {
        let (v, vec) = max_eig(&DMatrix::identity(3, 3)).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        assert!((vec.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn max_eig_matches_rayleigh() {
        let mut r = rng(1);
        let m = random_sym(50, &mut r);
        let (v, vec) = max_eig(&m).unwrap();
        let rayleigh = (vec.transpose() * &m * &vec)[(0, 0)];
        assert!((v - rayleigh).abs() < 1e-9);
        // dominance over random directions
        for _ in 0..100 {
            let w = DVector::from_fn(50, |_, _| r.random_range(-1.0..1.0)).normalize();
            let q = (w.transpose() * &m * &w)[(0, 0)];
            assert!(v + 1e-9 >= q);
        }
    }

    #[test]
    fn max_eig_rejects_nonfinite() {
        let mut m = DMatrix::identity(2, 2);
        m[(0, 1)] = f64::NAN;
        assert!(max_eig(&m).is_err());
    }

    #[test]
    fn solve_simple_eigenproblem() {
        let p = SdpProblem {
            objective: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0])),
            constraints: vec![trace_constraint(2)],
            diag_cap: None,
        };
        let sol = solve(&p, 1e-7, 50_000).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert!((sol.value - 1.0).abs() < 1e-5);
        assert!((sol.x[(0, 0)] - 1.0).abs() < 1e-4);
        assert!(sol.x[(1, 1)].abs() < 1e-4);
    }

    #[test]
    fn solve_matches_lambda_max() {
        let mut r = rng(7);
        for _ in 0..5 {
            let c = random_sym(4, &mut r);
            let p = SdpProblem {
                objective: c.clone(),
                constraints: vec![trace_constraint(4)],
                diag_cap: None,
            };
            let sol = solve(&p, 1e-8, 50_000).unwrap();
            let (lam, _) = max_eig(&c).unwrap();
            assert!(
                (sol.value - lam).abs() < 1e-6 * (1.0 + lam.abs()),
                "value {} vs lambda_max {}",
                sol.value,
                lam
            );
        }
    }

    /// Projected-gradient reference solver, run to a tiny step size.
    fn reference_solve(p: &SdpProblem, iters: usize) -> f64 {
        let n = p.objective.nrows();
        let proj = AffineProjector::new(&p.constraints).unwrap();
        let mut x = proj.project(&DMatrix::identity(n, n));
        x = psd_projection(&x);
        let mut best = f64::NEG_INFINITY;
        for k in 0..iters {
            let step = 0.5 / (1.0 + k as f64).sqrt();
            let y = &x + &p.objective * step;
            // alternating projections to get back near the intersection
            let mut z = y;
            for _ in 0..60 {
                z = psd_projection(&proj.project(&z));
            }
            x = z;
            let val = frob_dot(&p.objective, &x);
            let feas = proj.residual(&x).norm();
            if feas < 1e-6 {
                best = best.max(val);
            }
        }
        best
    }

    #[test]
    fn solve_matches_reference_on_constrained_problem() {
        let mut r = rng(3);
        let c = random_sym(3, &mut r);
        let a1 = random_sym(3, &mut r);
        let p = SdpProblem {
            objective: c,
            constraints: vec![trace_constraint(3), (a1, 0.3)],
            diag_cap: None,
        };
        let sol = solve(&p, 1e-8, 50_000).unwrap();
        let reference = reference_solve(&p, 400);
        assert!(
            (sol.value - reference).abs() < 1e-4 * (1.0 + reference.abs()),
            "splitting {} vs reference {}",
            sol.value,
            reference
        );
    }

    #[test]
    fn solve_scaling_equivariance() {
        let mut r = rng(11);
        let c = random_sym(3, &mut r);
        let p1 = SdpProblem {
            objective: c.clone(),
            constraints: vec![trace_constraint(3)],
            diag_cap: None,
        };
        let p2 = SdpProblem {
            objective: c * 5.0,
            constraints: vec![trace_constraint(3)],
            diag_cap: None,
        };
        let s1 = solve(&p1, 1e-8, 50_000).unwrap();
        let s2 = solve(&p2, 1e-8, 50_000).unwrap();
        assert!((s2.value - 5.0 * s1.value).abs() < 1e-5 * (1.0 + s2.value.abs()));
    }

    #[test]
    fn solve_feasibility_of_returned_x() {
        let mut r = rng(13);
        let c = random_sym(4, &mut r);
        let a = random_sym(4, &mut r);
        let p = SdpProblem {
            objective: c,
            constraints: vec![trace_constraint(4), (a, 0.1)],
            diag_cap: None,
        };
        let sol = solve(&p, 1e-7, 50_000).unwrap();
        assert!(min_eig(&sol.x).unwrap() >= -1e-6);
        let resid: f64 = p
            .constraints
            .iter()
            .map(|(a, b)| (frob_dot(a, &sol.x) - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(resid <= 1e-6 * (1.0 + 1.0));
    }

    #[test]
    fn solve_with_diag_cap() {
        // maximize tr(X) with X ⪯ I/2 and one slack constraint: optimum n/2
        let n = 3;
        let p = SdpProblem {
            objective: DMatrix::identity(n, n),
            constraints: vec![(random_sym(n, &mut rng(2)), 0.0)],
            diag_cap: Some(DVector::from_element(n, 0.5)),
        };
        let sol = solve(&p, 1e-7, 50_000).unwrap();
        assert!(sol.value <= n as f64 * 0.5 + 1e-4);
        let (lam, _) = max_eig(&sol.x).unwrap();
        assert!(lam <= 0.5 + 1e-5);
    }

    #[test]
    fn solve_detects_infeasible() {
        // tr(X) = -1 has no PSD solution
        let p = SdpProblem {
            objective: DMatrix::identity(2, 2),
            constraints: vec![(DMatrix::identity(2, 2), -1.0)],
            diag_cap: None,
        };
        let sol = solve(&p, 1e-7, 50_000).unwrap();
        assert_ne!(sol.status, SdpStatus::Optimal);
    }

    #[test]
    fn psd_projection_idempotent_and_psd() {
        let mut r = rng(5);
        let m = random_sym(6, &mut r);
        let p1 = psd_projection(&m);
        let p2 = psd_projection(&p1);
        assert!((&p1 - &p2).norm() < 1e-10);
        assert!(min_eig(&p1).unwrap() >= -1e-10);
    }
}
