//! The basic clustering relaxation.
//!
//! Given weighted points, a multiplier λ and a threshold Γ, the solver
//! either returns candidate centers w_1..w_n whose adversarial objective
//! is at most 2Γ, or dual witnesses (a sphere pseudodistribution ξ and a
//! budgeted family ζ_1..ζ_n) certifying that no centers can push the
//! objective below Γ. The two players are handled by best responses:
//! ξ by spectral / power-iteration maximization of the weighted residual
//! moments, ζ by a multiplicative fixed point for the shared-budget
//! packing program whose trace dual supplies certified upper bounds, and
//! the centers by per-point convex minimization. Dual iterates are
//! averaged across rounds and every exit is re-verified from the returned
//! witnesses.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::pseudomoments::{self, PseudoError, PseudoMomentState};
use crate::sdp;
use crate::tensor::SymmetricTensor;

#[derive(Debug, Error)]
pub enum RelaxError {
    #[error("weights must lie in [0,1]; weight {index} is {value}")]
    BadWeight { index: usize, value: f64 },
    #[error("t = {0} unsupported; the coupled relaxation handles t in {{1, 2}}")]
    UnsupportedLevel(usize),
    #[error("threshold must be positive, got {0}")]
    BadThreshold(f64),
    #[error("empty point set")]
    Empty,
    #[error("neither exit condition certifiable after {rounds} rounds (primal bound {primal:.4e}, dual bound {dual:.4e}, threshold {gamma:.4e})")]
    Indeterminate {
        rounds: usize,
        primal: f64,
        dual: f64,
        gamma: f64,
    },
    #[error(transparent)]
    Pseudo(#[from] PseudoError),
    #[error(transparent)]
    Sdp(#[from] sdp::SdpError),
}

#[derive(Debug, Clone)]
pub struct RelaxationInput {
    pub points: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
    pub lambda: f64,
    pub gamma: f64,
    pub t: usize,
}

impl RelaxationInput {
    fn validate(&self) -> Result<(), RelaxError> {
        if self.points.is_empty() {
            return Err(RelaxError::Empty);
        }
        if !(self.t == 1 || self.t == 2) {
            return Err(RelaxError::UnsupportedLevel(self.t));
        }
        if !(self.gamma > 0.0) {
            return Err(RelaxError::BadThreshold(self.gamma));
        }
        for (i, &c) in self.weights.iter().enumerate() {
            if !(0.0..=1.0).contains(&c) {
                return Err(RelaxError::BadWeight { index: i, value: c });
            }
        }
        Ok(())
    }
}

/// Per-point budget-coupled moment families.
///
/// For t = 1 these are PSD matrices Z_i with ΣZ_i ⪯ I. For t = 2 each
/// family is a list of weighted direction atoms; the budget is the
/// Gram-witness dominance Σ masses·h(ẑ)h(ẑ)ᵀ ⪯ Q over the symmetric-
/// matrix coordinates, a sufficient condition for the sum-of-squares
/// budget on the order-4 tensors.
#[derive(Debug, Clone)]
pub enum BudgetedMomentFamily {
    Order2 {
        z: Vec<DMatrix<f64>>,
    },
    Order4 {
        dim: usize,
        atoms: Vec<Vec<(f64, DVector<f64>)>>,
        /// coefficient of an isotropic component β_i·Q per point, giving
        /// the contribution β_i‖w‖⁴
        iso: Vec<f64>,
    },
}

impl BudgetedMomentFamily {
    pub fn len(&self) -> usize {
        match self {
            BudgetedMomentFamily::Order2 { z } => z.len(),
            BudgetedMomentFamily::Order4 { atoms, .. } => atoms.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// pE_{ζ_i}[⟨w, z⟩^{2t}].
    pub fn expect_power(&self, i: usize, w: &DVector<f64>) -> f64 {
        match self {
            BudgetedMomentFamily::Order2 { z } => (w.transpose() * &z[i] * w)[(0, 0)],
            BudgetedMomentFamily::Order4 { atoms, iso, .. } => {
                let atomic: f64 = atoms[i]
                    .iter()
                    .map(|(m, zdir)| m * zdir.dot(w).powi(4))
                    .sum();
                atomic + iso[i] * w.norm_squared().powi(2)
            }
        }
    }

    /// λ_max of the budget operator; feasible families stay ≤ 1.
    pub fn budget_load(&self) -> Result<f64, RelaxError> {
        match self {
            BudgetedMomentFamily::Order2 { z } => {
                if z.is_empty() {
                    return Ok(0.0);
                }
                let d = z[0].nrows();
                let mut total = DMatrix::zeros(d, d);
                for m in z {
                    total += m;
                }
                Ok(sdp::max_eig(&total)?.0)
            }
            BudgetedMomentFamily::Order4 { dim, atoms, iso } => {
                let sym = SymSpace::new(*dim);
                let dd = sym.len();
                let beta: f64 = iso.iter().sum();
                let mut total = DMatrix::from_diagonal_element(dd, dd, beta);
                for list in atoms {
                    for (m, zdir) in list {
                        let h = sym.whitened_symvec(zdir);
                        total.ger(*m, &h, &h, 1.0);
                    }
                }
                if total.norm() == 0.0 {
                    return Ok(0.0);
                }
                Ok(sdp::max_eig(&total)?.0)
            }
        }
    }
}

/// Orthonormal coordinates on symmetric d×d matrices plus the budget
/// metric Q for the order-4 Gram witnesses: hᵀQh reproduces ‖v‖⁴ on
/// h = symvec(vvᵀ), and Q has the closed-form square roots
/// Q = (2/3)I + (1/3)ssᵀ with s = symvec(I).
struct SymSpace {
    pairs: Vec<(usize, usize)>,
    s_hat: DVector<f64>,
    sqrt_lo: f64,
    sqrt_hi: f64,
}

impl SymSpace {
    fn new(dim: usize) -> Self {
        let mut pairs = Vec::new();
        for i in 0..dim {
            for j in i..dim {
                pairs.push((i, j));
            }
        }
        let mut s = DVector::zeros(pairs.len());
        for (p, &(i, j)) in pairs.iter().enumerate() {
            if i == j {
                s[p] = 1.0;
            }
        }
        let s_hat = &s / s.norm();
        let lo: f64 = 2.0 / 3.0;
        let hi = (2.0 + dim as f64) / 3.0;
        SymSpace {
            pairs,
            s_hat,
            sqrt_lo: lo.sqrt(),
            sqrt_hi: hi.sqrt(),
        }
    }

    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn symvec(&self, w: &DVector<f64>) -> DVector<f64> {
        let root2 = std::f64::consts::SQRT_2;
        DVector::from_fn(self.pairs.len(), |p, _| {
            let (i, j) = self.pairs[p];
            if i == j {
                w[i] * w[j]
            } else {
                root2 * w[i] * w[j]
            }
        })
    }

    fn apply_q_power(&self, h: &DVector<f64>, lo_pow: f64, hi_pow: f64) -> DVector<f64> {
        let along = self.s_hat.dot(h);
        h * lo_pow + &self.s_hat * ((hi_pow - lo_pow) * along)
    }

    /// Q^{-1/2} symvec(wwᵀ), for budget-load checks.
    fn whitened_symvec(&self, w: &DVector<f64>) -> DVector<f64> {
        let h = self.symvec(w);
        self.apply_q_power(&h, 1.0 / self.sqrt_lo, 1.0 / self.sqrt_hi)
    }

    /// Q^{1/2} symvec(wwᵀ), the objective vector of the whitened packing
    /// program (hᵀẐh = (Q^{1/2}h)ᵀ Z̃ (Q^{1/2}h) when Z̃ = Q^{-1/2}ẐQ^{-1/2}).
    fn lifted_symvec(&self, w: &DVector<f64>) -> DVector<f64> {
        let h = self.symvec(w);
        self.apply_q_power(&h, self.sqrt_lo, self.sqrt_hi)
    }
}

/// Solution of max Σ_i ⟨Z_i, g_i g_iᵀ⟩ over Z_i ⪰ 0 with Σ Z_i ⪯ I,
/// by the multiplicative fixed point on the concave dual
/// max_{u ≥ 0} 2·tr H(u)^{1/2} − Σu with H(u) = Σ u_i g_i g_iᵀ.
pub struct PackingSolution {
    /// per-point achieved values ⟨Z_i, g_ig_iᵀ⟩ for the feasible primal
    pub contributions: Vec<f64>,
    /// value of the feasible primal (Σ contributions)
    pub primal_value: f64,
    /// certified upper bound from the scaled trace dual
    pub dual_value: f64,
    /// Y⁺ g_i for primal recovery
    y_pinv_g: Vec<DVector<f64>>,
    u: Vec<f64>,
}

pub fn solve_packing(g: &[DVector<f64>], tol: f64, max_iter: usize) -> PackingSolution {
    let n = g.len();
    let d = g.first().map(|v| v.len()).unwrap_or(0);
    let norms_sq: Vec<f64> = g.iter().map(|v| v.norm_squared()).collect();
    let max_norm_sq = norms_sq.iter().fold(0.0f64, |a, &b| a.max(b));
    // a non-finite input would send the eigensolver into a spin; an
    // infinite dual bound keeps the caller from claiming a primal exit
    if max_norm_sq < 1e-300 || !max_norm_sq.is_finite() {
        let degenerate = !max_norm_sq.is_finite();
        return PackingSolution {
            contributions: vec![0.0; n],
            primal_value: 0.0,
            dual_value: if degenerate { f64::INFINITY } else { 0.0 },
            y_pinv_g: vec![DVector::zeros(d); n],
            u: vec![0.0; n],
        };
    }

    let mut u: Vec<f64> = norms_sq
        .iter()
        .map(|&s| (s / max_norm_sq).max(1e-12))
        .collect();
    let mut phi_prev = f64::NEG_INFINITY;
    let mut eta = 1.0;

    // rows of gmat are the g_i, so H(u) = Gᵀ diag(u) G comes from one gemm
    let gmat = DMatrix::from_fn(n, d, |i, j| g[i][j]);
    let build = |u: &[f64]| -> DMatrix<f64> {
        let mut scaled = gmat.clone();
        for (i, &ui) in u.iter().enumerate() {
            if ui != 1.0 {
                scaled.row_mut(i).scale_mut(ui.max(0.0));
            }
        }
        gmat.transpose() * scaled
    };

    let mut ratios = vec![0.0; n];
    for _ in 0..max_iter {
        let h = build(&u);
        let eig = nalgebra::SymmetricEigen::new(h);
        let lam_max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let thresh = lam_max * 1e-13;
        // tr H^{1/2} and the ratios g_iᵀ H^{-1/2} g_i via the eigenbasis
        let mut tr_sqrt = 0.0;
        let mut inv_sqrt = vec![0.0; d];
        for (k, &lam) in eig.eigenvalues.iter().enumerate() {
            if lam > thresh {
                tr_sqrt += lam.sqrt();
                inv_sqrt[k] = 1.0 / lam.sqrt();
            }
        }
        let phi = 2.0 * tr_sqrt - u.iter().sum::<f64>();
        if phi + 1e-12 * (1.0 + phi.abs()) < phi_prev {
            eta *= 0.5;
            if eta < 1e-3 {
                eta = 1e-3;
            }
        }
        phi_prev = phi;

        let proj = &gmat * &eig.eigenvectors;
        let mut worst: f64 = 0.0;
        let mut slack = 0.0;
        for i in 0..n {
            let mut r = 0.0;
            for k in 0..d {
                let p = proj[(i, k)];
                r += p * p * inv_sqrt[k];
            }
            ratios[i] = r;
            worst = worst.max(r);
            slack += u[i] * (r - 1.0).abs();
        }
        let total_u: f64 = u.iter().sum();
        if worst <= 1.0 + tol && slack <= tol * (1.0 + total_u) {
            break;
        }
        for i in 0..n {
            if ratios[i] > 0.0 {
                u[i] *= ratios[i].powf(eta);
            } else {
                u[i] *= 0.5;
            }
        }
    }

    // final certified quantities from Y = H(u)^{1/2}
    let h = build(&u);
    let eig = nalgebra::SymmetricEigen::new(h);
    let lam_max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let thresh = lam_max * 1e-13;
    let mut tr_y = 0.0;
    for &lam in eig.eigenvalues.iter() {
        if lam > thresh {
            tr_y += lam.sqrt();
        }
    }
    // Y⁺ g_i, ratios for dual feasibility scaling, and a range-leak check
    let mut y_pinv_g = Vec::with_capacity(n);
    let mut scale: f64 = 1.0;
    for gi in g {
        let proj = eig.eigenvectors.transpose() * gi;
        let mut back = DVector::zeros(d);
        let mut ratio = 0.0;
        let mut in_range_sq = 0.0;
        for (k, &lam) in eig.eigenvalues.iter().enumerate() {
            if lam > thresh {
                let sqrt_lam = lam.sqrt();
                ratio += proj[k] * proj[k] / sqrt_lam;
                in_range_sq += proj[k] * proj[k];
                back += eig.eigenvectors.column(k) * (proj[k] / sqrt_lam);
            }
        }
        // mass outside the range of Y makes Y ⪰ ggᵀ impossible without a
        // ridge; fold the leak into the scale conservatively
        let leak = (gi.norm_squared() - in_range_sq).max(0.0);
        if leak > 1e-10 * gi.norm_squared() && lam_max > 0.0 {
            ratio += leak / (lam_max * 1e-13).sqrt().max(1e-150);
        }
        scale = scale.max(ratio);
        y_pinv_g.push(back);
    }
    let dual_value = scale * tr_y;

    // feasible primal: Z_i = u_i (Y⁺g_i)(Y⁺g_i)ᵀ, rescaled so ΣZ_i ⪯ I
    let mut z_sum = DMatrix::zeros(d, d);
    for (ui, yg) in u.iter().zip(&y_pinv_g) {
        z_sum.ger(*ui, yg, yg, 1.0);
    }
    let z_top = sdp::max_eig(&z_sum).map(|(v, _)| v).unwrap_or(1.0);
    let feas_scale = if z_top > 1.0 { 1.0 / z_top } else { 1.0 };
    let mut contributions = Vec::with_capacity(n);
    let mut primal_value = 0.0;
    for i in 0..n {
        let c = feas_scale * u[i] * g[i].dot(&y_pinv_g[i]).powi(2);
        contributions.push(c);
        primal_value += c;
    }

    PackingSolution {
        contributions,
        primal_value,
        dual_value,
        y_pinv_g,
        u,
    }
}

/// Best response of the budgeted ζ player to centers w: maximize
/// Σ_i c_i pE_{ζ_i}[⟨w_i, z⟩^{2t}] subject to the shared budget. Returns
/// the feasible family with its achieved value; `zeta_dual_upper` gives
/// the matching certified upper bound.
pub fn zeta_best_response(
    w: &[DVector<f64>],
    c: &[f64],
    t: usize,
) -> Result<(BudgetedMomentFamily, f64), RelaxError> {
    let resp = zeta_response_full(w, c, t, 1e-9, 400)?;
    Ok((resp.family, resp.primal_value))
}

/// Certified upper bound on the ζ best-response value.
pub fn zeta_dual_upper(w: &[DVector<f64>], c: &[f64], t: usize) -> Result<f64, RelaxError> {
    Ok(zeta_response_full(w, c, t, 1e-9, 400)?.dual_value)
}

struct ZetaResponse {
    family: BudgetedMomentFamily,
    primal_value: f64,
    dual_value: f64,
}

fn zeta_response_full(
    w: &[DVector<f64>],
    c: &[f64],
    t: usize,
    tol: f64,
    max_iter: usize,
) -> Result<ZetaResponse, RelaxError> {
    let n = w.len();
    if n == 0 {
        return Err(RelaxError::Empty);
    }
    let d = w[0].len();
    match t {
        1 => {
            let g: Vec<DVector<f64>> = w
                .iter()
                .zip(c)
                .map(|(wi, &ci)| wi * ci.max(0.0).sqrt())
                .collect();
            let sol = solve_packing(&g, tol, max_iter);
            // Z_i in the original coordinates: u_i (Y⁺g)(Y⁺g)ᵀ rescaled
            let mut z_sum = DMatrix::zeros(d, d);
            for (ui, yg) in sol.u.iter().zip(&sol.y_pinv_g) {
                z_sum.ger(*ui, yg, yg, 1.0);
            }
            let top = sdp::max_eig(&z_sum)?.0;
            let fs = if top > 1.0 { 1.0 / top } else { 1.0 };
            let z: Vec<DMatrix<f64>> = sol
                .u
                .iter()
                .zip(&sol.y_pinv_g)
                .map(|(ui, yg)| {
                    let mut m = DMatrix::zeros(d, d);
                    m.ger(fs * ui, yg, yg, 1.0);
                    (&m + m.transpose()) * 0.5
                })
                .collect();
            Ok(ZetaResponse {
                family: BudgetedMomentFamily::Order2 { z },
                primal_value: sol.primal_value,
                dual_value: sol.dual_value,
            })
        }
        2 => {
            let sym = SymSpace::new(d);
            let g: Vec<DVector<f64>> = w
                .iter()
                .zip(c)
                .map(|(wi, &ci)| sym.lifted_symvec(wi) * ci.max(0.0).sqrt())
                .collect();
            let sol = solve_packing(&g, tol, max_iter);
            // witnesses reproducing the per-point contributions, rescaled
            // into the budget: try a direction atom per point and a purely
            // isotropic split, keep whichever survives the rescale better
            let dd = sym.len();
            let mut raw: Vec<f64> = vec![0.0; n];
            for i in 0..n {
                let wn = w[i].norm();
                if wn >= 1e-12 && c[i] > 0.0 && sol.contributions[i] > 0.0 {
                    raw[i] = sol.contributions[i] / (c[i] * wn.powi(4));
                }
            }
            // atomic candidate
            let mut load = DMatrix::zeros(dd, dd);
            for i in 0..n {
                if raw[i] > 0.0 {
                    let h = sym.whitened_symvec(&(&w[i] / w[i].norm()));
                    load.ger(raw[i], &h, &h, 1.0);
                }
            }
            let atom_top = if load.norm() > 0.0 {
                sdp::max_eig(&load)?.0
            } else {
                0.0
            };
            let atom_scale = if atom_top > 1.0 { 1.0 / atom_top } else { 1.0 };
            // isotropic candidate: load is simply the total coefficient
            let iso_total: f64 = raw.iter().sum();
            let iso_scale = if iso_total > 1.0 { 1.0 / iso_total } else { 1.0 };

            let value_with = |scale: f64| -> f64 {
                raw.iter()
                    .enumerate()
                    .map(|(i, &m)| c[i] * scale * m * w[i].norm_squared().powi(2))
                    .sum()
            };
            let (atoms, iso, primal_value) = if value_with(atom_scale) >= value_with(iso_scale) {
                let atoms: Vec<Vec<(f64, DVector<f64>)>> = (0..n)
                    .map(|i| {
                        if raw[i] > 0.0 {
                            vec![(raw[i] * atom_scale, &w[i] / w[i].norm())]
                        } else {
                            Vec::new()
                        }
                    })
                    .collect();
                (atoms, vec![0.0; n], value_with(atom_scale))
            } else {
                let iso: Vec<f64> = raw.iter().map(|&m| m * iso_scale).collect();
                (vec![Vec::new(); n], iso, value_with(iso_scale))
            };
            Ok(ZetaResponse {
                family: BudgetedMomentFamily::Order4 {
                    dim: d,
                    atoms,
                    iso,
                },
                primal_value,
                dual_value: sol.dual_value,
            })
        }
        other => Err(RelaxError::UnsupportedLevel(other)),
    }
}

/// Best response of the sphere player to the residuals: the maximizing
/// pseudodistribution for Σ_i c_i pE[⟨x_i − w_i, v⟩^{2t}] and its value.
pub fn xi_best_response(
    residuals: &[DVector<f64>],
    c: &[f64],
    t: usize,
) -> Result<(PseudoMomentState, f64), RelaxError> {
    let n = residuals.len();
    if n == 0 {
        return Err(RelaxError::Empty);
    }
    let d = residuals[0].len();
    match t {
        1 => {
            let mut m = DMatrix::zeros(d, d);
            for (r, &ci) in residuals.iter().zip(c) {
                if ci > 0.0 {
                    m.ger(ci, r, r, 1.0);
                }
            }
            if m.norm() == 0.0 {
                let e1 = DVector::from_fn(d, |i, _| if i == 0 { 1.0 } else { 0.0 });
                return Ok((pseudomoments::point_mass_state(&e1, 1)?, 0.0));
            }
            let (lam, v) = sdp::max_eig(&m)?;
            Ok((pseudomoments::point_mass_state(&v.normalize(), 1)?, lam.max(0.0)))
        }
        2 => {
            let weights: Vec<f64> = c.to_vec();
            let mut tensor = SymmetricTensor::zeros(d, 4);
            let center = DVector::zeros(d);
            let total: f64 = weights.iter().sum();
            if total <= 0.0 {
                let e1 = DVector::from_fn(d, |i, _| if i == 0 { 1.0 } else { 0.0 });
                return Ok((pseudomoments::point_mass_state(&e1, 2)?, 0.0));
            }
            let m = SymmetricTensor::moment_tensor(residuals, &weights, &center, 4)
                .map_err(|_| RelaxError::Empty)?;
            tensor.add_scaled(total, &m).expect("same shape");
            if tensor.frobenius_norm() < 1e-300 {
                let e1 = DVector::from_fn(d, |i, _| if i == 0 { 1.0 } else { 0.0 });
                return Ok((pseudomoments::point_mass_state(&e1, 2)?, 0.0));
            }
            let res = pseudomoments::sos_norm(&tensor, 1e-8)?;
            Ok((res.witness, res.value))
        }
        other => Err(RelaxError::UnsupportedLevel(other)),
    }
}

/// Cheap in-loop sphere response for t = 2: multi-start power iteration
/// on v ← Σ c_i ⟨r_i, v⟩³ r_i, a valid point-mass lower bound.
fn xi_power_response(
    residuals: &[DVector<f64>],
    c: &[f64],
    rng: &mut ChaCha8Rng,
) -> (DVector<f64>, f64) {
    let d = residuals[0].len();
    let mut m = DMatrix::zeros(d, d);
    for (r, &ci) in residuals.iter().zip(c) {
        if ci > 0.0 {
            m.ger(ci, r, r, 1.0);
        }
    }
    let spectral_start = sdp::max_eig(&m)
        .map(|(_, v)| v)
        .unwrap_or_else(|_| DVector::from_fn(d, |i, _| if i == 0 { 1.0 } else { 0.0 }));
    let mut best_v = spectral_start.clone();
    let mut best_val = f64::NEG_INFINITY;
    let value = |v: &DVector<f64>| -> f64 {
        residuals
            .iter()
            .zip(c)
            .map(|(r, &ci)| ci * r.dot(v).powi(4))
            .sum()
    };
    let mut starts = vec![spectral_start];
    for _ in 0..3 {
        starts.push(DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)).normalize());
    }
    for start in starts {
        let mut v = start;
        for _ in 0..30 {
            let mut next = DVector::zeros(d);
            for (r, &ci) in residuals.iter().zip(c) {
                if ci > 0.0 {
                    next += r * (ci * r.dot(&v).powi(3));
                }
            }
            let norm = next.norm();
            if norm < 1e-14 {
                break;
            }
            v = next / norm;
        }
        let val = value(&v);
        if val > best_val {
            best_val = val;
            best_v = v;
        }
    }
    (best_v, best_val.max(0.0))
}

#[derive(Debug)]
pub enum RelaxationOutcome {
    Primal {
        w: Vec<DVector<f64>>,
        /// adversarial objective at the returned centers, re-verified
        objective: f64,
    },
    Dual {
        xi: PseudoMomentState,
        zeta: BudgetedMomentFamily,
        tau_star: Vec<f64>,
        /// Σ c_i τ_i*, recomputed from the witnesses
        value: f64,
    },
}

/// Averaged dual state kept across rounds.
struct DualAverage {
    t: usize,
    rounds: f64,
    /// running average of the ξ moment vectors (degree ≤ 2t)
    xi_moments: DVector<f64>,
    /// t = 1: running average of the Z_i matrices
    z_avg: Vec<DMatrix<f64>>,
    /// t = 2: merged atom lists with averaged masses
    atoms: Vec<Vec<(f64, DVector<f64>)>>,
    /// t = 2: averaged isotropic coefficients
    iso: Vec<f64>,
}

impl DualAverage {
    fn new(t: usize, n: usize, d: usize) -> Self {
        let full = pseudomoments::MonomialBasis::new(d, 2 * t);
        DualAverage {
            t,
            rounds: 0.0,
            xi_moments: DVector::zeros(full.len()),
            z_avg: if t == 1 {
                vec![DMatrix::zeros(d, d); n]
            } else {
                Vec::new()
            },
            atoms: if t == 2 { vec![Vec::new(); n] } else { Vec::new() },
            iso: if t == 2 { vec![0.0; n] } else { Vec::new() },
        }
    }

    fn push(&mut self, xi: &PseudoMomentState, zeta: &BudgetedMomentFamily) {
        let k = self.rounds;
        let k1 = k + 1.0;
        self.xi_moments = (&self.xi_moments * k + &xi.moment_vector) / k1;
        match zeta {
            BudgetedMomentFamily::Order2 { z } => {
                for (avg, new) in self.z_avg.iter_mut().zip(z) {
                    *avg = (avg.clone() * k + new) / k1;
                }
            }
            BudgetedMomentFamily::Order4 { atoms, iso, .. } => {
                for (avg_b, &new_b) in self.iso.iter_mut().zip(iso) {
                    *avg_b = (*avg_b * k + new_b) / k1;
                }
                for (list, new_list) in self.atoms.iter_mut().zip(atoms) {
                    for (m, _) in list.iter_mut() {
                        *m *= k / k1;
                    }
                    for (mass, dir) in new_list {
                        let scaled = mass / k1;
                        // merge near-identical directions to cap list growth
                        let mut merged = false;
                        for (em, ed) in list.iter_mut() {
                            if ed.dot(dir).abs() > 0.99999 {
                                *em += scaled;
                                merged = true;
                                break;
                            }
                        }
                        if !merged {
                            list.push((scaled, dir.clone()));
                        }
                    }
                    if list.len() > 16 {
                        list.sort_by(|a, b| b.0.total_cmp(&a.0));
                        list.truncate(16);
                    }
                }
            }
        }
        self.rounds = k1;
    }

    fn xi_state(&self, d: usize) -> PseudoMomentState {
        PseudoMomentState::from_moment_vector(d, self.t, self.xi_moments.clone())
    }

    fn zeta_family(&self, d: usize) -> BudgetedMomentFamily {
        if self.t == 1 {
            BudgetedMomentFamily::Order2 {
                z: self.z_avg.clone(),
            }
        } else {
            BudgetedMomentFamily::Order4 {
                dim: d,
                atoms: self.atoms.clone(),
                iso: self.iso.clone(),
            }
        }
    }

    /// Moment tensor pE[v^{⊗2t}] of the averaged ξ for the center updates.
    fn xi_tensor(&self, d: usize) -> SymmetricTensor {
        let full = pseudomoments::MonomialBasis::new(d, 2 * self.t);
        let mut t = SymmetricTensor::zeros(d, 2 * self.t);
        let table_len = t.table().len();
        for r in 0..table_len {
            let key = t.table().keys[r].clone();
            let mut expo = vec![0u8; d];
            for &i in &key {
                expo[i as usize] += 1;
            }
            let pos = full.position(&expo).expect("degree bounded");
            t.set_entry(&key, self.xi_moments[pos]);
        }
        t
    }
}

/// Exact minimization of τ_i(w) = ⟨T̄, (x−w)^{⊗2t}⟩ + λ·pE_{ζ_i}⟨w,z⟩^{2t}
/// (convex in w for both families).
fn minimize_tau(
    x: &DVector<f64>,
    xi_flat: &DMatrix<f64>,
    zeta: &BudgetedMomentFamily,
    i: usize,
    lambda: f64,
    t: usize,
    start: &DVector<f64>,
) -> (DVector<f64>, f64) {
    let d = x.len();
    if t == 1 {
        // closed form: w = (M + λZ)⁻¹ M x
        let m = xi_flat;
        let z = match zeta {
            BudgetedMomentFamily::Order2 { z } => &z[i],
            _ => unreachable!("order mismatch"),
        };
        let a = m + z * lambda;
        let rhs = m * x;
        // relative-threshold pseudo-inverse: an absolute cutoff would
        // invert noise-level eigenvalues and blow the solution up
        let eig = nalgebra::SymmetricEigen::new(a);
        let lam_max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let thresh = lam_max * 1e-10;
        let mut w = DVector::zeros(d);
        for (k, &lam) in eig.eigenvalues.iter().enumerate() {
            if lam > thresh {
                let q = eig.eigenvectors.column(k);
                let coord = q.dot(&rhs) / lam;
                w.axpy(coord, &q.into_owned(), 1.0);
            }
        }
        if w.iter().any(|v| !v.is_finite()) {
            w = start.clone();
        }
        let r = x - &w;
        let tau = (r.transpose() * m * &r)[(0, 0)] + lambda * (w.transpose() * z * &w)[(0, 0)];
        return (w, tau);
    }

    // t = 2: damped Newton on the convex quartic
    let eval = |w: &DVector<f64>| -> f64 {
        let r = x - w;
        let quart = xi_quartic(xi_flat, &r);
        quart + lambda * zeta.expect_power(i, w)
    };
    let mut w = start.clone();
    let mut fw = eval(&w);
    // also consider the residual-free and zero starts
    for cand in [x.clone(), DVector::zeros(d)] {
        let fc = eval(&cand);
        if fc < fw {
            fw = fc;
            w = cand;
        }
    }
    for _ in 0..40 {
        let r = x - &w;
        // gradient and Hessian of ⟨T̄, r^{⊗4}⟩ via the flattening contraction
        let a = xi_contract(xi_flat, &r);
        let mut grad = &a * &r * (-4.0);
        let mut hess = a * 12.0;
        if let BudgetedMomentFamily::Order4 { atoms, iso, .. } = zeta {
            for (mass, zdir) in &atoms[i] {
                let dot = zdir.dot(&w);
                grad += zdir * (4.0 * lambda * mass * dot.powi(3));
                hess.ger(12.0 * lambda * mass * dot * dot, zdir, zdir, 1.0);
            }
            let beta = iso[i];
            if beta > 0.0 {
                let wn2 = w.norm_squared();
                grad += &w * (4.0 * lambda * beta * wn2);
                hess.ger(8.0 * lambda * beta, &w, &w, 1.0);
                for k in 0..d {
                    hess[(k, k)] += 4.0 * lambda * beta * wn2;
                }
            }
        }
        let gn = grad.norm();
        if gn < 1e-12 * (1.0 + fw.abs()) {
            break;
        }
        for k in 0..d {
            hess[(k, k)] += 1e-10 + 1e-8 * hess[(k, k)].abs();
        }
        let step = hess
            .clone()
            .cholesky()
            .map(|ch| ch.solve(&grad))
            .unwrap_or_else(|| grad.clone() * (1.0 / (1.0 + gn)));
        let mut alpha = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let cand = &w - &step * alpha;
            let fc = eval(&cand);
            if fc < fw - 1e-14 * (1.0 + fw.abs()) {
                w = cand;
                fw = fc;
                improved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !improved {
            break;
        }
    }
    (w, fw)
}

/// ⟨T̄₄, r^{⊗4}⟩ from the d²×d² flattening.
fn xi_quartic(flat: &DMatrix<f64>, r: &DVector<f64>) -> f64 {
    let a = xi_contract(flat, r);
    (r.transpose() * a * r)[(0, 0)]
}

/// Contraction A with A_{ab} = Σ T_{abkl} r_k r_l.
fn xi_contract(flat: &DMatrix<f64>, r: &DVector<f64>) -> DMatrix<f64> {
    let d = r.len();
    let rr = {
        let mut v = DVector::zeros(d * d);
        for k in 0..d {
            for l in 0..d {
                v[k * d + l] = r[k] * r[l];
            }
        }
        v
    };
    let col = flat * rr;
    DMatrix::from_fn(d, d, |a, b| col[a * d + b])
}

pub fn solve_relaxation(
    input: &RelaxationInput,
    tolerance: f64,
) -> Result<RelaxationOutcome, RelaxError> {
    solve_relaxation_warm(input, tolerance, None)
}

pub fn solve_relaxation_warm(
    input: &RelaxationInput,
    tolerance: f64,
    warm_start: Option<&[DVector<f64>]>,
) -> Result<RelaxationOutcome, RelaxError> {
    input.validate()?;
    let n = input.points.len();
    let d = input.points[0].len();
    let t = input.t;
    let gamma = input.gamma;
    let lambda = input.lambda;
    let c = &input.weights;
    let tol_abs = tolerance * gamma.max(1.0);
    let max_rounds = 500;

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut w: Vec<DVector<f64>> = match warm_start {
        Some(ws) if ws.len() == n => ws.to_vec(),
        _ => input.points.clone(),
    };
    let mut avg = DualAverage::new(t, n, d);

    // λ = 0 decouples the players: w_i = x_i zeroes the residual term
    if lambda == 0.0 {
        let zeros: Vec<DVector<f64>> = vec![DVector::zeros(d); n];
        let (_, xi_val) = xi_best_response(&zeros, c, t)?;
        return Ok(RelaxationOutcome::Primal {
            w: input.points.clone(),
            objective: xi_val,
        });
    }

    let trace = std::env::var_os("SOS_TRACE").is_some();
    let mut last_primal = f64::INFINITY;
    let mut last_dual = 0.0f64;
    for _round in 0..max_rounds {
        let t_round = std::time::Instant::now();
        // dual best responses at the current centers
        let residuals: Vec<DVector<f64>> =
            input.points.iter().zip(&w).map(|(x, wi)| x - wi).collect();
        let (xi_now, xi_low) = match t {
            1 => xi_best_response(&residuals, c, 1)?,
            _ => {
                let (v, val) = xi_power_response(&residuals, c, &mut rng);
                (pseudomoments::point_mass_state(&v.normalize(), 2)?, val)
            }
        };
        let t_xi = t_round.elapsed();
        let zeta_resp = zeta_response_full(&w, c, t, 1e-8, 200)?;
        let t_zeta = t_round.elapsed();

        // shortcut along the family w = γ·x: the ξ value scales as
        // (1−γ)^{2t} of its value at w = 0 and the ζ value exactly as
        // γ^{2t} of its value at w = x, so the best interpolate is
        // available in closed form — it certifies a primal exit outright
        // in the strong-shrinkage regime the play itself reaches slowly
        if _round == 0 && warm_start.is_none() {
            let a_val = match t {
                1 => xi_best_response(&input.points, c, 1)?.1,
                _ => {
                    let total: f64 = c.iter().sum();
                    if total > 0.0 {
                        let m = SymmetricTensor::moment_tensor(
                            &input.points,
                            c,
                            &DVector::zeros(d),
                            4,
                        )
                        .map_err(|_| RelaxError::Empty)?;
                        let flat = m.flatten().map_err(|_| RelaxError::Empty)?;
                        (sdp::max_eig(&flat.matrix)?.0 * total).max(0.0)
                    } else {
                        0.0
                    }
                }
            };
            let z_val = lambda * zeta_resp.dual_value;
            if a_val + z_val > 0.0 && z_val.is_finite() {
                let (gs, bound) = if t == 1 {
                    let g = a_val / (a_val + z_val);
                    (g, (1.0 - g) * (1.0 - g) * a_val + g * g * z_val)
                } else {
                    let (ra, rz) = (a_val.cbrt(), z_val.cbrt());
                    let g = if ra + rz > 0.0 { ra / (ra + rz) } else { 0.0 };
                    (g, (1.0 - g).powi(4) * a_val + g.powi(4) * z_val)
                };
                if bound <= 2.0 * gamma + tol_abs {
                    return Ok(RelaxationOutcome::Primal {
                        w: input.points.iter().map(|x| x * gs).collect(),
                        objective: bound,
                    });
                }
            }
        }

        // certified primal upper bound at the current centers
        let xi_upper = match t {
            1 => xi_low,
            _ => {
                let total: f64 = c.iter().sum();
                if total > 0.0 {
                    let m = SymmetricTensor::moment_tensor(
                        &residuals,
                        c,
                        &DVector::zeros(d),
                        4,
                    )
                    .map_err(|_| RelaxError::Empty)?;
                    let flat = m.flatten().map_err(|_| RelaxError::Empty)?;
                    (sdp::max_eig(&flat.matrix)?.0 * total).max(0.0)
                } else {
                    0.0
                }
            }
        };
        let primal_bound = xi_upper + lambda * zeta_resp.dual_value;
        last_primal = last_primal.min(primal_bound);
        if primal_bound <= 2.0 * gamma + tol_abs {
            // tighten the ξ part with the exact relaxation before exiting
            let exact = if t == 2 {
                let (_, v) = xi_best_response(&residuals, c, 2)?;
                v + lambda * zeta_resp.dual_value
            } else {
                primal_bound
            };
            if exact <= 2.0 * gamma + tol_abs {
                return Ok(RelaxationOutcome::Primal {
                    w,
                    objective: exact,
                });
            }
        }

        avg.push(&xi_now, &zeta_resp.family);

        // center update against the averaged duals; the minimized values
        // are exactly the per-point τ_i*, so the same pass certifies the
        // dual exit
        let xi_bar = avg.xi_tensor(d);
        let xi_flat = xi_bar.flatten().map_err(|_| RelaxError::Empty)?.matrix;
        let zeta_bar = avg.zeta_family(d);
        let results: Vec<(DVector<f64>, f64)> = (0..n)
            .into_par_iter()
            .map(|i| {
                minimize_tau(
                    &input.points[i],
                    &xi_flat,
                    &zeta_bar,
                    i,
                    lambda,
                    t,
                    &w[i],
                )
            })
            .collect();
        let dual_value: f64 = results
            .iter()
            .zip(c)
            .map(|((_, tau), &ci)| ci * tau)
            .sum();
        last_dual = last_dual.max(dual_value);
        if trace && (_round % 25 == 0 || _round < 5) {
            eprintln!(
                "    relax round {_round}: primal_bound={primal_bound:.1} dual={dual_value:.1} gamma={gamma:.1} xi={t_xi:?} zeta={:?} total={:?}",
                t_zeta - t_xi,
                t_round.elapsed()
            );
        }
        if dual_value >= gamma - tol_abs {
            return Ok(RelaxationOutcome::Dual {
                xi: avg.xi_state(d),
                zeta: zeta_bar,
                tau_star: results.iter().map(|(_, tau)| *tau).collect(),
                value: dual_value,
            });
        }
        w = results.into_iter().map(|(wi, _)| wi).collect();
    }

    Err(RelaxError::Indeterminate {
        rounds: max_rounds,
        primal: last_primal,
        dual: last_dual,
        gamma,
    })
}
