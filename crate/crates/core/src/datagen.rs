//! Synthetic data generation.
//!
//! Distribution specs cover the families whose directional moments the
//! certification machinery can bound — Gaussians, strongly log-concave
//! densities, bounded supports convolved with Gaussian noise, products,
//! Lipschitz pushforwards, shifts and independent sums — each carrying a
//! nominal concentration parameter σ obeying the composition rules.
//! Mixtures add planted means and adversarial outliers. Everything is
//! deterministic given a seed.

use std::io::{Read as _, Write as _};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sdp;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("mixture weights and outlier fraction must sum to 1, got {0}")]
    BadWeights(f64),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

fn to_dvector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

fn to_dmatrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, DataError> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(DataError::InvalidSpec("matrix is not square".into()));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// Named 1-Lipschitz coordinatewise maps for pushforwards; the spec's L
/// factor multiplies the output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PushMap {
    Identity,
    Tanh,
}

impl PushMap {
    fn apply(self, x: f64) -> f64 {
        match self {
            PushMap::Identity => x,
            PushMap::Tanh => x.tanh(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistributionSpec {
    Gaussian {
        mean: Vec<f64>,
        cov: Vec<Vec<f64>>,
    },
    /// density ∝ exp(−ψ) with ψ(x) = ½(x−μ)ᵀQ(x−μ) + Σ w·|⟨g, x−μ⟩|
    LogConcave {
        mean: Vec<f64>,
        quad: Vec<Vec<f64>>,
        #[serde(default)]
        abs_terms: Vec<(Vec<f64>, f64)>,
    },
    /// uniform on the radius-R ball around the center, plus N(0, τ²I)
    BoundedPlusNoise {
        center: Vec<f64>,
        radius: f64,
        tau: f64,
    },
    Product {
        parts: Vec<DistributionSpec>,
    },
    LipschitzPushforward {
        base: Box<DistributionSpec>,
        l: f64,
        map: PushMap,
    },
    Shifted {
        base: Box<DistributionSpec>,
        shift: Vec<f64>,
    },
    /// ca·X + cb·Y for independent X, Y
    Sum {
        a: Box<DistributionSpec>,
        b: Box<DistributionSpec>,
        ca: f64,
        cb: f64,
    },
}

impl DistributionSpec {
    pub fn standard_gaussian(d: usize) -> Self {
        DistributionSpec::Gaussian {
            mean: vec![0.0; d],
            cov: (0..d)
                .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DistributionSpec::Gaussian { mean, .. } => mean.len(),
            DistributionSpec::LogConcave { mean, .. } => mean.len(),
            DistributionSpec::BoundedPlusNoise { center, .. } => center.len(),
            DistributionSpec::Product { parts } => parts.iter().map(|p| p.dim()).sum(),
            DistributionSpec::LipschitzPushforward { base, .. } => base.dim(),
            DistributionSpec::Shifted { base, .. } => base.dim(),
            DistributionSpec::Sum { a, .. } => a.dim(),
        }
    }

    /// Nominal concentration parameter σ from the composition rules.
    pub fn sigma(&self) -> Result<f64, DataError> {
        match self {
            DistributionSpec::Gaussian { cov, .. } => {
                let m = to_dmatrix(cov)?;
                let (lam, _) = sdp::max_eig(&m)
                    .map_err(|e| DataError::InvalidSpec(e.to_string()))?;
                if lam <= 0.0 {
                    return Err(DataError::InvalidSpec("covariance not PD".into()));
                }
                Ok(lam.sqrt())
            }
            DistributionSpec::LogConcave { quad, .. } => {
                let m = to_dmatrix(quad)?;
                let lam_min = sdp::min_eig(&m)
                    .map_err(|e| DataError::InvalidSpec(e.to_string()))?;
                if lam_min <= 0.0 {
                    return Err(DataError::InvalidSpec(
                        "potential quadratic part not PD".into(),
                    ));
                }
                Ok((1.0 / lam_min).sqrt())
            }
            DistributionSpec::BoundedPlusNoise { radius, tau, .. } => {
                if *tau < 2.0 * radius {
                    return Err(DataError::InvalidSpec(format!(
                        "noise level {tau} below twice the support radius {radius}"
                    )));
                }
                Ok(tau * std::f64::consts::E.sqrt())
            }
            DistributionSpec::Product { parts } => {
                let mut s: f64 = 0.0;
                for p in parts {
                    s = s.max(p.sigma()?);
                }
                if parts.is_empty() {
                    return Err(DataError::InvalidSpec("empty product".into()));
                }
                Ok(s)
            }
            DistributionSpec::LipschitzPushforward { base, l, .. } => Ok(l * base.sigma()?),
            DistributionSpec::Shifted { base, .. } => base.sigma(),
            DistributionSpec::Sum { a, b, ca, cb } => {
                let sa = a.sigma()?;
                let sb = b.sigma()?;
                Ok((ca * ca * sa * sa + cb * cb * sb * sb).sqrt())
            }
        }
    }

    /// Mean of the distribution. Exact for every built-in: the pushforward
    /// maps are odd and applied to centered symmetric bases.
    pub fn nominal_mean(&self) -> DVector<f64> {
        match self {
            DistributionSpec::Gaussian { mean, .. } => to_dvector(mean),
            DistributionSpec::LogConcave { mean, .. } => to_dvector(mean),
            DistributionSpec::BoundedPlusNoise { center, .. } => to_dvector(center),
            DistributionSpec::Product { parts } => {
                let mut out = Vec::new();
                for p in parts {
                    out.extend(p.nominal_mean().iter().copied());
                }
                DVector::from_vec(out)
            }
            DistributionSpec::LipschitzPushforward { base, l, map } => {
                base.nominal_mean().map(|x| l * map.apply(x))
            }
            DistributionSpec::Shifted { base, shift } => base.nominal_mean() + to_dvector(shift),
            DistributionSpec::Sum { a, b, ca, cb } => {
                a.nominal_mean() * *ca + b.nominal_mean() * *cb
            }
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        self.sigma().map(|_| ())
    }

    /// Draw n samples deterministically from the given rng.
    pub fn sample_n(&self, n: usize, rng: &mut ChaCha12Rng) -> Result<Vec<DVector<f64>>, DataError> {
        match self {
            DistributionSpec::Gaussian { mean, cov } => {
                let m = to_dvector(mean);
                let c = to_dmatrix(cov)?;
                let chol = nalgebra::Cholesky::new(c)
                    .ok_or_else(|| DataError::InvalidSpec("covariance not PD".into()))?;
                let l = chol.l();
                let d = m.len();
                Ok((0..n)
                    .map(|_| {
                        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                        &m + &l * z
                    })
                    .collect())
            }
            DistributionSpec::LogConcave {
                mean,
                quad,
                abs_terms,
            } => {
                let mu = to_dvector(mean);
                let q = to_dmatrix(quad)?;
                let terms: Vec<(DVector<f64>, f64)> = abs_terms
                    .iter()
                    .map(|(g, w)| (to_dvector(g), *w))
                    .collect();
                Ok(mala_sample(&mu, &q, &terms, n, rng))
            }
            DistributionSpec::BoundedPlusNoise {
                center,
                radius,
                tau,
            } => {
                let c = to_dvector(center);
                let d = c.len();
                Ok((0..n)
                    .map(|_| {
                        // uniform in the ball: normalized Gaussian times U^{1/d}
                        let g = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                        let u: f64 = rng.random::<f64>();
                        let ball = if g.norm() > 0.0 {
                            g.normalize() * (radius * u.powf(1.0 / d as f64))
                        } else {
                            DVector::zeros(d)
                        };
                        let noise =
                            DVector::from_fn(d, |_, _| tau * rng.sample::<f64, _>(StandardNormal));
                        &c + ball + noise
                    })
                    .collect())
            }
            DistributionSpec::Product { parts } => {
                let mut blocks: Vec<Vec<DVector<f64>>> = Vec::new();
                for p in parts {
                    blocks.push(p.sample_n(n, rng)?);
                }
                let d = self.dim();
                Ok((0..n)
                    .map(|i| {
                        let mut out = Vec::with_capacity(d);
                        for b in &blocks {
                            out.extend(b[i].iter().copied());
                        }
                        DVector::from_vec(out)
                    })
                    .collect())
            }
            DistributionSpec::LipschitzPushforward { base, l, map } => {
                let xs = base.sample_n(n, rng)?;
                Ok(xs.into_iter().map(|x| x.map(|v| l * map.apply(v))).collect())
            }
            DistributionSpec::Shifted { base, shift } => {
                let s = to_dvector(shift);
                let xs = base.sample_n(n, rng)?;
                Ok(xs.into_iter().map(|x| x + &s).collect())
            }
            DistributionSpec::Sum { a, b, ca, cb } => {
                let xs = a.sample_n(n, rng)?;
                let ys = b.sample_n(n, rng)?;
                Ok(xs
                    .into_iter()
                    .zip(ys)
                    .map(|(x, y)| x * *ca + y * *cb)
                    .collect())
            }
        }
    }
}

/// Metropolis-adjusted Langevin sampling of exp(−ψ): burn-in of 1000·d
/// steps, then one sample per 10 accepted-or-not steps.
fn mala_sample(
    mu: &DVector<f64>,
    q: &DMatrix<f64>,
    abs_terms: &[(DVector<f64>, f64)],
    n: usize,
    rng: &mut ChaCha12Rng,
) -> Vec<DVector<f64>> {
    let d = mu.len();
    let (lam_max, _) = sdp::max_eig(q).expect("finite potential");
    let h = 0.25 / lam_max.max(1e-12);
    let sqrt2h = (2.0 * h).sqrt();

    let psi = |x: &DVector<f64>| -> f64 {
        let c = x - mu;
        let mut v = 0.5 * (c.transpose() * q * &c)[(0, 0)];
        for (g, w) in abs_terms {
            v += w * g.dot(&c).abs();
        }
        v
    };
    let grad = |x: &DVector<f64>| -> DVector<f64> {
        let c = x - mu;
        let mut g_out = q * &c;
        for (g, w) in abs_terms {
            g_out += g * (*w * g.dot(&c).signum());
        }
        g_out
    };

    let mut x = mu.clone();
    let mut out = Vec::with_capacity(n);
    let burn_in = 1000 * d;
    let total = burn_in + 10 * n;
    for step in 0..total {
        let gx = grad(&x);
        let noise = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let prop = &x - &gx * h + &noise * sqrt2h;
        let gp = grad(&prop);
        // log proposal densities q(x'|x), q(x|x')
        let fwd = (&prop - (&x - &gx * h)).norm_squared();
        let bwd = (&x - (&prop - &gp * h)).norm_squared();
        let log_alpha = psi(&x) - psi(&prop) + (fwd - bwd) / (4.0 * h);
        if log_alpha >= 0.0 || rng.random::<f64>() < log_alpha.exp() {
            x = prop;
        }
        if step >= burn_in && (step - burn_in) % 10 == 9 {
            out.push(x.clone());
        }
    }
    out.truncate(n);
    while out.len() < n {
        out.push(x.clone());
    }
    out
}

/// Independent sum ca·X + cb·Y with the composed concentration parameter.
pub fn poincare_sum(
    a: DistributionSpec,
    b: DistributionSpec,
    ca: f64,
    cb: f64,
) -> Result<DistributionSpec, DataError> {
    if a.dim() != b.dim() {
        return Err(DataError::InvalidSpec(format!(
            "sum of dims {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    a.validate()?;
    b.validate()?;
    Ok(DistributionSpec::Sum {
        a: Box::new(a),
        b: Box::new(b),
        ca,
        cb,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutlierModel {
    None,
    /// a tight cloud of outliers at a fixed location
    PointCloud { location: Vec<f64>, fraction: f64 },
    /// outliers at offset distance·direction from the largest cluster mean
    AdversarialTail {
        direction: Vec<f64>,
        distance: f64,
        fraction: f64,
    },
}

impl OutlierModel {
    pub fn fraction(&self) -> f64 {
        match self {
            OutlierModel::None => 0.0,
            OutlierModel::PointCloud { fraction, .. } => *fraction,
            OutlierModel::AdversarialTail { fraction, .. } => *fraction,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub components: Vec<(f64, DistributionSpec)>,
    pub outliers: OutlierModel,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub points: Vec<DVector<f64>>,
    /// component index, or −1 for outliers
    pub labels: Vec<i32>,
    /// planted component means
    pub means: Vec<DVector<f64>>,
    /// minimum pairwise separation between planted means (∞ for k ≤ 1)
    pub separation: f64,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.components.is_empty() {
            return Err(DataError::InvalidSpec("no components".into()));
        }
        let total: f64 =
            self.components.iter().map(|(w, _)| w).sum::<f64>() + self.outliers.fraction();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DataError::BadWeights(total));
        }
        for (w, c) in &self.components {
            if *w <= 0.0 {
                return Err(DataError::InvalidSpec("non-positive weight".into()));
            }
            c.validate()?;
        }
        Ok(())
    }

    pub fn sample(&self, n: usize) -> Result<Dataset, DataError> {
        self.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        let eps = self.outliers.fraction();
        let n_out = (eps * n as f64).floor() as usize;
        let n_in = n - n_out;

        let k = self.components.len();
        let inlier_mass: f64 = self.components.iter().map(|(w, _)| w).sum();
        // multinomial split of the inliers
        let mut counts = vec![0usize; k];
        for _ in 0..n_in {
            let mut u = rng.random::<f64>() * inlier_mass;
            let mut pick = k - 1;
            for (j, (w, _)) in self.components.iter().enumerate() {
                if u < *w {
                    pick = j;
                    break;
                }
                u -= w;
            }
            counts[pick] += 1;
        }

        let mut points = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut means = Vec::with_capacity(k);
        for (j, (_, spec)) in self.components.iter().enumerate() {
            means.push(spec.nominal_mean());
            for x in spec.sample_n(counts[j], &mut rng)? {
                points.push(x);
                labels.push(j as i32);
            }
        }

        let d = self.components[0].1.dim();
        match &self.outliers {
            OutlierModel::None => {}
            OutlierModel::PointCloud { location, .. } => {
                let loc = to_dvector(location);
                for _ in 0..n_out {
                    let jitter =
                        DVector::from_fn(d, |_, _| 0.01 * rng.sample::<f64, _>(StandardNormal));
                    points.push(&loc + jitter);
                    labels.push(-1);
                }
            }
            OutlierModel::AdversarialTail {
                direction,
                distance,
                ..
            } => {
                let largest = self
                    .components
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1 .0.total_cmp(&b.1 .0))
                    .map(|(j, _)| j)
                    .unwrap();
                let base = &means[largest] + to_dvector(direction).normalize() * *distance;
                for _ in 0..n_out {
                    points.push(base.clone());
                    labels.push(-1);
                }
            }
        }

        let mut separation = f64::INFINITY;
        for i in 0..k {
            for j in (i + 1)..k {
                separation = separation.min((&means[i] - &means[j]).norm());
            }
        }
        Ok(Dataset {
            points,
            labels,
            means,
            separation,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TailCheckResult {
    pub empirical: f64,
    pub bound: f64,
    pub ci_half_width: f64,
    pub pass: bool,
}

/// Empirical check of the exponential tail bound: Pr[|⟨v, x−μ⟩| ≥ z] must
/// stay below 6·exp(−z/σ) plus three binomial standard errors.
pub fn tail_check(
    spec: &DistributionSpec,
    v: &DVector<f64>,
    z: f64,
    n_mc: usize,
    seed: u64,
) -> Result<TailCheckResult, DataError> {
    let sigma = spec.sigma()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let xs = spec.sample_n(n_mc, &mut rng)?;
    let mut mean = DVector::zeros(spec.dim());
    for x in &xs {
        mean += x;
    }
    mean /= n_mc as f64;
    let vn = v.normalize();
    let hits = xs
        .iter()
        .filter(|x| (vn.dot(&(*x - &mean))).abs() >= z)
        .count();
    let p = hits as f64 / n_mc as f64;
    let half_width = (p * (1.0 - p) / n_mc as f64).sqrt().max(1.0 / n_mc as f64);
    let bound = 6.0 * (-z / sigma).exp();
    Ok(TailCheckResult {
        empirical: p,
        bound,
        ci_half_width: half_width,
        pass: p <= bound + 3.0 * half_width,
    })
}

// ---------------------------------------------------------------------------
// dataset persistence

const MAGIC: &[u8; 4] = b"SOSD";

pub fn write_csv(path: &Path, ds: &Dataset) -> Result<(), DataError> {
    let d = ds.points.first().map(|p| p.len()).unwrap_or(0);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    writeln!(f, "{},label", header.join(","))?;
    for (p, l) in ds.points.iter().zip(&ds.labels) {
        let row: Vec<String> = p.iter().map(|v| format!("{v}")).collect();
        writeln!(f, "{},{}", row.join(","), l)?;
    }
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Dataset, DataError> {
    let content = std::fs::read_to_string(path)?;
    let mut lines = content.lines();
    let header = lines
        .next()
        .ok_or_else(|| DataError::Parse("empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.last() != Some(&"label") {
        return Err(DataError::Parse("missing label column in header".into()));
    }
    let d = cols.len() - 1;
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            return Err(DataError::Parse(format!(
                "line {}: expected {} fields, got {}",
                lineno + 2,
                d + 1,
                fields.len()
            )));
        }
        let mut p = DVector::zeros(d);
        for i in 0..d {
            p[i] = fields[i]
                .trim()
                .parse()
                .map_err(|e| DataError::Parse(format!("line {}: {}", lineno + 2, e)))?;
        }
        labels.push(
            fields[d]
                .trim()
                .parse()
                .map_err(|e| DataError::Parse(format!("line {}: {}", lineno + 2, e)))?,
        );
        points.push(p);
    }
    Ok(Dataset {
        points,
        labels,
        means: Vec::new(),
        separation: f64::INFINITY,
    })
}

pub fn write_binary(path: &Path, ds: &Dataset) -> Result<(), DataError> {
    let n = ds.points.len();
    let d = ds.points.first().map(|p| p.len()).unwrap_or(0);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&(n as u32).to_le_bytes())?;
    f.write_all(&(d as u32).to_le_bytes())?;
    for p in &ds.points {
        for v in p.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    for l in &ds.labels {
        f.write_all(&l.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_binary(path: &Path) -> Result<Dataset, DataError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DataError::Parse("bad magic bytes".into()));
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf)?;
    let n = u32::from_le_bytes(u32buf) as usize;
    f.read_exact(&mut u32buf)?;
    let d = u32::from_le_bytes(u32buf) as usize;
    let mut points = Vec::with_capacity(n);
    let mut f64buf = [0u8; 8];
    for _ in 0..n {
        let mut p = DVector::zeros(d);
        for i in 0..d {
            f.read_exact(&mut f64buf)?;
            p[i] = f64::from_le_bytes(f64buf);
        }
        points.push(p);
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        f.read_exact(&mut u32buf)?;
        labels.push(i32::from_le_bytes(u32buf));
    }
    Ok(Dataset {
        points,
        labels,
        means: Vec::new(),
        separation: f64::INFINITY,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn standard_mixture(d: usize, seed: u64) -> MixtureSpec {
        MixtureSpec {
            components: vec![(1.0, DistributionSpec::standard_gaussian(d))],
            outliers: OutlierModel::None,
            seed,
        }
    }

    #[test]
    fn sigma_composition_rules() {
        let g = DistributionSpec::standard_gaussian(2);
        assert!((g.sigma().unwrap() - 1.0).abs() < 1e-12);
        let sum = poincare_sum(g.clone(), g.clone(), 1.0, 1.0).unwrap();
        assert!((sum.sigma().unwrap() - 2f64.sqrt()).abs() < 1e-12);
        let scaled = poincare_sum(g.clone(), g.clone(), 1.0, 0.0).unwrap();
        assert!((scaled.sigma().unwrap() - 1.0).abs() < 1e-12);
        let prod = DistributionSpec::Product {
            parts: vec![
                DistributionSpec::Gaussian {
                    mean: vec![0.0],
                    cov: vec![vec![4.0]],
                },
                DistributionSpec::standard_gaussian(1),
            ],
        };
        assert!((prod.sigma().unwrap() - 2.0).abs() < 1e-12);
        let b = DistributionSpec::BoundedPlusNoise {
            center: vec![0.0, 0.0],
            radius: 1.0,
            tau: 2.0,
        };
        assert!((b.sigma().unwrap() - 2.0 * std::f64::consts::E.sqrt()).abs() < 1e-12);
        let push = DistributionSpec::LipschitzPushforward {
            base: Box::new(DistributionSpec::standard_gaussian(2)),
            l: 3.0,
            map: PushMap::Tanh,
        };
        assert!((push.sigma().unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn bounded_plus_noise_requires_enough_noise() {
        let b = DistributionSpec::BoundedPlusNoise {
            center: vec![0.0],
            radius: 1.0,
            tau: 1.0,
        };
        assert!(b.sigma().is_err());
    }

    #[test]
    fn seeded_determinism() {
        let spec = standard_mixture(3, 42);
        let a = spec.sample(100).unwrap();
        let b = spec.sample(100).unwrap();
        for (x, y) in a.points.iter().zip(&b.points) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn outlier_count_exact() {
        let spec = MixtureSpec {
            components: vec![(0.9, DistributionSpec::standard_gaussian(2))],
            outliers: OutlierModel::PointCloud {
                location: vec![50.0, 50.0],
                fraction: 0.1,
            },
            seed: 7,
        };
        let ds = spec.sample(333).unwrap();
        let outliers = ds.labels.iter().filter(|&&l| l == -1).count();
        assert_eq!(outliers, 33);
        assert_eq!(ds.points.len(), 333);
    }

    #[test]
    fn mixture_weight_validation() {
        let spec = MixtureSpec {
            components: vec![(0.5, DistributionSpec::standard_gaussian(2))],
            outliers: OutlierModel::None,
            seed: 0,
        };
        assert!(matches!(spec.sample(10), Err(DataError::BadWeights(_))));
    }

    #[test]
    fn component_counts_near_expectation() {
        let spec = MixtureSpec {
            components: vec![
                (1.0 / 3.0, DistributionSpec::standard_gaussian(2)),
                (
                    1.0 / 3.0,
                    DistributionSpec::Shifted {
                        base: Box::new(DistributionSpec::standard_gaussian(2)),
                        shift: vec![10.0, 0.0],
                    },
                ),
                (
                    1.0 / 3.0,
                    DistributionSpec::Shifted {
                        base: Box::new(DistributionSpec::standard_gaussian(2)),
                        shift: vec![0.0, 10.0],
                    },
                ),
            ],
            outliers: OutlierModel::None,
            seed: 1,
        };
        let ds = spec.sample(3000).unwrap();
        for j in 0..3 {
            let count = ds.labels.iter().filter(|&&l| l == j).count() as f64;
            let expected = 1000.0;
            let sd = (3000.0f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
            assert!(
                (count - expected).abs() <= 3.0 * sd,
                "component {} count {}",
                j,
                count
            );
        }
        assert!((ds.separation - 10.0).abs() < 1e-12);
    }

    #[test]
    fn tail_check_gaussian() {
        let g = DistributionSpec::standard_gaussian(1);
        let v = DVector::from_vec(vec![1.0]);
        let res = tail_check(&g, &v, 3.0, 100_000, 5).unwrap();
        assert!(res.pass);
        assert!(res.empirical < 0.01);
        // z → 0 keeps the bound above 1
        let res0 = tail_check(&g, &v, 1e-9, 1000, 5).unwrap();
        assert!(res0.bound >= 1.0);
        assert!(res0.pass);
    }

    #[test]
    fn tail_check_logconcave() {
        let spec = DistributionSpec::LogConcave {
            mean: vec![0.0, 0.0],
            quad: vec![vec![1.0, 0.0], vec![0.0, 2.0]],
            abs_terms: vec![(vec![1.0, 1.0], 0.5)],
        };
        let v = DVector::from_vec(vec![1.0, 0.0]);
        let res = tail_check(&spec, &v, 2.0, 20_000, 11).unwrap();
        assert!(res.pass, "empirical {} bound {}", res.empirical, res.bound);
    }

    #[test]
    fn mala_matches_gaussian_moments() {
        // quadratic-only potential is a Gaussian; compare covariance
        let spec = DistributionSpec::LogConcave {
            mean: vec![1.0, -1.0],
            quad: vec![vec![2.0, 0.0], vec![0.0, 0.5]],
            abs_terms: vec![],
        };
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let xs = spec.sample_n(20_000, &mut rng).unwrap();
        let n = xs.len() as f64;
        let mean = xs.iter().fold(DVector::zeros(2), |a, x| a + x) / n;
        assert!((mean[0] - 1.0).abs() < 0.1, "mean {}", mean[0]);
        assert!((mean[1] + 1.0).abs() < 0.2, "mean {}", mean[1]);
        let mut var: DVector<f64> = DVector::zeros(2);
        for x in &xs {
            var[0] += (x[0] - mean[0]).powi(2) / n;
            var[1] += (x[1] - mean[1]).powi(2) / n;
        }
        // covariance is Q^{-1}
        assert!((var[0] - 0.5).abs() < 0.1, "var0 {}", var[0]);
        assert!((var[1] - 2.0).abs() < 0.4, "var1 {}", var[1]);
    }

    #[test]
    fn adversarial_tail_placement() {
        let spec = MixtureSpec {
            components: vec![(0.9, DistributionSpec::standard_gaussian(2))],
            outliers: OutlierModel::AdversarialTail {
                direction: vec![1.0, 0.0],
                distance: 20.0,
                fraction: 0.1,
            },
            seed: 4,
        };
        let ds = spec.sample(100).unwrap();
        for (p, &l) in ds.points.iter().zip(&ds.labels) {
            if l == -1 {
                assert!((p - DVector::from_vec(vec![20.0, 0.0])).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_roundtrip() {
        let dir = std::env::temp_dir().join("sos_moments_csv_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("data.csv");
        let ds = standard_mixture(3, 9).sample(50).unwrap();
        write_csv(&path, &ds).unwrap();
        let back = read_csv(&path).unwrap();
        assert_eq!(back.points.len(), 50);
        for (a, b) in ds.points.iter().zip(&back.points) {
            assert!((a - b).norm() < 1e-12);
        }
        assert_eq!(ds.labels, back.labels);
    }

    #[test]
    fn binary_roundtrip() {
        let dir = std::env::temp_dir().join("sos_moments_bin_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("data.sosd");
        let ds = standard_mixture(4, 10).sample(64).unwrap();
        write_binary(&path, &ds).unwrap();
        let back = read_binary(&path).unwrap();
        assert_eq!(ds.labels, back.labels);
        for (a, b) in ds.points.iter().zip(&back.points) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn csv_rejects_malformed() {
        let dir = std::env::temp_dir().join("sos_moments_badcsv_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.csv");
        std::fs::write(&path, "x0,x1,label\n1.0,oops,0\n").unwrap();
        assert!(matches!(read_csv(&path), Err(DataError::Parse(_))));
    }
}
