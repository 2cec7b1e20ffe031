//! Min-cost bipartite matching of estimated means to true means.
//!
//! True means are matched injectively into the (possibly larger) candidate
//! list by the Hungarian algorithm with potentials, so the reported
//! per-mean errors correspond to the cheapest distinct assignment.

use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("need at least as many candidates as true means ({candidates} < {truth})")]
    TooFewCandidates { candidates: usize, truth: usize },
    #[error("empty input")]
    Empty,
}

#[derive(Debug, Clone, Serialize)]
pub struct MatchReport {
    /// assignment[j] = index of the candidate matched to true mean j
    pub assignment: Vec<usize>,
    pub per_mean_error: Vec<f64>,
    pub max_error: f64,
    pub mean_error: f64,
    pub total_cost: f64,
    /// number of candidates
    pub h: usize,
    /// number of true means
    pub k: usize,
}

/// Minimum-cost injective assignment of rows into columns (rows ≤ cols),
/// via the O(n²m) shortest-augmenting-path Hungarian algorithm.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Result<(Vec<usize>, f64), MatchError> {
    let n = cost.len();
    if n == 0 {
        return Err(MatchError::Empty);
    }
    let m = cost[0].len();
    if m < n {
        return Err(MatchError::TooFewCandidates {
            candidates: m,
            truth: n,
        });
    }
    // 1-based potentials; p[j] = row currently matched to column j
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![usize::MAX; n];
    let mut total = 0.0;
    for j in 1..=m {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
            total += cost[p[j] - 1][j - 1];
        }
    }
    Ok((assignment, total))
}

/// Match each true mean to a distinct candidate minimizing the total
/// ℓ2 distance.
pub fn match_means(
    truth: &[DVector<f64>],
    candidates: &[DVector<f64>],
) -> Result<MatchReport, MatchError> {
    let k = truth.len();
    let h = candidates.len();
    let cost: Vec<Vec<f64>> = truth
        .iter()
        .map(|mu| candidates.iter().map(|c| (mu - c).norm()).collect())
        .collect();
    let (assignment, total_cost) = min_cost_assignment(&cost)?;
    let per_mean_error: Vec<f64> = assignment
        .iter()
        .enumerate()
        .map(|(j, &c)| cost[j][c])
        .collect();
    let max_error = per_mean_error.iter().cloned().fold(0.0f64, f64::max);
    let mean_error = per_mean_error.iter().sum::<f64>() / k as f64;
    Ok(MatchReport {
        assignment,
        per_mean_error,
        max_error,
        mean_error,
        total_cost,
        h,
        k,
    })
}
