//! Unsupervised max-margin clustering with a membership floor.
//!
//! Minimizes `λ/2‖w‖² + (1/M) Σ max(0, 1 − yᵢ wᵀxᵢ)` jointly over `w` and
//! labels `y`, subject to each side holding at least `m_min` points, by
//! alternating an exact label step with the shared subgradient solver.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{HfdError, Result};
use crate::linalg::{dot, norm, sign};
use crate::ssmmc::objective::{projected_subgradient, relative_change, HingeObjective, UnaryTerm};
use crate::ssmmc::{rho, top_generalized_eigenvector, WeightVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnsupParams {
    pub lambda: f64,
    /// Minimum number of points on each side.
    pub min_membership: usize,
    pub eps: f64,
    /// Alternation rounds.
    pub max_iters: usize,
    pub max_inner_iters: usize,
}

impl Default for UnsupParams {
    fn default() -> Self {
        UnsupParams {
            lambda: 0.01,
            min_membership: 5,
            eps: 0.01,
            max_iters: 50,
            max_inner_iters: 500,
        }
    }
}

impl UnsupParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HfdError::InvalidParameter(m.to_string()));
        if !(self.lambda > 0.0) {
            return bad("unsupervised lambda must be > 0");
        }
        if self.min_membership == 0 {
            return bad("min_membership must be >= 1");
        }
        if !(self.eps > 0.0) {
            return bad("unsupervised eps must be > 0");
        }
        if self.max_iters == 0 || self.max_inner_iters == 0 {
            return bad("iteration caps must be >= 1");
        }
        Ok(())
    }

    /// Ball radius for the unary-only objective (`f(0) = 1` bounds the optimum).
    pub fn rho(&self) -> f64 {
        rho(self.lambda, 1.0)
    }
}

/// Optimal labels for fixed projections under the floor: `sign(p)`, then the
/// smallest-|p| points of the larger side are moved until both sides hold
/// `m_min`.
///
/// Moving a point off its preferred side costs `(1 + |p|) − max(0, 1 − |p|)`,
/// which is non-decreasing in `|p|`, so this choice is exact.
pub fn floor_labels(proj: &[f64], m_min: usize) -> Vec<f64> {
    let mut y: Vec<f64> = proj.iter().map(|&p| sign(p)).collect();
    let pos = y.iter().filter(|&&v| v > 0.0).count();
    let neg = y.len() - pos;
    let (from, short) = if pos < m_min {
        (-1.0, m_min - pos)
    } else if neg < m_min {
        (1.0, m_min - neg)
    } else {
        return y;
    };
    let mut movable: Vec<usize> = (0..y.len()).filter(|&i| y[i] == from).collect();
    movable.sort_by(|&a, &b| proj[a].abs().total_cmp(&proj[b].abs()).then(a.cmp(&b)));
    for &i in movable.iter().take(short) {
        y[i] = -from;
    }
    y
}

/// `λ/2‖w‖² + mean hinge` at the given labels.
pub fn alternation_objective(x: &Array2<f64>, w: &[f64], y: &[f64], lambda: f64) -> f64 {
    let obj = unary_objective(x, y, lambda);
    obj.value(w)
}

fn unary_objective<'a>(x: &'a Array2<f64>, y: &[f64], lambda: f64) -> HingeObjective<'a> {
    let m = x.nrows();
    HingeObjective {
        x,
        lambda,
        ml: Vec::new(),
        ml_weight: 0.0,
        cl: Vec::new(),
        cl_weight: 0.0,
        unary: y.iter().enumerate().map(|(row, &y)| UnaryTerm { row, y }).collect(),
        unary_weight: 1.0 / m as f64,
        unary_margin: 1.0,
    }
}

fn row(x: &Array2<f64>, i: usize) -> &[f64] {
    let d = x.ncols();
    &x.as_slice().expect("standard layout")[i * d..(i + 1) * d]
}

/// Top principal direction of the feature columns, with the bias chosen so
/// the hyperplane passes through the mean.
fn principal_init(x: &Array2<f64>, scale: f64) -> Result<Vec<f64>> {
    let (m, cols) = x.dim();
    let d = cols - 1;
    let mut mean = vec![0.0; d];
    for i in 0..m {
        for (acc, v) in mean.iter_mut().zip(row(x, i)) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let mut cov = Array2::<f64>::zeros((d, d));
    for i in 0..m {
        let r = row(x, i);
        for a in 0..d {
            let da = r[a] - mean[a];
            for b in 0..d {
                cov[[a, b]] += da * (r[b] - mean[b]);
            }
        }
    }
    cov /= m as f64;
    let v = top_generalized_eigenvector(&cov, &Array2::eye(d))?;
    let mut w = v.clone();
    w.push(-dot(&v, &mean));
    let len = norm(&w);
    w.iter_mut().for_each(|x| *x *= scale / len);
    Ok(w)
}

/// Shifts the bias so that routing (`left iff wᵀx ≤ 0`) puts at least
/// `m_min` points on each side, moving the threshold as little as possible.
/// Leaves `w` unchanged when no such threshold exists.
fn enforce_floor(x: &Array2<f64>, w: &mut [f64], m_min: usize) {
    let m = x.nrows();
    let proj: Vec<f64> = (0..m).map(|i| dot(w, row(x, i))).collect();
    let left = proj.iter().filter(|&&p| p <= 0.0).count();
    if left >= m_min && m - left >= m_min {
        return;
    }
    let mut q = proj;
    q.sort_by(f64::total_cmp);
    // c = number of points left of the cut
    let best = (m_min..=m - m_min)
        .filter(|&c| c >= 1 && q[c - 1] < q[c])
        .min_by_key(|&c| c.abs_diff(left));
    let Some(c) = best else { return };
    let t = 0.5 * (q[c - 1] + q[c]);
    let bias = w.len() - 1;
    let saved = w[bias];
    w[bias] -= t;
    let left_after = (0..m).filter(|&i| dot(w, row(x, i)) <= 0.0).count();
    if left_after < m_min || m - left_after < m_min {
        w[bias] = saved;
    }
}

#[derive(Debug, Clone)]
pub struct UnsupOutcome {
    pub weights: WeightVector,
    /// Alternation objective after each full round.
    pub objectives: Vec<f64>,
    pub rounds: usize,
}

pub fn train_unsup_mmc(x: &Array2<f64>, params: &UnsupParams, seed: u64) -> Result<WeightVector> {
    train_unsup_mmc_traced(x, params, seed).map(|o| o.weights)
}

/// Block-coordinate descent; `x` is `M × (d_k + 1)` with the bias column last.
///
/// The procedure is deterministic; `seed` is accepted for interface symmetry
/// with the semi-supervised solver.
pub fn train_unsup_mmc_traced(x: &Array2<f64>, params: &UnsupParams, _seed: u64) -> Result<UnsupOutcome> {
    params.validate()?;
    let m = x.nrows();
    let m_min = params.min_membership;
    if m < 2 * m_min {
        return Err(HfdError::TooFewPoints {
            got: m,
            min_membership: m_min,
        });
    }
    if x.ncols() < 2 {
        return Err(HfdError::DimensionMismatch {
            expected: 2,
            got: x.ncols(),
        });
    }
    let x = if x.is_standard_layout() {
        std::borrow::Cow::Borrowed(x)
    } else {
        std::borrow::Cow::Owned(x.as_standard_layout().into_owned())
    };
    let x: &Array2<f64> = &x;
    let rho = params.rho();
    let mut w = principal_init(x, rho.min(1.0))?;
    let mut objectives = Vec::new();
    let mut y_prev: Option<Vec<f64>> = None;
    let mut rounds = 0;
    for _ in 0..params.max_iters {
        rounds += 1;
        let proj: Vec<f64> = (0..m).map(|i| dot(&w, row(x, i))).collect();
        let y = floor_labels(&proj, m_min);
        let obj = unary_objective(x, &y, params.lambda);
        let report = projected_subgradient(&obj, &w, rho, params.eps, params.max_inner_iters)?;
        let change = relative_change(&w, &report.w);
        w = report.w;
        objectives.push(report.objective);
        log::trace!("unsup round {rounds} objective {:.6} change {change:.3e}", report.objective);
        let stable = y_prev.as_ref() == Some(&y);
        y_prev = Some(y);
        if stable && change <= params.eps {
            break;
        }
    }
    enforce_floor(x, &mut w, m_min);
    Ok(UnsupOutcome {
        weights: WeightVector(w),
        objectives,
        rounds,
    })
}
