//! Relaxed semi-supervised max-margin clustering.
//!
//! Learns a binary linear discriminant over a node's local data from
//! must-link and cannot-link pairs. Must-link and cannot-link slack are
//! normalized separately, and only the `L′_C` cannot-link pairs with the
//! largest satisfaction margin under the current iterate are enforced in
//! each CCCP step; the remaining ones are left to deeper nodes.
//!
//! The solver runs in three stages:
//!
//! 1. `w⁽⁰⁾` from the top generalized eigenvector of the cannot-link and
//!    must-link scatter matrices (all cannot-link pairs participate).
//! 2. CCCP outer iterations: fix the best satisfying pair labels, the best
//!    unary labels and the `L′_C` subset at `w⁽ᵗ⁾`, which makes the problem
//!    convex.
//! 3. Projected subgradient descent on that convex problem inside the ball
//!    `‖w‖ ≤ √((1+C)/λ)`.

mod eigen;
pub(crate) mod objective;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{HfdError, Result};
use crate::linalg::{dot, norm, sign};
use objective::{ClTerm, HingeObjective, MlTerm, UnaryTerm};

pub(crate) use eigen::top_generalized_eigenvector;
pub use objective::{cl_margin, ml_margin};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsmmcParams {
    pub lambda: f64,
    /// Weight of the unconstrained-point term.
    pub c: f64,
    pub cl_subset_fraction: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub max_inner_iters: usize,
    pub max_outer_iters: usize,
    /// `C` is forced to zero for this many outer iterations.
    pub warmup_outer_iters: usize,
}

impl Default for SsmmcParams {
    fn default() -> Self {
        SsmmcParams {
            lambda: 0.01,
            c: 1.0,
            cl_subset_fraction: 0.25,
            eps1: 0.01,
            eps2: 0.01,
            max_inner_iters: 500,
            max_outer_iters: 50,
            warmup_outer_iters: 3,
        }
    }
}

impl SsmmcParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HfdError::InvalidParameter(m.to_string()));
        if !(self.lambda > 0.0) {
            return bad("lambda must be > 0");
        }
        if !(self.c >= 0.0) {
            return bad("C must be >= 0");
        }
        if !(self.cl_subset_fraction > 0.0 && self.cl_subset_fraction <= 1.0) {
            return bad("cl_subset_fraction must lie in (0, 1]");
        }
        if !(self.eps1 > 0.0 && self.eps2 > 0.0) {
            return bad("eps1 and eps2 must be > 0");
        }
        if self.max_inner_iters == 0 || self.max_outer_iters == 0 {
            return bad("iteration caps must be >= 1");
        }
        Ok(())
    }

    /// Radius of the ball containing the optimum, `√((1+C)/λ)`.
    pub fn rho(&self) -> f64 {
        rho(self.lambda, self.c)
    }

    /// `L′_C = max(1, round(fraction · L_C))`, capped at `L_C`.
    pub fn subset_size(&self, n_cannot_link: usize) -> usize {
        let k = (self.cl_subset_fraction * n_cannot_link as f64).round() as usize;
        k.max(1).min(n_cannot_link)
    }
}

pub fn rho(lambda: f64, c: f64) -> f64 {
    ((1.0 + c) / lambda).sqrt()
}

/// Linear discriminant over `[x^K 1]`; the last entry is the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn project(&self, row: &[f64]) -> f64 {
        dot(&self.0, row)
    }
}

/// Node-local clustering problem: rows already restricted to the node's
/// feature subset with a trailing constant 1.
#[derive(Debug, Clone)]
pub struct LocalProblem {
    x: Array2<f64>,
    must_link: Vec<(usize, usize)>,
    cannot_link: Vec<(usize, usize)>,
    unconstrained: Vec<usize>,
}

impl LocalProblem {
    pub fn new(
        x: Array2<f64>,
        must_link: Vec<(usize, usize)>,
        cannot_link: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let m = x.nrows();
        let mut covered = vec![false; m];
        for &(a, b) in must_link.iter().chain(&cannot_link) {
            if a >= m || b >= m || a == b {
                return Err(HfdError::InvalidParameter(format!(
                    "local constraint ({a}, {b}) invalid for {m} rows"
                )));
            }
            covered[a] = true;
            covered[b] = true;
        }
        let unconstrained = (0..m).filter(|&i| !covered[i]).collect();
        let x = if x.is_standard_layout() {
            x
        } else {
            x.as_standard_layout().into_owned()
        };
        Ok(LocalProblem {
            x,
            must_link,
            cannot_link,
            unconstrained,
        })
    }

    /// Appends the bias column to `features` (M × d_k).
    pub fn with_bias(
        features: &Array2<f64>,
        must_link: Vec<(usize, usize)>,
        cannot_link: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let (m, d) = features.dim();
        let x = Array2::from_shape_fn((m, d + 1), |(i, j)| if j < d { features[[i, j]] } else { 1.0 });
        LocalProblem::new(x, must_link, cannot_link)
    }

    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.x.as_slice().expect("standard layout")[i * d..(i + 1) * d]
    }

    pub fn must_link(&self) -> &[(usize, usize)] {
        &self.must_link
    }

    pub fn cannot_link(&self) -> &[(usize, usize)] {
        &self.cannot_link
    }

    pub fn unconstrained(&self) -> &[usize] {
        &self.unconstrained
    }

    fn projections(&self, w: &WeightVector) -> Vec<f64> {
        (0..self.len()).map(|i| w.project(self.row(i))).collect()
    }
}

/// Fixed quantities of one CCCP outer iteration.
#[derive(Debug, Clone)]
pub struct CccpState {
    pub w: WeightVector,
    /// Labels for `problem.unconstrained()`, in the same order.
    pub y: Vec<f64>,
    pub z_ml: Vec<(f64, f64)>,
    pub z_cl: Vec<(f64, f64)>,
    pub cl_subset: Vec<usize>,
    pub outer_iter: usize,
    /// Effective unconstrained weight for this iteration (0 during warm-up).
    pub c: f64,
}

impl CccpState {
    /// Computes every fixed assignment at `w`.
    pub fn at(w: WeightVector, problem: &LocalProblem, params: &SsmmcParams, outer_iter: usize) -> Self {
        let y = best_unary_labels(&w, problem);
        let (z_ml, z_cl) = best_satisfying_assignments(&w, problem);
        let cl_subset = if problem.cannot_link().is_empty() {
            Vec::new()
        } else {
            select_cl_subset(&w, problem, &z_cl, params.subset_size(problem.cannot_link().len()))
        };
        let c = if outer_iter < params.warmup_outer_iters {
            0.0
        } else {
            params.c
        };
        CccpState {
            w,
            y,
            z_ml,
            z_cl,
            cl_subset,
            outer_iter,
            c,
        }
    }
}

/// `y1 wᵀx1 + y2 wᵀx2`.
pub fn joint_projection(w: &WeightVector, x1: &[f64], x2: &[f64], y1: f64, y2: f64) -> Result<f64> {
    for x in [x1, x2] {
        if x.len() != w.len() {
            return Err(HfdError::DimensionMismatch {
                expected: w.len(),
                got: x.len(),
            });
        }
    }
    Ok(y1 * w.project(x1) + y2 * w.project(x2))
}

fn scatter(problem: &LocalProblem, pairs: &[(usize, usize)]) -> Array2<f64> {
    let d = problem.dim();
    let mut s = Array2::zeros((d, d));
    if pairs.is_empty() {
        return s;
    }
    let mut diff = vec![0.0; d];
    for &(a, b) in pairs {
        for ((o, xa), xb) in diff.iter_mut().zip(problem.row(a)).zip(problem.row(b)) {
            *o = xa - xb;
        }
        for i in 0..d {
            for j in 0..d {
                s[[i, j]] += diff[i] * diff[j];
            }
        }
    }
    s / pairs.len() as f64
}

/// Must-link and cannot-link difference scatter matrices over all pairs.
pub fn scatter_matrices(problem: &LocalProblem) -> Result<(Array2<f64>, Array2<f64>)> {
    if problem.must_link().is_empty() {
        return Err(HfdError::EmptyConstraintSet("no must-link pairs"));
    }
    if problem.cannot_link().is_empty() {
        return Err(HfdError::EmptyConstraintSet("no cannot-link pairs"));
    }
    Ok((
        scatter(problem, problem.must_link()),
        scatter(problem, problem.cannot_link()),
    ))
}

/// Top generalized eigenvector of `S_C v = μ (S_M + γI) v`, scaled to
/// `min(1, ρ)`.
pub fn init_weights(s_m: &Array2<f64>, s_c: &Array2<f64>, rho: f64) -> Result<WeightVector> {
    let d = s_m.nrows();
    if s_m.ncols() != d || s_c.dim() != (d, d) {
        return Err(HfdError::DimensionMismatch {
            expected: d,
            got: s_c.nrows(),
        });
    }
    let trace = s_m.diag().sum() + d as f64;
    let gamma = 1e-6 * trace / d as f64;
    let mut b = s_m.clone();
    for i in 0..d {
        b[[i, i]] += gamma;
    }
    let v = eigen::top_generalized_eigenvector(s_c, &b)?;
    let scale = rho.min(1.0);
    Ok(WeightVector(v.into_iter().map(|x| x * scale).collect()))
}

fn random_init(dim: usize, rho: f64, seed: u64) -> WeightVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let len = norm(&v).max(f64::MIN_POSITIVE);
    let scale = rho.min(1.0) / len;
    v.iter_mut().for_each(|x| *x *= scale);
    WeightVector(v)
}

/// Best joint labels per pair that satisfy the pair's own constraint.
pub fn best_satisfying_assignments(
    w: &WeightVector,
    problem: &LocalProblem,
) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
    let z_ml = problem
        .must_link()
        .iter()
        .map(|&(a, b)| {
            let z = sign(w.project(problem.row(a)) + w.project(problem.row(b)));
            (z, z)
        })
        .collect();
    let z_cl = problem
        .cannot_link()
        .iter()
        .map(|&(a, b)| {
            let z = sign(w.project(problem.row(a)) - w.project(problem.row(b)));
            (z, -z)
        })
        .collect();
    (z_ml, z_cl)
}

/// `sign(wᵀx)` for every unconstrained row, ties to `+1`.
pub fn best_unary_labels(w: &WeightVector, problem: &LocalProblem) -> Vec<f64> {
    problem
        .unconstrained()
        .iter()
        .map(|&i| sign(w.project(problem.row(i))))
        .collect()
}

/// Satisfaction margin of every cannot-link pair under `w` with its fixed labels.
pub fn cl_margins(w: &WeightVector, problem: &LocalProblem, z_cl: &[(f64, f64)]) -> Vec<f64> {
    problem
        .cannot_link()
        .iter()
        .zip(z_cl)
        .map(|(&(a, b), &(z, _))| cl_margin(z, w.project(problem.row(a)), w.project(problem.row(b))).0)
        .collect()
}

/// Indices (ascending) of the `subset_size` cannot-link pairs with the
/// largest satisfaction margin; ties go to the lower index.
pub fn select_cl_subset(
    w: &WeightVector,
    problem: &LocalProblem,
    z_cl: &[(f64, f64)],
    subset_size: usize,
) -> Vec<usize> {
    let margins = cl_margins(w, problem, z_cl);
    top_k_by_margin(&margins, subset_size)
}

pub(crate) fn top_k_by_margin(margins: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..margins.len()).collect();
    // + 0.0 folds -0.0 into 0.0 so equal margins tie under total_cmp
    order.sort_by(|&i, &j| (margins[j] + 0.0).total_cmp(&(margins[i] + 0.0)).then(i.cmp(&j)));
    order.truncate(k);
    order.sort_unstable();
    order
}

fn build_objective<'p>(state: &CccpState, problem: &'p LocalProblem, params: &SsmmcParams) -> HingeObjective<'p> {
    let ml: Vec<MlTerm> = problem
        .must_link()
        .iter()
        .zip(&state.z_ml)
        .map(|(&(a, b), &(z, _))| MlTerm { a, b, z })
        .collect();
    let cl: Vec<ClTerm> = state
        .cl_subset
        .iter()
        .map(|&j| {
            let (a, b) = problem.cannot_link()[j];
            ClTerm {
                a,
                b,
                z: state.z_cl[j].0,
            }
        })
        .collect();
    let unary: Vec<UnaryTerm> = problem
        .unconstrained()
        .iter()
        .zip(&state.y)
        .map(|(&row, &y)| UnaryTerm { row, y })
        .collect();
    let inv = |n: usize| if n == 0 { 0.0 } else { 1.0 / n as f64 };
    HingeObjective {
        x: problem.x(),
        lambda: params.lambda,
        ml_weight: inv(ml.len()),
        cl_weight: inv(cl.len()),
        unary_weight: state.c * inv(unary.len()),
        unary_margin: 2.0,
        ml,
        cl,
        unary,
    }
}

/// Fixed-assignment convex objective of one CCCP iteration.
pub fn fixed_objective(w: &[f64], state: &CccpState, problem: &LocalProblem, params: &SsmmcParams) -> f64 {
    build_objective(state, problem, params).value(w)
}

/// Subgradient of [`fixed_objective`] at `w_r`; pair terms are active when
/// their margin is below 1, unary terms when `2 y wᵀx ≤ 1`.
pub fn subgradient(w_r: &[f64], state: &CccpState, problem: &LocalProblem, params: &SsmmcParams) -> Vec<f64> {
    build_objective(state, problem, params).subgradient(w_r)
}

/// Result of one inner solve.
#[derive(Debug, Clone)]
pub struct InnerSolve {
    pub w: WeightVector,
    pub iterations: usize,
    pub start_objective: f64,
    pub objective: f64,
    pub max_iterate_norm: f64,
}

/// Projected subgradient solve of the fixed-assignment problem, started at `state.w`.
pub fn solve_convex_subproblem(state: &CccpState, problem: &LocalProblem, params: &SsmmcParams) -> Result<InnerSolve> {
    let obj = build_objective(state, problem, params);
    let report = objective::projected_subgradient(
        &obj,
        state.w.as_slice(),
        rho(params.lambda, state.c),
        params.eps1,
        params.max_inner_iters,
    )?;
    Ok(InnerSolve {
        w: WeightVector(report.w),
        iterations: report.iterations,
        start_objective: report.start_objective,
        objective: report.objective,
        max_iterate_norm: report.max_iterate_norm,
    })
}

/// Diagnostic record of one CCCP iteration.
#[derive(Debug, Clone, Serialize)]
pub struct OuterRecord {
    pub iter: usize,
    pub c: f64,
    pub rho: f64,
    pub start_objective: f64,
    pub objective: f64,
    pub inner_iterations: usize,
    pub max_iterate_norm: f64,
    pub relative_change: f64,
}

#[derive(Debug, Clone)]
pub struct SsmmcOutcome {
    pub weights: WeightVector,
    pub trace: Vec<OuterRecord>,
    /// True when the eigen-initialization failed and a random start was used.
    pub random_init: bool,
}

pub fn train_ssmmc(problem: &LocalProblem, params: &SsmmcParams, seed: u64) -> Result<WeightVector> {
    train_ssmmc_traced(problem, params, seed).map(|o| o.weights)
}

pub fn train_ssmmc_traced(problem: &LocalProblem, params: &SsmmcParams, seed: u64) -> Result<SsmmcOutcome> {
    params.validate()?;
    if problem.cannot_link().is_empty() {
        return Err(HfdError::EmptyCannotLink);
    }
    let s_m = scatter(problem, problem.must_link());
    let s_c = scatter(problem, problem.cannot_link());
    let (mut w, random_init) = match init_weights(&s_m, &s_c, params.rho()) {
        Ok(w) => (w, false),
        Err(e) => {
            log::debug!("ssmmc eigen-init failed ({e}); random start");
            (random_init(problem.dim(), params.rho(), seed), true)
        }
    };
    let mut trace = Vec::new();
    for t in 0..params.max_outer_iters {
        let state = CccpState::at(w.clone(), problem, params, t);
        let inner = solve_convex_subproblem(&state, problem, params)?;
        let change = objective::relative_change(w.as_slice(), inner.w.as_slice());
        let record = OuterRecord {
            iter: t,
            c: state.c,
            rho: rho(params.lambda, state.c),
            start_objective: inner.start_objective,
            objective: inner.objective,
            inner_iterations: inner.iterations,
            max_iterate_norm: inner.max_iterate_norm,
            relative_change: change,
        };
        log::debug!(
            "ssmmc outer iter={} c={} objective {:.6} -> {:.6} inner_iters={} change={:.3e}",
            record.iter,
            record.c,
            record.start_objective,
            record.objective,
            record.inner_iterations,
            record.relative_change
        );
        trace.push(record);
        w = inner.w;
        // no convergence until the unconstrained term has been switched on
        if t >= params.warmup_outer_iters && change <= params.eps2 {
            break;
        }
    }
    Ok(SsmmcOutcome {
        weights: w,
        trace,
        random_init,
    })
}

/// Margins `(must-link, cannot-link)` of every pair under `w`, each pair
/// taking its best satisfying labels.
pub fn pair_margins(w: &WeightVector, problem: &LocalProblem) -> (Vec<f64>, Vec<f64>) {
    let proj = problem.projections(w);
    let ml = problem
        .must_link()
        .iter()
        .map(|&(a, b)| {
            let z = sign(proj[a] + proj[b]);
            ml_margin(z, proj[a], proj[b]).0
        })
        .collect();
    let cl = problem
        .cannot_link()
        .iter()
        .map(|&(a, b)| {
            let z = sign(proj[a] - proj[b]);
            cl_margin(z, proj[a], proj[b]).0
        })
        .collect();
    (ml, cl)
}
