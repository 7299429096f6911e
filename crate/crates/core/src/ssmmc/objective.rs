//! Fixed-assignment hinge objective and its projected subgradient solver.
//!
//! Once the CCCP outer step has fixed every assignment, the per-iteration
//! problem is
//!
//! ```text
//! λ/2‖w‖² + a_M Σ_ML max(0, 1 − m_j(w)) + a_C Σ_CL' max(0, 1 − m_j(w))
//!         + a_U Σ_U max(0, 1 − κ y_i wᵀx_i)
//! ```
//!
//! where `m_j` is the satisfaction margin of pair `j` under its fixed
//! satisfying labels. The unsupervised solver reuses the same machinery with
//! only unary terms (κ = 1).

use ndarray::Array2;

use crate::error::{HfdError, Result};
use crate::linalg::{dot, norm, sign};

/// One must-link pair with its fixed joint label `z` (both endpoints share it).
#[derive(Debug, Clone, Copy)]
pub(crate) struct MlTerm {
    pub a: usize,
    pub b: usize,
    pub z: f64,
}

/// One cannot-link pair; endpoint `a` gets `z`, endpoint `b` gets `-z`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ClTerm {
    pub a: usize,
    pub b: usize,
    pub z: f64,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct UnaryTerm {
    pub row: usize,
    pub y: f64,
}

#[derive(Debug)]
pub(crate) struct HingeObjective<'a> {
    pub x: &'a Array2<f64>,
    pub lambda: f64,
    pub ml: Vec<MlTerm>,
    pub ml_weight: f64,
    pub cl: Vec<ClTerm>,
    pub cl_weight: f64,
    pub unary: Vec<UnaryTerm>,
    pub unary_weight: f64,
    pub unary_margin: f64,
}

/// Must-link satisfaction margin `z(a+b) − max_{s1≠s2}(s1 a + s2 b)` and the
/// maximizing violating pattern.
#[inline]
pub fn ml_margin(z: f64, pa: f64, pb: f64) -> (f64, (f64, f64)) {
    let s1 = sign(pa - pb);
    (z * (pa + pb) - (pa - pb).abs(), (s1, -s1))
}

/// Cannot-link satisfaction margin `z(a−b) − max_{s1=s2} s(a+b)` and the
/// maximizing violating pattern.
#[inline]
pub fn cl_margin(z: f64, pa: f64, pb: f64) -> (f64, (f64, f64)) {
    let s = sign(pa + pb);
    (z * (pa - pb) - (pa + pb).abs(), (s, s))
}

impl HingeObjective<'_> {
    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.x.as_slice().expect("standard layout")[i * d..(i + 1) * d]
    }

    pub fn projections(&self, w: &[f64]) -> Vec<f64> {
        (0..self.x.nrows()).map(|i| dot(w, self.row(i))).collect()
    }

    pub fn value_with(&self, w: &[f64], proj: &[f64]) -> f64 {
        let reg = 0.5 * self.lambda * dot(w, w);
        let ml: f64 = self
            .ml
            .iter()
            .map(|t| (1.0 - ml_margin(t.z, proj[t.a], proj[t.b]).0).max(0.0))
            .sum();
        let cl: f64 = self
            .cl
            .iter()
            .map(|t| (1.0 - cl_margin(t.z, proj[t.a], proj[t.b]).0).max(0.0))
            .sum();
        let un: f64 = self
            .unary
            .iter()
            .map(|t| (1.0 - self.unary_margin * t.y * proj[t.row]).max(0.0))
            .sum();
        reg + self.ml_weight * ml + self.cl_weight * cl + self.unary_weight * un
    }

    pub fn value(&self, w: &[f64]) -> f64 {
        self.value_with(w, &self.projections(w))
    }

    fn axpy(out: &mut [f64], alpha: f64, x: &[f64]) {
        for (o, v) in out.iter_mut().zip(x) {
            *o += alpha * v;
        }
    }

    pub fn subgradient_with(&self, w: &[f64], proj: &[f64]) -> Vec<f64> {
        let mut g: Vec<f64> = w.iter().map(|v| self.lambda * v).collect();
        for t in &self.ml {
            let (m, (s1, s2)) = ml_margin(t.z, proj[t.a], proj[t.b]);
            if m < 1.0 {
                Self::axpy(&mut g, self.ml_weight * (s1 - t.z), self.row(t.a));
                Self::axpy(&mut g, self.ml_weight * (s2 - t.z), self.row(t.b));
            }
        }
        for t in &self.cl {
            let (m, (s1, s2)) = cl_margin(t.z, proj[t.a], proj[t.b]);
            if m < 1.0 {
                Self::axpy(&mut g, self.cl_weight * (s1 - t.z), self.row(t.a));
                Self::axpy(&mut g, self.cl_weight * (s2 + t.z), self.row(t.b));
            }
        }
        for t in &self.unary {
            if self.unary_margin * t.y * proj[t.row] <= 1.0 {
                Self::axpy(
                    &mut g,
                    -self.unary_weight * self.unary_margin * t.y,
                    self.row(t.row),
                );
            }
        }
        g
    }

    pub fn subgradient(&self, w: &[f64]) -> Vec<f64> {
        self.subgradient_with(w, &self.projections(w))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct InnerReport {
    pub w: Vec<f64>,
    pub iterations: usize,
    pub start_objective: f64,
    pub objective: f64,
    /// Largest iterate norm observed after projection.
    pub max_iterate_norm: f64,
}

pub(crate) fn relative_change(old: &[f64], new: &[f64]) -> f64 {
    let diff: f64 = old
        .iter()
        .zip(new)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = norm(old).max(norm(new));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub(crate) fn project_to_ball(w: &mut [f64], rho: f64) {
    let n = norm(w);
    if n > rho {
        let orig = w.to_vec();
        let mut s = rho / n;
        loop {
            for (v, o) in w.iter_mut().zip(&orig) {
                *v = o * s;
            }
            // rounding can leave the norm a few ulps above rho
            if norm(w) <= rho {
                break;
            }
            s *= 1.0 - f64::EPSILON;
        }
    }
}

/// Projected subgradient descent with step `1/(λr)` onto `‖w‖ ≤ ρ`.
///
/// Subgradient iterates are not monotone, so the lowest-objective iterate
/// (including the starting point) is returned.
pub(crate) fn projected_subgradient(
    obj: &HingeObjective<'_>,
    w0: &[f64],
    rho: f64,
    eps: f64,
    max_iters: usize,
) -> Result<InnerReport> {
    let mut w = w0.to_vec();
    project_to_ball(&mut w, rho);
    let mut max_norm = norm(&w);
    let mut proj = obj.projections(&w);
    let start_objective = obj.value_with(&w, &proj);
    if !start_objective.is_finite() {
        return Err(HfdError::NonFinite);
    }
    let mut best = (start_objective, w.clone());
    let mut iterations = 0;
    for r in 1..=max_iters {
        iterations = r;
        let g = obj.subgradient_with(&w, &proj);
        let step = 1.0 / (obj.lambda * r as f64);
        let mut next: Vec<f64> = w.iter().zip(&g).map(|(wi, gi)| wi - step * gi).collect();
        project_to_ball(&mut next, rho);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(HfdError::NonFinite);
        }
        max_norm = max_norm.max(norm(&next));
        let change = relative_change(&w, &next);
        w = next;
        proj = obj.projections(&w);
        let value = obj.value_with(&w, &proj);
        if !value.is_finite() {
            return Err(HfdError::NonFinite);
        }
        if value < best.0 {
            best = (value, w.clone());
        }
        if change <= eps {
            break;
        }
    }
    Ok(InnerReport {
        w: best.1,
        iterations,
        start_objective,
        objective: best.0,
        max_iterate_norm: max_norm,
    })
}
