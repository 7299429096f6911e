//! Evaluation of the learned dissimilarity: projection, routing, the
//! certainty term, per-tree distance and the forest mean.

use serde::{Deserialize, Serialize};

use crate::error::{HfdError, Result};
use crate::hierarchy::{Forest, HierarchyTree, SplitFunction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertaintyParams {
    pub alpha: f64,
}

impl Default for CertaintyParams {
    fn default() -> Self {
        CertaintyParams { alpha: 0.5 }
    }
}

/// `wᵀ[x^K 1]` over the split's feature subset.
pub fn project(split: &SplitFunction, x: &[f64]) -> Result<f64> {
    match split.feature_subset.last() {
        Some(&max) if max >= x.len() => Err(HfdError::DimensionMismatch {
            expected: max + 1,
            got: x.len(),
        }),
        _ => Ok(project_unchecked(split, x)),
    }
}

/// Same arithmetic (and summation order) as the solvers' `wᵀx` on rows
/// with the bias column appended, so routing is bit-identical.
#[inline]
pub(crate) fn project_unchecked(split: &SplitFunction, x: &[f64]) -> f64 {
    let w = split.weights.as_slice();
    let mut acc = 0.0;
    for (wk, &k) in w.iter().zip(&split.feature_subset) {
        acc += wk * x[k];
    }
    acc + w[w.len() - 1] * 1.0
}

#[inline]
pub fn side_of(p: f64) -> Side {
    if p <= 0.0 {
        Side::Left
    } else {
        Side::Right
    }
}

pub fn route(split: &SplitFunction, x: &[f64]) -> Result<Side> {
    project(split, x).map(side_of)
}

/// `1 / (1 + exp(α u))` with the exponent clamped to ±500.
#[inline]
pub fn logistic(alpha: f64, u: f64) -> f64 {
    1.0 / (1.0 + (alpha * u).clamp(-500.0, 500.0).exp())
}

/// Certainty from two projections: `|σ(P_a) − σ(P_b)|`.
#[inline]
pub fn certainty_from_projections(pa: f64, pb: f64, alpha: f64) -> f64 {
    (logistic(alpha, pa) - logistic(alpha, pb)).abs()
}

pub fn certainty(split: &SplitFunction, a: &[f64], b: &[f64], params: CertaintyParams) -> Result<f64> {
    Ok(certainty_from_projections(project(split, a)?, project(split, b)?, params.alpha))
}

#[inline]
fn separation_value(p: f64, subtree_count: usize, n: usize) -> f64 {
    p * subtree_count as f64 / n as f64
}

/// Distance in one tree for already-normalized rows.
pub fn tree_distance(tree: &HierarchyTree, a: &[f64], b: &[f64], params: CertaintyParams) -> Result<f64> {
    let mut id = tree.root_id;
    loop {
        let node = &tree.nodes[id];
        let Some(split) = &node.split else {
            return Ok(0.0);
        };
        let pa = project(split, a)?;
        let pb = project(split, b)?;
        match (side_of(pa), side_of(pb)) {
            (Side::Left, Side::Left) => id = node.left.expect("internal node"),
            (Side::Right, Side::Right) => id = node.right.expect("internal node"),
            _ => {
                let p = certainty_from_projections(pa, pb, params.alpha);
                return Ok(separation_value(p, node.subtree_count, tree.num_training_points));
            }
        }
    }
}

/// Forest mean over rows that have already been normalized.
pub fn forest_distance_normalized(forest: &Forest, a: &[f64], b: &[f64]) -> Result<f64> {
    for x in [a, b] {
        if x.len() != forest.dim() {
            return Err(HfdError::DimensionMismatch {
                expected: forest.dim(),
                got: x.len(),
            });
        }
    }
    let params = CertaintyParams { alpha: forest.alpha };
    let mut sum = 0.0;
    for tree in &forest.trees {
        sum += tree_distance(tree, a, b, params)?;
    }
    Ok(sum / forest.trees.len() as f64)
}

/// Forest mean for raw rows; the stored normalization is applied first.
pub fn forest_distance(forest: &Forest, a: &[f64], b: &[f64]) -> Result<f64> {
    let a = forest.norm_stats.apply_row(a)?;
    let b = forest.norm_stats.apply_row(b)?;
    forest_distance_normalized(forest, &a, &b)
}

/// A point's root-to-leaf path in every tree with the projection at each
/// internal node. Distances between profiles equal [`forest_distance_normalized`]
/// bit for bit without re-projecting.
#[derive(Debug, Clone, PartialEq)]
pub struct PathProfile {
    /// Per tree: `(node_id, projection)` for each internal node on the path,
    /// then the leaf id with projection `NaN`.
    pub paths: Vec<Vec<(usize, f64)>>,
}

impl PathProfile {
    pub fn new(forest: &Forest, x: &[f64]) -> Result<Self> {
        if x.len() != forest.dim() {
            return Err(HfdError::DimensionMismatch {
                expected: forest.dim(),
                got: x.len(),
            });
        }
        let paths = forest
            .trees
            .iter()
            .map(|tree| {
                let mut path = Vec::new();
                let mut id = tree.root_id;
                loop {
                    let node = &tree.nodes[id];
                    match &node.split {
                        None => {
                            path.push((id, f64::NAN));
                            break;
                        }
                        Some(split) => {
                            let p = project_unchecked(split, x);
                            path.push((id, p));
                            id = match side_of(p) {
                                Side::Left => node.left.expect("internal node"),
                                Side::Right => node.right.expect("internal node"),
                            };
                        }
                    }
                }
                path
            })
            .collect();
        Ok(PathProfile { paths })
    }

    pub fn leaf(&self, tree: usize) -> usize {
        self.paths[tree].last().expect("non-empty path").0
    }
}

pub fn profile_tree_distance(tree: &HierarchyTree, a: &[(usize, f64)], b: &[(usize, f64)], alpha: f64) -> f64 {
    for (&(id, pa), &(_, pb)) in a.iter().zip(b) {
        let node = &tree.nodes[id];
        if node.split.is_none() {
            return 0.0;
        }
        if side_of(pa) != side_of(pb) {
            let p = certainty_from_projections(pa, pb, alpha);
            return separation_value(p, node.subtree_count, tree.num_training_points);
        }
    }
    0.0
}

pub fn profile_distance(forest: &Forest, a: &PathProfile, b: &PathProfile) -> f64 {
    let mut sum = 0.0;
    for (t, tree) in forest.trees.iter().enumerate() {
        sum += profile_tree_distance(tree, &a.paths[t], &b.paths[t], forest.alpha);
    }
    sum / forest.trees.len() as f64
}
