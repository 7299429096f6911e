//! Cluster-hierarchy trees and forests: per-node feature subsampling, split
//! learning, constraint propagation, stopping, and model persistence.

use std::io::{Read, Write};

use ndarray::Array2;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ConstraintSet, Dataset, NormStats};
use crate::error::{HfdError, Result};
use crate::metric::{project_unchecked, side_of, Side};
use crate::ssmmc::{train_ssmmc, LocalProblem, SsmmcParams, WeightVector};
use crate::unsup_mmc::{train_unsup_mmc, UnsupParams};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFunction {
    /// Sorted, distinct feature indices.
    pub feature_subset: Vec<usize>,
    /// One weight per feature in the subset, then the bias.
    pub weights: WeightVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub node_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitFunction>,
    pub subtree_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub left: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub right: Option<usize>,
    /// Sorted; only populated for leaves.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub training_point_ids: Vec<usize>,
}

impl TreeNode {
    fn leaf(node_id: usize, ids: Vec<usize>) -> Self {
        TreeNode {
            node_id,
            split: None,
            subtree_count: ids.len(),
            left: None,
            right: None,
            training_point_ids: ids,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.split.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyTree {
    /// Arena indexed by `node_id`.
    pub nodes: Vec<TreeNode>,
    pub root_id: usize,
    pub num_training_points: usize,
}

impl HierarchyTree {
    pub fn leaves(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter().filter(|n| n.is_leaf())
    }

    /// Number of nodes on the longest root-to-leaf path.
    pub fn height(&self) -> usize {
        let mut best = 0;
        let mut stack = vec![(self.root_id, 1)];
        while let Some((id, depth)) = stack.pop() {
            best = best.max(depth);
            let node = &self.nodes[id];
            for child in [node.left, node.right].into_iter().flatten() {
                stack.push((child, depth + 1));
            }
        }
        best
    }

    /// Mean depth of the training points' leaves (root depth 0).
    pub fn mean_leaf_depth(&self) -> f64 {
        let mut total = 0usize;
        let mut stack = vec![(self.root_id, 0usize)];
        while let Some((id, depth)) = stack.pop() {
            let node = &self.nodes[id];
            if node.is_leaf() {
                total += depth * node.subtree_count;
            }
            for child in [node.left, node.right].into_iter().flatten() {
                stack.push((child, depth + 1));
            }
        }
        total as f64 / self.num_training_points.max(1) as f64
    }

    fn validate(&self, d: usize) -> Result<()> {
        let bad = |m: String| Err(HfdError::InvalidParameter(format!("malformed tree: {m}")));
        if self.root_id >= self.nodes.len() {
            return bad("root out of range".into());
        }
        let mut seen = vec![false; self.num_training_points];
        let mut visited = vec![false; self.nodes.len()];
        let mut stack = vec![self.root_id];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if node.node_id != id || visited[id] {
                return bad(format!("node {id} misplaced or revisited"));
            }
            visited[id] = true;
            match (&node.split, node.left, node.right) {
                (None, None, None) => {
                    if node.subtree_count != node.training_point_ids.len() {
                        return bad(format!("leaf {id} count"));
                    }
                    for &p in &node.training_point_ids {
                        if p >= seen.len() || std::mem::replace(&mut seen[p], true) {
                            return bad(format!("point {p} out of range or repeated"));
                        }
                    }
                }
                (Some(split), Some(l), Some(r)) => {
                    if l >= self.nodes.len() || r >= self.nodes.len() {
                        return bad(format!("children of {id} out of range"));
                    }
                    if self.nodes[l].subtree_count + self.nodes[r].subtree_count != node.subtree_count {
                        return bad(format!("count of {id}"));
                    }
                    let ok_subset = !split.feature_subset.is_empty()
                        && split.feature_subset.windows(2).all(|w| w[0] < w[1])
                        && split.feature_subset.last().is_some_and(|&k| k < d)
                        && split.weights.len() == split.feature_subset.len() + 1;
                    if !ok_subset {
                        return bad(format!("split of {id}"));
                    }
                    stack.push(l);
                    stack.push(r);
                }
                _ => return bad(format!("node {id} is half internal")),
            }
        }
        if !seen.iter().all(|&s| s) {
            return bad("leaves do not cover every training point".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    /// Features sampled per node; `None` selects `max(1, round(d/3))`, or
    /// `d` when `d < 3`.
    pub d_k: Option<usize>,
    /// Nodes with at most this many points become leaves.
    pub min_node_size: usize,
    pub max_split_retries: usize,
    pub ssmmc: SsmmcParams,
    /// `min_membership` is overridden per node by
    /// `min(min_node_size, floor(M/2))`.
    pub unsup: UnsupParams,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            d_k: None,
            min_node_size: 5,
            max_split_retries: 3,
            ssmmc: SsmmcParams::default(),
            unsup: UnsupParams::default(),
        }
    }
}

impl TreeParams {
    pub fn resolved_d_k(&self, d: usize) -> usize {
        match self.d_k {
            Some(k) => k,
            None if d < 3 => d,
            None => ((d as f64 / 3.0).round() as usize).max(1),
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let d_k = self.resolved_d_k(d);
        if d_k == 0 || d_k > d {
            return Err(HfdError::BadSubsetSize { d_k, d });
        }
        if self.min_node_size < 2 {
            return Err(HfdError::InvalidParameter("min_node_size must be >= 2".into()));
        }
        self.ssmmc.validate()?;
        UnsupParams {
            min_membership: 1,
            ..self.unsup.clone()
        }
        .validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    SemiSupervised,
    Unsupervised,
}

#[derive(Debug, Clone)]
pub struct SplitOutcome {
    pub split: SplitFunction,
    pub mode: SplitMode,
    pub attempts: usize,
}

/// `d_k` distinct sorted indices drawn uniformly from `0..d`.
pub fn sample_feature_subset<R: RngCore>(d: usize, d_k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if d_k == 0 || d_k > d {
        return Err(HfdError::BadSubsetSize { d_k, d });
    }
    let mut idx = rand::seq::index::sample(rng, d, d_k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

fn local_features(data: &Dataset, ids: &[usize], subset: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((ids.len(), subset.len()), |(i, k)| data.row(ids[i])[subset[k]])
}

/// Maps global constraint endpoints to positions in the sorted `ids`.
fn localize(pairs: &[(usize, usize)], ids: &[usize]) -> Result<Vec<(usize, usize)>> {
    pairs
        .iter()
        .map(|&(a, b)| match (ids.binary_search(&a), ids.binary_search(&b)) {
            (Ok(la), Ok(lb)) => Ok((la, lb)),
            _ => Err(HfdError::InvalidParameter(format!(
                "constraint ({a}, {b}) is not inside the node"
            ))),
        })
        .collect()
}

/// Learns a split for the node holding the sorted training `ids`.
///
/// A split that routes every point to the same side is retried with a fresh
/// feature subset up to `max_split_retries` times.
pub fn learn_split<R: RngCore>(
    data: &Dataset,
    ids: &[usize],
    constraints: &ConstraintSet,
    params: &TreeParams,
    rng: &mut R,
) -> Result<SplitOutcome> {
    let d = data.dim();
    let d_k = params.resolved_d_k(d);
    let ml = localize(&constraints.must_link, ids)?;
    let cl = localize(&constraints.cannot_link, ids)?;
    let mode = if cl.is_empty() {
        SplitMode::Unsupervised
    } else {
        SplitMode::SemiSupervised
    };
    let unsup = UnsupParams {
        min_membership: params.min_node_size.min(ids.len() / 2).max(1),
        ..params.unsup.clone()
    };
    let attempts = params.max_split_retries + 1;
    for attempt in 1..=attempts {
        let subset = sample_feature_subset(d, d_k, rng)?;
        let feats = local_features(data, ids, &subset);
        let solver_seed = rng.next_u64();
        let weights = match mode {
            SplitMode::SemiSupervised => {
                let problem = LocalProblem::with_bias(&feats, ml.clone(), cl.clone())?;
                train_ssmmc(&problem, &params.ssmmc, solver_seed)?
            }
            SplitMode::Unsupervised => {
                let problem = LocalProblem::with_bias(&feats, Vec::new(), Vec::new())?;
                train_unsup_mmc(problem.x(), &unsup, solver_seed)?
            }
        };
        let split = SplitFunction {
            feature_subset: subset,
            weights,
        };
        let left = ids
            .iter()
            .filter(|&&i| side_of(project_unchecked(&split, data.row(i))) == Side::Left)
            .count();
        if left > 0 && left < ids.len() {
            return Ok(SplitOutcome { split, mode, attempts: attempt });
        }
        log::trace!("one-sided split on attempt {attempt} ({} points)", ids.len());
    }
    Err(HfdError::DegenerateSplit { attempts })
}

/// Constraints whose endpoints both go left / both go right; pairs routed
/// apart are dropped.
pub fn propagate_constraints(
    constraints: &ConstraintSet,
    split: &SplitFunction,
    data: &Dataset,
) -> (ConstraintSet, ConstraintSet) {
    propagate_by(constraints, |i| {
        side_of(project_unchecked(split, data.row(i))) == Side::Left
    })
}

fn propagate_by(constraints: &ConstraintSet, goes_left: impl Fn(usize) -> bool) -> (ConstraintSet, ConstraintSet) {
    let mut left = ConstraintSet::default();
    let mut right = ConstraintSet::default();
    let mut route = |pairs: &[(usize, usize)], pick: fn(&mut ConstraintSet) -> &mut Vec<(usize, usize)>| {
        for &(a, b) in pairs {
            match (goes_left(a), goes_left(b)) {
                (true, true) => pick(&mut left).push((a, b)),
                (false, false) => pick(&mut right).push((a, b)),
                _ => {}
            }
        }
    };
    route(&constraints.must_link, |c| &mut c.must_link);
    route(&constraints.cannot_link, |c| &mut c.cannot_link);
    (left, right)
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Per-node stream derived from `(tree_seed, node_id)` only.
pub fn node_rng(tree_seed: u64, node_id: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(tree_seed) ^ node_id as u64))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TreeStats {
    pub semi_supervised_splits: usize,
    pub unsupervised_splits: usize,
    pub degenerate_leaves: usize,
    pub failed_leaves: usize,
    pub retries: usize,
}

pub fn train_tree(data: &Dataset, constraints: &ConstraintSet, params: &TreeParams, seed: u64) -> Result<HierarchyTree> {
    train_tree_traced(data, constraints, params, seed).map(|(t, _)| t)
}

/// Top-down training; node ids are assigned when nodes are created and
/// children are expanded left first.
pub fn train_tree_traced(
    data: &Dataset,
    constraints: &ConstraintSet,
    params: &TreeParams,
    seed: u64,
) -> Result<(HierarchyTree, TreeStats)> {
    params.validate(data.dim())?;
    let n = data.len();
    let mut stats = TreeStats::default();
    let mut nodes = vec![TreeNode::leaf(0, (0..n).collect())];
    let mut stack = vec![(0usize, constraints.clone())];
    while let Some((id, cons)) = stack.pop() {
        if nodes[id].subtree_count <= params.min_node_size {
            continue;
        }
        let ids = std::mem::take(&mut nodes[id].training_point_ids);
        let mut rng = node_rng(seed, id);
        let outcome = match learn_split(data, &ids, &cons, params, &mut rng) {
            Ok(o) => o,
            Err(e) => {
                match e {
                    HfdError::DegenerateSplit { .. } => stats.degenerate_leaves += 1,
                    _ => stats.failed_leaves += 1,
                }
                log::debug!("node {id} ({} points) becomes a leaf: {e}", ids.len());
                nodes[id].training_point_ids = ids;
                continue;
            }
        };
        match outcome.mode {
            SplitMode::SemiSupervised => stats.semi_supervised_splits += 1,
            SplitMode::Unsupervised => stats.unsupervised_splits += 1,
        }
        stats.retries += outcome.attempts - 1;
        let goes_left: Vec<bool> = ids
            .iter()
            .map(|&i| side_of(project_unchecked(&outcome.split, data.row(i))) == Side::Left)
            .collect();
        let (left_ids, right_ids): (Vec<usize>, Vec<usize>) = {
            let mut l = Vec::new();
            let mut r = Vec::new();
            for (&i, &gl) in ids.iter().zip(&goes_left) {
                if gl {
                    l.push(i)
                } else {
                    r.push(i)
                }
            }
            (l, r)
        };
        let (left_cons, right_cons) = propagate_by(&cons, |i| goes_left[ids.binary_search(&i).expect("member")]);
        let l = nodes.len();
        let r = l + 1;
        nodes.push(TreeNode::leaf(l, left_ids));
        nodes.push(TreeNode::leaf(r, right_ids));
        let node = &mut nodes[id];
        node.split = Some(outcome.split);
        node.left = Some(l);
        node.right = Some(r);
        stack.push((r, right_cons));
        stack.push((l, left_cons));
    }
    Ok((
        HierarchyTree {
            nodes,
            root_id: 0,
            num_training_points: n,
        },
        stats,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub alpha: f64,
    pub seed: u64,
    pub tree: TreeParams,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 500,
            alpha: 0.5,
            seed: 0,
            tree: TreeParams::default(),
        }
    }
}

impl ForestParams {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.n_trees == 0 {
            return Err(HfdError::InvalidParameter("T must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(HfdError::InvalidParameter("alpha must be > 0".into()));
        }
        self.tree.validate(d)
    }
}

/// The trained metric: trees over the (normalized) training points.
#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    pub trees: Vec<HierarchyTree>,
    pub alpha: f64,
    pub norm_stats: NormStats,
    pub params: ForestParams,
    /// Normalized training rows, `N × d`.
    pub train_points: Array2<f64>,
    pub train_labels: Option<Vec<i64>>,
}

impl Forest {
    pub fn n(&self) -> usize {
        self.train_points.nrows()
    }

    pub fn dim(&self) -> usize {
        self.train_points.ncols()
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn train_row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.train_points.as_slice().expect("standard layout")[i * d..(i + 1) * d]
    }

    /// Forest with placeholder training rows, for hand-built trees.
    pub fn from_trees(trees: Vec<HierarchyTree>, alpha: f64, d: usize) -> Self {
        let n = trees.first().map_or(0, |t| t.num_training_points);
        Forest {
            trees,
            alpha,
            norm_stats: NormStats::identity(d),
            params: ForestParams {
                alpha,
                ..ForestParams::default()
            },
            train_points: Array2::zeros((n, d)),
            train_labels: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut out = Vec::new();
        self.write_json(&mut out)?;
        Ok(String::from_utf8(out).expect("json is utf-8"))
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        let doc = ModelDoc {
            format_version: FORMAT_VERSION,
            n: self.n(),
            d: self.dim(),
            n_trees: self.n_trees(),
            alpha: self.alpha,
            params: self.params.clone(),
            norm_stats: self.norm_stats.clone(),
            train_points: self.train_points.rows().into_iter().map(|r| r.to_vec()).collect(),
            train_labels: self.train_labels.clone(),
            trees: self.trees.clone(),
        };
        serde_json::to_writer(out, &doc)?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Probe {
            format_version: u32,
        }
        let probe: Probe = serde_json::from_str(text)?;
        if probe.format_version > FORMAT_VERSION {
            return Err(HfdError::UnsupportedVersion {
                found: probe.format_version,
                supported: FORMAT_VERSION,
            });
        }
        let doc: ModelDoc = serde_json::from_str(text)?;
        doc.into_forest()
    }

    pub fn read_json<R: Read>(mut input: R) -> Result<Self> {
        let mut text = String::new();
        input
            .read_to_string(&mut text)
            .map_err(|e| HfdError::io("<model>", e))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    format_version: u32,
    n: usize,
    d: usize,
    n_trees: usize,
    alpha: f64,
    params: ForestParams,
    norm_stats: NormStats,
    train_points: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_labels: Option<Vec<i64>>,
    trees: Vec<HierarchyTree>,
}

impl ModelDoc {
    fn into_forest(self) -> Result<Forest> {
        let bad = |m: &str| Err(HfdError::InvalidParameter(format!("malformed model: {m}")));
        if self.trees.len() != self.n_trees || self.n_trees == 0 {
            return bad("tree count");
        }
        if self.train_points.len() != self.n || self.train_points.iter().any(|r| r.len() != self.d) {
            return bad("training point shape");
        }
        if self.norm_stats.dim() != self.d {
            return bad("normalization dimension");
        }
        if self.train_labels.as_ref().is_some_and(|l| l.len() != self.n) {
            return bad("label count");
        }
        for tree in &self.trees {
            if tree.num_training_points != self.n {
                return bad("tree point count");
            }
            tree.validate(self.d)?;
        }
        let flat: Vec<f64> = self.train_points.into_iter().flatten().collect();
        Ok(Forest {
            trees: self.trees,
            alpha: self.alpha,
            norm_stats: self.norm_stats,
            params: self.params,
            train_points: Array2::from_shape_vec((self.n, self.d), flat).expect("checked shape"),
            train_labels: self.train_labels,
        })
    }
}

/// Trains `params.n_trees` trees with seeds `params.seed + t`; the result is
/// independent of the rayon pool size. `data` is used as given (normalize
/// beforehand and set `norm_stats` on the result).
pub fn train_forest(data: &Dataset, constraints: &ConstraintSet, params: &ForestParams) -> Result<Forest> {
    params.validate(data.dim())?;
    let trees: Vec<HierarchyTree> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| train_tree(data, constraints, &params.tree, params.seed.wrapping_add(t as u64)))
        .collect::<Result<_>>()?;
    Ok(Forest {
        trees,
        alpha: params.alpha,
        norm_stats: NormStats::identity(data.dim()),
        params: params.clone(),
        train_points: data.points().clone(),
        train_labels: data.labels().map(<[i64]>::to_vec),
    })
}
