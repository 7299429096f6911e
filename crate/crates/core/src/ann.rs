//! Approximate nearest neighbours in the learned metric.
//!
//! Each tree contributes the training points of the query's leaf, widened
//! one ancestor at a time until at least `k_O` are collected. The union of
//! those candidate sets is re-ranked with the exact forest distance.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HfdError, Result};
use crate::hierarchy::{Forest, HierarchyTree};
use crate::metric::{profile_distance, project, side_of, PathProfile, Side};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnParams {
    pub k_o: usize,
    pub k: usize,
    /// Cut each tree's candidate set to exactly `k_O` instead of keeping the
    /// whole last absorbed subtree.
    pub truncate: bool,
}

impl Default for AnnParams {
    fn default() -> Self {
        AnnParams {
            k_o: 10,
            k: 5,
            truncate: false,
        }
    }
}

impl AnnParams {
    pub fn validate(&self) -> Result<()> {
        if self.k_o == 0 || self.k == 0 {
            return Err(HfdError::InvalidParameter("k and k_O must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: usize,
    pub distance: f64,
}

/// Ascending by `(distance, id)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NeighborList {
    pub entries: Vec<Neighbor>,
}

impl NeighborList {
    pub fn ids(&self) -> Vec<usize> {
        self.entries.iter().map(|n| n.id).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Query<'a> {
    /// A training point by id; it is excluded from its own results.
    Training(usize),
    /// A raw (unnormalized) row.
    External(&'a [f64]),
}

/// Root-to-leaf node ids of `x` (already normalized).
pub fn leaf_path(tree: &HierarchyTree, x: &[f64]) -> Result<Vec<usize>> {
    let mut path = vec![tree.root_id];
    let mut id = tree.root_id;
    while let Some(split) = &tree.nodes[id].split {
        let node = &tree.nodes[id];
        id = match side_of(project(split, x)?) {
            Side::Left => node.left.expect("internal node"),
            Side::Right => node.right.expect("internal node"),
        };
        path.push(id);
    }
    Ok(path)
}

fn subtree_ids(tree: &HierarchyTree, id: usize, out: &mut Vec<usize>) {
    let mut stack = vec![id];
    while let Some(i) = stack.pop() {
        let node = &tree.nodes[i];
        out.extend_from_slice(&node.training_point_ids);
        stack.extend([node.right, node.left].into_iter().flatten());
    }
}

/// Candidate ids from one tree, sorted. `exclude` is dropped from every set.
pub fn candidates_from_tree(tree: &HierarchyTree, x: &[f64], k_o: usize, exclude: Option<usize>) -> Result<Vec<usize>> {
    let path = leaf_path(tree, x)?;
    let mut set = Vec::new();
    for &node in path.iter().rev() {
        set.clear();
        subtree_ids(tree, node, &mut set);
        set.retain(|&i| Some(i) != exclude);
        if set.len() >= k_o {
            break;
        }
    }
    set.sort_unstable();
    Ok(set)
}

/// Leaf-order layout of one tree: every subtree is a contiguous range.
#[derive(Debug, Clone)]
struct TreeLayout {
    order: Vec<usize>,
    range: Vec<(usize, usize)>,
    parent: Vec<Option<usize>>,
}

impl TreeLayout {
    fn new(tree: &HierarchyTree) -> Self {
        let m = tree.nodes.len();
        let mut order = Vec::with_capacity(tree.num_training_points);
        let mut range = vec![(0, 0); m];
        let mut parent = vec![None; m];
        // iterative post-order so ranges close after both children
        let mut stack = vec![(tree.root_id, false)];
        let mut start = vec![0; m];
        while let Some((id, done)) = stack.pop() {
            let node = &tree.nodes[id];
            if done {
                range[id] = (start[id], order.len());
                continue;
            }
            start[id] = order.len();
            if node.is_leaf() {
                order.extend_from_slice(&node.training_point_ids);
                range[id] = (start[id], order.len());
                continue;
            }
            stack.push((id, true));
            let (l, r) = (node.left.expect("internal"), node.right.expect("internal"));
            parent[l] = Some(id);
            parent[r] = Some(id);
            stack.push((r, false));
            stack.push((l, false));
        }
        TreeLayout { order, range, parent }
    }

    fn ids(&self, node: usize) -> &[usize] {
        let (a, b) = self.range[node];
        &self.order[a..b]
    }

    /// Appends this tree's candidates for a query in `leaf` to `out`.
    fn candidates(&self, leaf: usize, k_o: usize, exclude: Option<usize>, truncate: bool, out: &mut Vec<usize>) {
        let count = |node: usize| {
            let ids = self.ids(node);
            ids.len() - exclude.is_some_and(|e| ids.contains(&e)) as usize
        };
        let mut node = leaf;
        let mut below: Option<usize> = None;
        while count(node) < k_o {
            match self.parent[node] {
                Some(p) => {
                    below = Some(node);
                    node = p;
                }
                None => break,
            }
        }
        let keep = |i: &usize| Some(*i) != exclude;
        if !truncate || count(node) <= k_o {
            out.extend(self.ids(node).iter().filter(|i| keep(i)));
            return;
        }
        // previous level in full, then the newly absorbed ids in ascending order
        let start = out.len();
        if let Some(child) = below {
            out.extend(self.ids(child).iter().filter(|i| keep(i)));
        }
        let inner = below.map(|c| self.range[c]).unwrap_or((0, 0));
        let (a, b) = self.range[node];
        let mut fresh: Vec<usize> = (a..b)
            .filter(|pos| !(inner.0..inner.1).contains(pos))
            .map(|pos| self.order[pos])
            .filter(keep)
            .collect();
        fresh.sort_unstable();
        let need = k_o - (out.len() - start);
        out.extend(fresh.into_iter().take(need));
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchCounters {
    pub queries: u64,
    pub distance_evaluations: u64,
    /// Sum of `|O|` over approximate queries.
    pub candidates: u64,
    /// Sum of the per-tree candidate-set sizes before deduplication.
    pub candidates_before_union: u64,
}

/// Search structure over a trained forest; distances use cached path
/// profiles of the training points.
#[derive(Debug)]
pub struct AnnIndex<'f> {
    forest: &'f Forest,
    layouts: Vec<TreeLayout>,
    profiles: Vec<PathProfile>,
    queries: AtomicU64,
    distance_evaluations: AtomicU64,
    candidates: AtomicU64,
    candidates_before_union: AtomicU64,
}

impl<'f> AnnIndex<'f> {
    pub fn new(forest: &'f Forest) -> Result<Self> {
        let layouts = forest.trees.iter().map(TreeLayout::new).collect();
        let profiles = (0..forest.n())
            .into_par_iter()
            .map(|i| PathProfile::new(forest, forest.train_row(i)))
            .collect::<Result<_>>()?;
        Ok(AnnIndex {
            forest,
            layouts,
            profiles,
            queries: AtomicU64::new(0),
            distance_evaluations: AtomicU64::new(0),
            candidates: AtomicU64::new(0),
            candidates_before_union: AtomicU64::new(0),
        })
    }

    pub fn forest(&self) -> &Forest {
        self.forest
    }

    pub fn counters(&self) -> SearchCounters {
        SearchCounters {
            queries: self.queries.load(Ordering::Relaxed),
            distance_evaluations: self.distance_evaluations.load(Ordering::Relaxed),
            candidates: self.candidates.load(Ordering::Relaxed),
            candidates_before_union: self.candidates_before_union.load(Ordering::Relaxed),
        }
    }

    pub fn reset_counters(&self) {
        for c in [&self.queries, &self.distance_evaluations, &self.candidates, &self.candidates_before_union] {
            c.store(0, Ordering::Relaxed);
        }
    }

    fn resolve(&self, query: Query<'_>) -> Result<(std::borrow::Cow<'_, PathProfile>, Option<usize>)> {
        match query {
            Query::Training(id) => {
                let p = self.profiles.get(id).ok_or_else(|| {
                    HfdError::InvalidParameter(format!("training id {id} out of range for {} points", self.forest.n()))
                })?;
                Ok((std::borrow::Cow::Borrowed(p), Some(id)))
            }
            Query::External(row) => {
                let x = self.forest.norm_stats.apply_row(row)?;
                Ok((std::borrow::Cow::Owned(PathProfile::new(self.forest, &x)?), None))
            }
        }
    }

    /// Sorted union of the per-tree candidate sets.
    pub fn candidate_set(&self, query: Query<'_>, k_o: usize, truncate: bool) -> Result<Vec<usize>> {
        let (profile, exclude) = self.resolve(query)?;
        Ok(self.union(&profile, exclude, k_o, truncate).0)
    }

    fn union(&self, profile: &PathProfile, exclude: Option<usize>, k_o: usize, truncate: bool) -> (Vec<usize>, usize) {
        let mut seen = vec![false; self.forest.n()];
        let mut out = Vec::new();
        let mut buf = Vec::new();
        let mut raw = 0;
        for (t, layout) in self.layouts.iter().enumerate() {
            buf.clear();
            layout.candidates(profile.leaf(t), k_o, exclude, truncate, &mut buf);
            raw += buf.len();
            for &i in &buf {
                if !std::mem::replace(&mut seen[i], true) {
                    out.push(i);
                }
            }
        }
        out.sort_unstable();
        (out, raw)
    }

    fn rank(&self, profile: &PathProfile, ids: impl Iterator<Item = usize>, k: usize) -> NeighborList {
        let mut entries: Vec<Neighbor> = ids
            .map(|id| Neighbor {
                id,
                distance: profile_distance(self.forest, profile, &self.profiles[id]),
            })
            .collect();
        self.distance_evaluations.fetch_add(entries.len() as u64, Ordering::Relaxed);
        entries.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.id.cmp(&b.id)));
        entries.truncate(k);
        NeighborList { entries }
    }

    pub fn approx_knn(&self, query: Query<'_>, params: &AnnParams) -> Result<NeighborList> {
        self.approx_search(query, params, true)
    }

    /// Like [`approx_knn`](Self::approx_knn) but returns fewer than `k`
    /// entries when the candidate set is too small.
    pub fn approx_knn_upto(&self, query: Query<'_>, params: &AnnParams) -> Result<NeighborList> {
        self.approx_search(query, params, false)
    }

    fn approx_search(&self, query: Query<'_>, params: &AnnParams, strict: bool) -> Result<NeighborList> {
        params.validate()?;
        let (profile, exclude) = self.resolve(query)?;
        let (cands, raw) = self.union(&profile, exclude, params.k_o, params.truncate);
        self.queries.fetch_add(1, Ordering::Relaxed);
        self.candidates.fetch_add(cands.len() as u64, Ordering::Relaxed);
        self.candidates_before_union.fetch_add(raw as u64, Ordering::Relaxed);
        if strict && cands.len() < params.k {
            return Err(HfdError::InsufficientCandidates {
                found: cands.len(),
                k: params.k,
            });
        }
        Ok(self.rank(&profile, cands.into_iter(), params.k))
    }

    pub fn brute_knn(&self, query: Query<'_>, k: usize) -> Result<NeighborList> {
        let (profile, exclude) = self.resolve(query)?;
        let available = self.forest.n() - exclude.is_some() as usize;
        if k == 0 || k > available {
            return Err(HfdError::InsufficientCandidates { found: available, k });
        }
        let ids = (0..self.forest.n()).filter(|&i| Some(i) != exclude);
        Ok(self.rank(&profile, ids, k))
    }

    pub fn approx_knn_batch(&self, queries: &[Query<'_>], params: &AnnParams) -> Result<Vec<NeighborList>> {
        queries.par_iter().map(|&q| self.approx_knn(q, params)).collect()
    }

    pub fn brute_knn_batch(&self, queries: &[Query<'_>], k: usize) -> Result<Vec<NeighborList>> {
        queries.par_iter().map(|&q| self.brute_knn(q, k)).collect()
    }
}
