//! Evaluation protocols: kNN classification, retrieval precision, ANN
//! quality against brute force, label-noise sweeps, similarity export and
//! V-measure.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ann::{AnnIndex, AnnParams, NeighborList, Query};
use crate::data::{available_pairs, flip_labels, sample_constraints, split_folds, ConstraintSet, Dataset};
use crate::error::{HfdError, Result};
use crate::hierarchy::{train_forest, Forest, ForestParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    #[default]
    Approx,
    Brute,
}

/// How many constraints to draw from training labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstraintConfig {
    /// Total constraints per class; used when explicit counts are absent.
    pub per_class: usize,
    /// Share of must-link pairs in the per-class total.
    pub ml_fraction: f64,
    pub must_link: Option<usize>,
    pub cannot_link: Option<usize>,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        ConstraintConfig {
            per_class: 1000,
            ml_fraction: 0.5,
            must_link: None,
            cannot_link: None,
        }
    }
}

impl ConstraintConfig {
    /// Requested `(ML, CL)` counts, capped at what the labels admit.
    pub fn counts(&self, labels: &[i64]) -> (usize, usize) {
        let classes = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
        let total = (self.per_class * classes) as f64;
        let ml = self.must_link.unwrap_or((total * self.ml_fraction).round() as usize);
        let cl = self
            .cannot_link
            .unwrap_or((total - (total * self.ml_fraction).round()).max(0.0) as usize);
        let (ml_avail, cl_avail) = available_pairs(labels);
        (ml.min(ml_avail as usize), cl.min(cl_avail as usize))
    }

    pub fn sample(&self, labels: &[i64], seed: u64) -> Result<ConstraintSet> {
        let (ml, cl) = self.counts(labels);
        sample_constraints(labels, ml, cl, seed)
    }
}

/// Everything needed to go from a labeled training set to a searchable metric.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineParams {
    pub forest: ForestParams,
    pub constraints: ConstraintConfig,
    pub ann: AnnParams,
    pub search: SearchMode,
}

/// Independent stream `stream` of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    crate::hierarchy::splitmix64(seed ^ crate::hierarchy::splitmix64(stream))
}

const CONSTRAINT_STREAM: u64 = 1;
const FOLD_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;

/// Samples constraints from `train`'s labels and trains a forest with
/// `seed`. The data is used as given.
pub fn fit(train: &Dataset, params: &PipelineParams, seed: u64) -> Result<Forest> {
    let labels = train.require_labels()?;
    let cons = params.constraints.sample(labels, derive_seed(seed, CONSTRAINT_STREAM))?;
    let forest_params = ForestParams {
        seed,
        ..params.forest.clone()
    };
    train_forest(train, &cons, &forest_params)
}

/// Majority label in neighbour order; ties go to the tied label seen first.
pub fn vote(neighbor_labels: &[i64]) -> i64 {
    let mut counts: HashMap<i64, usize> = HashMap::new();
    for &l in neighbor_labels {
        *counts.entry(l).or_default() += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    *neighbor_labels
        .iter()
        .find(|l| counts[l] == best)
        .expect("non-empty neighbour list")
}

fn search(index: &AnnIndex<'_>, q: Query<'_>, ann: &AnnParams, mode: SearchMode) -> Result<NeighborList> {
    match mode {
        SearchMode::Approx => index.approx_knn(q, ann),
        SearchMode::Brute => index.brute_knn(q, ann.k),
    }
}

/// Predicted labels for raw `test` rows from the `ann.k` nearest training points.
pub fn knn_predict(
    forest: &Forest,
    train_labels: &[i64],
    test: &Dataset,
    ann: &AnnParams,
    mode: SearchMode,
) -> Result<Vec<i64>> {
    if train_labels.len() != forest.n() {
        return Err(HfdError::LengthMismatch {
            left: train_labels.len(),
            right: forest.n(),
        });
    }
    let index = AnnIndex::new(forest)?;
    (0..test.len())
        .into_par_iter()
        .map(|i| {
            let nn = search(&index, Query::External(test.row(i)), ann, mode)?;
            let labels: Vec<i64> = nn.entries.iter().map(|e| train_labels[e.id]).collect();
            Ok(vote(&labels))
        })
        .collect()
}

pub fn accuracy(predicted: &[i64], truth: &[i64]) -> f64 {
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}

/// Fraction of `test` points whose k-NN vote matches their label.
pub fn knn_classify(forest: &Forest, train_labels: &[i64], test: &Dataset, ann: &AnnParams, mode: SearchMode) -> Result<f64> {
    let truth = test.require_labels()?;
    let predicted = knn_predict(forest, train_labels, test, ann, mode)?;
    Ok(accuracy(&predicted, truth))
}

/// Euclidean k-NN baseline, ties by `(distance, id)`.
pub fn euclidean_knn_classify(train: &Dataset, test: &Dataset, k: usize) -> Result<f64> {
    let labels = train.require_labels()?;
    let truth = test.require_labels()?;
    if train.dim() != test.dim() {
        return Err(HfdError::DimensionMismatch {
            expected: train.dim(),
            got: test.dim(),
        });
    }
    let predicted: Vec<i64> = (0..test.len())
        .into_par_iter()
        .map(|i| {
            let q = test.row(i);
            let mut d: Vec<(f64, usize)> = (0..train.len())
                .map(|j| {
                    let s: f64 = q.iter().zip(train.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                    (s, j)
                })
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let nn: Vec<i64> = d.iter().take(k).map(|&(_, j)| labels[j]).collect();
            vote(&nn)
        })
        .collect();
    Ok(accuracy(&predicted, truth))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScores {
    pub hfd: Vec<f64>,
    pub euclidean: Vec<f64>,
    pub train_seconds: f64,
    pub query_seconds: f64,
}

impl FoldScores {
    pub fn mean_hfd(&self) -> f64 {
        mean(&self.hfd)
    }

    pub fn mean_euclidean(&self) -> f64 {
        mean(&self.euclidean)
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn classify_with_noise(data: &Dataset, params: &PipelineParams, folds: usize, seed: u64, rate: f64) -> Result<FoldScores> {
    let labels = data.require_labels()?;
    let splits = split_folds(data.len(), folds, derive_seed(seed, FOLD_STREAM))?;
    let mut scores = FoldScores {
        hfd: Vec::new(),
        euclidean: Vec::new(),
        train_seconds: 0.0,
        query_seconds: 0.0,
    };
    for (f, fold) in splits.iter().enumerate() {
        let fold_seed = derive_seed(seed, 100 + f as u64);
        let clean: Vec<i64> = fold.train.iter().map(|&i| labels[i]).collect();
        let noisy = flip_labels(&clean, rate, derive_seed(fold_seed, NOISE_STREAM))?;
        let train = data.subset(&fold.train)?.with_labels(Some(noisy.clone()))?;
        let test = data.subset(&fold.test)?;
        let t0 = Instant::now();
        let forest = fit(&train, params, fold_seed)?;
        let t1 = Instant::now();
        scores.hfd.push(knn_classify(&forest, &noisy, &test, &params.ann, params.search)?);
        scores.query_seconds += t1.elapsed().as_secs_f64();
        scores.train_seconds += (t1 - t0).as_secs_f64();
        scores.euclidean.push(euclidean_knn_classify(&train, &test, params.ann.k)?);
    }
    Ok(scores)
}

/// `folds`-fold cross-validated k-NN accuracy, with the Euclidean baseline
/// on the same folds.
pub fn cross_validate(data: &Dataset, params: &PipelineParams, folds: usize, seed: u64) -> Result<FoldScores> {
    classify_with_noise(data, params, folds, seed, 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePoint {
    pub rate: f64,
    pub scores: FoldScores,
}

/// Cross-validated accuracy with `rate` of the training labels flipped
/// before constraints are drawn; test labels stay clean.
pub fn noise_sweep(data: &Dataset, rates: &[f64], params: &PipelineParams, folds: usize, seed: u64) -> Result<Vec<NoisePoint>> {
    rates
        .iter()
        .map(|&rate| {
            Ok(NoisePoint {
                rate,
                scores: classify_with_noise(data, params, folds, seed, rate)?,
            })
        })
        .collect()
}

/// Mean precision@k over every training point as a query.
pub fn retrieval_precision(forest: &Forest, labels: &[i64], ks: &[usize], ann: &AnnParams, mode: SearchMode) -> Result<Vec<f64>> {
    if labels.len() != forest.n() {
        return Err(HfdError::LengthMismatch {
            left: labels.len(),
            right: forest.n(),
        });
    }
    let kmax = ks.iter().copied().max().unwrap_or(0);
    if kmax == 0 {
        return Ok(Vec::new());
    }
    let index = AnnIndex::new(forest)?;
    let params = AnnParams { k: kmax, ..*ann };
    let per_query: Vec<Vec<f64>> = (0..forest.n())
        .into_par_iter()
        .map(|q| {
            let nn = search(&index, Query::Training(q), &params, mode)?;
            Ok(ks
                .iter()
                .map(|&k| {
                    let hits = nn.entries.iter().take(k).filter(|e| labels[e.id] == labels[q]).count();
                    hits as f64 / k as f64
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok((0..ks.len())
        .map(|c| per_query.iter().map(|p| p[c]).sum::<f64>() / per_query.len() as f64)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnQualityRow {
    pub k_o: usize,
    pub map: f64,
    /// Approximate query time over brute-force query time (single thread).
    pub time_fraction: f64,
    pub distance_evaluations: u64,
    pub brute_distance_evaluations: u64,
    pub mean_candidates: f64,
}

/// Precision of `approx` against `truth` at each cutoff, averaged.
pub fn average_precision(approx: &[usize], truth: &[usize], cutoffs: &[usize]) -> f64 {
    let ap: f64 = cutoffs
        .iter()
        .map(|&c| {
            let t: std::collections::HashSet<usize> = truth.iter().take(c).copied().collect();
            approx.iter().take(c).filter(|i| t.contains(i)).count() as f64 / c as f64
        })
        .sum();
    ap / cutoffs.len() as f64
}

/// mAP of approximate search against brute force over all training points,
/// for each `k_O`. Timing runs on the calling thread only.
pub fn ann_quality(forest: &Forest, k_o_values: &[usize], eval_ks: &[usize], truncate: bool) -> Result<Vec<AnnQualityRow>> {
    let kmax = eval_ks.iter().copied().max().unwrap_or(1).min(forest.n() - 1);
    let cutoffs: Vec<usize> = eval_ks.iter().map(|&c| c.min(kmax)).collect();
    let index = AnnIndex::new(forest)?;
    let n = forest.n();
    let t0 = Instant::now();
    let truth: Vec<Vec<usize>> = (0..n)
        .map(|q| index.brute_knn(Query::Training(q), kmax).map(|l| l.ids()))
        .collect::<Result<_>>()?;
    let brute_seconds = t0.elapsed().as_secs_f64();
    let brute_evals = index.counters().distance_evaluations;
    let mut rows = Vec::new();
    for &k_o in k_o_values {
        index.reset_counters();
        let params = AnnParams { k_o, k: kmax, truncate };
        let t0 = Instant::now();
        let approx: Vec<Vec<usize>> = (0..n)
            .map(|q| index.approx_knn_upto(Query::Training(q), &params).map(|l| l.ids()))
            .collect::<Result<_>>()?;
        let seconds = t0.elapsed().as_secs_f64();
        let c = index.counters();
        let map = (0..n).map(|q| average_precision(&approx[q], &truth[q], &cutoffs)).sum::<f64>() / n as f64;
        rows.push(AnnQualityRow {
            k_o,
            map,
            time_fraction: seconds / brute_seconds.max(f64::MIN_POSITIVE),
            distance_evaluations: c.distance_evaluations,
            brute_distance_evaluations: brute_evals,
            mean_candidates: c.candidates as f64 / n as f64,
        });
    }
    Ok(rows)
}

/// Sparse symmetric similarity over the k-NN graph, `s = 1 − D`;
/// diagonal implicit.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSimilarity {
    pub n: usize,
    /// Both `(i, j)` and `(j, i)` are stored.
    pub entries: BTreeMap<(usize, usize), f64>,
}

impl SparseSimilarity {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.entries.get(&(i, j)).copied()
    }

    /// MatrixMarket coordinate format, 1-based, general storage.
    pub fn write_matrix_market<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(out, "{} {} {}", self.n, self.n, self.entries.len())?;
        for (&(i, j), v) in &self.entries {
            writeln!(out, "{} {} {}", i + 1, j + 1, v)?;
        }
        Ok(())
    }

    pub fn read_matrix_market<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().enumerate().filter(|(_, l)| !l.as_ref().is_ok_and(|l| l.starts_with('%')));
        let parse_err = |row: usize, message: String| HfdError::Parse { row: row + 1, message };
        let (row, header) = lines.next().ok_or_else(|| parse_err(0, "missing size line".into()))?;
        let header = header.map_err(|e| HfdError::io("<matrix>", e))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| parse_err(row, format!("bad size line {header:?}"))))
            .collect::<Result<_>>()?;
        if dims.len() != 3 {
            return Err(parse_err(row, format!("bad size line {header:?}")));
        }
        let mut entries = BTreeMap::new();
        for (row, line) in lines {
            let line = line.map_err(|e| HfdError::io("<matrix>", e))?;
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || parse_err(row, format!("bad entry {line:?}"));
            if f.len() != 3 {
                return Err(bad());
            }
            let i: usize = f[0].parse().map_err(|_| bad())?;
            let j: usize = f[1].parse().map_err(|_| bad())?;
            let v: f64 = f[2].parse().map_err(|_| bad())?;
            if i == 0 || j == 0 {
                return Err(bad());
            }
            entries.insert((i - 1, j - 1), v);
        }
        Ok(SparseSimilarity { n: dims[0], entries })
    }
}

pub fn export_similarity(forest: &Forest, ann: &AnnParams, mode: SearchMode) -> Result<SparseSimilarity> {
    let index = AnnIndex::new(forest)?;
    let lists: Vec<NeighborList> = (0..forest.n())
        .into_par_iter()
        .map(|q| search(&index, Query::Training(q), ann, mode))
        .collect::<Result<_>>()?;
    let mut entries: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (i, list) in lists.iter().enumerate() {
        for e in &list.entries {
            let s = 1.0 - e.distance;
            for key in [(i, e.id), (e.id, i)] {
                let slot = entries.entry(key).or_insert(s);
                *slot = slot.max(s);
            }
        }
    }
    Ok(SparseSimilarity { n: forest.n(), entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VMeasure {
    pub homogeneity: f64,
    pub completeness: f64,
    pub v_measure: f64,
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

pub fn vmeasure_parts(predicted: &[i64], truth: &[i64]) -> Result<VMeasure> {
    if predicted.len() != truth.len() {
        return Err(HfdError::LengthMismatch {
            left: predicted.len(),
            right: truth.len(),
        });
    }
    let n = truth.len() as f64;
    let mut joint: HashMap<(i64, i64), usize> = HashMap::new();
    let mut by_class: HashMap<i64, usize> = HashMap::new();
    let mut by_cluster: HashMap<i64, usize> = HashMap::new();
    for (&k, &c) in predicted.iter().zip(truth) {
        *joint.entry((c, k)).or_default() += 1;
        *by_class.entry(c).or_default() += 1;
        *by_cluster.entry(k).or_default() += 1;
    }
    let h_c = entropy(by_class.values().copied(), n);
    let h_k = entropy(by_cluster.values().copied(), n);
    // conditional entropies from the contingency table
    let mut h_c_given_k = 0.0;
    let mut h_k_given_c = 0.0;
    for (&(c, k), &a) in &joint {
        let a = a as f64;
        h_c_given_k -= a / n * (a / by_cluster[&k] as f64).ln();
        h_k_given_c -= a / n * (a / by_class[&c] as f64).ln();
    }
    let homogeneity = if h_c == 0.0 { 1.0 } else { 1.0 - h_c_given_k / h_c };
    let completeness = if h_k == 0.0 { 1.0 } else { 1.0 - h_k_given_c / h_k };
    let v_measure = if homogeneity + completeness == 0.0 {
        0.0
    } else {
        2.0 * homogeneity * completeness / (homogeneity + completeness)
    };
    Ok(VMeasure {
        homogeneity,
        completeness,
        v_measure,
    })
}

pub fn vmeasure(predicted: &[i64], truth: &[i64]) -> Result<f64> {
    vmeasure_parts(predicted, truth).map(|v| v.v_measure)
}

/// Machine-readable result of one protocol run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub folds: Vec<f64>,
    pub aggregate: f64,
    /// Protocol-specific rows (curves, sweeps, baselines).
    pub details: serde_json::Value,
    pub params: serde_json::Value,
    pub timing: Timing,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub train_seconds: f64,
    pub query_seconds: f64,
    pub distance_evaluations: u64,
}
