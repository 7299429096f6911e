//! Dataset ingestion, normalization, constraint sampling, label noise and
//! cross-validation folds.
//!
//! Every randomized operation takes an explicit `u64` seed and draws from a
//! ChaCha8 stream, so results are reproducible across platforms.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HfdError, Result};

/// N×d feature matrix with optional integer labels. Point ids are row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    points: Array2<f64>,
    labels: Option<Vec<i64>>,
}

impl Dataset {
    pub fn new(points: Array2<f64>, labels: Option<Vec<i64>>) -> Result<Self> {
        let (n, d) = points.dim();
        if d == 0 {
            return Err(HfdError::InvalidParameter(
                "dataset needs at least one feature".into(),
            ));
        }
        if n < 2 {
            return Err(HfdError::InvalidParameter(format!(
                "dataset needs at least 2 points, got {n}"
            )));
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(HfdError::LengthMismatch {
                    left: n,
                    right: labels.len(),
                });
            }
        }
        // rows are handed out as contiguous slices
        let points = if points.is_standard_layout() {
            points
        } else {
            points.as_standard_layout().into_owned()
        };
        Ok(Dataset { points, labels })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, labels: Option<Vec<i64>>) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(n * d);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != d {
                return Err(HfdError::Parse {
                    row: i + 1,
                    message: format!("expected {d} features, found {}", row.len()),
                });
            }
            flat.extend(row);
        }
        let points = Array2::from_shape_vec((n, d), flat)
            .map_err(|e| HfdError::InvalidParameter(e.to_string()))?;
        Dataset::new(points, labels)
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.points.as_slice().expect("standard layout")[i * d..(i + 1) * d]
    }

    pub fn labels(&self) -> Option<&[i64]> {
        self.labels.as_deref()
    }

    pub fn require_labels(&self) -> Result<&[i64]> {
        self.labels().ok_or(HfdError::UnlabeledData)
    }

    pub fn with_labels(mut self, labels: Option<Vec<i64>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != self.len() {
                return Err(HfdError::LengthMismatch {
                    left: self.len(),
                    right: l.len(),
                });
            }
        }
        self.labels = labels;
        Ok(self)
    }

    /// Rows `ids` in the given order.
    pub fn subset(&self, ids: &[usize]) -> Result<Dataset> {
        let points = self.points.select(Axis(0), ids);
        let labels = self
            .labels
            .as_ref()
            .map(|l| ids.iter().map(|&i| l[i]).collect());
        Dataset::new(points, labels)
    }
}

/// Per-feature affine normalization parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
}

impl NormStats {
    pub fn identity(d: usize) -> Self {
        NormStats {
            mean: vec![0.0; d],
            stddev: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.dim() {
            return Err(HfdError::DimensionMismatch {
                expected: self.dim(),
                got: row.len(),
            });
        }
        Ok(row
            .iter()
            .zip(self.mean.iter().zip(&self.stddev))
            .map(|(x, (m, s))| (x - m) / s)
            .collect())
    }

    pub fn invert_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.dim() {
            return Err(HfdError::DimensionMismatch {
                expected: self.dim(),
                got: row.len(),
            });
        }
        Ok(row
            .iter()
            .zip(self.mean.iter().zip(&self.stddev))
            .map(|(z, (m, s))| z * s + m)
            .collect())
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        if data.dim() != self.dim() {
            return Err(HfdError::DimensionMismatch {
                expected: self.dim(),
                got: data.dim(),
            });
        }
        let mut points = data.points.clone();
        for mut row in points.rows_mut() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = (*x - self.mean[j]) / self.stddev[j];
            }
        }
        Dataset::new(points, data.labels.clone())
    }
}

fn column_stats(col: ArrayView1<f64>) -> (f64, f64) {
    let n = col.len() as f64;
    let mean = col.sum() / n;
    let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    // constant columns map to zero
    let sd = if sd > 0.0 && sd.is_finite() { sd } else { 1.0 };
    (mean, sd)
}

/// Zero mean, unit population variance per column.
pub fn normalize(data: &Dataset) -> (Dataset, NormStats) {
    let (mean, stddev) = data
        .points
        .axis_iter(Axis(1))
        .map(column_stats)
        .unzip();
    let stats = NormStats { mean, stddev };
    let out = stats.apply(data).expect("stats fitted on this dataset");
    (out, stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Libsvm,
}

impl FromStr for DataFormat {
    type Err = HfdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(DataFormat::Csv),
            "libsvm" | "svmlight" => Ok(DataFormat::Libsvm),
            other => Err(HfdError::InvalidParameter(format!(
                "unknown data format {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvOptions {
    /// The last column holds an integer class label.
    #[serde(default)]
    pub label_column: bool,
    /// Skip the first line.
    #[serde(default)]
    pub header: bool,
}

pub fn load_dataset(path: &Path, format: DataFormat, opts: CsvOptions) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| HfdError::io(path, e))?;
    match format {
        DataFormat::Csv => parse_csv(file, opts),
        DataFormat::Libsvm => parse_libsvm(BufReader::new(file)),
    }
}

fn parse_label(field: &str, row: usize) -> Result<i64> {
    let field = field.trim();
    let field = field.strip_prefix('+').unwrap_or(field);
    if let Ok(v) = field.parse::<i64>() {
        return Ok(v);
    }
    match field.parse::<f64>() {
        Ok(v) if v.fract() == 0.0 && v.is_finite() => Ok(v as i64),
        _ => Err(HfdError::Parse {
            row,
            message: format!("label {field:?} is not an integer"),
        }),
    }
}

fn parse_value(field: &str, row: usize) -> Result<f64> {
    let field = field.trim();
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(HfdError::Parse {
            row,
            message: format!("non-numeric field {field:?}"),
        }),
    }
}

pub fn parse_csv<R: Read>(reader: R, opts: CsvOptions) -> Result<Dataset> {
    let (rows, labels) = parse_csv_rows(reader, opts)?;
    if rows.len() < 2 {
        return Err(HfdError::Parse {
            row: 1,
            message: "need at least 2 data rows".into(),
        });
    }
    Dataset::from_rows(rows, labels)
}

/// Rows of equal width without the dataset size checks; for query files.
pub fn parse_csv_rows<R: Read>(reader: R, opts: CsvOptions) -> Result<(Vec<Vec<f64>>, Option<Vec<i64>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(opts.header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for record in rdr.records() {
        let record = record.map_err(|e| HfdError::Parse {
            row: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let row = record.position().map_or(rows.len() + 1, |p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(HfdError::Parse {
                row,
                message: format!("expected {expected} fields, found {}", record.len()),
            });
        }
        let n_features = if opts.label_column {
            expected.checked_sub(1).filter(|&d| d > 0).ok_or(HfdError::Parse {
                row,
                message: "label column requested but row has no feature columns".into(),
            })?
        } else {
            expected
        };
        let mut values = Vec::with_capacity(n_features);
        for field in record.iter().take(n_features) {
            values.push(parse_value(field, row)?);
        }
        if opts.label_column {
            labels.push(parse_label(&record[n_features], row)?);
        }
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(HfdError::Parse {
            row: 0,
            message: "no data rows".into(),
        });
    }
    Ok((rows, opts.label_column.then_some(labels)))
}

/// Sparse `label idx:value ...` lines with 1-based feature indices.
pub fn parse_libsvm<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut sparse: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut labels = Vec::new();
    let mut d = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let row = lineno + 1;
        let line = line.map_err(|e| HfdError::Parse {
            row,
            message: e.to_string(),
        })?;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let label = parse_label(tokens.next().expect("non-empty line"), row)?;
        let mut entries = Vec::new();
        for tok in tokens {
            let (idx, val) = tok.split_once(':').ok_or_else(|| HfdError::Parse {
                row,
                message: format!("malformed entry {tok:?}"),
            })?;
            let idx: usize = idx.parse().ok().filter(|&i| i >= 1).ok_or_else(|| {
                HfdError::Parse {
                    row,
                    message: format!("bad feature index {idx:?}"),
                }
            })?;
            d = d.max(idx);
            entries.push((idx - 1, parse_value(val, row)?));
        }
        labels.push(label);
        sparse.push(entries);
    }
    if sparse.len() < 2 || d == 0 {
        return Err(HfdError::Parse {
            row: sparse.len(),
            message: "need at least 2 rows and 1 feature".into(),
        });
    }
    let mut points = Array2::zeros((sparse.len(), d));
    for (i, entries) in sparse.iter().enumerate() {
        for &(j, v) in entries {
            points[[i, j]] = v;
        }
    }
    Dataset::new(points, Some(labels))
}

pub fn write_csv<W: Write>(data: &Dataset, mut out: W) -> std::io::Result<()> {
    for i in 0..data.len() {
        let mut line = data
            .row(i)
            .iter()
            .map(f64::to_string)
            .collect::<Vec<_>>()
            .join(",");
        if let Some(labels) = data.labels() {
            line.push(',');
            line.push_str(&labels[i].to_string());
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConstraintKind {
    MustLink,
    CannotLink,
}

impl fmt::Display for ConstraintKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConstraintKind::MustLink => "ML",
            ConstraintKind::CannotLink => "CL",
        })
    }
}

/// Must-link and cannot-link pairs, stored with `i < j`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub must_link: Vec<(usize, usize)>,
    pub cannot_link: Vec<(usize, usize)>,
}

fn canonical(i: usize, j: usize) -> (usize, usize) {
    if i < j {
        (i, j)
    } else {
        (j, i)
    }
}

impl ConstraintSet {
    /// Canonicalizes and validates the pairs against a dataset of `n` points.
    pub fn new(
        must_link: Vec<(usize, usize)>,
        cannot_link: Vec<(usize, usize)>,
        n: usize,
    ) -> Result<Self> {
        let check = |&(i, j): &(usize, usize)| -> Result<(usize, usize)> {
            if i == j || i >= n || j >= n {
                return Err(HfdError::InvalidParameter(format!(
                    "invalid constraint pair ({i}, {j}) for {n} points"
                )));
            }
            Ok(canonical(i, j))
        };
        let must_link: Vec<_> = must_link.iter().map(check).collect::<Result<_>>()?;
        let cannot_link: Vec<_> = cannot_link.iter().map(check).collect::<Result<_>>()?;
        let ml: HashSet<_> = must_link.iter().collect();
        if let Some(p) = cannot_link.iter().find(|p| ml.contains(p)) {
            return Err(HfdError::InvalidParameter(format!(
                "pair {p:?} is both must-link and cannot-link"
            )));
        }
        Ok(ConstraintSet {
            must_link,
            cannot_link,
        })
    }

    pub fn len(&self) -> usize {
        self.must_link.len() + self.cannot_link.len()
    }

    pub fn is_empty(&self) -> bool {
        self.must_link.is_empty() && self.cannot_link.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), ConstraintKind)> + '_ {
        self.must_link
            .iter()
            .map(|&p| (p, ConstraintKind::MustLink))
            .chain(self.cannot_link.iter().map(|&p| (p, ConstraintKind::CannotLink)))
    }

    /// Lines of `i,j,ML` / `i,j,CL`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for ((i, j), kind) in self.iter() {
            writeln!(out, "{i},{j},{kind}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(reader: R, n: usize) -> Result<Self> {
        let mut ml = Vec::new();
        let mut cl = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let row = lineno + 1;
            let line = line.map_err(|e| HfdError::Parse {
                row,
                message: e.to_string(),
            })?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || HfdError::Parse {
                row,
                message: format!("expected `i,j,ML|CL`, found {line:?}"),
            };
            if fields.len() != 3 {
                return Err(bad());
            }
            let i = fields[0].parse().map_err(|_| bad())?;
            let j = fields[1].parse().map_err(|_| bad())?;
            match fields[2] {
                "ML" => ml.push((i, j)),
                "CL" => cl.push((i, j)),
                _ => return Err(bad()),
            }
        }
        ConstraintSet::new(ml, cl, n)
    }
}

fn same_label_pairs(labels: &[i64]) -> u64 {
    let mut sorted = labels.to_vec();
    sorted.sort_unstable();
    sorted
        .chunk_by(|a, b| a == b)
        .map(|g| {
            let c = g.len() as u64;
            c * (c - 1) / 2
        })
        .sum()
}

fn draw_pairs(
    labels: &[i64],
    count: usize,
    same: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let n = labels.len();
    let valid = |i: usize, j: usize| (labels[i] == labels[j]) == same;
    let mut chosen: BTreeSet<(usize, usize)> = BTreeSet::new();
    let max_attempts = 50 * count;
    let mut attempts = 0;
    while chosen.len() < count && attempts < max_attempts {
        attempts += 1;
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        if valid(i, j) {
            chosen.insert(canonical(i, j));
        }
    }
    if chosen.len() < count {
        // rejection stalled near exhaustion: draw the rest from the explicit remainder
        let mut rest: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| valid(i, j) && !chosen.contains(&(i, j)))
            .collect();
        let need = count - chosen.len();
        let (picked, _) = rest.partial_shuffle(rng, need);
        chosen.extend(picked.iter().copied());
    }
    chosen.into_iter().collect()
}

/// Number of distinct `(must-link, cannot-link)` pairs the labels admit.
pub fn available_pairs(labels: &[i64]) -> (u64, u64) {
    let n = labels.len() as u64;
    let ml = same_label_pairs(labels);
    (ml, n * n.saturating_sub(1) / 2 - ml)
}

/// Uniformly samples distinct must-link (same label) and cannot-link
/// (different label) pairs without replacement.
pub fn sample_constraints(
    labels: &[i64],
    count_ml: usize,
    count_cl: usize,
    seed: u64,
) -> Result<ConstraintSet> {
    let n = labels.len() as u64;
    if n < 2 && count_ml + count_cl > 0 {
        return Err(HfdError::InfeasibleRequest("fewer than 2 points".into()));
    }
    let (ml_avail, cl_avail) = available_pairs(labels);
    if count_ml as u64 > ml_avail {
        return Err(HfdError::InfeasibleRequest(format!(
            "requested {count_ml} must-link pairs but only {ml_avail} exist"
        )));
    }
    if count_cl as u64 > cl_avail {
        return Err(HfdError::InfeasibleRequest(format!(
            "requested {count_cl} cannot-link pairs but only {cl_avail} exist"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let must_link = draw_pairs(labels, count_ml, true, &mut rng);
    let cannot_link = draw_pairs(labels, count_cl, false, &mut rng);
    Ok(ConstraintSet {
        must_link,
        cannot_link,
    })
}

/// Reassigns exactly `round(rate * N)` labels to a uniformly chosen different class.
pub fn flip_labels(labels: &[i64], rate: f64, seed: u64) -> Result<Vec<i64>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(HfdError::InvalidParameter(format!(
            "flip rate {rate} outside [0, 1]"
        )));
    }
    let classes: Vec<i64> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(HfdError::InvalidParameter(
            "label flipping needs at least 2 classes".into(),
        ));
    }
    let n = labels.len();
    let count = ((rate * n as f64).round() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = labels.to_vec();
    for i in index::sample(&mut rng, n, count) {
        let current = classes.binary_search(&labels[i]).expect("label is a class");
        let mut pick = rng.random_range(0..classes.len() - 1);
        if pick >= current {
            pick += 1;
        }
        out[i] = classes[pick];
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffled k-fold partition of `0..n`; fold sizes differ by at most one.
pub fn split_folds(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 || k > n {
        return Err(HfdError::BadFoldCount { k, n });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut test = perm[start..start + size].to_vec();
        test.sort_unstable();
        let mut train: Vec<usize> = perm[..start]
            .iter()
            .chain(&perm[start + size..])
            .copied()
            .collect();
        train.sort_unstable();
        folds.push(Fold { train, test });
        start += size;
    }
    Ok(folds)
}
