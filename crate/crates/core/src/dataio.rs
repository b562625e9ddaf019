//! Synthetic data generation, stratified splitting, and data file IO.
//!
//! All features live in the unit box `[0,1]^d` so that box-constrained
//! attacks are meaningful on every example. Splits are stratified per class
//! with largest-remainder rounding, which keeps every split within one
//! example per class of its target proportion.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{rng_from, substream};

/// Errors from data generation, splitting, or file IO.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("class {class} has {count} examples; need at least {min} for a stratified split")]
    TooFewPerClass {
        class: usize,
        count: usize,
        min: usize,
    },

    #[error("{path}:{line}: {msg}")]
    Format {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("class {class} never appears in the data")]
    MissingClass { class: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One feature vector in `[0,1]^d` together with its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// An ordered collection of examples sharing a dimension and a label space.
///
/// Construction validates the invariants: consistent dimension, features in
/// the unit box, labels below `num_classes`, and every class present.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<LabeledExample>,
    num_classes: usize,
    dim: usize,
}

impl Dataset {
    pub fn new(examples: Vec<LabeledExample>, num_classes: usize) -> Result<Self, DataError> {
        if examples.is_empty() {
            return Err(DataError::InvalidParameter("dataset has no examples".into()));
        }
        if num_classes < 1 {
            return Err(DataError::InvalidParameter("num_classes must be >= 1".into()));
        }
        let dim = examples[0].features.len();
        if dim == 0 {
            return Err(DataError::InvalidParameter("feature dimension is zero".into()));
        }
        let mut seen = vec![false; num_classes];
        for (i, ex) in examples.iter().enumerate() {
            if ex.features.len() != dim {
                return Err(DataError::InvalidParameter(format!(
                    "example {i} has dimension {}, expected {dim}",
                    ex.features.len()
                )));
            }
            if ex.label >= num_classes {
                return Err(DataError::InvalidParameter(format!(
                    "example {i} has label {} but num_classes is {num_classes}",
                    ex.label
                )));
            }
            for (j, &v) in ex.features.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(DataError::InvalidParameter(format!(
                        "example {i} feature {j} is {v}, outside [0,1]"
                    )));
                }
            }
            seen[ex.label] = true;
        }
        if let Some(class) = seen.iter().position(|s| !s) {
            return Err(DataError::MissingClass { class });
        }
        Ok(Self {
            examples,
            num_classes,
            dim,
        })
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn example(&self, i: usize) -> &LabeledExample {
        &self.examples[i]
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// How the held-out pool is subdivided.
///
/// `Rq12` halves the pool into calibration and test. `Rq3` reserves a
/// quarter each for calibration and evaluation and keeps half for test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Rq12,
    Rq3,
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitMode::Rq12 => write!(f, "rq12"),
            SplitMode::Rq3 => write!(f, "rq3"),
        }
    }
}

/// Disjoint index sets into a [`Dataset`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub cal: Vec<usize>,
    pub eval: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    /// All five sets must be pairwise disjoint.
    pub fn validate_disjoint(&self) -> Result<(), DataError> {
        let mut seen = std::collections::BTreeSet::new();
        for set in [&self.train, &self.val, &self.cal, &self.eval, &self.test] {
            for &i in set {
                if !seen.insert(i) {
                    return Err(DataError::InvalidParameter(format!(
                        "index {i} appears in more than one split"
                    )));
                }
            }
        }
        Ok(())
    }

    /// The calibration/evaluation/test pool as one sorted index list.
    pub fn pool(&self) -> Vec<usize> {
        let mut p: Vec<usize> = self
            .cal
            .iter()
            .chain(self.eval.iter())
            .chain(self.test.iter())
            .copied()
            .collect();
        p.sort_unstable();
        p
    }
}

/// Calibration/evaluation/test indices produced by re-splitting a pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolSplit {
    pub cal: Vec<usize>,
    pub eval: Vec<usize>,
    pub test: Vec<usize>,
}

/// Sample a Gaussian-mixture classification problem in the unit box.
///
/// One mean per class is drawn uniformly from `[0.2, 0.8]^d`, then
/// `per_class` points are sampled around each mean with standard deviation
/// `spread` and clipped coordinate-wise to `[0,1]`. Output is a pure
/// function of the arguments.
pub fn generate_synthetic(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if num_classes < 2 {
        return Err(DataError::InvalidParameter("num_classes must be >= 2".into()));
    }
    if dim < 1 {
        return Err(DataError::InvalidParameter("dim must be >= 1".into()));
    }
    if per_class < 1 {
        return Err(DataError::InvalidParameter("per_class must be >= 1".into()));
    }
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(DataError::InvalidParameter(format!(
            "spread must be a positive real, got {spread}"
        )));
    }

    let mut mean_rng = rng_from(substream(seed, "means", 0));
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            (0..dim)
                .map(|_| 0.2 + 0.6 * mean_rng.random::<f64>())
                .collect()
        })
        .collect();

    let mut noise_rng = rng_from(substream(seed, "noise", 0));
    let mut examples = Vec::with_capacity(num_classes * per_class);
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let features = mean
                .iter()
                .map(|&m| {
                    let z: f64 = noise_rng.sample(StandardNormal);
                    (m + spread * z).clamp(0.0, 1.0)
                })
                .collect();
            examples.push(LabeledExample { features, label });
        }
    }
    Dataset::new(examples, num_classes)
}

/// Largest-remainder allocation of `n` items across the given fractions.
fn allocate(n: usize, fracs: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fracs.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fracs.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Group dataset (or pool) indices by class.
fn indices_by_class(ds: &Dataset, indices: &[usize]) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); ds.num_classes()];
    for &i in indices {
        by_class[ds.example(i).label].push(i);
    }
    by_class
}

/// Shuffle each class's indices and carve them into consecutive blocks
/// according to per-class largest-remainder counts.
fn carve(
    ds: &Dataset,
    indices: &[usize],
    fracs: &[f64],
    seed: u64,
) -> Vec<Vec<usize>> {
    let by_class = indices_by_class(ds, indices);
    let mut out = vec![Vec::new(); fracs.len()];
    for (class, mut members) in by_class.into_iter().enumerate() {
        let mut rng = rng_from(substream(seed, "class", class as u64));
        members.shuffle(&mut rng);
        let counts = allocate(members.len(), fracs);
        let mut offset = 0;
        for (slot, &count) in counts.iter().enumerate() {
            out[slot].extend_from_slice(&members[offset..offset + count]);
            offset += count;
        }
    }
    for set in &mut out {
        set.sort_unstable();
    }
    out
}

/// Split a dataset into train/val plus a calibration/evaluation/test pool.
///
/// The first 60% of each class goes to training (50%) and validation (10%);
/// the remaining 40% forms the pool, subdivided per `mode`. Deterministic
/// given the seed; requires at least two examples per class.
pub fn stratified_split(
    ds: &Dataset,
    mode: SplitMode,
    seed: u64,
) -> Result<SplitIndices, DataError> {
    if ds.is_empty() {
        return Err(DataError::InvalidParameter("dataset is empty".into()));
    }
    let all: Vec<usize> = (0..ds.len()).collect();
    for (class, members) in indices_by_class(ds, &all).iter().enumerate() {
        if members.len() < 2 {
            return Err(DataError::TooFewPerClass {
                class,
                count: members.len(),
                min: 2,
            });
        }
    }
    let stage1 = carve(ds, &all, &[0.5, 0.1, 0.4], substream(seed, "train-val", 0));
    let (train, val, pool) = (stage1[0].clone(), stage1[1].clone(), stage1[2].clone());
    let ps = split_pool(ds, &pool, mode, substream(seed, "resplit", 0));
    Ok(SplitIndices {
        train,
        val,
        cal: ps.cal,
        eval: ps.eval,
        test: ps.test,
    })
}

/// Subdivide a pool of indices into calibration/evaluation/test sets,
/// stratified per class. This is the re-split primitive used when the same
/// trained models are evaluated across many calibration/test partitions.
pub fn split_pool(ds: &Dataset, pool: &[usize], mode: SplitMode, seed: u64) -> PoolSplit {
    let fracs = match mode {
        SplitMode::Rq12 => [0.5, 0.0, 0.5],
        SplitMode::Rq3 => [0.25, 0.25, 0.5],
    };
    let parts = carve(ds, pool, &fracs, seed);
    PoolSplit {
        cal: parts[0].clone(),
        eval: parts[1].clone(),
        test: parts[2].clone(),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write a dataset as CSV: header `label,f0,...,f{d-1}`, one example per
/// row, LF line endings. Floats use the shortest decimal form that parses
/// back to the identical value, so the file round-trips losslessly.
pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    out.push_str("label");
    for j in 0..ds.dim() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for ex in ds.examples() {
        out.push_str(&ex.label.to_string());
        for &v in &ex.features {
            out.push(',');
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Read a dataset written by [`write_dataset`]. The number of classes is
/// the largest label plus one; every class must appear at least once.
pub fn read_dataset(path: &Path) -> Result<Dataset, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let pathstr = path.display().to_string();
    let fmt_err = |line: usize, msg: String| DataError::Format {
        path: pathstr.clone(),
        line,
        msg,
    };

    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| fmt_err(1, "no rows".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"label") || cols.len() < 2 {
        return Err(fmt_err(1, format!("bad header {header:?}")));
    }
    let dim = cols.len() - 1;
    for (j, col) in cols[1..].iter().enumerate() {
        if *col != format!("f{j}") {
            return Err(fmt_err(1, format!("bad header column {col:?}, expected f{j}")));
        }
    }

    let mut examples = Vec::new();
    let mut max_label = 0usize;
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(fmt_err(
                lineno,
                format!("expected {} fields, got {}", dim + 1, fields.len()),
            ));
        }
        let label: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| fmt_err(lineno, format!("unknown label {:?}", fields[0])))?;
        let mut features = Vec::with_capacity(dim);
        for raw in &fields[1..] {
            let v: f64 = raw
                .trim()
                .parse()
                .map_err(|_| fmt_err(lineno, format!("malformed feature {raw:?}")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(fmt_err(lineno, format!("feature {v} outside [0,1]")));
            }
            features.push(v);
        }
        max_label = max_label.max(label);
        examples.push(LabeledExample { features, label });
    }
    if examples.is_empty() {
        return Err(fmt_err(1, "no rows".into()));
    }
    Dataset::new(examples, max_label + 1)
}

/// Write split indices as a JSON object with `train,val,cal,eval,test` arrays.
pub fn write_split(split: &SplitIndices, path: &Path) -> Result<(), DataError> {
    let json = serde_json::to_string_pretty(split).expect("split serialization cannot fail");
    std::fs::write(path, json).map_err(|e| io_err(path, e))
}

/// Read split indices written by [`write_split`]; checks disjointness.
pub fn read_split(path: &Path) -> Result<SplitIndices, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let split: SplitIndices = serde_json::from_str(&text).map_err(|e| DataError::Format {
        path: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    split.validate_disjoint()?;
    Ok(split)
}
