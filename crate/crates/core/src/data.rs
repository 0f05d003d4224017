//! Tabular datasets: CSV ingestion, standardization, splits and synthetic tasks.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{seeded_rng, standard_normal, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    BinaryClass,
    MultiClass(usize),
}

impl Task {
    pub fn num_classes(&self) -> Option<usize> {
        match self {
            Task::Regression => None,
            Task::BinaryClass => Some(2),
            Task::MultiClass(k) => Some(*k),
        }
    }

    /// Network output width the task calls for.
    pub fn output_dim(&self) -> usize {
        match self {
            Task::Regression | Task::BinaryClass => 1,
            Task::MultiClass(k) => *k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Targets {
    Regression(Vec<f64>),
    Classes(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(y) => y.len(),
            Targets::Classes(y) => y.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Regression(y) => Targets::Regression(idx.iter().map(|&i| y[i]).collect()),
            Targets::Classes(y) => Targets::Classes(idx.iter().map(|&i| y[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    /// Population standard deviation.
    pub sd: f64,
    /// Constant columns are passed through unscaled.
    pub constant: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetStats {
    pub median: f64,
    /// `(Q3 − Q1) / 2`.
    pub quartile_deviation: f64,
    pub constant: bool,
}

/// Fitted statistics; quantiles interpolate linearly between order statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub features: Vec<ColumnStats>,
    pub target: Option<TargetStats>,
    pub quantile_rule: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub targets: Targets,
    pub task: Task,
    pub feature_names: Vec<String>,
    pub standardization: Option<Standardization>,
}

/// Which CSV column holds the target and how to read it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub target: String,
    pub task: Task,
}

impl Dataset {
    pub fn new(features: Matrix, targets: Targets, task: Task) -> Result<Self> {
        if features.rows() != targets.len() {
            return Err(Error::dim("Dataset", features.rows(), targets.len()));
        }
        let names = (0..features.cols()).map(|j| format!("x{j}")).collect();
        let ds = Dataset {
            features,
            targets,
            task,
            feature_names: names,
            standardization: None,
        };
        ds.check_targets()?;
        Ok(ds)
    }

    fn check_targets(&self) -> Result<()> {
        match (&self.targets, self.task.num_classes()) {
            (Targets::Regression(_), None) => Ok(()),
            (Targets::Classes(y), Some(k)) => match y.iter().position(|&c| c >= k) {
                Some(row) => Err(Error::Parse {
                    row,
                    column: "target".into(),
                    message: format!("class {} out of range for {k} classes", y[row]),
                }),
                None => Ok(()),
            },
            _ => Err(Error::Config("targets do not match the task".into())),
        }
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.features.row(i));
        }
        Dataset {
            features: Matrix::from_vec(idx.len(), d, data).expect("row sizes agree"),
            targets: self.targets.select(idx),
            task: self.task,
            feature_names: self.feature_names.clone(),
            standardization: self.standardization.clone(),
        }
    }
}

/// Reads a headered numeric CSV; every column except `schema.target` is a feature.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let target_col = headers
        .iter()
        .position(|h| *h == schema.target)
        .ok_or_else(|| Error::Config(format!("target column {:?} not found", schema.target)))?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != target_col)
        .map(|(_, h)| h.clone())
        .collect();

    let mut data = Vec::new();
    let mut reg = Vec::new();
    let mut classes = Vec::new();
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        // 1-based data row, counting the header as row 1.
        let row = r + 2;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row,
                column: "*".into(),
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            let value: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: headers[j].clone(),
                message: if cell.is_empty() {
                    "empty cell".into()
                } else {
                    format!("not a number: {cell:?}")
                },
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: headers[j].clone(),
                    message: format!("non-finite value {cell:?}"),
                });
            }
            if j != target_col {
                data.push(value);
            } else if schema.task == Task::Regression {
                reg.push(value);
            } else {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(Error::Parse {
                        row,
                        column: headers[j].clone(),
                        message: format!("class label must be a non-negative integer, got {cell}"),
                    });
                }
                classes.push(value as usize);
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    let features = Matrix::from_vec(rows, feature_names.len(), data)?;
    let targets = if schema.task == Task::Regression {
        Targets::Regression(reg)
    } else {
        Targets::Classes(classes)
    };
    let mut ds = Dataset::new(features, targets, schema.task)?;
    ds.feature_names = feature_names;
    Ok(ds)
}

/// Writes features followed by a `target` column.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = ds.feature_names.clone();
    header.push("target".into());
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.features.row(i).iter().map(|x| x.to_string()).collect();
        rec.push(match &ds.targets {
            Targets::Regression(y) => y[i].to_string(),
            Targets::Classes(y) => y[i].to_string(),
        });
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Quantile of sorted data by linear interpolation at position `q (n − 1)`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

const CONSTANT_TOL: f64 = 1e-12;

/// Fits feature means and standard deviations (and target median and
/// quartile deviation for regression) on the rows in `fit_on`.
pub fn fit_standardization(ds: &Dataset, fit_on: &[usize]) -> Result<Standardization> {
    if fit_on.is_empty() {
        return Err(Error::EmptyDataset("standardization fit set".into()));
    }
    let n = fit_on.len() as f64;
    let features = (0..ds.dim())
        .map(|j| {
            let mean = fit_on.iter().map(|&i| ds.features[(i, j)]).sum::<f64>() / n;
            let var = fit_on
                .iter()
                .map(|&i| (ds.features[(i, j)] - mean).powi(2))
                .sum::<f64>()
                / n;
            let sd = var.sqrt();
            let constant = sd <= CONSTANT_TOL * mean.abs().max(1.0);
            ColumnStats { mean, sd, constant }
        })
        .collect();
    let target = match &ds.targets {
        Targets::Regression(y) => {
            let mut v: Vec<f64> = fit_on.iter().map(|&i| y[i]).collect();
            v.sort_by(f64::total_cmp);
            let median = quantile(&v, 0.5);
            let qd = (quantile(&v, 0.75) - quantile(&v, 0.25)) / 2.0;
            Some(TargetStats {
                median,
                quartile_deviation: qd,
                constant: qd <= CONSTANT_TOL * median.abs().max(1.0),
            })
        }
        Targets::Classes(_) => None,
    };
    Ok(Standardization {
        features,
        target,
        quantile_rule: "linear".into(),
    })
}

impl Standardization {
    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if self.features.len() != ds.dim() {
            return Err(Error::dim(
                "Standardization::apply",
                self.features.len(),
                ds.dim(),
            ));
        }
        let mut out = ds.clone();
        for r in 0..out.len() {
            for (x, s) in out.features.row_mut(r).iter_mut().zip(&self.features) {
                if !s.constant {
                    *x = (*x - s.mean) / s.sd;
                }
            }
        }
        if let (Targets::Regression(y), Some(t)) = (&mut out.targets, &self.target) {
            if !t.constant {
                for v in y.iter_mut() {
                    *v = (*v - t.median) / t.quartile_deviation;
                }
            }
        }
        out.standardization = Some(self.clone());
        Ok(out)
    }

    /// Maps standardized regression targets back to raw units.
    pub fn inverse_targets(&self, y: &[f64]) -> Vec<f64> {
        match &self.target {
            Some(t) if !t.constant => y
                .iter()
                .map(|v| v * t.quartile_deviation + t.median)
                .collect(),
            _ => y.to_vec(),
        }
    }

    pub fn inverse_features(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (v, s) in out.row_mut(r).iter_mut().zip(&self.features) {
                if !s.constant {
                    *v = *v * s.sd + s.mean;
                }
            }
        }
        out
    }
}

/// Fits on `fit_on` and applies to the whole dataset.
pub fn standardize(ds: &Dataset, fit_on: &[usize]) -> Result<Dataset> {
    fit_standardization(ds, fit_on)?.apply(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_n: usize,
    #[serde(default = "default_val_frac")]
    pub val_frac_of_rest: f64,
    pub seed: u64,
}

fn default_val_frac() -> f64 {
    0.5
}

/// Row indices of a seeded train / validation / test partition.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if spec.train_n > n {
        return Err(Error::Config(format!(
            "train_n {} exceeds dataset size {n}",
            spec.train_n
        )));
    }
    if !(spec.val_frac_of_rest > 0.0 && spec.val_frac_of_rest < 1.0) {
        return Err(Error::Config("val_frac_of_rest must lie in (0, 1)".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded_rng(spec.seed));
    let rest = n - spec.train_n;
    let n_val = (rest as f64 * spec.val_frac_of_rest).round() as usize;
    let test = idx.split_off(spec.train_n + n_val);
    let val = idx.split_off(spec.train_n);
    Ok((idx, val, test))
}

pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let (a, b, c) = split_indices(ds.len(), spec)?;
    Ok((ds.subset(&a), ds.subset(&b), ds.subset(&c)))
}

/// Splits, then standardizes all three parts with statistics fit on the
/// training rows only.
pub fn split_standardized(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let (a, b, c) = split_indices(ds.len(), spec)?;
    let stats = fit_standardization(ds, &a)?;
    let full = stats.apply(ds)?;
    Ok((full.subset(&a), full.subset(&b), full.subset(&c)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SynthKind {
    /// Two Gaussian lobes mirrored across a hyperplane with a unit margin;
    /// `noise` is the label-flip probability.
    TwoGaussians,
    /// Binary labels from the XOR of the first two coordinates' signs and
    /// whether the point lies outside a ring; `noise` flips labels.
    XorRings,
    /// Regression targets from a planted ReLU network with `k_active`-hot
    /// first-layer rows; `noise` is the target noise standard deviation.
    SparseTeacher { k_active: usize },
}

/// Hidden width of the planted network of [`SynthKind::SparseTeacher`].
pub const TEACHER_WIDTH: usize = 8;

/// Planted teacher: `k_active`-hot rows with entries ±1 and an output vector
/// of ±1 entries.
pub fn sparse_teacher(d: usize, k_active: usize, rng: &mut Rng) -> Result<(Matrix, Vec<f64>)> {
    if k_active == 0 || k_active > d {
        return Err(Error::Config(format!("k_active must lie in 1..={d}")));
    }
    let mut w = Matrix::zeros(TEACHER_WIDTH, d);
    let mut cols: Vec<usize> = (0..d).collect();
    for r in 0..TEACHER_WIDTH {
        cols.shuffle(rng);
        for &c in &cols[..k_active] {
            w[(r, c)] = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        }
    }
    let out = (0..TEACHER_WIDTH)
        .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    Ok((w, out))
}

pub fn synth_task(kind: SynthKind, n: usize, d: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || d == 0 {
        return Err(Error::Config(
            "synthetic tasks need n >= 1 and d >= 1".into(),
        ));
    }
    if noise < 0.0 || !noise.is_finite() {
        return Err(Error::Config("noise must be a non-negative number".into()));
    }
    let mut rng = seeded_rng(seed);
    let mut x = Matrix::zeros(n, d);
    for v in x.data_mut() {
        *v = standard_normal(&mut rng);
    }
    let flip = |label: usize, rng: &mut Rng| {
        if noise > 0.0 && rng.random_bool(noise.min(1.0)) {
            1 - label
        } else {
            label
        }
    };
    match kind {
        SynthKind::TwoGaussians => {
            let mut dir: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
            let norm = crate::linalg::l2_norm(&dir);
            dir.iter_mut().for_each(|v| *v /= norm);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let label = usize::from(rng.random_bool(0.5));
                let row = x.row_mut(i);
                let along = crate::linalg::dot(row, &dir);
                let sign = if label == 1 { 1.0 } else { -1.0 };
                let target = sign * (along.abs() + 1.0);
                for (v, u) in row.iter_mut().zip(&dir) {
                    *v += (target - along) * u;
                }
                labels.push(flip(label, &mut rng));
            }
            Dataset::new(x, Targets::Classes(labels), Task::BinaryClass)
        }
        SynthKind::XorRings => {
            if d < 2 {
                return Err(Error::Config("XorRings needs d >= 2".into()));
            }
            let radius = (2.0 * std::f64::consts::LN_2).sqrt();
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let row = x.row(i);
                let xor = (row[0] > 0.0) != (row[1] > 0.0);
                let outside = row[0].hypot(row[1]) > radius;
                let label = usize::from(xor != outside);
                labels.push(flip(label, &mut rng));
            }
            Dataset::new(x, Targets::Classes(labels), Task::BinaryClass)
        }
        SynthKind::SparseTeacher { k_active } => {
            let (w, out) = sparse_teacher(d, k_active, &mut rng)?;
            let mut y = Vec::with_capacity(n);
            for i in 0..n {
                let h = w.matvec(x.row(i))?;
                let clean: f64 = h.iter().zip(&out).map(|(a, b)| a.max(0.0) * b).sum();
                y.push(clean + noise * standard_normal(&mut rng));
            }
            Dataset::new(x, Targets::Regression(y), Task::Regression)
        }
    }
}

/// JSON sidecar describing a prepared dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub task: Task,
    pub n: usize,
    pub d: usize,
    pub feature_names: Vec<String>,
    pub schema: Option<Schema>,
    pub split: Option<SplitSpec>,
    pub standardization: Option<Standardization>,
}

impl DatasetMeta {
    pub fn describe(ds: &Dataset, schema: Option<Schema>, split: Option<SplitSpec>) -> Self {
        DatasetMeta {
            task: ds.task,
            n: ds.len(),
            d: ds.dim(),
            feature_names: ds.feature_names.clone(),
            schema,
            split,
            standardization: ds.standardization.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}
