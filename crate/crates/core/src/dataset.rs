//! Labeled datasets: loading, PCA preprocessing, and few-shot splits.
//!
//! Each domain lives in its own feature space. A [`LabeledDataset`] stores the
//! instance matrix with one row per instance, and labels as dense indices into
//! an ordered class list.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CdmError, Result};
use crate::numerics::sym_eig;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    classes: Vec<String>,
    domain_tag: String,
}

/// Orders class names numerically when every name parses as a number, and
/// lexicographically otherwise.
pub fn sort_class_names(names: &mut Vec<String>) {
    let numeric: Option<Vec<f64>> = names.iter().map(|n| n.trim().parse::<f64>().ok()).collect();
    match numeric {
        Some(_) => names.sort_by(|a, b| {
            let x: f64 = a.trim().parse().unwrap();
            let y: f64 = b.trim().parse().unwrap();
            x.total_cmp(&y).then_with(|| a.cmp(b))
        }),
        None => names.sort(),
    }
    names.dedup();
}

impl LabeledDataset {
    /// Builds a dataset from dense label indices into `classes`.
    ///
    /// An empty instance set is allowed here (split partitions can be empty);
    /// the file loaders reject empty inputs.
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        classes: Vec<String>,
        domain_tag: impl Into<String>,
    ) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(CdmError::DimensionMismatch {
                context: "dataset labels",
                expected: features.nrows(),
                found: labels.len(),
            });
        }
        if features.ncols() == 0 {
            return Err(CdmError::InvalidArgument(
                "dataset needs at least one feature".into(),
            ));
        }
        let mut seen = classes.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != classes.len() {
            return Err(CdmError::InvalidArgument(
                "class list contains duplicates".into(),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes.len()) {
            return Err(CdmError::InvalidArgument(format!(
                "label index {bad} outside class list of size {}",
                classes.len()
            )));
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(CdmError::NonFinite("dataset features"));
        }
        Ok(Self {
            features,
            labels,
            classes,
            domain_tag: domain_tag.into(),
        })
    }

    /// Builds a dataset from per-instance class names; the class list is the
    /// sorted set of distinct names.
    pub fn from_names(
        features: Array2<f64>,
        names: &[String],
        domain_tag: impl Into<String>,
    ) -> Result<Self> {
        let mut classes = names.to_vec();
        sort_class_names(&mut classes);
        let labels = names
            .iter()
            .map(|n| classes.iter().position(|c| c == n).unwrap())
            .collect();
        Self::new(features, labels, classes, domain_tag)
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn domain_tag(&self) -> &str {
        &self.domain_tag
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Row indices belonging to class `class`, in original order.
    pub fn rows_of_class(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == class).then_some(i))
            .collect()
    }

    /// Selects rows, keeping the full class list.
    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            features: self.features.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            classes: self.classes.clone(),
            domain_tag: self.domain_tag.clone(),
        }
    }

    /// Same labels with a replacement feature matrix.
    pub fn with_features(&self, features: Array2<f64>) -> Result<Self> {
        Self::new(
            features,
            self.labels.clone(),
            self.classes.clone(),
            self.domain_tag.clone(),
        )
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.domain_tag = tag.into();
        self
    }

    /// Class name of each instance.
    pub fn label_names(&self) -> Vec<String> {
        self.labels.iter().map(|&l| self.classes[l].clone()).collect()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CdmError + '_ {
    move |source| CdmError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_cell(raw: &str) -> Option<f64> {
    raw.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Reads a dense CSV file with a header row. Every column except
/// `label_column` must be numeric.
pub fn load_dense_csv(path: impl AsRef<Path>, label_column: &str) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .clone();
    if headers.is_empty() {
        return Err(CdmError::EmptyFile(path.to_path_buf()));
    }
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| CdmError::UnknownLabelColumn(label_column.to_string()))?;
    let width = headers.len() - 1;

    let mut values = Vec::new();
    let mut names = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        // Header is line 1.
        let line = i + 2;
        if record.len() != headers.len() {
            return Err(CdmError::Parse {
                path: path.to_path_buf(),
                row: line,
                column: "*".into(),
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            if j == label_idx {
                names.push(cell.trim().to_string());
                continue;
            }
            let v = parse_cell(cell).ok_or_else(|| CdmError::Parse {
                path: path.to_path_buf(),
                row: line,
                column: headers[j].to_string(),
                message: format!("`{cell}` is not a finite number"),
            })?;
            values.push(v);
        }
    }
    if names.is_empty() {
        return Err(CdmError::EmptyFile(path.to_path_buf()));
    }
    if width == 0 {
        return Err(CdmError::InvalidArgument(format!(
            "{} has no feature columns",
            path.display()
        )));
    }
    let features = Array2::from_shape_vec((names.len(), width), values)
        .expect("row widths checked above");
    LabeledDataset::from_names(features, &names, tag_from_path(path))
}

fn csv_error(path: &Path, e: csv::Error) -> CdmError {
    let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => CdmError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => CdmError::Parse {
            path: path.to_path_buf(),
            row,
            column: "*".into(),
            message: format!("{other:?}"),
        },
    }
}

fn tag_from_path(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Writes a dense CSV readable by [`load_dense_csv`]. Features are named
/// `x1..xm` and the label column comes last.
pub fn write_dense_csv(
    path: impl AsRef<Path>,
    data: &LabeledDataset,
    label_column: &str,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let mut header: Vec<String> = (1..=data.dim()).map(|j| format!("x{j}")).collect();
    header.push(label_column.to_string());
    writeln!(out, "{}", header.join(",")).map_err(io_err(path))?;
    for (row, &label) in data.features.rows().into_iter().zip(&data.labels) {
        let mut line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        line.push(data.classes[label].clone());
        writeln!(out, "{}", line.join(",")).map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

/// Reads a sparse `label idx:val ...` file with 1-based, strictly increasing
/// indices, materializing it densely with `dim` columns.
pub fn load_sparse_libsvm(path: impl AsRef<Path>, dim: usize) -> Result<LabeledDataset> {
    let path = path.as_ref();
    if dim == 0 {
        return Err(CdmError::InvalidArgument(
            "sparse dimension must be positive".into(),
        ));
    }
    let file = File::open(path).map_err(io_err(path))?;
    let reader = BufReader::new(file);
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut names = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let (row, name) = match parse_libsvm_line(&line, i + 1, dim)? {
            Some(parsed) => parsed,
            None => continue,
        };
        rows.push(row);
        names.push(name);
    }
    if rows.is_empty() {
        return Err(CdmError::EmptyFile(path.to_path_buf()));
    }
    let mut features = Array2::zeros((rows.len(), dim));
    for (r, entries) in rows.iter().enumerate() {
        for &(idx, v) in entries {
            features[[r, idx - 1]] = v;
        }
    }
    LabeledDataset::from_names(features, &names, tag_from_path(path))
}

/// Nonzero `(column, value)` entries of one sparse line, and its label.
type SparseLine = (Vec<(usize, f64)>, String);

/// Parses one sparse line. Blank lines and `#` comments yield `None`.
fn parse_libsvm_line(line: &str, line_no: usize, dim: usize) -> Result<Option<SparseLine>> {
    let content = line.split('#').next().unwrap_or("").trim();
    if content.is_empty() {
        return Ok(None);
    }
    let mut tokens = content.split_whitespace();
    let label = tokens.next().unwrap().to_string();
    let mut entries = Vec::new();
    let mut last = 0usize;
    for token in tokens {
        let malformed = || CdmError::MalformedToken {
            line: line_no,
            token: token.to_string(),
        };
        let (idx, val) = token.split_once(':').ok_or_else(malformed)?;
        let idx: usize = idx.parse().map_err(|_| malformed())?;
        let val = parse_cell(val).ok_or_else(malformed)?;
        if idx == 0 || idx > dim {
            return Err(CdmError::IndexOutOfRange {
                line: line_no,
                index: idx,
                dim,
            });
        }
        if idx <= last {
            return Err(CdmError::DecreasingIndex {
                line: line_no,
                index: idx,
            });
        }
        last = idx;
        entries.push((idx, val));
    }
    Ok(Some((entries, label)))
}

/// Writes the sparse format, omitting entries that are exactly `+0.0`.
pub fn write_sparse_libsvm(path: impl AsRef<Path>, data: &LabeledDataset) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for (row, &label) in data.features.rows().into_iter().zip(&data.labels) {
        write!(out, "{}", data.classes[label]).map_err(io_err(path))?;
        for (j, v) in row.iter().enumerate() {
            if v.to_bits() != 0 {
                write!(out, " {}:{}", j + 1, v).map_err(io_err(path))?;
            }
        }
        writeln!(out).map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

/// Principal component projection retaining a fraction of total variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Array1<f64>,
    /// `m×k`, orthonormal columns in order of decreasing variance.
    pub basis: Array2<f64>,
    /// Variance fraction actually retained by the `k` components.
    pub energy_kept: f64,
    /// Sample variance along each retained component.
    pub variances: Vec<f64>,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.basis.ncols()
    }
}

/// Fits PCA with the `1/(N−1)` covariance and keeps the smallest number of
/// leading components whose variance reaches `energy` of the total.
///
/// When there are fewer instances than features the eigenproblem is solved on
/// the `N×N` Gram matrix instead of the `m×m` covariance.
pub fn pca_fit(data: &LabeledDataset, energy: f64) -> Result<PcaModel> {
    if !(energy > 0.0 && energy <= 1.0) {
        return Err(CdmError::InvalidArgument(format!(
            "PCA energy must lie in (0, 1], got {energy}"
        )));
    }
    let n = data.len();
    if n < 2 {
        return Err(CdmError::InvalidArgument(
            "PCA needs at least two instances".into(),
        ));
    }
    let x = data.features();
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let centered = x - &mean;
    let denom = (n - 1) as f64;

    let use_gram = n < data.dim();
    let eig = if use_gram {
        sym_eig(centered.dot(&centered.t()).mapv(|v| v / denom).view())?
    } else {
        sym_eig(centered.t().dot(&centered).mapv(|v| v / denom).view())?
    };

    let top = eig.values.first().copied().unwrap_or(0.0).max(0.0);
    if top <= 0.0 {
        return Err(CdmError::ZeroVariance);
    }
    // Round-off eigenvalues are treated as exact zeros so that full energy
    // selects exactly the covariance rank.
    let variances: Vec<f64> = eig
        .values
        .iter()
        .map(|&v| if v > 1e-12 * top { v } else { 0.0 })
        .collect();
    let total: f64 = variances.iter().sum();
    let mut cumulative = 0.0;
    let mut k = 0;
    for &v in &variances {
        cumulative += v;
        k += 1;
        if cumulative >= energy * total {
            break;
        }
    }

    let basis = if use_gram {
        let mut basis = Array2::zeros((data.dim(), k));
        for (c, &var) in variances.iter().enumerate().take(k) {
            let u = eig.vectors.column(c);
            let v = centered.t().dot(&u) / (denom * var).sqrt();
            basis.column_mut(c).assign(&v);
        }
        crate::numerics::canonical_signs(&mut basis);
        basis
    } else {
        eig.vectors.slice(ndarray::s![.., ..k]).to_owned()
    };

    Ok(PcaModel {
        mean,
        basis,
        energy_kept: cumulative / total,
        variances: variances[..k].to_vec(),
    })
}

/// Projects `data` onto the fitted components: `basisᵀ·(x − mean)`.
pub fn pca_apply(model: &PcaModel, data: &LabeledDataset) -> Result<LabeledDataset> {
    if data.dim() != model.input_dim() {
        return Err(CdmError::DimensionMismatch {
            context: "pca_apply",
            expected: model.input_dim(),
            found: data.dim(),
        });
    }
    let projected = (data.features() - &model.mean).dot(&model.basis);
    data.with_features(projected)
}

/// Few-shot sampling protocol: `k_per_class` training instances per class,
/// repeated for `rounds` rounds from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub k_per_class: usize,
    pub seed: u64,
    pub rounds: usize,
}

impl SplitSpec {
    pub fn new(k_per_class: usize, seed: u64, rounds: usize) -> Result<Self> {
        if k_per_class == 0 || rounds == 0 {
            return Err(CdmError::InvalidArgument(
                "k_per_class and rounds must be positive".into(),
            ));
        }
        Ok(Self {
            k_per_class,
            seed,
            rounds,
        })
    }

    /// Checks that every class can supply `k_per_class` instances.
    pub fn validate(&self, data: &LabeledDataset) -> Result<()> {
        for (class, &count) in data.class_counts().iter().enumerate() {
            if count < self.k_per_class {
                return Err(CdmError::InsufficientClassCount {
                    class: data.classes()[class].clone(),
                    available: count,
                    requested: self.k_per_class,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    /// Classes with no instances left for testing.
    pub empty_test_classes: Vec<String>,
}

/// Draws `k_per_class` training rows per class; the rest form the test set.
/// The draw depends only on `(spec.seed, round)`.
pub fn sample_split(data: &LabeledDataset, spec: &SplitSpec, round: usize) -> Result<Split> {
    if spec.k_per_class == 0 {
        return Err(CdmError::InvalidArgument("k_per_class must be positive".into()));
    }
    spec.validate(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(round as u64);

    let mut in_train = vec![false; data.len()];
    let mut empty_test_classes = Vec::new();
    for class in 0..data.n_classes() {
        let mut rows = data.rows_of_class(class);
        rows.shuffle(&mut rng);
        for &r in &rows[..spec.k_per_class] {
            in_train[r] = true;
        }
        if rows.len() == spec.k_per_class {
            empty_test_classes.push(data.classes()[class].clone());
        }
    }
    let (train, test): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&r| in_train[r]);
    Ok(Split {
        train: data.subset(&train),
        test: data.subset(&test),
        empty_test_classes,
    })
}

/// Per-feature z-scoring with statistics from a training set. Constant
/// features keep unit scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &Array2<f64>) -> Self {
        let n = features.nrows();
        let m = features.ncols();
        if n == 0 {
            return Self::identity(m);
        }
        let mean = features.mean_axis(Axis(0)).expect("non-empty");
        let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
        let scale = features
            .axis_iter(Axis(1))
            .zip(mean.iter())
            .map(|(col, &mu)| {
                let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / denom;
                let sd = var.sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self {
            mean: mean.to_vec(),
            scale,
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.dim() {
            return Err(CdmError::DimensionMismatch {
                context: "standardizer",
                expected: self.dim(),
                found: features.ncols(),
            });
        }
        let mut out = features.clone();
        for mut row in out.rows_mut() {
            for ((v, mu), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - mu) / s;
            }
        }
        Ok(out)
    }

    pub fn transform_dataset(&self, data: &LabeledDataset) -> Result<LabeledDataset> {
        data.with_features(self.transform(data.features())?)
    }
}
