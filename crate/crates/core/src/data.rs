//! Synthetic shifted domains, CSV storage, splits and batch orders.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::matrix::Matrix;
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub domain_tag: String,
    pub sample_ids: Vec<u64>,
}

/// Features and identities without labels. Everything on the adaptation
/// gradient path receives this view, never a [`Dataset`].
#[derive(Debug, Clone, Copy)]
pub struct UnlabeledView<'a> {
    pub features: &'a Matrix,
    pub sample_ids: &'a [u64],
}

impl UnlabeledView<'_> {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn select(&self, indices: &[usize]) -> (Matrix, Vec<u64>) {
        (
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.sample_ids[i]).collect(),
        )
    }
}

impl Dataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        classes: usize,
        domain_tag: impl Into<String>,
        sample_ids: Vec<u64>,
    ) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n {
            return Err(Error::shape("dataset labels", n, labels.len()));
        }
        if sample_ids.len() != n {
            return Err(Error::shape("dataset sample ids", n, sample_ids.len()));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes,
                row,
            });
        }
        let mut seen = HashSet::with_capacity(n);
        if let Some(dup) = sample_ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::InvalidArgument(format!("duplicate sample id {dup}")));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("dataset features".into()));
        }
        let domain_tag = domain_tag.into();
        if domain_tag.is_empty() || domain_tag.contains([',', '\n', '\r']) {
            return Err(Error::InvalidArgument(format!(
                "domain tag must be a non-empty token without commas: {domain_tag:?}"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            classes,
            domain_tag,
            sample_ids,
        })
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

    pub fn unlabeled(&self) -> UnlabeledView<'_> {
        UnlabeledView {
            features: &self.features,
            sample_ids: &self.sample_ids,
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            domain_tag: self.domain_tag.clone(),
            sample_ids: indices.iter().map(|&i| self.sample_ids[i]).collect(),
        }
    }

    /// Rows of `self` followed by rows of `other`; ids must stay unique.
    pub fn concat(&self, other: &Dataset, domain_tag: &str) -> Result<Dataset> {
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let mut ids = self.sample_ids.clone();
        ids.extend_from_slice(&other.sample_ids);
        Dataset::new(
            self.features.vstack(&other.features)?,
            labels,
            self.classes.max(other.classes),
            domain_tag,
            ids,
        )
    }

    fn next_free_id(&self) -> u64 {
        self.sample_ids.iter().max().map_or(0, |m| m + 1)
    }
}

/// Two interleaved half circles, class 0 on the upper unit circle and class 1
/// on the lower one shifted by `(1, -0.5)`, with isotropic Gaussian noise.
pub fn gen_two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("two moons needs n >= 2, got {n}")));
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise must be nonnegative, got {noise}")));
    }
    let n_upper = n - n / 2;
    let n_lower = n / 2;
    let angles = |k: usize| -> Vec<f64> {
        if k == 1 {
            vec![0.0]
        } else {
            (0..k).map(|i| PI * i as f64 / (k - 1) as f64).collect()
        }
    };
    let mut values = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for t in angles(n_upper) {
        values.extend_from_slice(&[t.cos(), t.sin()]);
        labels.push(0);
    }
    for t in angles(n_lower) {
        values.extend_from_slice(&[1.0 - t.cos(), 1.0 - t.sin() - 0.5]);
        labels.push(1);
    }
    if noise > 0.0 {
        let normal = Normal::new(0.0, noise).expect("valid std dev");
        let mut rng = rng::stream(seed, Purpose::DataGen, 0);
        for v in &mut values {
            *v += normal.sample(&mut rng);
        }
    }
    Dataset::new(
        Matrix::new(n, 2, values)?,
        labels,
        2,
        "moons",
        (0..n as u64).collect(),
    )
}

/// Equal-count isotropic Gaussian clusters around `centers` (one row per class).
/// When `n` is not a multiple of the class count the first classes get one extra.
pub fn gen_blobs(n: usize, centers: &Matrix, spread: f64, seed: u64) -> Result<Dataset> {
    let classes = centers.rows();
    if classes < 2 {
        return Err(Error::InvalidArgument("blobs need at least two centers".into()));
    }
    if !(spread.is_finite() && spread > 0.0) {
        return Err(Error::InvalidArgument(format!("spread must be positive, got {spread}")));
    }
    for a in 0..classes {
        for b in a + 1..classes {
            if centers.row(a) == centers.row(b) {
                return Err(Error::InvalidArgument(format!(
                    "centers {a} and {b} coincide"
                )));
            }
        }
    }
    let d = centers.cols();
    let normal = Normal::new(0.0, spread).expect("valid std dev");
    let mut rng = rng::stream(seed, Purpose::DataGen, 0);
    let mut values = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for c in 0..classes {
        let count = n / classes + usize::from(c < n % classes);
        for _ in 0..count {
            for &mu in centers.row(c) {
                values.push(mu + normal.sample(&mut rng));
            }
            labels.push(c);
        }
    }
    Dataset::new(
        Matrix::new(n, d, values)?,
        labels,
        classes,
        "blobs",
        (0..n as u64).collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub rotation_radians: f64,
    pub translation: Vec<f64>,
    pub feature_noise: f64,
    pub seed: u64,
}

impl ShiftSpec {
    pub fn identity(dim: usize) -> Self {
        ShiftSpec {
            rotation_radians: 0.0,
            translation: vec![0.0; dim],
            feature_noise: 0.0,
            seed: 0,
        }
    }
}

/// Rotates about the origin, translates and adds seeded feature noise.
/// Labels are kept; sample ids are fresh and continue after the largest
/// id of `src`.
pub fn shift_domain(src: &Dataset, spec: &ShiftSpec) -> Result<Dataset> {
    let d = src.dim();
    if spec.translation.len() != d {
        return Err(Error::shape("shift translation", d, spec.translation.len()));
    }
    if spec.rotation_radians != 0.0 && d != 2 {
        return Err(Error::InvalidArgument(format!(
            "rotation needs 2-D features, got {d}"
        )));
    }
    if !(spec.feature_noise.is_finite() && spec.feature_noise >= 0.0) {
        return Err(Error::InvalidArgument("feature noise must be nonnegative".into()));
    }
    let (sin, cos) = spec.rotation_radians.sin_cos();
    let mut features = src.features.clone();
    let mut rng = rng::stream(spec.seed, Purpose::FeatureNoise, 0);
    let normal = (spec.feature_noise > 0.0)
        .then(|| Normal::new(0.0, spec.feature_noise).expect("valid std dev"));
    for r in 0..features.rows() {
        let row = features.row_mut(r);
        if spec.rotation_radians != 0.0 {
            let (x, y) = (row[0], row[1]);
            row[0] = cos * x - sin * y;
            row[1] = sin * x + cos * y;
        }
        for (v, t) in row.iter_mut().zip(&spec.translation) {
            *v += t;
            if let Some(normal) = &normal {
                *v += normal.sample(&mut rng);
            }
        }
    }
    let base = src.next_free_id();
    Dataset::new(
        features,
        src.labels.clone(),
        src.classes,
        format!("{}_shifted", src.domain_tag),
        (0..src.len() as u64).map(|i| base + i).collect(),
    )
}

/// Seeded shuffle, then the first `⌊ratio·n⌋` rows train and the rest test.
pub fn split(ds: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let n = ds.len();
    let n_train = (ratio * n as f64).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::InvalidArgument(format!(
            "split of {n} rows at ratio {ratio} leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Split, 0));
    Ok((ds.subset(&order[..n_train]), ds.subset(&order[n_train..])))
}

/// Index batches for one epoch of `n` samples, reshuffled per `(seed, epoch)`.
/// The last batch may be short.
pub fn batch_indices(n: usize, batch_size: usize, epoch: u64, seed: u64) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Shuffle, epoch));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn batch_iter(ds: &Dataset, batch_size: usize, epoch: u64, seed: u64) -> Vec<Vec<usize>> {
    batch_indices(ds.len(), batch_size, epoch, seed)
}

/// CSV text: header `f0,...,f{d-1},label,domain`, one row per sample.
pub fn to_csv_string(ds: &Dataset) -> String {
    let mut out = String::new();
    for j in 0..ds.dim() {
        let _ = write!(out, "f{j},");
    }
    out.push_str("label,domain\n");
    for i in 0..ds.len() {
        for v in ds.features.row(i) {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{},{}", ds.labels[i], ds.domain_tag);
    }
    out
}

/// Parses CSV text. `source` names the input in error messages; `classes`,
/// when given, bounds the labels, otherwise it is inferred as `max + 1`.
/// Sample ids are `id_base` plus the row position.
pub fn from_csv_str(text: &str, source: &str, classes: Option<usize>, id_base: u64) -> Result<Dataset> {
    let err = |line: usize, message: String| Error::Parse {
        path: source.to_string(),
        line,
        message,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| err(1, "empty file, missing header".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    for required in ["label", "domain"] {
        if !cols.contains(&required) {
            return Err(err(1, format!("header is missing the \"{required}\" column")));
        }
    }
    let d = cols.len() - 2;
    let expected: Vec<String> = (0..d)
        .map(|j| format!("f{j}"))
        .chain(["label".into(), "domain".into()])
        .collect();
    if cols != expected {
        return Err(err(1, format!("header must be \"{}\"", expected.join(","))));
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut tag: Option<String> = None;
    for (k, line) in lines.enumerate() {
        let lineno = k + 2;
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != d + 2 {
            return Err(err(lineno, format!("expected {} cells, found {}", d + 2, cells.len())));
        }
        for (j, cell) in cells[..d].iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| err(lineno, format!("column f{j}: not a number: {cell:?}")))?;
            if !v.is_finite() {
                return Err(err(lineno, format!("column f{j}: non-finite value")));
            }
            values.push(v);
        }
        let label: usize = cells[d]
            .parse()
            .map_err(|_| err(lineno, format!("label is not a nonnegative integer: {:?}", cells[d])))?;
        if let Some(c) = classes {
            if label >= c {
                return Err(err(lineno, format!("label {label} out of range for {c} classes")));
            }
        }
        labels.push(label);
        let domain = cells[d + 1];
        match &tag {
            None => tag = Some(domain.to_string()),
            Some(t) if t != domain => {
                return Err(err(lineno, format!("mixed domain tags {t:?} and {domain:?}")))
            }
            Some(_) => {}
        }
    }
    let n = labels.len();
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Dataset::new(
        Matrix::new(n, d, values)?,
        labels,
        classes,
        tag.unwrap_or_else(|| "empty".into()),
        (0..n as u64).map(|i| id_base + i).collect(),
    )
}

pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    io::write_atomic(path, to_csv_string(ds).as_bytes())
}

pub fn load_csv(path: &Path, classes: Option<usize>, id_base: u64) -> Result<Dataset> {
    let text = io::read_to_string(path)?;
    from_csv_str(&text, &path.display().to_string(), classes, id_base)
}
