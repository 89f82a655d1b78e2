//! Weighted point clouds, CSV ingestion, splitting and batch sampling.
//!
//! A [`WeightedPointCloud`] stores `n` points in `R^d` together with a
//! nonnegative mass per point and optional integer labels. Clouds are
//! immutable once built; every transformation returns a new cloud.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discrete measure `sum_i m_i delta_{x_i}` with optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedPointCloud {
    points: Array2<f64>,
    masses: Array1<f64>,
    labels: Option<Vec<i64>>,
}

impl WeightedPointCloud {
    /// Builds a cloud, checking every invariant. Requires at least one point.
    pub fn new(points: Array2<f64>, masses: Array1<f64>, labels: Option<Vec<i64>>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::invalid("point cloud must contain at least one point"));
        }
        Self::checked(points, masses, labels)
    }

    /// Cloud with unit mass on every point.
    pub fn uniform(points: Array2<f64>, labels: Option<Vec<i64>>) -> Result<Self> {
        let n = points.nrows();
        Self::new(points, Array1::ones(n), labels)
    }

    /// Zero-point cloud of dimension `dim`. Only produced by degenerate splits.
    pub fn empty(dim: usize, labelled: bool) -> Self {
        Self {
            points: Array2::zeros((0, dim)),
            masses: Array1::zeros(0),
            labels: labelled.then(Vec::new),
        }
    }

    fn checked(points: Array2<f64>, masses: Array1<f64>, labels: Option<Vec<i64>>) -> Result<Self> {
        let n = points.nrows();
        if masses.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                found: masses.len(),
            });
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::LengthMismatch {
                    expected: n,
                    found: labels.len(),
                });
            }
        }
        for (row, &m) in masses.iter().enumerate() {
            if !m.is_finite() {
                return Err(Error::invalid(format!("non-finite mass at row {row}")));
            }
            if m < 0.0 {
                return Err(Error::NegativeWeight { row, value: m });
            }
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite coordinate"));
        }
        Ok(Self {
            points,
            masses,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn masses(&self) -> ArrayView1<'_, f64> {
        self.masses.view()
    }

    pub fn labels(&self) -> Option<&[i64]> {
        self.labels.as_deref()
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.sum()
    }

    /// Returns a new cloud holding the rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let points = self.points.select(Axis(0), indices);
        let masses = self.masses.select(Axis(0), indices);
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Self {
            points,
            masses,
            labels,
        }
    }

    /// Same points and labels with replaced masses.
    pub fn with_masses(&self, masses: Array1<f64>) -> Result<Self> {
        Self::checked(self.points.clone(), masses, self.labels.clone())
    }

    /// Concatenates two clouds of equal dimension.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        let points = ndarray::concatenate(Axis(0), &[self.points.view(), other.points.view()])
            .expect("matching column counts");
        let masses = ndarray::concatenate(Axis(0), &[self.masses.view(), other.masses.view()])
            .expect("1-d concatenation");
        let labels = match (&self.labels, &other.labels) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            (None, None) => None,
            _ => return Err(Error::invalid("cannot concatenate labelled and unlabelled clouds")),
        };
        Self::checked(points, masses, labels)
    }

    /// Writes the cloud as CSV with columns `f0..f{d-1}`, `weight` and,
    /// when present, `label`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.dim()).map(|k| format!("f{k}")).collect();
        header.push("weight".into());
        if self.labels.is_some() {
            header.push("label".into());
        }
        writer.write_record(&header)?;
        for i in 0..self.len() {
            let mut record: Vec<String> = self.points.row(i).iter().map(|v| format_f64(*v)).collect();
            record.push(format_f64(self.masses[i]));
            if let Some(labels) = &self.labels {
                record.push(labels[i].to_string());
            }
            writer.write_record(&record)?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Column roles for [`load_csv`].
#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    pub weight_column: Option<String>,
    pub label_column: Option<String>,
    /// Apply [`FeatureNormalizer`] fitted on the file itself.
    pub normalize: bool,
}

/// Reads a headered CSV. Feature columns are every column not named as the
/// weight or label column; all of them must be numeric.
pub fn load_csv(path: &Path, options: &LoadOptions) -> Result<WeightedPointCloud> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_owned()))
    };
    let weight_idx = options.weight_column.as_deref().map(find).transpose()?;
    let label_idx = options.label_column.as_deref().map(find).transpose()?;
    let feature_idx: Vec<usize> = (0..headers.len())
        .filter(|&k| Some(k) != weight_idx && Some(k) != label_idx)
        .collect();
    if feature_idx.is_empty() {
        return Err(Error::invalid("no feature columns"));
    }

    let mut values = Vec::new();
    let mut masses = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::RaggedRow {
                row,
                expected: headers.len(),
                found: record.len(),
            });
        }
        let parse = |k: usize| -> Result<f64> {
            record[k].parse::<f64>().map_err(|_| Error::NonNumeric {
                row,
                column: headers[k].clone(),
                value: record[k].to_owned(),
            })
        };
        for &k in &feature_idx {
            values.push(parse(k)?);
        }
        let mass = match weight_idx {
            Some(k) => parse(k)?,
            None => 1.0,
        };
        if mass < 0.0 {
            return Err(Error::NegativeWeight { row, value: mass });
        }
        masses.push(mass);
        if let Some(k) = label_idx {
            let raw = &record[k];
            let label = raw
                .parse::<i64>()
                .or_else(|_| raw.parse::<f64>().map(|v| v as i64).map_err(|_| ()))
                .map_err(|_| Error::NonNumeric {
                    row,
                    column: headers[k].clone(),
                    value: raw.to_owned(),
                })?;
            labels.push(label);
        }
    }
    let n = masses.len();
    let points = Array2::from_shape_vec((n, feature_idx.len()), values)
        .map_err(|e| Error::invalid(e.to_string()))?;
    let cloud = WeightedPointCloud::new(
        points,
        Array1::from(masses),
        label_idx.map(|_| labels),
    )?;
    if options.normalize {
        let normalizer = FeatureNormalizer::fit(&cloud);
        return normalizer.apply(&cloud);
    }
    Ok(cloud)
}

/// Per-feature scaling by the 75th percentile of a reference cloud followed
/// by `log1p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNormalizer {
    pub scales: Vec<f64>,
}

impl FeatureNormalizer {
    /// Features whose 75th percentile is zero keep a unit scale.
    pub fn fit(reference: &WeightedPointCloud) -> Self {
        let scales = reference
            .points()
            .axis_iter(Axis(1))
            .map(|col| {
                let mut v: Vec<f64> = col.to_vec();
                let q = percentile(&mut v, 0.75);
                if q == 0.0 {
                    1.0
                } else {
                    q
                }
            })
            .collect();
        Self { scales }
    }

    pub fn apply(&self, cloud: &WeightedPointCloud) -> Result<WeightedPointCloud> {
        if cloud.dim() != self.scales.len() {
            return Err(Error::DimensionMismatch {
                expected: self.scales.len(),
                found: cloud.dim(),
            });
        }
        let mut points = cloud.points.clone();
        for (mut col, &s) in points.axis_iter_mut(Axis(1)).zip(&self.scales) {
            col.mapv_inplace(|v| (v / s).ln_1p());
        }
        WeightedPointCloud::checked(points, cloud.masses.clone(), cloud.labels.clone())
    }
}

/// Linearly interpolated quantile, `q` in `[0, 1]`.
fn percentile(values: &mut [f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

/// Train/test split parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Shuffles row indices with `spec.seed` and partitions them. For fractions
/// strictly inside `(0, 1)` both sides receive at least one point; a
/// fraction of `1.0` returns the full cloud and an empty test side.
pub fn split(cloud: &WeightedPointCloud, spec: SplitSpec) -> Result<(WeightedPointCloud, WeightedPointCloud)> {
    let f = spec.train_fraction;
    if !(f > 0.0 && f <= 1.0) {
        return Err(Error::invalid(format!("train fraction {f} outside (0, 1]")));
    }
    let n = cloud.len();
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    indices.shuffle(&mut rng);
    let mut n_train = (f * n as f64).round() as usize;
    if f < 1.0 && n >= 2 {
        n_train = n_train.clamp(1, n - 1);
    }
    let n_train = n_train.min(n);
    let train = cloud.select(&indices[..n_train]);
    let test = if n_train == n {
        WeightedPointCloud::empty(cloud.dim(), cloud.labels.is_some())
    } else {
        cloud.select(&indices[n_train..])
    };
    Ok((train, test))
}

/// How [`sample_batch`] draws rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    #[default]
    WithReplacement,
    /// Shuffled draw without repeats; requires `size <= n`.
    WithoutReplacement,
}

/// Draws a training batch of `size` rows. The stream is a pure function of
/// `(seed, step)`, so replaying a step reproduces its batch. Batch masses
/// are uniform `1/size`.
pub fn sample_batch(
    cloud: &WeightedPointCloud,
    size: usize,
    seed: u64,
    step: u64,
    sampling: Sampling,
) -> Result<WeightedPointCloud> {
    if size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if cloud.is_empty() {
        return Err(Error::invalid("cannot sample from an empty cloud"));
    }
    let n = cloud.len();
    let mut rng = batch_rng(seed, step);
    let indices: Vec<usize> = match sampling {
        Sampling::WithReplacement => (0..size).map(|_| rng.gen_range(0..n)).collect(),
        Sampling::WithoutReplacement => {
            if size > n {
                return Err(Error::invalid(format!(
                    "batch size {size} exceeds cloud size {n} without replacement"
                )));
            }
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut rng);
            all.truncate(size);
            all
        }
    };
    let mut batch = cloud.select(&indices);
    batch.masses = Array1::from_elem(size, 1.0 / size as f64);
    Ok(batch)
}

/// Independent RNG stream per (seed, step).
pub(crate) fn batch_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Groups row indices by label, in label order.
pub fn indices_by_label(labels: &[i64]) -> Vec<(i64, Vec<usize>)> {
    let mut map: HashMap<i64, Vec<usize>> = HashMap::new();
    for (i, &l) in labels.iter().enumerate() {
        map.entry(l).or_default().push(i);
    }
    let mut groups: Vec<_> = map.into_iter().collect();
    groups.sort_by_key(|(l, _)| *l);
    groups
}
