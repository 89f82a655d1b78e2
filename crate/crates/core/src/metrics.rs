//! Evaluation: weighted kernel MMD, per-cluster weight summaries, mass
//! correlation and the two reference predictors.

use std::path::Path;

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{format_f64, indices_by_label};
use crate::error::{Error, Result};
use crate::predictor::Prediction;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    #[default]
    Mean,
}

/// Multi-scale RBF kernel `k(a, b) = exp(-gamma * |a - b|^2)`, one term per
/// entry of `bandwidths`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub bandwidths: Vec<f64>,
    pub combine: Combine,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            bandwidths: vec![2.0, 1.0, 0.5, 0.1, 0.01, 0.005],
            combine: Combine::Mean,
        }
    }
}

impl KernelSpec {
    pub fn single(gamma: f64) -> Self {
        Self {
            bandwidths: vec![gamma],
            combine: Combine::Mean,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.bandwidths.is_empty() {
            return Err(Error::invalid("kernel needs at least one bandwidth"));
        }
        if let Some(g) = self.bandwidths.iter().find(|&&g| !(g > 0.0 && g.is_finite())) {
            return Err(Error::invalid(format!("bandwidth {g} must be positive")));
        }
        Ok(())
    }
}

/// `sum_ij a_i b_j mean_gamma exp(-gamma |p_i - q_j|^2)`.
fn cross_term(
    p: ArrayView2<'_, f64>,
    a: ArrayView1<'_, f64>,
    q: ArrayView2<'_, f64>,
    b: ArrayView1<'_, f64>,
    kernel: &KernelSpec,
) -> f64 {
    let scale = 1.0 / kernel.bandwidths.len() as f64;
    let mut total = 0.0;
    for (pi, &ai) in p.rows().into_iter().zip(a.iter()) {
        if ai == 0.0 {
            continue;
        }
        let mut row = 0.0;
        for (qj, &bj) in q.rows().into_iter().zip(b.iter()) {
            let d2: f64 = pi.iter().zip(qj.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
            let k: f64 = kernel.bandwidths.iter().map(|g| (-g * d2).exp()).sum();
            row += bj * k;
        }
        total += ai * row;
    }
    total * scale
}

/// Squared MMD between `p` weighted by `w` (normalised to sum one) and `q`
/// with uniform weights. Biased estimator, clipped at zero.
pub fn weighted_mmd(
    p: ArrayView2<'_, f64>,
    w: ArrayView1<'_, f64>,
    q: ArrayView2<'_, f64>,
    kernel: &KernelSpec,
) -> Result<f64> {
    kernel.validate()?;
    if p.ncols() != q.ncols() {
        return Err(Error::DimensionMismatch {
            expected: p.ncols(),
            found: q.ncols(),
        });
    }
    if w.len() != p.nrows() {
        return Err(Error::LengthMismatch {
            expected: p.nrows(),
            found: w.len(),
        });
    }
    if q.nrows() == 0 {
        return Err(Error::invalid("target population is empty"));
    }
    if let Some(i) = w.iter().position(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::invalid(format!("weight at index {i} must be nonnegative, got {}", w[i])));
    }
    let total = w.sum();
    if !(total > 0.0) {
        return Err(Error::ZeroMass);
    }
    let a = w.mapv(|v| v / total);
    let b = Array1::from_elem(q.nrows(), 1.0 / q.nrows() as f64);
    let pp = cross_term(p, a.view(), p, a.view(), kernel);
    let qq = cross_term(q, b.view(), q, b.view(), kernel);
    let pq = cross_term(p, a.view(), q, b.view(), kernel);
    Ok((pp + qq - 2.0 * pq).max(0.0))
}

/// Mean weight per class, in the order of `classes`.
pub fn cluster_weight_means(weights: ArrayView1<'_, f64>, labels: &[i64], classes: &[i64]) -> Result<Vec<f64>> {
    if labels.len() != weights.len() {
        return Err(Error::LengthMismatch {
            expected: weights.len(),
            found: labels.len(),
        });
    }
    let groups = indices_by_label(labels);
    classes
        .iter()
        .map(|&c| {
            let idx = groups
                .iter()
                .find(|(l, _)| *l == c)
                .map(|(_, idx)| idx)
                .filter(|idx| !idx.is_empty())
                .ok_or(Error::EmptyClass(c))?;
            Ok(idx.iter().map(|&i| weights[i]).sum::<f64>() / idx.len() as f64)
        })
        .collect()
}

/// Summed weight per class, in the order of `classes`.
pub fn cluster_weight_sums(weights: ArrayView1<'_, f64>, labels: &[i64], classes: &[i64]) -> Result<Vec<f64>> {
    if labels.len() != weights.len() {
        return Err(Error::LengthMismatch {
            expected: weights.len(),
            found: labels.len(),
        });
    }
    Ok(classes
        .iter()
        .map(|&c| labels.iter().zip(weights.iter()).filter(|(l, _)| **l == c).map(|(_, w)| w).sum())
        .collect())
}

/// Pearson correlation.
pub fn mass_fraction_correlation(predicted: &[f64], observed: &[f64]) -> Result<f64> {
    if predicted.len() != observed.len() {
        return Err(Error::LengthMismatch {
            expected: predicted.len(),
            found: observed.len(),
        });
    }
    if predicted.len() < 2 {
        return Err(Error::invalid("correlation needs at least two classes"));
    }
    let n = predicted.len() as f64;
    let ma = predicted.iter().sum::<f64>() / n;
    let mb = observed.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (a, b) in predicted.iter().zip(observed) {
        sab += (a - ma) * (b - mb);
        saa += (a - ma) * (a - ma);
        sbb += (b - mb) * (b - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Control points left in place with unit weights.
pub fn identity_baseline(x: ArrayView2<'_, f64>) -> Prediction {
    Prediction {
        points: x.to_owned(),
        masses: Array1::ones(x.nrows()),
    }
}

/// Seeded random permutation of the observed target, unit weights.
pub fn observed_baseline(y: ArrayView2<'_, f64>, seed: u64) -> Prediction {
    let mut order: Vec<usize> = (0..y.nrows()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Prediction {
        points: y.select(ndarray::Axis(0), &order),
        masses: Array1::ones(y.nrows()),
    }
}

/// One line of a metric report.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub scenario: String,
    pub method: String,
    pub mmd: f64,
    pub cluster_means: Vec<f64>,
    pub correlation: Option<f64>,
}

/// Writes `scenario,method,mmd,mean_0..mean_k,correlation`; the number of
/// mean columns follows the widest row and missing cells are left empty.
pub fn write_report_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let k = rows.iter().map(|r| r.cluster_means.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["scenario".to_string(), "method".into(), "mmd".into()];
    header.extend((0..k).map(|i| format!("mean_{i}")));
    header.push("correlation".into());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.scenario.clone(), r.method.clone(), format_f64(r.mmd)];
        for i in 0..k {
            rec.push(r.cluster_means.get(i).map(|v| format_f64(*v)).unwrap_or_default());
        }
        rec.push(r.correlation.map(format_f64).unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
