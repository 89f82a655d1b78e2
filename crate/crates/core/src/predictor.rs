//! Out-of-sample transport of weighted points and recovery of explicit
//! semi-couplings from the batch couplings seen during training.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::dataset::format_f64;
use crate::error::{Error, Result};
use crate::otcore::{BatchWeights, Coupling};
use crate::trainer::NubotModel;

/// Mapped points together with their transported masses.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub points: Array2<f64>,
    pub masses: Array1<f64>,
}

fn check_inputs(model: &NubotModel, x: ArrayView2<'_, f64>, u: ArrayView1<'_, f64>) -> Result<()> {
    if x.ncols() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: x.ncols(),
        });
    }
    if u.len() != x.nrows() {
        return Err(Error::LengthMismatch {
            expected: x.nrows(),
            found: u.len(),
        });
    }
    if let Some(i) = u.iter().position(|&v| !(v >= 0.0)) {
        return Err(Error::invalid(format!("mass at index {i} must be nonnegative, got {}", u[i])));
    }
    Ok(())
}

/// `(x, u) -> (grad g(x), eta(x) * u / zeta(grad g(x)))`.
pub fn push_forward(model: &NubotModel, x: ArrayView2<'_, f64>, u: ArrayView1<'_, f64>) -> Result<Prediction> {
    check_inputs(model, x, u)?;
    let points = model.g.gradient_map(x)?;
    let num = model.eta.evaluate_weights(x)?;
    let den = model.zeta.evaluate_weights(points.view())?;
    let masses = ndarray::Zip::from(&num).and(&den).and(u).map_collect(|&a, &b, &w| a * w / b);
    Ok(Prediction { points, masses })
}

/// `(y, v) -> (grad f(y), zeta(y) * v / eta(grad f(y)))`.
pub fn push_backward(model: &NubotModel, y: ArrayView2<'_, f64>, v: ArrayView1<'_, f64>) -> Result<Prediction> {
    check_inputs(model, y, v)?;
    let points = model.f.gradient_map(y)?;
    let num = model.zeta.evaluate_weights(y)?;
    let den = model.eta.evaluate_weights(points.view())?;
    let masses = ndarray::Zip::from(&num).and(&den).and(v).map_collect(|&a, &b, &w| a * w / b);
    Ok(Prediction { points, masses })
}

/// Writes input features, mapped features, input mass and output mass.
pub fn write_prediction_csv(
    path: &Path,
    input: ArrayView2<'_, f64>,
    input_masses: ArrayView1<'_, f64>,
    prediction: &Prediction,
) -> Result<()> {
    let d = input.ncols();
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..d).map(|k| format!("x{k}")).collect();
    header.extend((0..d).map(|k| format!("mapped{k}")));
    header.push("mass_in".into());
    header.push("mass_out".into());
    w.write_record(&header)?;
    for i in 0..input.nrows() {
        let mut rec: Vec<String> = input.row(i).iter().map(|v| format_f64(*v)).collect();
        rec.extend(prediction.points.row(i).iter().map(|v| format_f64(*v)));
        rec.push(format_f64(input_masses[i]));
        rec.push(format_f64(prediction.masses[i]));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Two plans on the same `n x m` grid: the first has the source masses as
/// row sums, the second the target masses as column sums.
#[derive(Clone, Debug, PartialEq)]
pub struct SemiCouplingPair {
    pub gamma0: Array2<f64>,
    pub gamma1: Array2<f64>,
}

impl SemiCouplingPair {
    /// Scales each plan so its constrained marginal sums to the given total
    /// batch mass. Recovered plans have constant constrained marginals, so
    /// with uniform batch masses this matches them entry by entry.
    pub fn rescaled(&self, source_total: f64, target_total: f64) -> Result<Self> {
        let s0 = self.gamma0.sum();
        let s1 = self.gamma1.sum();
        if !(s0 > 0.0) || !(s1 > 0.0) {
            return Err(Error::ZeroMass);
        }
        Ok(Self {
            gamma0: &self.gamma0 * (source_total / s0),
            gamma1: &self.gamma1 * (target_total / s1),
        })
    }

    /// Largest absolute deviation of `(rows of gamma0, columns of gamma1)`
    /// from `(u, v)`.
    pub fn marginal_errors(&self, u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> Result<(f64, f64)> {
        let rows = self.gamma0.sum_axis(Axis(1));
        let cols = self.gamma1.sum_axis(Axis(0));
        if rows.len() != u.len() {
            return Err(Error::LengthMismatch {
                expected: rows.len(),
                found: u.len(),
            });
        }
        if cols.len() != v.len() {
            return Err(Error::LengthMismatch {
                expected: cols.len(),
                found: v.len(),
            });
        }
        let max_dev = |a: &Array1<f64>, b: ArrayView1<'_, f64>| {
            a.iter().zip(b.iter()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
        };
        Ok((max_dev(&rows, u), max_dev(&cols, v)))
    }
}

fn divide_rows(plan: &Array2<f64>, w: &BatchWeights) -> Result<Array2<f64>> {
    if w.len() != plan.nrows() {
        return Err(Error::LengthMismatch {
            expected: plan.nrows(),
            found: w.len(),
        });
    }
    if let Some(i) = w.0.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::ZeroWeight(i));
    }
    let mut out = plan.clone();
    for (mut row, &wi) in out.rows_mut().into_iter().zip(w.0.iter()) {
        row /= wi;
    }
    Ok(out)
}

/// Returns `(diag(1/e) G1, (diag(1/z) G2)^T)`. `G1` is `n x m` (mapped
/// source against target), `G2` is `m x n` (mapped target against source).
///
/// Since `e` carries the factor `n`, the rows of the first plan all sum to
/// `total(G1) / n`; use [`SemiCouplingPair::rescaled`] to match batch masses.
pub fn recover_semicouplings(
    gamma1: &Coupling,
    gamma2: &Coupling,
    e: &BatchWeights,
    z: &BatchWeights,
) -> Result<SemiCouplingPair> {
    let (n, m) = gamma1.plan.dim();
    if gamma2.plan.dim() != (m, n) {
        return Err(Error::invalid(format!(
            "second coupling has shape {:?}, expected {:?}",
            gamma2.plan.dim(),
            (m, n)
        )));
    }
    let gamma0 = divide_rows(&gamma1.plan, e)?;
    let gamma1 = divide_rows(&gamma2.plan, z)?.reversed_axes();
    Ok(SemiCouplingPair {
        gamma0,
        gamma1: gamma1.as_standard_layout().to_owned(),
    })
}
