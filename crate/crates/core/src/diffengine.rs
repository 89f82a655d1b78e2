//! Parameter containers, exact-gradient objectives, finite-difference
//! checking and the Adam optimiser.
//!
//! Networks in this crate keep all trainable values in a [`ParameterBlock`]:
//! a list of named row-major tensors. Gradients are returned as blocks with
//! the same layout, so the optimiser and the gradient checker never need to
//! know which network they are working on.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named dense tensor (rank 1 or 2), stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Entries are constrained to be nonnegative.
    #[serde(default)]
    pub nonneg: bool,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: &[usize], nonneg: bool) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
            nonneg,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Matrix view; rank-1 tensors are seen as a single row.
    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        let (r, c) = self.dims2();
        ArrayView2::from_shape((r, c), &self.data).expect("tensor shape matches data")
    }

    pub fn matrix_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let (r, c) = self.dims2();
        ArrayViewMut2::from_shape((r, c), &mut self.data).expect("tensor shape matches data")
    }

    pub fn vector(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.data[..])
    }

    fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => panic!("tensor {} has unsupported rank {}", self.name, other.len()),
        }
    }
}

/// Ordered collection of tensors making up one network's parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterBlock {
    pub tensors: Vec<Tensor>,
}

impl ParameterBlock {
    pub fn new(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    /// Same layout, all zeros, no constraints.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), &t.shape, t.nonneg))
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .unwrap_or_else(|| panic!("no tensor named {name}"))
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .iter_mut()
            .find(|t| t.name == name)
            .unwrap_or_else(|| panic!("no tensor named {name}"))
    }

    /// Flat coordinate access across all tensors.
    pub fn get(&self, mut k: usize) -> f64 {
        for t in &self.tensors {
            if k < t.len() {
                return t.data[k];
            }
            k -= t.len();
        }
        panic!("coordinate out of range")
    }

    pub fn set(&mut self, mut k: usize, value: f64) {
        for t in &mut self.tensors {
            if k < t.len() {
                t.data[k] = value;
                return;
            }
            k -= t.len();
        }
        panic!("coordinate out of range")
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.iter().flat_map(|t| t.data.iter().copied())
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.iter().zip(other.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.check_layout(other)?;
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += alpha * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|x| *x *= alpha);
        }
    }

    /// Clamps every constrained tensor at zero from below.
    pub fn project_nonneg(&mut self) {
        for t in self.tensors.iter_mut().filter(|t| t.nonneg) {
            t.data.iter_mut().for_each(|x| *x = x.max(0.0));
        }
    }

    /// Smallest entry among constrained tensors (`+inf` when there are none).
    pub fn min_constrained(&self) -> f64 {
        self.tensors
            .iter()
            .filter(|t| t.nonneg)
            .flat_map(|t| t.data.iter().copied())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn check_layout(&self, other: &Self) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::ShapeMismatch {
                name: "<block>".into(),
                left: vec![self.tensors.len()],
                right: vec![other.tensors.len()],
            });
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.shape != b.shape || a.name != b.name {
                return Err(Error::ShapeMismatch {
                    name: a.name.clone(),
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Scalar loss over one or more parameter blocks with fixed data captured
/// by the implementor. `gradient` must be exact.
pub trait Objective {
    fn value(&self, params: &[ParameterBlock]) -> f64;
    fn gradient(&self, params: &[ParameterBlock]) -> Vec<ParameterBlock>;
}

/// Exact gradient of `objective`, one block per parameter block.
pub fn grad_scalar<O: Objective + ?Sized>(objective: &O, params: &[ParameterBlock]) -> Result<Vec<ParameterBlock>> {
    let grads = objective.gradient(params);
    if grads.len() != params.len() {
        return Err(Error::LengthMismatch {
            expected: params.len(),
            found: grads.len(),
        });
    }
    for (p, g) in params.iter().zip(&grads) {
        p.check_layout(g)?;
    }
    Ok(grads)
}

/// Settings for [`finite_difference_check`].
#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    /// Central-difference step, within `[1e-6, 1e-3]`.
    pub step: f64,
    /// Blocks larger than this are checked on a random subset of this many
    /// coordinates (at least 64).
    pub max_coords: usize,
    /// Denominator floor of the relative error; coordinates whose exact and
    /// numerical derivatives are both below it are compared absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            max_coords: 128,
            floor: 1e-6,
            seed: 0,
        }
    }
}

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(block, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
}

/// Compares [`grad_scalar`] with central differences and returns the largest
/// relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn finite_difference_check<O: Objective + ?Sized>(
    objective: &O,
    params: &[ParameterBlock],
    opts: &FdOptions,
) -> Result<FdReport> {
    if !(1e-6..=1e-3).contains(&opts.step) {
        return Err(Error::invalid(format!("finite-difference step {} outside [1e-6, 1e-3]", opts.step)));
    }
    let grads = grad_scalar(objective, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<ParameterBlock> = params.to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: (0, 0),
    };
    for b in 0..params.len() {
        let size = params[b].num_params();
        let subset = opts.max_coords.max(64);
        let coords: Vec<usize> = if size <= subset {
            (0..size).collect()
        } else {
            let mut c = sample(&mut rng, size, subset).into_vec();
            c.sort_unstable();
            c
        };
        for k in coords {
            let orig = params[b].get(k);
            work[b].set(k, orig + opts.step);
            let up = objective.value(&work);
            work[b].set(k, orig - opts.step);
            let down = objective.value(&work);
            work[b].set(k, orig);
            let numeric = (up - down) / (2.0 * opts.step);
            let exact = grads[b].get(k);
            let denom = exact.abs().max(numeric.abs()).max(opts.floor);
            let err = (exact - numeric).abs() / denom;
            report.coords_checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = (b, k);
            }
        }
    }
    Ok(report)
}

/// Adam moments and hyperparameters for one parameter block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: ParameterBlock,
    pub second_moment: ParameterBlock,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_stability: f64,
}

impl OptimizerState {
    pub fn new(params: &ParameterBlock, lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step_count: 0,
            lr,
            beta1,
            beta2,
            eps_stability: 1e-8,
        }
    }
}

/// Bias-corrected Adam update, in place. Nonnegativity projection is left
/// to the caller.
pub fn adam_step(params: &mut ParameterBlock, grads: &ParameterBlock, state: &mut OptimizerState) -> Result<()> {
    params.check_layout(grads)?;
    params.check_layout(&state.first_moment)?;
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params
        .tensors
        .iter_mut()
        .zip(&grads.tensors)
        .zip(&mut state.first_moment.tensors)
        .zip(&mut state.second_moment.tensors)
    {
        for k in 0..p.data.len() {
            let gk = g.data[k];
            m.data[k] = b1 * m.data[k] + (1.0 - b1) * gk;
            v.data[k] = b2 * v.data[k] + (1.0 - b2) * gk * gk;
            let m_hat = m.data[k] / c1;
            let v_hat = v.data[k] / c2;
            p.data[k] -= state.lr * m_hat / (v_hat.sqrt() + state.eps_stability);
        }
    }
    Ok(())
}
