//! Discrete optimal transport: squared-Euclidean costs, balanced and
//! KL-relaxed entropic Sinkhorn solvers, batch weight extraction and a
//! brute-force primal oracle for small instances.
//!
//! Both solvers minimise
//!
//! ```text
//! <P, C> + tau1 KL(P 1 | u) + tau2 KL(P^T 1 | v) + eps sum P (log P - 1)
//! ```
//!
//! with `KL(r | u) = sum r log(r / u) - r + u`. Infinite `tau` turns the
//! corresponding marginal into a hard constraint. Iterates are kept as
//! log-domain duals `F`, `G` with `P_ij = exp((F_i + G_j - C_ij) / eps)`;
//! sweeps run on a stabilised kernel that absorbs the duals whenever the
//! residual scalings leave a safe exponent range.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::format_f64;
use crate::error::{Error, Result};

/// Ground cost tag. Only the quadratic cost is used.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    SquaredEuclidean,
}

/// Dense `n x m` cost matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub values: Array2<f64>,
    pub metric: Metric,
}

impl CostMatrix {
    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// `C_ij = |x_i - y_j|^2`.
pub fn squared_cost(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<CostMatrix> {
    if x.ncols() != y.ncols() {
        return Err(Error::DimensionMismatch {
            expected: x.ncols(),
            found: y.ncols(),
        });
    }
    let xx: Array1<f64> = x.rows().into_iter().map(|r| r.dot(&r)).collect();
    let yy: Array1<f64> = y.rows().into_iter().map(|r| r.dot(&r)).collect();
    let mut values = x.dot(&y.t());
    for ((i, j), c) in values.indexed_iter_mut() {
        *c = (xx[i] + yy[j] - 2.0 * *c).max(0.0);
    }
    // The expanded form loses a few ulps; identical rows must give exactly zero.
    for (i, xi) in x.rows().into_iter().enumerate() {
        for (j, yj) in y.rows().into_iter().enumerate() {
            if values[[i, j]] < 1e-9 * (1.0 + xx[i] + yy[j]) {
                values[[i, j]] = xi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum();
            }
        }
    }
    Ok(CostMatrix {
        values,
        metric: Metric::SquaredEuclidean,
    })
}

/// Entropic weight, marginal relaxation and stopping rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    /// `f64::INFINITY` means the row marginal is a hard constraint.
    #[serde(with = "serde_tau")]
    pub tau1: f64,
    #[serde(with = "serde_tau")]
    pub tau2: f64,
    /// Bound on the max-abs change of the duals between sweeps.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.005,
            tau1: 0.05,
            tau2: 0.05,
            tolerance: 1e-6,
            max_iterations: 2000,
        }
    }
}

impl SinkhornConfig {
    pub fn balanced(epsilon: f64) -> Self {
        Self {
            epsilon,
            tau1: f64::INFINITY,
            tau2: f64::INFINITY,
            ..Self::default()
        }
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau1 = tau;
        self.tau2 = tau;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.tau1 > 0.0 && self.tau2 > 0.0) {
            return Err(Error::invalid("tau must be positive"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::invalid("tolerance must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be positive"));
        }
        Ok(())
    }
}

/// JSON has no infinity; balanced marginals serialise as `null`.
mod serde_tau {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Transport plan with its realised marginals and final duals.
#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    pub plan: Array2<f64>,
    pub row_marginal: Array1<f64>,
    pub col_marginal: Array1<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub dual_u: Array1<f64>,
    pub dual_v: Array1<f64>,
}

impl Coupling {
    /// Wraps a plan, computing marginals. Duals are left empty.
    pub fn from_plan(plan: Array2<f64>) -> Self {
        let row_marginal = plan.sum_axis(Axis(1));
        let col_marginal = plan.sum_axis(Axis(0));
        Self {
            plan,
            row_marginal,
            col_marginal,
            iterations: 0,
            converged: true,
            dual_u: Array1::zeros(0),
            dual_v: Array1::zeros(0),
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.plan.sum()
    }

    /// Dense CSV dump, one plan row per line, no header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        for row in self.plan.rows() {
            w.write_record(row.iter().map(|v| format_f64(*v)))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Per-point factors derived from a plan (the `e` and `z` vectors).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchWeights(pub Array1<f64>);

impl BatchWeights {
    pub fn ones(n: usize) -> Self {
        Self(Array1::ones(n))
    }

    pub fn values(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `(min, mean, max)`.
    pub fn summary(&self) -> (f64, f64, f64) {
        let min = self.0.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (min, self.0.mean().unwrap_or(f64::NAN), max)
    }
}

fn check_masses(name: &str, masses: ArrayView1<'_, f64>, expected: usize) -> Result<()> {
    if masses.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            found: masses.len(),
        });
    }
    if let Some(i) = masses.iter().position(|&m| !(m > 0.0 && m.is_finite())) {
        return Err(Error::invalid(format!(
            "{name} mass at index {i} must be positive and finite, got {}",
            masses[i]
        )));
    }
    Ok(())
}

/// Entropic OT with hard marginals. Both mass vectors must have equal totals.
pub fn sinkhorn_balanced(
    u: ArrayView1<'_, f64>,
    v: ArrayView1<'_, f64>,
    cost: &CostMatrix,
    cfg: &SinkhornConfig,
) -> Result<Coupling> {
    let (su, sv) = (u.sum(), v.sum());
    if (su - sv).abs() > 1e-8 {
        return Err(Error::invalid(format!("unequal total masses {su} and {sv}")));
    }
    let cfg = SinkhornConfig {
        tau1: f64::INFINITY,
        tau2: f64::INFINITY,
        ..*cfg
    };
    solve(u, v, cost, &cfg)
}

/// Entropic OT with KL-relaxed marginals (generalised Sinkhorn). Each half
/// sweep is the balanced update damped by the exponent `tau / (tau + eps)`.
pub fn sinkhorn_unbalanced(
    u: ArrayView1<'_, f64>,
    v: ArrayView1<'_, f64>,
    cost: &CostMatrix,
    cfg: &SinkhornConfig,
) -> Result<Coupling> {
    if !(cfg.tau1.is_finite() && cfg.tau2.is_finite()) {
        return Err(Error::invalid("unbalanced solver needs finite tau1 and tau2"));
    }
    solve(u, v, cost, cfg)
}

/// Scalings beyond `exp(+-ABSORB_LIMIT)` are folded back into the duals.
const ABSORB_LIMIT: f64 = 100.0;
/// Kernel sums below this are recomputed exactly in log space.
const TINY_SUM: f64 = 1e-100;

fn damping(tau: f64, eps: f64) -> f64 {
    if tau.is_infinite() {
        1.0
    } else {
        tau / (tau + eps)
    }
}

/// Kernel entries below this are dropped. With scalings capped at
/// `exp(ABSORB_LIMIT)` the dropped mass is negligible next to `TINY_SUM`.
const DROP_LOG: f64 = -575.0;

/// Kernel storage: row-compressed when most entries are dropped, dense
/// otherwise.
enum Csr {
    Sparse {
        offsets: Vec<usize>,
        cols: Vec<usize>,
        vals: Vec<f64>,
    },
    Dense(Array2<f64>),
}

impl Csr {
    fn matvec(&self, x: &Array1<f64>) -> Array1<f64> {
        match self {
            Csr::Dense(k) => k.dot(x),
            Csr::Sparse { offsets, cols, vals } => {
                let x = x.as_slice().expect("contiguous");
                (0..offsets.len() - 1)
                    .map(|i| {
                        let (a, b) = (offsets[i], offsets[i + 1]);
                        cols[a..b].iter().zip(&vals[a..b]).map(|(&j, &v)| v * x[j]).sum()
                    })
                    .collect()
            }
        }
    }

    /// Keeps `exp(arg(i, j))` for every entry with `arg > DROP_LOG`.
    fn build(n: usize, m: usize, arg: impl Fn(usize, usize) -> f64) -> Csr {
        let dense = Array2::from_shape_fn((n, m), |(i, j)| {
            let a = arg(i, j);
            if a > DROP_LOG {
                a.exp()
            } else {
                0.0
            }
        });
        let nnz = dense.iter().filter(|&&v| v != 0.0).count();
        if 4 * nnz > n * m {
            return Csr::Dense(dense);
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut cols = Vec::with_capacity(nnz);
        let mut vals = Vec::with_capacity(nnz);
        offsets.push(0);
        for row in dense.rows() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    cols.push(j);
                    vals.push(v);
                }
            }
            offsets.push(cols.len());
        }
        Csr::Sparse { offsets, cols, vals }
    }
}

/// Stabilised Gibbs kernel `exp((f0_i + g0_j - C_ij) / eps)` in both
/// orientations. Each row of `rows` is divided by its largest entry
/// (`exp(row_shift_i)`), each row of `cols` likewise by `exp(col_shift_j)`,
/// so entries are dropped relative to their own row and rows of negligible
/// total mass keep their shape.
struct Kernel {
    rows: Csr,
    row_shift: Array1<f64>,
    cols: Csr,
    col_shift: Array1<f64>,
    f0: Array1<f64>,
    g0: Array1<f64>,
}

impl Kernel {
    fn absorb(cost: &Array2<f64>, f: &Array1<f64>, g: &Array1<f64>, eps: f64) -> Self {
        let inv = 1.0 / eps;
        let (n, m) = cost.dim();
        let mut args = Array2::<f64>::zeros((n, m));
        let mut row_shift = Array1::from_elem(n, f64::NEG_INFINITY);
        let mut col_shift = Array1::from_elem(m, f64::NEG_INFINITY);
        for i in 0..n {
            let fi = f[i];
            for j in 0..m {
                let a = (fi + g[j] - cost[[i, j]]) * inv;
                args[[i, j]] = a;
                row_shift[i] = f64::max(row_shift[i], a);
                col_shift[j] = f64::max(col_shift[j], a);
            }
        }
        let rows = Csr::build(n, m, |i, j| args[[i, j]] - row_shift[i]);
        let cols = Csr::build(m, n, |j, i| args[[i, j]] - col_shift[j]);
        Self {
            rows,
            row_shift,
            cols,
            col_shift,
            f0: f.clone(),
            g0: g.clone(),
        }
    }
}

/// `log sum_j exp((base + pot_j - c_j) / eps)`, computed stably.
fn exact_lse(base: f64, pot: ArrayView1<'_, f64>, c: ArrayView1<'_, f64>, eps: f64) -> f64 {
    let mut hi = f64::NEG_INFINITY;
    for (&p, &cj) in pot.iter().zip(c) {
        hi = hi.max((base + p - cj) / eps);
    }
    let s: f64 = pot
        .iter()
        .zip(c)
        .map(|(&p, &cj)| ((base + p - cj) / eps - hi).exp())
        .sum();
    hi + s.ln()
}

/// One damped dual update along the rows of `kernel`. Writes new duals into
/// `out` and returns true when the kernel should be re-absorbed.
#[allow(clippy::too_many_arguments)]
fn half_sweep(
    kernel: &Csr,
    shift: &Array1<f64>,
    cost: ArrayView2<'_, f64>,
    own_base: &Array1<f64>,
    other_base: &Array1<f64>,
    other_dual: &Array1<f64>,
    log_mass: &Array1<f64>,
    k: f64,
    eps: f64,
    out: &mut Array1<f64>,
) -> bool {
    let scaling: Array1<f64> = other_dual
        .iter()
        .zip(other_base)
        .map(|(&d, &b)| ((d - b) / eps).exp())
        .collect();
    let sums = kernel.matvec(&scaling);
    let mut reabsorb = false;
    for i in 0..out.len() {
        let s = sums[i];
        let log_s = if s > TINY_SUM && s.is_finite() {
            s.ln() + shift[i]
        } else {
            reabsorb = true;
            exact_lse(0.0, other_dual.view(), cost.row(i), eps) + own_base[i] / eps
        };
        let dual = k * (eps * log_mass[i] - eps * log_s + own_base[i]);
        if ((dual - own_base[i]) / eps).abs() > ABSORB_LIMIT {
            reabsorb = true;
        }
        out[i] = dual;
    }
    reabsorb
}

fn solve(
    u: ArrayView1<'_, f64>,
    v: ArrayView1<'_, f64>,
    cost: &CostMatrix,
    cfg: &SinkhornConfig,
) -> Result<Coupling> {
    cfg.validate()?;
    let (n, m) = cost.shape();
    check_masses("source", u, n)?;
    check_masses("target", v, m)?;
    let eps = cfg.epsilon;
    let k1 = damping(cfg.tau1, eps);
    let k2 = damping(cfg.tau2, eps);
    let balanced = cfg.tau1.is_infinite() && cfg.tau2.is_infinite();
    let log_u = u.mapv(f64::ln);
    let log_v = v.mapv(f64::ln);
    let c = &cost.values;
    let ct = c.t();

    let mut f = Array1::<f64>::zeros(n);
    let mut g = Array1::<f64>::zeros(m);
    let mut f_new = f.clone();
    let mut g_new = g.clone();
    let mut kernel = Kernel::absorb(c, &f, &g, eps);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        iterations += 1;
        // F_i = k1 (eps log u_i - eps LSE_j((G_j - C_ij) / eps))
        let stale = half_sweep(
            &kernel.rows,
            &kernel.row_shift,
            c.view(),
            &kernel.f0,
            &kernel.g0,
            &g,
            &log_u,
            k1,
            eps,
            &mut f_new,
        );
        if stale {
            kernel = Kernel::absorb(c, &f_new, &g, eps);
        }
        let stale = half_sweep(
            &kernel.cols,
            &kernel.col_shift,
            ct,
            &kernel.g0,
            &kernel.f0,
            &f_new,
            &log_v,
            k2,
            eps,
            &mut g_new,
        );
        let change = max_abs_diff(&f, &f_new).max(max_abs_diff(&g, &g_new));
        std::mem::swap(&mut f, &mut f_new);
        std::mem::swap(&mut g, &mut g_new);
        if stale {
            kernel = Kernel::absorb(c, &f, &g, eps);
        }
        if change < cfg.tolerance
            && change.is_finite()
            && (!balanced || row_violation(c, &f, &g, u, eps) < cfg.tolerance)
        {
            converged = true;
            break;
        }
        if !change.is_finite() {
            return Err(Error::Numeric("non-finite Sinkhorn duals".into()));
        }
    }

    let plan = plan_from_duals(c, &f, &g, eps);
    let row_marginal = plan.sum_axis(Axis(1));
    let col_marginal = plan.sum_axis(Axis(0));
    Ok(Coupling {
        plan,
        row_marginal,
        col_marginal,
        iterations,
        converged,
        dual_u: f,
        dual_v: g,
    })
}

fn max_abs_diff(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn plan_from_duals(c: &Array2<f64>, f: &Array1<f64>, g: &Array1<f64>, eps: f64) -> Array2<f64> {
    Array2::from_shape_fn(c.dim(), |(i, j)| {
        let arg = (f[i] + g[j] - c[[i, j]]) / eps;
        // exp underflows to zero below this anyway.
        if arg < -746.0 {
            0.0
        } else {
            arg.exp()
        }
    })
}

fn row_violation(c: &Array2<f64>, f: &Array1<f64>, g: &Array1<f64>, u: ArrayView1<'_, f64>, eps: f64) -> f64 {
    (0..f.len())
        .map(|i| {
            let r: f64 = (0..g.len()).map(|j| ((f[i] + g[j] - c[[i, j]]) / eps).exp()).sum();
            (r - u[i]).abs()
        })
        .fold(0.0, f64::max)
}

/// Generalised KL `sum r log(r/u) - r + u` with `0 log 0 = 0`.
pub fn kl_divergence(r: ArrayView1<'_, f64>, u: ArrayView1<'_, f64>) -> f64 {
    r.iter()
        .zip(u)
        .map(|(&ri, &ui)| {
            let t = if ri > 0.0 { ri * (ri / ui).ln() } else { 0.0 };
            t - ri + ui
        })
        .sum()
}

fn neg_entropy_term(p: f64) -> f64 {
    if p > 0.0 {
        p * (p.ln() - 1.0)
    } else {
        0.0
    }
}

/// Value of the (un)balanced entropic objective at `plan`. Hard marginals
/// (infinite tau) contribute nothing; feasibility is the caller's concern.
pub fn transport_objective(
    plan: ArrayView2<'_, f64>,
    u: ArrayView1<'_, f64>,
    v: ArrayView1<'_, f64>,
    cost: &CostMatrix,
    cfg: &SinkhornConfig,
) -> f64 {
    let linear: f64 = plan.iter().zip(cost.values.iter()).map(|(p, c)| p * c).sum();
    let entropy: f64 = plan.iter().map(|&p| neg_entropy_term(p)).sum();
    let mut value = linear + cfg.epsilon * entropy;
    if cfg.tau1.is_finite() {
        value += cfg.tau1 * kl_divergence(plan.sum_axis(Axis(1)).view(), u);
    }
    if cfg.tau2.is_finite() {
        value += cfg.tau2 * kl_divergence(plan.sum_axis(Axis(0)).view(), v);
    }
    value
}

/// `e_i = (sum_j P_ij / sum_ij P_ij) * count`.
pub fn weights_from_coupling(coupling: &Coupling, count: usize) -> Result<BatchWeights> {
    if count == 0 {
        return Err(Error::invalid("count must be positive"));
    }
    let total = coupling.row_marginal.sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::ZeroMass);
    }
    let scale = count as f64 / total;
    Ok(BatchWeights(coupling.row_marginal.mapv(|r| r * scale)))
}

/// Iterates `e <- normalised row marginal of UBOT(e * u, v)` starting from
/// `e = 1`. One iteration is the single-step approximation; more iterations
/// approach the self-consistent reweighting.
pub fn fixed_point_weights(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    u: ArrayView1<'_, f64>,
    v: ArrayView1<'_, f64>,
    cfg: &SinkhornConfig,
    iters: usize,
) -> Result<BatchWeights> {
    if iters == 0 {
        return Err(Error::invalid("fixed-point iteration count must be at least 1"));
    }
    let cost = squared_cost(x, y)?;
    let n = x.nrows();
    let mut e = BatchWeights::ones(n);
    for _ in 0..iters {
        let scaled = &e.0 * &u;
        let coupling = sinkhorn_unbalanced(scaled.view(), v, &cost, cfg)?;
        let next = weights_from_coupling(&coupling, n)?;
        let change = max_abs_diff(&next.0, &e.0);
        e = next;
        if change < cfg.tolerance {
            break;
        }
    }
    Ok(e)
}

/// Exhaustive primal search for tiny instances (`n * m <= 9`).
///
/// Unbalanced: cyclic coordinate descent over plan entries, each coordinate
/// minimised on a `1e-4` grid over `[0, max(1, u, v)]` and then on a `1e-6`
/// grid around the best grid point. Balanced: the same scheme over the
/// mass-preserving 2x2 exchange moves, started from `u v^T`. The objective
/// is strictly convex, so the sweeps settle at the global minimiser up to
/// grid resolution.
pub fn oracle_grid_search(
    u: ArrayView1<'_, f64>,
    v: ArrayView1<'_, f64>,
    cost: &CostMatrix,
    cfg: &SinkhornConfig,
) -> Result<Coupling> {
    let (n, m) = cost.shape();
    if n * m > 9 {
        return Err(Error::InstanceTooLarge { rows: n, cols: m });
    }
    cfg.validate()?;
    check_masses("source", u, n)?;
    check_masses("target", v, m)?;
    let balanced = cfg.tau1.is_infinite() || cfg.tau2.is_infinite();
    let mut plan = if balanced {
        let total = u.sum();
        Array2::from_shape_fn((n, m), |(i, j)| u[i] * v[j] / total)
    } else {
        Array2::zeros((n, m))
    };
    let upper = u.iter().chain(v.iter()).copied().fold(1.0, f64::max);
    let objective = |p: &Array2<f64>| transport_objective(p.view(), u, v, cost, cfg);

    let mut current = objective(&plan);
    let mut first = true;
    for _sweep in 0..20_000 {
        let before = current;
        if balanced {
            for i in 0..n {
                for k in (i + 1)..n {
                    for j in 0..m {
                        for l in (j + 1)..m {
                            // t moves mass along +(i,j) +(k,l) -(i,l) -(k,j).
                            let lo = -plan[[i, j]].min(plan[[k, l]]);
                            let hi = plan[[i, l]].min(plan[[k, j]]);
                            let eval = |t: f64| {
                                let mut p = plan.clone();
                                p[[i, j]] += t;
                                p[[k, l]] += t;
                                p[[i, l]] -= t;
                                p[[k, j]] -= t;
                                objective(&p)
                            };
                            let t = grid_minimise(lo, hi, eval);
                            plan[[i, j]] += t;
                            plan[[k, l]] += t;
                            plan[[i, l]] -= t;
                            plan[[k, j]] -= t;
                            for idx in [[i, j], [k, l], [i, l], [k, j]] {
                                plan[idx] = plan[idx].max(0.0);
                            }
                        }
                    }
                }
            }
        } else {
            for i in 0..n {
                for j in 0..m {
                    let base = plan.clone();
                    let eval = |p: f64| {
                        let mut q = base.clone();
                        q[[i, j]] = p;
                        objective(&q)
                    };
                    // Full-range pass on the first sweep, local refinement after.
                    plan[[i, j]] = if first {
                        grid_minimise_from_zero(upper, &eval)
                    } else {
                        let lo = (plan[[i, j]] - 1e-4).max(0.0);
                        let hi = (plan[[i, j]] + 1e-4).min(upper);
                        fine_grid(lo, hi, plan[[i, j]], &eval)
                    };
                }
            }
        }
        first = false;
        current = objective(&plan);
        if (before - current).abs() < 1e-15 {
            break;
        }
    }
    Ok(Coupling::from_plan(plan))
}

/// Best point on a `1e-4` grid over `[0, upper]`, refined at `1e-6`.
fn grid_minimise_from_zero(upper: f64, eval: &impl Fn(f64) -> f64) -> f64 {
    let steps = (upper / 1e-4).ceil() as usize;
    let mut best = (0.0, eval(0.0));
    for s in 1..=steps {
        let p = (s as f64 * 1e-4).min(upper);
        let val = eval(p);
        if val < best.1 {
            best = (p, val);
        }
    }
    fine_grid((best.0 - 1e-4).max(0.0), (best.0 + 1e-4).min(upper), best.0, eval)
}

/// Refines around `centre` on a `1e-6` grid inside `[lo, hi]`.
fn fine_grid(lo: f64, hi: f64, centre: f64, eval: &impl Fn(f64) -> f64) -> f64 {
    let mut best = (centre, eval(centre));
    let steps = ((hi - lo) / 1e-6).round() as usize;
    for s in 0..=steps {
        let p = (lo + s as f64 * 1e-6).min(hi);
        let val = eval(p);
        if val < best.1 {
            best = (p, val);
        }
    }
    best.0
}

/// Grid minimisation of a 1-D function on `[lo, hi]`: a `1e-4` pass, then a
/// `1e-6` pass around the winner. The current point `0` is always a candidate.
fn grid_minimise(lo: f64, hi: f64, eval: impl Fn(f64) -> f64) -> f64 {
    if hi - lo <= 0.0 {
        return 0.0;
    }
    let steps = ((hi - lo) / 1e-4).ceil() as usize;
    let mut best = (0.0, eval(0.0));
    for s in 0..=steps {
        let t = (lo + s as f64 * 1e-4).min(hi);
        let val = eval(t);
        if val < best.1 {
            best = (t, val);
        }
    }
    fine_grid((best.0 - 1e-4).max(lo), (best.0 + 1e-4).min(hi), best.0, &eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn closed_form_mass(c: f64, tau: f64, eps: f64, u: f64, v: f64) -> f64 {
        (u * v).powf(tau / (2.0 * tau + eps)) * (-c / (2.0 * tau + eps)).exp()
    }

    #[test]
    fn cost_examples() {
        let c = squared_cost(array![[0.0, 0.0]].view(), array![[0.0, 0.0]].view()).unwrap();
        assert_eq!(c.values, array![[0.0]]);
        let c = squared_cost(array![[0.0]].view(), array![[3.0]].view()).unwrap();
        assert_eq!(c.values, array![[9.0]]);
        let grid = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let c = squared_cost(grid.view(), grid.view()).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let d: f64 = (0..2).map(|k| (grid[[i, k]] - grid[[j, k]]).powi(2)).sum();
                assert!((c.values[[i, j]] - d).abs() < 1e-10);
            }
            assert_eq!(c.values[[i, i]], 0.0);
        }
        assert!(squared_cost(array![[0.0]].view(), array![[0.0, 1.0]].view()).is_err());
    }

    #[test]
    fn cost_transposes_under_swap() {
        let x = array![[0.3, -1.2], [2.0, 0.5], [1.0, 1.0]];
        let y = array![[0.0, 4.0], [-3.0, 0.1]];
        let a = squared_cost(x.view(), y.view()).unwrap();
        let b = squared_cost(y.view(), x.view()).unwrap();
        assert_eq!(a.values, b.values.t());
    }

    #[test]
    fn balanced_single_point_is_forced() {
        let c = squared_cost(array![[0.0]].view(), array![[2.0]].view()).unwrap();
        for eps in [1e-3, 0.1, 10.0] {
            let p = sinkhorn_balanced(array![1.0].view(), array![1.0].view(), &c, &SinkhornConfig::balanced(eps))
                .unwrap();
            assert!((p.plan[[0, 0]] - 1.0).abs() < 1e-9);
            assert!(p.converged);
        }
    }

    #[test]
    fn balanced_identical_pairs_concentrate_on_diagonal() {
        let pts = array![[0.0], [1.0]];
        let c = squared_cost(pts.view(), pts.view()).unwrap();
        let u = array![0.5, 0.5];
        let cfg = SinkhornConfig::balanced(0.01);
        let p = sinkhorn_balanced(u.view(), u.view(), &c, &cfg).unwrap();
        assert!(p.plan[[0, 1]] < 0.01 && p.plan[[1, 0]] < 0.01);
        // One-parameter grid over feasible 2x2 couplings at 1e-4.
        let mut best = (0.0, f64::INFINITY);
        for s in 0..=5000 {
            let t = s as f64 * 1e-4;
            let plan = array![[t, 0.5 - t], [0.5 - t, t]];
            let val = transport_objective(plan.view(), u.view(), u.view(), &c, &cfg);
            if val < best.1 {
                best = (t, val);
            }
        }
        assert!((p.plan[[0, 0]] - best.0).abs() < 2e-4);
        assert!((p.plan[[1, 1]] - best.0).abs() < 2e-4);
    }

    #[test]
    fn large_epsilon_gives_independent_coupling() {
        let x = array![[0.0, 0.0], [1.0, 0.5], [2.0, -1.0]];
        let y = array![[0.5, 0.5], [-1.0, 2.0]];
        let c = squared_cost(x.view(), y.view()).unwrap();
        let u = array![0.2, 0.3, 0.5];
        let v = array![0.6, 0.4];
        let cfg = SinkhornConfig::balanced(100.0 * c.max());
        let p = sinkhorn_balanced(u.view(), v.view(), &c, &cfg).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!((p.plan[[i, j]] - u[i] * v[j]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn balanced_rejects_unequal_mass_and_zero_mass() {
        let c = squared_cost(array![[0.0]].view(), array![[1.0]].view()).unwrap();
        let cfg = SinkhornConfig::balanced(0.1);
        assert!(sinkhorn_balanced(array![1.0].view(), array![2.0].view(), &c, &cfg).is_err());
        let c2 = squared_cost(array![[0.0], [1.0]].view(), array![[1.0]].view()).unwrap();
        assert!(sinkhorn_unbalanced(array![1.0, 0.0].view(), array![1.0].view(), &c2, &SinkhornConfig::default())
            .is_err());
    }

    #[test]
    fn unbalanced_single_point_closed_form() {
        let zero = squared_cost(array![[0.0]].view(), array![[0.0]].view()).unwrap();
        let p = sinkhorn_unbalanced(array![1.0].view(), array![1.0].view(), &zero, &SinkhornConfig::default()).unwrap();
        assert!((p.plan[[0, 0]] - 1.0).abs() < 1e-9);

        let c = CostMatrix {
            values: array![[0.1]],
            metric: Metric::SquaredEuclidean,
        };
        let cfg = SinkhornConfig {
            tolerance: 1e-13,
            ..SinkhornConfig::default()
        };
        let p = sinkhorn_unbalanced(array![1.0].view(), array![1.0].view(), &c, &cfg).unwrap();
        let m = p.plan[[0, 0]];
        // Stationarity: c + eps log m + tau log(m/u) + tau log(m/v) = 0.
        let residual = 0.1 + 0.005 * m.ln() + 0.05 * m.ln() + 0.05 * m.ln();
        assert!(residual.abs() < 1e-8, "residual {residual}");
        assert!((m - (-0.1f64 / 0.105).exp()).abs() < 1e-9);
    }

    #[test]
    fn unbalanced_mass_decreases_with_cost_scale() {
        let cfg = SinkhornConfig {
            tolerance: 1e-13,
            ..SinkhornConfig::default()
        };
        let mut last = f64::INFINITY;
        for c in [0.0, 0.01, 0.1, 0.5, 1.0, 3.0] {
            let cost = CostMatrix {
                values: array![[c]],
                metric: Metric::SquaredEuclidean,
            };
            let p = sinkhorn_unbalanced(array![0.7].view(), array![1.3].view(), &cost, &cfg).unwrap();
            assert!(p.total_mass() <= last);
            assert!((p.total_mass() - closed_form_mass(c, 0.05, 0.005, 0.7, 1.3)).abs() < 1e-8);
            last = p.total_mass();
        }
    }

    #[test]
    fn balanced_limit_of_unbalanced() {
        let x = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let y = array![[0.2, 0.1], [0.9, 0.3], [0.1, 1.2]];
        let c = squared_cost(x.view(), y.view()).unwrap();
        let u = array![0.3, 0.3, 0.4];
        let v = array![0.5, 0.25, 0.25];
        let base = SinkhornConfig {
            epsilon: 0.05,
            ..SinkhornConfig::default()
        };
        let bal = sinkhorn_balanced(u.view(), v.view(), &c, &SinkhornConfig::balanced(0.05)).unwrap();
        let unb = sinkhorn_unbalanced(u.view(), v.view(), &c, &base.with_tau(1e3 * c.max())).unwrap();
        let gap = (&bal.plan - &unb.plan).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
        assert!(gap < 1e-3, "gap {gap}");
    }

    #[test]
    fn duals_stay_finite_for_extreme_costs() {
        let x = array![[0.0], [1000.0]];
        let y = array![[0.5], [-1000.0], [10.0]];
        let c = squared_cost(x.view(), y.view()).unwrap();
        assert!(c.max() > 1e6);
        let cfg = SinkhornConfig {
            epsilon: 1e-3,
            ..SinkhornConfig::default()
        };
        let p = sinkhorn_unbalanced(array![0.5, 0.5].view(), array![0.3, 0.3, 0.4].view(), &c, &cfg).unwrap();
        assert!(p.dual_u.iter().chain(p.dual_v.iter()).all(|d| d.is_finite()));
        assert!(p.plan.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn marginals_match_plan() {
        let x = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [3.0, 3.0]];
        let y = array![[0.2, 0.1], [0.9, 0.3]];
        let c = squared_cost(x.view(), y.view()).unwrap();
        let u = Array1::from_elem(4, 0.25);
        let v = Array1::from_elem(2, 0.5);
        for p in [
            sinkhorn_unbalanced(u.view(), v.view(), &c, &SinkhornConfig::default()).unwrap(),
            sinkhorn_balanced(u.view(), v.view(), &c, &SinkhornConfig::balanced(0.1)).unwrap(),
        ] {
            for (i, r) in p.plan.rows().into_iter().enumerate() {
                assert!((r.sum() - p.row_marginal[i]).abs() < 1e-10);
            }
            for (j, col) in p.plan.columns().into_iter().enumerate() {
                assert!((col.sum() - p.col_marginal[j]).abs() < 1e-10);
            }
        }
        let bal = sinkhorn_balanced(u.view(), v.view(), &c, &SinkhornConfig::balanced(0.1)).unwrap();
        assert!(bal.converged);
        assert!((&bal.row_marginal - &u).iter().all(|d| d.abs() < 1e-6));
        assert!((&bal.col_marginal - &v).iter().all(|d| d.abs() < 1e-6));
    }

    #[test]
    fn weights_examples() {
        let uniform = Coupling::from_plan(Array2::from_elem((2, 2), 0.25));
        assert_eq!(weights_from_coupling(&uniform, 2).unwrap().0, array![1.0, 1.0]);
        let skew = Coupling::from_plan(array![[0.3, 0.3], [0.2, 0.2]]);
        let w = weights_from_coupling(&skew, 2).unwrap();
        assert!((w.0[0] - 1.2).abs() < 1e-12 && (w.0[1] - 0.8).abs() < 1e-12);
        let zero = Coupling::from_plan(Array2::zeros((2, 2)));
        assert!(matches!(weights_from_coupling(&zero, 2), Err(Error::ZeroMass)));
    }

    #[test]
    fn fixed_point_on_consistent_instance() {
        let pts = array![[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]];
        let u = Array1::from_elem(3, 1.0 / 3.0);
        let e = fixed_point_weights(pts.view(), pts.view(), u.view(), u.view(), &SinkhornConfig::default(), 1).unwrap();
        assert!(e.0.iter().all(|v| (v - 1.0).abs() < 1e-9));
        assert!(
            fixed_point_weights(pts.view(), pts.view(), u.view(), u.view(), &SinkhornConfig::default(), 0).is_err()
        );
    }

    #[test]
    fn oracle_matches_closed_form_and_rejects_large() {
        let cfg = SinkhornConfig::default();
        for c in [0.0, 0.1, 0.4] {
            let cost = CostMatrix {
                values: array![[c]],
                metric: Metric::SquaredEuclidean,
            };
            let o = oracle_grid_search(array![1.0].view(), array![1.0].view(), &cost, &cfg).unwrap();
            assert!((o.plan[[0, 0]] - closed_form_mass(c, 0.05, 0.005, 1.0, 1.0)).abs() < 1e-4);
        }
        let big = CostMatrix {
            values: Array2::zeros((2, 5)),
            metric: Metric::SquaredEuclidean,
        };
        assert!(matches!(
            oracle_grid_search(Array1::ones(2).view(), Array1::ones(5).view(), &big, &cfg),
            Err(Error::InstanceTooLarge { .. })
        ));
    }

    #[test]
    fn oracle_balanced_agrees_with_sinkhorn() {
        let pts = array![[0.0], [1.0]];
        let c = squared_cost(pts.view(), pts.view()).unwrap();
        let u = array![0.5, 0.5];
        let cfg = SinkhornConfig::balanced(0.01);
        let o = oracle_grid_search(u.view(), u.view(), &c, &cfg).unwrap();
        let s = sinkhorn_balanced(u.view(), u.view(), &c, &cfg).unwrap();
        let vo = transport_objective(o.plan.view(), u.view(), u.view(), &c, &cfg);
        let vs = transport_objective(s.plan.view(), u.view(), u.view(), &c, &cfg);
        assert!(vo <= vs + 1e-3);
        assert!((vo - vs).abs() < 1e-3);
    }

    #[test]
    fn oracle_zero_cost_is_independent() {
        let c = CostMatrix {
            values: Array2::zeros((2, 2)),
            metric: Metric::SquaredEuclidean,
        };
        let u = array![0.5, 0.5];
        let o = oracle_grid_search(u.view(), u.view(), &c, &SinkhornConfig::balanced(0.01)).unwrap();
        for v in o.plan.iter() {
            assert!((v - 0.25).abs() < 1e-4);
        }
    }
}
