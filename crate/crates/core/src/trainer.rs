//! Alternating training of the potentials `f`, `g` and the rescalers
//! `eta`, `zeta`.
//!
//! Each step maps the source batch forward with `grad g` and the target
//! batch backward with `grad f`, solves one unbalanced problem per
//! direction to obtain the batch factors `e` and `z`, and then takes one
//! optimiser step on each network. With `e` and `z` held fixed the
//! potentials play the game
//!
//! ```text
//! J = 1/n sum_i e_i [f(grad g(x_i)) - <x_i, grad g(x_i)>] - 1/m sum_j z_j f(y_j)
//! ```
//!
//! where `g` minimises `J` plus a penalty on its negative `Wz` weights and
//! `f` maximises `J` under clamping.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_batch, Sampling, WeightedPointCloud};
use crate::diffengine::{adam_step, Objective, OptimizerState, ParameterBlock};
use crate::error::{Error, Result};
use crate::icnn::{Activation, Enforcement, IcnnPotential, DEFAULT_HIDDEN};
use crate::otcore::{sinkhorn_unbalanced, squared_cost, weights_from_coupling, BatchWeights, Coupling, SinkhornConfig};
use crate::rescaler::{RescalerNet, SYNTHETIC_WIDTH};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Unbalanced training with rescalers.
    #[default]
    Nubot,
    /// Balanced ablation: `e` and `z` fixed at one, no rescalers.
    Cellot,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nubot" => Ok(Mode::Nubot),
            "cellot" => Ok(Mode::Cellot),
            other => Err(Error::invalid(format!("unknown mode {other:?} (expected nubot or cellot)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epsilon: f64,
    pub tau: f64,
    pub sinkhorn_tolerance: f64,
    pub sinkhorn_max_iterations: usize,
    pub lr_potentials: f64,
    pub lr_rescalers: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_source: usize,
    pub batch_target: usize,
    pub steps: u64,
    pub lambda_penalty: f64,
    /// Optimiser steps on `g` per step on `f`.
    pub g_steps: usize,
    pub mode: Mode,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub rescaler_width: usize,
    pub activation: Activation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let sk = SinkhornConfig::default();
        Self {
            epsilon: sk.epsilon,
            tau: sk.tau1,
            sinkhorn_tolerance: sk.tolerance,
            sinkhorn_max_iterations: sk.max_iterations,
            lr_potentials: 1e-4,
            lr_rescalers: 1e-3,
            beta1: 0.5,
            beta2: 0.9,
            batch_source: 400,
            batch_target: 400,
            steps: 10_000,
            lambda_penalty: 1.0,
            g_steps: 10,
            mode: Mode::Nubot,
            seed: 0,
            hidden: DEFAULT_HIDDEN.to_vec(),
            rescaler_width: SYNTHETIC_WIDTH,
            activation: Activation::Rectifier,
        }
    }
}

impl TrainConfig {
    pub fn sinkhorn(&self) -> SinkhornConfig {
        SinkhornConfig {
            epsilon: self.epsilon,
            tau1: self.tau,
            tau2: self.tau,
            tolerance: self.sinkhorn_tolerance,
            max_iterations: self.sinkhorn_max_iterations,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epsilon", self.epsilon),
            ("tau", self.tau),
            ("sinkhorn_tolerance", self.sinkhorn_tolerance),
            ("lr_potentials", self.lr_potentials),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(self.lr_rescalers >= 0.0) || !(self.lambda_penalty >= 0.0) {
            return Err(Error::invalid("lr_rescalers and lambda_penalty must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("beta1 and beta2 must lie in [0, 1)"));
        }
        if self.g_steps == 0 {
            return Err(Error::invalid("g_steps must be at least 1"));
        }
        if self.batch_source == 0 || self.batch_target == 0 {
            return Err(Error::invalid("batch sizes must be positive"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) || self.rescaler_width == 0 {
            return Err(Error::invalid("network widths must be positive"));
        }
        Ok(())
    }
}

/// Networks, optimiser moments and the configuration that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NubotModel {
    pub f: IcnnPotential,
    pub g: IcnnPotential,
    pub eta: RescalerNet,
    pub zeta: RescalerNet,
    pub config: TrainConfig,
    /// Completed training steps.
    pub step: u64,
    pub opt_f: OptimizerState,
    pub opt_g: OptimizerState,
    pub opt_eta: OptimizerState,
    pub opt_zeta: OptimizerState,
}

impl NubotModel {
    /// Identity-initialised potentials (`f` clamped, `g` penalised) and
    /// freshly initialised rescalers.
    pub fn new(dim: usize, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let f = IcnnPotential::init_identity(dim, &config.hidden, seed.wrapping_mul(4).wrapping_add(1))?
            .with_activation(config.activation)
            .with_enforcement(Enforcement::Clamp);
        let g = IcnnPotential::init_identity(dim, &config.hidden, seed.wrapping_mul(4).wrapping_add(2))?
            .with_activation(config.activation)
            .with_enforcement(Enforcement::Penalty);
        let eta = RescalerNet::new(dim, config.rescaler_width, seed.wrapping_mul(4).wrapping_add(3))?;
        let zeta = RescalerNet::new(dim, config.rescaler_width, seed.wrapping_mul(4).wrapping_add(4))?;
        let (b1, b2) = (config.beta1, config.beta2);
        Ok(Self {
            opt_f: OptimizerState::new(&f.params, config.lr_potentials, b1, b2),
            opt_g: OptimizerState::new(&g.params, config.lr_potentials, b1, b2),
            opt_eta: OptimizerState::new(&eta.params, config.lr_rescalers, b1, b2),
            opt_zeta: OptimizerState::new(&zeta.params, config.lr_rescalers, b1, b2),
            f,
            g,
            eta,
            zeta,
            config,
            step: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.g.dim
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        model.f.validate()?;
        model.g.validate()?;
        model.eta.validate()?;
        model.zeta.validate()?;
        model.config.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Per-step record written to the diagnostics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// Step number after this update (1-based).
    pub step: u64,
    pub mode: Mode,
    pub j_value: f64,
    pub penalty: f64,
    pub eta_loss: Option<f64>,
    pub zeta_loss: Option<f64>,
    pub gamma1_mass: Option<f64>,
    pub gamma2_mass: Option<f64>,
    pub gamma1_converged: bool,
    pub gamma2_converged: bool,
    pub gamma1_iterations: usize,
    pub gamma2_iterations: usize,
    pub e_summary: (f64, f64, f64),
    pub z_summary: (f64, f64, f64),
    pub e_sum: f64,
    pub z_sum: f64,
    pub f_min_wz: f64,
}

impl StepDiagnostics {
    /// One JSON object followed by a newline.
    pub fn write_ndjson<W: Write>(&self, mut out: W) -> Result<()> {
        let line = serde_json::to_string(self)?;
        writeln!(out, "{line}").map_err(|e| Error::io("<diagnostics>", e))
    }
}

/// Everything a step computes besides the parameter updates.
#[derive(Clone, Debug)]
pub struct StepState {
    pub e: BatchWeights,
    pub z: BatchWeights,
    pub gamma1: Option<Coupling>,
    pub gamma2: Option<Coupling>,
}

/// `J` with `e`, `z` as constants.
pub fn objective_value(
    f: &IcnnPotential,
    g: &IcnnPotential,
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    e: ArrayView1<'_, f64>,
    z: ArrayView1<'_, f64>,
) -> Result<f64> {
    check_weights(x, e)?;
    check_weights(y, z)?;
    let yhat = g.gradient_map(x)?;
    let fy_hat = f.evaluate_batch(yhat.view())?;
    let inner = (&yhat * &x).sum_axis(Axis(1));
    let n = x.nrows() as f64;
    let m = y.nrows() as f64;
    let first = ((fy_hat - inner) * e).sum() / n;
    let second = f.evaluate_batch(y)?.dot(&z) / m;
    Ok(first - second)
}

/// `dJ/dtheta_g` at the current parameters.
pub fn objective_grad_g(
    f: &IcnnPotential,
    g: &IcnnPotential,
    x: ArrayView2<'_, f64>,
    e: ArrayView1<'_, f64>,
) -> Result<ParameterBlock> {
    check_weights(x, e)?;
    let yhat = g.gradient_map(x)?;
    let w = f.gradient_map(yhat.view())? - x;
    let c = &e / x.nrows() as f64;
    g.mixed_param_grad(x, w.view(), c.view())
}

/// `dJ/dtheta_f` given the mapped source points `yhat = grad g(x)`.
pub fn objective_grad_f(
    f: &IcnnPotential,
    yhat: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    e: ArrayView1<'_, f64>,
    z: ArrayView1<'_, f64>,
) -> Result<ParameterBlock> {
    check_weights(yhat, e)?;
    check_weights(y, z)?;
    let ce = &e / yhat.nrows() as f64;
    let cz = &z / y.nrows() as f64;
    let mut grad = f.value_param_grad(yhat, ce.view())?;
    grad.axpy(-1.0, &f.value_param_grad(y, cz.view())?)?;
    Ok(grad)
}

fn check_weights(x: ArrayView2<'_, f64>, w: ArrayView1<'_, f64>) -> Result<()> {
    if x.nrows() != w.len() {
        return Err(Error::LengthMismatch {
            expected: x.nrows(),
            found: w.len(),
        });
    }
    Ok(())
}

/// `J + R(g)` over the parameter blocks `[theta_f, theta_g]`, with data and
/// batch factors captured. Used for gradient checking.
pub struct PotentialObjective {
    pub f: IcnnPotential,
    pub g: IcnnPotential,
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub e: Array1<f64>,
    pub z: Array1<f64>,
    pub lambda: f64,
}

impl PotentialObjective {
    fn nets(&self, params: &[ParameterBlock]) -> (IcnnPotential, IcnnPotential) {
        let mut f = self.f.clone();
        let mut g = self.g.clone();
        f.params = params[0].clone();
        g.params = params[1].clone();
        (f, g)
    }
}

impl Objective for PotentialObjective {
    fn value(&self, params: &[ParameterBlock]) -> f64 {
        let (f, g) = self.nets(params);
        objective_value(&f, &g, self.x.view(), self.y.view(), self.e.view(), self.z.view())
            .expect("shapes checked at construction")
            + g.convexity_penalty(self.lambda)
    }

    fn gradient(&self, params: &[ParameterBlock]) -> Vec<ParameterBlock> {
        let (f, g) = self.nets(params);
        let yhat = g.gradient_map(self.x.view()).expect("shapes checked");
        let gf = objective_grad_f(&f, yhat.view(), self.y.view(), self.e.view(), self.z.view()).expect("shapes checked");
        let mut gg = objective_grad_g(&f, &g, self.x.view(), self.e.view()).expect("shapes checked");
        gg.axpy(1.0, &g.convexity_penalty_grad(self.lambda)).expect("same layout");
        vec![gf, gg]
    }
}

/// The two unbalanced solves and the resulting batch factors.
pub fn batch_factors(model: &NubotModel, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<StepState> {
    let cfg = model.config.sinkhorn();
    let (n, m) = (x.nrows(), y.nrows());
    let u = Array1::from_elem(n, 1.0 / n as f64);
    let v = Array1::from_elem(m, 1.0 / m as f64);
    let yhat = model.g.gradient_map(x)?;
    let xhat = model.f.gradient_map(y)?;
    let gamma1 = sinkhorn_unbalanced(u.view(), v.view(), &squared_cost(yhat.view(), y)?, &cfg)?;
    let gamma2 = sinkhorn_unbalanced(v.view(), u.view(), &squared_cost(xhat.view(), x)?, &cfg)?;
    let e = weights_from_coupling(&gamma1, n)?;
    let z = weights_from_coupling(&gamma2, m)?;
    Ok(StepState {
        e,
        z,
        gamma1: Some(gamma1),
        gamma2: Some(gamma2),
    })
}

fn check_finite(name: &str, block: &ParameterBlock) -> Result<()> {
    if block.iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite {name} parameters")))
    }
}

/// Potential updates shared by both modes: `g` steps first, then `f`
/// steps against the updated forward map.
fn update_potentials(
    model: &mut NubotModel,
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    e: ArrayView1<'_, f64>,
    z: ArrayView1<'_, f64>,
) -> Result<(f64, f64)> {
    let j_value = objective_value(&model.f, &model.g, x, y, e, z)?;
    let lambda = model.config.lambda_penalty;
    let penalty = model.g.convexity_penalty(lambda);

    for _ in 0..model.config.g_steps {
        let mut grad_g = objective_grad_g(&model.f, &model.g, x, e)?;
        grad_g.axpy(1.0, &model.g.convexity_penalty_grad(lambda))?;
        adam_step(&mut model.g.params, &grad_g, &mut model.opt_g)?;
        model.g.params.project_nonneg();
    }

    let yhat = model.g.gradient_map(x)?;
    let mut grad_f = objective_grad_f(&model.f, yhat.view(), y, e, z)?;
    grad_f.scale(-1.0);
    adam_step(&mut model.f.params, &grad_f, &mut model.opt_f)?;
    model.f.convexity_project();

    check_finite("g", &model.g.params)?;
    check_finite("f", &model.f.params)?;
    Ok((j_value, penalty))
}

fn check_batches(x: &WeightedPointCloud, y: &WeightedPointCloud, dim: usize) -> Result<()> {
    for cloud in [x, y] {
        if cloud.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: cloud.dim(),
            });
        }
        if cloud.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let first = cloud.masses()[0];
        if cloud.masses().iter().any(|&w| (w - first).abs() > 1e-12 * first.abs().max(1.0)) {
            return Err(Error::invalid("batch masses must be uniform"));
        }
    }
    Ok(())
}

/// One unbalanced training step.
pub fn nubot_step(
    model: &mut NubotModel,
    batch_x: &WeightedPointCloud,
    batch_y: &WeightedPointCloud,
) -> Result<(StepDiagnostics, StepState)> {
    check_batches(batch_x, batch_y, model.dim())?;
    let (x, y) = (batch_x.points(), batch_y.points());
    let state = batch_factors(model, x, y)?;
    let (e, z) = (state.e.values(), state.z.values());

    let (j_value, penalty) = update_potentials(model, x, y, e, z)?;

    let (eta_loss, grad_eta) = model.eta.regression_grad(x, e)?;
    adam_step(&mut model.eta.params, &grad_eta, &mut model.opt_eta)?;
    let (zeta_loss, grad_zeta) = model.zeta.regression_grad(y, z)?;
    adam_step(&mut model.zeta.params, &grad_zeta, &mut model.opt_zeta)?;
    check_finite("eta", &model.eta.params)?;
    check_finite("zeta", &model.zeta.params)?;

    model.step += 1;
    let g1 = state.gamma1.as_ref().expect("set by batch_factors");
    let g2 = state.gamma2.as_ref().expect("set by batch_factors");
    let diag = StepDiagnostics {
        step: model.step,
        mode: Mode::Nubot,
        j_value,
        penalty,
        eta_loss: Some(eta_loss),
        zeta_loss: Some(zeta_loss),
        gamma1_mass: Some(g1.total_mass()),
        gamma2_mass: Some(g2.total_mass()),
        gamma1_converged: g1.converged,
        gamma2_converged: g2.converged,
        gamma1_iterations: g1.iterations,
        gamma2_iterations: g2.iterations,
        e_summary: state.e.summary(),
        z_summary: state.z.summary(),
        e_sum: e.sum(),
        z_sum: z.sum(),
        f_min_wz: model.f.min_wz(),
    };
    Ok((diag, state))
}

/// One balanced step: `e = z = 1`, no solves, rescalers untouched.
pub fn cellot_step(
    model: &mut NubotModel,
    batch_x: &WeightedPointCloud,
    batch_y: &WeightedPointCloud,
) -> Result<StepDiagnostics> {
    check_batches(batch_x, batch_y, model.dim())?;
    let (x, y) = (batch_x.points(), batch_y.points());
    let e = BatchWeights::ones(x.nrows());
    let z = BatchWeights::ones(y.nrows());
    let (j_value, penalty) = update_potentials(model, x, y, e.values(), z.values())?;
    model.step += 1;
    Ok(StepDiagnostics {
        step: model.step,
        mode: Mode::Cellot,
        j_value,
        penalty,
        eta_loss: None,
        zeta_loss: None,
        gamma1_mass: None,
        gamma2_mass: None,
        gamma1_converged: true,
        gamma2_converged: true,
        gamma1_iterations: 0,
        gamma2_iterations: 0,
        e_summary: e.summary(),
        z_summary: z.summary(),
        e_sum: x.nrows() as f64,
        z_sum: y.nrows() as f64,
        f_min_wz: model.f.min_wz(),
    })
}

/// Seeds for the two batch streams; steps index the ChaCha stream.
fn batch_seeds(seed: u64) -> (u64, u64) {
    (seed.wrapping_mul(2).wrapping_add(11), seed.wrapping_mul(2).wrapping_add(12))
}

/// Draws the batches used at `step` (0-based).
pub fn draw_batches(
    config: &TrainConfig,
    source: &WeightedPointCloud,
    target: &WeightedPointCloud,
    step: u64,
) -> Result<(WeightedPointCloud, WeightedPointCloud)> {
    let (sx, sy) = batch_seeds(config.seed);
    let bx = sample_batch(source, config.batch_source, sx, step, Sampling::WithReplacement)?;
    let by = sample_batch(target, config.batch_target, sy, step, Sampling::WithReplacement)?;
    Ok((bx, by))
}

/// Runs steps until `model.step == model.config.steps`, calling `observer`
/// after each one. Batches depend only on the seed and the step number, so
/// a resumed run continues the original batch sequence.
pub fn train_model<F>(
    model: &mut NubotModel,
    source: &WeightedPointCloud,
    target: &WeightedPointCloud,
    mut observer: F,
) -> Result<()>
where
    F: FnMut(&StepDiagnostics, &NubotModel) -> Result<()>,
{
    if source.is_empty() || target.is_empty() {
        return Err(Error::invalid("training clouds must be nonempty"));
    }
    while model.step < model.config.steps {
        let (bx, by) = draw_batches(&model.config, source, target, model.step)?;
        let diag = match model.config.mode {
            Mode::Nubot => nubot_step(model, &bx, &by)?.0,
            Mode::Cellot => cellot_step(model, &bx, &by)?,
        };
        observer(&diag, model)?;
    }
    Ok(())
}

/// Fresh model trained for `config.steps` steps.
pub fn train(config: TrainConfig, source: &WeightedPointCloud, target: &WeightedPointCloud) -> Result<NubotModel> {
    if source.dim() != target.dim() {
        return Err(Error::DimensionMismatch {
            expected: source.dim(),
            found: target.dim(),
        });
    }
    let mut model = NubotModel::new(source.dim(), config)?;
    train_model(&mut model, source, target, |_, _| Ok(()))?;
    Ok(model)
}

/// `1/2 E|x|^2 + 1/2 E|y|^2 + J` with uniform weights. Estimates half the
/// squared Wasserstein distance when the potentials are optimal.
pub fn dual_objective_value(model: &NubotModel, batch_x: ArrayView2<'_, f64>, batch_y: ArrayView2<'_, f64>) -> Result<f64> {
    let half_mean_sq = |p: ArrayView2<'_, f64>| 0.5 * p.map_axis(Axis(1), |r| r.dot(&r)).mean().unwrap_or(0.0);
    let e = Array1::ones(batch_x.nrows());
    let z = Array1::ones(batch_y.nrows());
    let j = objective_value(&model.f, &model.g, batch_x, batch_y, e.view(), z.view())?;
    Ok(half_mean_sq(batch_x) + half_mean_sq(batch_y) + j)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffengine::{finite_difference_check, FdOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_cloud(n: usize, dim: usize, seed: u64, offset: f64) -> WeightedPointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = Array2::from_shape_simple_fn((n, dim), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            z + offset
        });
        WeightedPointCloud::uniform(pts, None).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            hidden: vec![8, 8],
            rescaler_width: 8,
            batch_source: 32,
            batch_target: 32,
            steps: 3,
            ..Default::default()
        }
    }

    #[test]
    fn identical_batches_need_no_rebalancing() {
        let x = normal_cloud(64, 2, 1, 0.0);
        let mut model = NubotModel::new(2, small_config()).unwrap();
        let j_before = objective_value(
            &model.f,
            &model.g,
            x.points(),
            x.points(),
            Array1::ones(64).view(),
            Array1::ones(64).view(),
        )
        .unwrap();
        let (diag, state) = nubot_step(&mut model, &x, &x).unwrap();
        for w in state.e.0.iter().chain(state.z.0.iter()) {
            assert!((w - 1.0).abs() < 0.05, "{w}");
        }
        assert!((diag.j_value - j_before).abs() < 1e-3 * j_before.abs());
    }

    #[test]
    fn weights_sum_to_batch_size_and_f_stays_convex() {
        let src = normal_cloud(200, 2, 2, 0.0);
        let tgt = normal_cloud(200, 2, 3, 1.5);
        let mut model = NubotModel::new(2, small_config()).unwrap();
        train_model(&mut model, &src, &tgt, |d, m| {
            assert!((d.e_sum - 32.0).abs() < 1e-9);
            assert!((d.z_sum - 32.0).abs() < 1e-9);
            assert!((d.e_summary.1 - 1.0).abs() < 1e-6);
            assert!(m.f.min_wz() >= 0.0);
            Ok(())
        })
        .unwrap();
        assert_eq!(model.step, 3);
    }

    #[test]
    fn replay_is_deterministic() {
        let src = normal_cloud(100, 2, 4, 0.0);
        let tgt = normal_cloud(100, 2, 5, 1.0);
        let run = || {
            let mut model = NubotModel::new(2, small_config()).unwrap();
            let mut log = Vec::new();
            train_model(&mut model, &src, &tgt, |d, _| {
                log.push(d.clone());
                Ok(())
            })
            .unwrap();
            (model, log)
        };
        let (m1, l1) = run();
        let (m2, l2) = run();
        assert_eq!(l1, l2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn resume_continues_the_same_run() {
        let src = normal_cloud(100, 2, 6, 0.0);
        let tgt = normal_cloud(100, 2, 7, 1.0);
        let full = train(small_config(), &src, &tgt).unwrap();
        let mut part = train(TrainConfig { steps: 1, ..small_config() }, &src, &tgt).unwrap();
        let mut resumed = NubotModel::from_json(&part.to_json().unwrap()).unwrap();
        resumed.config.steps = 3;
        part.config.steps = 3;
        train_model(&mut resumed, &src, &tgt, |_, _| Ok(())).unwrap();
        assert_eq!(resumed, full);
    }

    #[test]
    fn zero_steps_returns_initial_model() {
        let src = normal_cloud(50, 2, 8, 0.0);
        let cfg = TrainConfig { steps: 0, ..small_config() };
        let model = train(cfg.clone(), &src, &src).unwrap();
        assert_eq!(model, NubotModel::new(2, cfg).unwrap());
        let mapped = model.g.gradient_map(src.points()).unwrap();
        let dev = (&mapped - &src.points()).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
        assert!(dev < 1e-3, "{dev}");
    }

    #[test]
    fn cellot_is_nubot_with_unit_weights() {
        let x = normal_cloud(32, 2, 9, 0.0);
        let y = normal_cloud(32, 2, 10, 2.0);
        let cfg = TrainConfig { lr_rescalers: 0.0, ..small_config() };
        let base = NubotModel::new(2, cfg).unwrap();
        let mut a = base.clone();
        cellot_step(&mut a, &x, &y).unwrap();
        let mut b = base.clone();
        let ones = Array1::ones(32);
        update_potentials(&mut b, x.points(), y.points(), ones.view(), ones.view()).unwrap();
        for (pa, pb) in [(&a.f.params, &b.f.params), (&a.g.params, &b.g.params)] {
            let mut d = pa.clone();
            d.axpy(-1.0, pb).unwrap();
            assert!(d.norm() < 1e-10);
        }
        assert_eq!(a.eta, base.eta);
        assert_eq!(a.zeta, base.zeta);
    }

    #[test]
    fn first_step_moves_each_parameter_by_at_most_lr() {
        let x = normal_cloud(32, 2, 11, 0.0);
        let cfg = TrainConfig {
            g_steps: 1,
            ..small_config()
        };
        let base = NubotModel::new(2, cfg).unwrap();
        let mut m = base.clone();
        cellot_step(&mut m, &x, &x).unwrap();
        let lr = base.config.lr_potentials;
        for (after, before) in [(&m.f.params, &base.f.params), (&m.g.params, &base.g.params)] {
            for k in 0..before.num_params() {
                assert!((after.get(k) - before.get(k)).abs() <= lr * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn potential_gradients_match_finite_differences() {
        let x = normal_cloud(12, 2, 12, 0.0);
        let y = normal_cloud(10, 2, 13, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut rough = |seed: u64| {
            let mut p = IcnnPotential::init_identity(2, &[6, 5], seed)
                .unwrap()
                .with_activation(Activation::Softplus)
                .with_enforcement(Enforcement::Penalty);
            for k in 0..p.params.num_params() {
                let z: f64 = StandardNormal.sample(&mut rng);
                p.params.set(k, 0.5 * z);
            }
            p
        };
        let f = rough(1);
        let g = rough(2);
        let obj = PotentialObjective {
            x: x.points().to_owned(),
            y: y.points().to_owned(),
            e: Array1::linspace(0.5, 1.5, 12),
            z: Array1::linspace(1.2, 0.8, 10),
            lambda: 0.7,
            f: f.clone(),
            g: g.clone(),
        };
        let report = finite_difference_check(
            &obj,
            &[f.params.clone(), g.params.clone()],
            &FdOptions { step: 3e-4, ..Default::default() },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn dual_value_vanishes_at_identity() {
        let cfg = TrainConfig { hidden: vec![64; 4], ..Default::default() };
        let model = NubotModel::new(3, cfg).unwrap();
        let x = normal_cloud(1000, 3, 15, 0.0);
        let y = normal_cloud(1000, 3, 16, 0.0);
        let v = dual_objective_value(&model, x.points(), y.points()).unwrap();
        assert!(v.abs() < 0.1, "{v}");
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(TrainConfig { g_steps: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { epsilon: 0.0, ..Default::default() }.validate().is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
        let cfg: TrainConfig = serde_json::from_str(r#"{"steps": 5, "mode": "cellot"}"#).unwrap();
        assert_eq!((cfg.steps, cfg.mode, cfg.lr_potentials), (5, Mode::Cellot, 1e-4));
    }
}
