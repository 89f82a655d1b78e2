//! Self-checks against independent references: the closed-form single-pair
//! unbalanced plan, exhaustive grid search on tiny instances, the balanced
//! limit, and finite-difference gradient checks.

use ndarray::{array, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::diffengine::{finite_difference_check, FdOptions, Objective, ParameterBlock};
use crate::error::Result;
use crate::icnn::{Activation, Enforcement, IcnnPotential};
use crate::otcore::{
    oracle_grid_search, sinkhorn_balanced, sinkhorn_unbalanced, squared_cost, transport_objective, CostMatrix, Metric,
    SinkhornConfig,
};
use crate::rescaler::RescalerNet;
use crate::trainer::PotentialObjective;

/// Outcome of one check: `value` is compared against `threshold`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleCheck {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl OracleCheck {
    fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            pass: value <= threshold,
        }
    }
}

/// `(uv)^(tau/(2 tau + eps)) exp(-c/(2 tau + eps))`.
pub fn closed_form_single_mass(c: f64, tau: f64, eps: f64, u: f64, v: f64) -> f64 {
    let d = 2.0 * tau + eps;
    (u * v).powf(tau / d) * (-c / d).exp()
}

/// Largest deviation between the solver and the closed form over a 5x5
/// grid of `(c, tau)` at each of five values of `eps`, with `u = 0.7`,
/// `v = 1.3`.
pub fn closed_form_gap() -> Result<f64> {
    let (u, v) = (0.7, 1.3);
    let mut worst: f64 = 0.0;
    for &eps in &[0.001, 0.005, 0.02, 0.1, 0.5] {
        for &c in &[0.0, 0.05, 0.3, 1.0, 2.5] {
            for &tau in &[0.01, 0.05, 0.2, 1.0, 5.0] {
                let cost = CostMatrix {
                    values: array![[c]],
                    metric: Metric::SquaredEuclidean,
                };
                let cfg = SinkhornConfig {
                    epsilon: eps,
                    tau1: tau,
                    tau2: tau,
                    tolerance: 1e-13,
                    max_iterations: 200_000,
                };
                let p = sinkhorn_unbalanced(array![u].view(), array![v].view(), &cost, &cfg)?;
                worst = worst.max((p.plan[[0, 0]] - closed_form_single_mass(c, tau, eps, u, v)).abs());
            }
        }
    }
    Ok(worst)
}

/// A small transport instance.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub name: &'static str,
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub u: Array1<f64>,
    pub v: Array1<f64>,
}

/// Instances with at most nine plan entries.
pub fn tiny_fixtures() -> Vec<Fixture> {
    vec![
        Fixture {
            name: "1x2",
            x: array![[0.0]],
            y: array![[0.2], [0.5]],
            u: array![1.0],
            v: array![0.4, 0.6],
        },
        Fixture {
            name: "2x2",
            x: array![[0.0, 0.0], [0.3, 0.1]],
            y: array![[0.1, 0.0], [0.2, 0.3]],
            u: array![0.5, 0.5],
            v: array![0.3, 0.7],
        },
        Fixture {
            name: "2x3",
            x: array![[0.0], [0.4]],
            y: array![[0.1], [0.3], [0.6]],
            u: array![0.6, 0.4],
            v: array![0.2, 0.5, 0.3],
        },
        Fixture {
            name: "3x1",
            x: array![[0.0, 0.1], [0.2, 0.0], [0.1, 0.3]],
            y: array![[0.1, 0.1]],
            u: array![0.2, 0.3, 0.5],
            v: array![1.0],
        },
        Fixture {
            name: "3x3",
            x: array![[0.0, 0.0], [0.3, 0.0], [0.0, 0.3]],
            y: array![[0.05, 0.02], [0.28, 0.1], [0.02, 0.35]],
            u: array![0.3, 0.3, 0.4],
            v: array![0.5, 0.25, 0.25],
        },
    ]
}

/// 3x3 instances for the balanced limit.
pub fn balanced_fixtures() -> Vec<Fixture> {
    vec![
        Fixture {
            name: "spread",
            x: array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            y: array![[0.2, 0.1], [0.9, 0.3], [0.1, 1.2]],
            u: array![0.3, 0.3, 0.4],
            v: array![0.5, 0.25, 0.25],
        },
        Fixture {
            name: "line",
            x: array![[0.0], [0.5], [1.0]],
            y: array![[0.25], [0.75], [1.25]],
            u: array![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            v: array![0.2, 0.3, 0.5],
        },
    ]
}

/// `objective(sinkhorn) - objective(grid search)` per tiny fixture at
/// `eps = 0.05`, `tau = 0.5`.
pub fn grid_gaps() -> Result<Vec<(&'static str, f64)>> {
    let cfg = SinkhornConfig {
        epsilon: 0.05,
        tau1: 0.5,
        tau2: 0.5,
        tolerance: 1e-12,
        max_iterations: 100_000,
    };
    tiny_fixtures()
        .into_iter()
        .map(|fx| {
            let c = squared_cost(fx.x.view(), fx.y.view())?;
            let s = sinkhorn_unbalanced(fx.u.view(), fx.v.view(), &c, &cfg)?;
            let o = oracle_grid_search(fx.u.view(), fx.v.view(), &c, &cfg)?;
            let vs = transport_objective(s.plan.view(), fx.u.view(), fx.v.view(), &c, &cfg);
            let vo = transport_objective(o.plan.view(), fx.u.view(), fx.v.view(), &c, &cfg);
            Ok((fx.name, vs - vo))
        })
        .collect()
}

/// Max-abs gap between the balanced plan and the unbalanced plan at
/// `tau = 1e3 * max(C)`.
pub fn balanced_limit_gaps() -> Result<Vec<(&'static str, f64)>> {
    balanced_fixtures()
        .into_iter()
        .map(|fx| {
            let c = squared_cost(fx.x.view(), fx.y.view())?;
            let bal_cfg = SinkhornConfig {
                tolerance: 1e-10,
                max_iterations: 100_000,
                ..SinkhornConfig::balanced(0.05)
            };
            let unb_cfg = SinkhornConfig {
                epsilon: 0.05,
                tolerance: 1e-10,
                max_iterations: 100_000,
                ..SinkhornConfig::default()
            }
            .with_tau(1e3 * c.max());
            let bal = sinkhorn_balanced(fx.u.view(), fx.v.view(), &c, &bal_cfg)?;
            let unb = sinkhorn_unbalanced(fx.u.view(), fx.v.view(), &c, &unb_cfg)?;
            let gap = (&bal.plan - &unb.plan).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
            Ok((fx.name, gap))
        })
        .collect()
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// Softplus potential with O(1) random weights; `Wz` kept nonnegative.
fn rough_potential(dim: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Result<IcnnPotential> {
    let mut p = IcnnPotential::init_identity(dim, hidden, 0)?
        .with_activation(Activation::Softplus)
        .with_enforcement(Enforcement::Penalty);
    for k in 0..p.params.num_params() {
        let z: f64 = StandardNormal.sample(rng);
        p.params.set(k, 0.5 * z);
    }
    Ok(p)
}

/// Largest relative error between `grad psi` and central differences of
/// `psi` over random inputs.
pub fn gradient_map_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let psi = rough_potential(3, &[16, 16, 8], &mut rng)?;
    let x = normal_matrix(&mut rng, 50, 3, 1.0);
    let grad = psi.gradient_map(x.view())?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, row) in x.rows().into_iter().enumerate() {
        for d in 0..3 {
            let mut plus = row.to_owned();
            let mut minus = row.to_owned();
            plus[d] += h;
            minus[d] -= h;
            let fd = (psi.evaluate(plus.view())? - psi.evaluate(minus.view())?) / (2.0 * h);
            let a = grad[[i, d]];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
        }
    }
    Ok(worst)
}

struct RescalerLoss {
    net: RescalerNet,
    x: Array2<f64>,
    t: Array1<f64>,
}

impl Objective for RescalerLoss {
    fn value(&self, params: &[ParameterBlock]) -> f64 {
        let mut net = self.net.clone();
        net.params = params[0].clone();
        net.regression_loss(self.x.view(), self.t.view()).expect("shapes fixed")
    }

    fn gradient(&self, params: &[ParameterBlock]) -> Vec<ParameterBlock> {
        let mut net = self.net.clone();
        net.params = params[0].clone();
        vec![net.regression_grad(self.x.view(), self.t.view()).expect("shapes fixed").1]
    }
}

/// Relative finite-difference errors of the potential game `J + R` (over
/// `[theta_f, theta_g]`) and the rescaler regression loss, softplus mode,
/// at least 64 coordinates per block.
pub fn trainer_loss_errors(seed: u64) -> Result<Vec<(&'static str, f64, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = rough_potential(2, &[8, 6], &mut rng)?;
    let g = rough_potential(2, &[8, 6], &mut rng)?;
    let n = 16;
    let m = 12;
    let x = normal_matrix(&mut rng, n, 2, 1.0);
    let y = normal_matrix(&mut rng, m, 2, 1.0) + 0.5;
    let e = Array1::linspace(0.4, 1.7, n);
    let z = Array1::linspace(1.3, 0.6, m);
    let opts = FdOptions {
        step: 3e-4,
        max_coords: 128,
        seed,
        ..Default::default()
    };
    let game = PotentialObjective {
        f: f.clone(),
        g: g.clone(),
        x: x.clone(),
        y,
        e: e.clone(),
        z,
        lambda: 0.7,
    };
    let r_game = finite_difference_check(&game, &[f.params.clone(), g.params.clone()], &opts)?;

    let net = RescalerNet::new(2, 16, seed)?.with_activation(Activation::Softplus);
    let loss = RescalerLoss {
        net: net.clone(),
        x,
        t: e,
    };
    let r_resc = finite_difference_check(&loss, std::slice::from_ref(&net.params), &opts)?;
    Ok(vec![
        ("potential_game", r_game.max_rel_error, r_game.coords_checked),
        ("rescaler_regression", r_resc.max_rel_error, r_resc.coords_checked),
    ])
}

/// Runs every check.
pub fn run_suite(seed: u64) -> Result<Vec<OracleCheck>> {
    let mut out = vec![OracleCheck::at_most("closed_form_1x1", closed_form_gap()?, 1e-6)];
    for (name, gap) in grid_gaps()? {
        out.push(OracleCheck::at_most(format!("grid_oracle_{name}"), gap, 1e-3));
    }
    for (name, gap) in balanced_limit_gaps()? {
        out.push(OracleCheck::at_most(format!("balanced_limit_{name}"), gap, 1e-3));
    }
    out.push(OracleCheck::at_most("gradient_map_fd", gradient_map_error(seed)?, 1e-6));
    for (name, err, _) in trainer_loss_errors(seed)? {
        out.push(OracleCheck::at_most(format!("fd_{name}"), err, 1e-5));
    }
    Ok(out)
}
