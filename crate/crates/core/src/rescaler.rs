//! Positive scalar fields `eta`, `zeta` fitted to batch reweighting factors.
//!
//! Two hidden layers and a softplus head: `r(x) = softplus(w2 h2 + b2) + floor`.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffengine::{ParameterBlock, Tensor};
use crate::error::{Error, Result};
use crate::icnn::{sigmoid, softplus, Activation};

pub const DEFAULT_OUTPUT_FLOOR: f64 = 1e-6;
/// Hidden width used for the low-dimensional synthetic data.
pub const SYNTHETIC_WIDTH: usize = 32;
/// Hidden width used for high-dimensional measurements.
pub const WIDE_WIDTH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RescalerNet {
    pub dim: usize,
    pub width: usize,
    pub activation: Activation,
    pub output_floor: f64,
    /// Tensors `w0, b0, w1, b1, w2, b2`.
    pub params: ParameterBlock,
}

struct Trace {
    pre: [Array2<f64>; 3],
    post: [Array2<f64>; 2],
}

impl RescalerNet {
    /// Uniform `+-1/sqrt(fan_in)` weights and biases.
    pub fn new(dim: usize, width: usize, seed: u64) -> Result<Self> {
        if dim == 0 || width == 0 {
            return Err(Error::invalid("rescaler dimension and width must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = [(width, dim), (width, width), (1, width)];
        let mut tensors = Vec::with_capacity(6);
        for (l, &(rows, cols)) in shapes.iter().enumerate() {
            let bound = 1.0 / (cols as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let mut w = Tensor::zeros(format!("w{l}"), &[rows, cols], false);
            w.data.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
            let mut b = Tensor::zeros(format!("b{l}"), &[rows], false);
            b.data.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
            tensors.push(w);
            tensors.push(b);
        }
        Ok(Self {
            dim,
            width,
            activation: Activation::Rectifier,
            output_floor: DEFAULT_OUTPUT_FLOOR,
            params: ParameterBlock::new(tensors),
        })
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    fn check_dim(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.ncols(),
            });
        }
        Ok(())
    }

    fn forward(&self, x: ArrayView2<'_, f64>) -> Trace {
        let t = &self.params.tensors;
        let layer = |input: &ArrayView2<'_, f64>, l: usize| {
            let mut a = input.dot(&t[2 * l].matrix().t());
            a += &t[2 * l + 1].vector();
            a
        };
        let a0 = layer(&x, 0);
        let h0 = a0.mapv(|v| self.activation.value(v));
        let a1 = layer(&h0.view(), 1);
        let h1 = a1.mapv(|v| self.activation.value(v));
        let a2 = layer(&h1.view(), 2);
        Trace {
            pre: [a0, a1, a2],
            post: [h0, h1],
        }
    }

    /// Positive factors, one per row of `x`.
    pub fn evaluate_weights(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        self.check_dim(x)?;
        let trace = self.forward(x);
        Ok(trace.pre[2].column(0).mapv(|a| softplus(a) + self.output_floor))
    }

    /// Mean squared error against `targets`.
    pub fn regression_loss(&self, x: ArrayView2<'_, f64>, targets: ArrayView1<'_, f64>) -> Result<f64> {
        self.check_targets(x, targets)?;
        let pred = self.evaluate_weights(x)?;
        let n = x.nrows() as f64;
        Ok(pred.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n)
    }

    /// Gradient of [`RescalerNet::regression_loss`] with respect to the
    /// parameters, returned with the loss value.
    pub fn regression_grad(
        &self,
        x: ArrayView2<'_, f64>,
        targets: ArrayView1<'_, f64>,
    ) -> Result<(f64, ParameterBlock)> {
        self.check_targets(x, targets)?;
        self.check_dim(x)?;
        let n = x.nrows() as f64;
        let trace = self.forward(x);
        let a2 = trace.pre[2].column(0);
        let mut loss = 0.0;
        let mut abar = Array2::zeros((x.nrows(), 1));
        for i in 0..x.nrows() {
            let r = softplus(a2[i]) + self.output_floor - targets[i];
            loss += r * r;
            abar[[i, 0]] = 2.0 * r / n * sigmoid(a2[i]);
        }
        let mut grad = self.params.zeros_like();
        let inputs = [x.view(), trace.post[0].view(), trace.post[1].view()];
        for l in (0..3).rev() {
            grad.tensors[2 * l].matrix_mut().assign(&abar.t().dot(&inputs[l]));
            grad.tensors[2 * l + 1].data = abar.sum_axis(Axis(0)).to_vec();
            if l > 0 {
                let mut next = abar.dot(&self.params.tensors[2 * l].matrix());
                Zip::from(&mut next)
                    .and(&trace.pre[l - 1])
                    .for_each(|g, &a| *g *= self.activation.first(a));
                abar = next;
            }
        }
        Ok((loss / n, grad))
    }

    fn check_targets(&self, x: ArrayView2<'_, f64>, targets: ArrayView1<'_, f64>) -> Result<()> {
        if x.nrows() != targets.len() {
            return Err(Error::LengthMismatch {
                expected: x.nrows(),
                found: targets.len(),
            });
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut shell = Self::new(self.dim, self.width, 0)?.params;
        for t in &mut shell.tensors {
            t.nonneg = false;
        }
        shell.check_layout(&self.params)?;
        for t in &self.params.tensors {
            if t.data.len() != t.shape.iter().product::<usize>() {
                return Err(Error::invalid(format!("tensor {} has inconsistent data length", t.name)));
            }
        }
        if !(self.output_floor > 0.0) {
            return Err(Error::invalid("output floor must be positive"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let net: Self = serde_json::from_str(text)?;
        net.validate()?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffengine::{adam_step, finite_difference_check, FdOptions, Objective, OptimizerState};
    use ndarray::{array, s};
    use rand_distr::StandardNormal;

    fn points(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn zero_network_outputs_log_two() {
        let mut net = RescalerNet::new(2, 8, 0).unwrap();
        net.params.scale(0.0);
        let w = net.evaluate_weights(array![[1.0, -4.0]].view()).unwrap();
        assert!((w[0] - (2f64.ln() + 1e-6)).abs() < 1e-15);
    }

    #[test]
    fn outputs_are_positive() {
        let mut net = RescalerNet::new(3, 16, 1).unwrap();
        // Push the head strongly negative.
        net.params.tensor_mut("b2").data[0] = -1e3;
        let x = points(100_000, 3, 2) * 10.0;
        let w = net.evaluate_weights(x.view()).unwrap();
        assert!(w.iter().all(|&v| v >= net.output_floor && v > 0.0));
    }

    #[test]
    fn batch_matches_single() {
        let net = RescalerNet::new(2, 8, 3).unwrap();
        let x = points(5, 2, 4);
        let all = net.evaluate_weights(x.view()).unwrap();
        for i in 0..5 {
            assert_eq!(all[i], net.evaluate_weights(x.slice(s![i..i + 1, ..])).unwrap()[0]);
        }
    }

    #[test]
    fn loss_examples() {
        let net = RescalerNet::new(2, 8, 5).unwrap();
        let x = points(10, 2, 6);
        let p = net.evaluate_weights(x.view()).unwrap();
        assert_eq!(net.regression_loss(x.view(), p.view()).unwrap(), 0.0);
        let shifted = &p + 1.0;
        assert!((net.regression_loss(x.view(), shifted.view()).unwrap() - 1.0).abs() < 1e-12);
        let perm: Vec<usize> = (0..10).rev().collect();
        let xp = x.select(Axis(0), &perm);
        let tp = shifted.select(Axis(0), &perm);
        let a = net.regression_loss(x.view(), shifted.view()).unwrap();
        let b = net.regression_loss(xp.view(), tp.view()).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(net.regression_loss(x.view(), p.slice(s![..3])).is_err());
    }

    struct Loss {
        x: Array2<f64>,
        t: Array1<f64>,
        template: RescalerNet,
    }

    impl Objective for Loss {
        fn value(&self, params: &[ParameterBlock]) -> f64 {
            let mut net = self.template.clone();
            net.params = params[0].clone();
            net.regression_loss(self.x.view(), self.t.view()).unwrap()
        }
        fn gradient(&self, params: &[ParameterBlock]) -> Vec<ParameterBlock> {
            let mut net = self.template.clone();
            net.params = params[0].clone();
            vec![net.regression_grad(self.x.view(), self.t.view()).unwrap().1]
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let net = RescalerNet::new(2, 12, 7).unwrap().with_activation(Activation::Softplus);
        let x = points(30, 2, 8);
        let t = Array1::from_shape_fn(30, |i| 0.2 + 0.1 * i as f64);
        let obj = Loss { x, t, template: net.clone() };
        let opts = FdOptions {
            step: 1e-5,
            max_coords: 256,
            ..FdOptions::default()
        };
        let r = finite_difference_check(&obj, &[net.params], &opts).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn fits_cluster_constant_targets() {
        // Three well separated blobs with factors 1.35, 1.35, 0.3.
        let centres = [[0.0, 0.0], [8.0, 0.0], [4.0, 7.0]];
        let factors = [1.35, 1.35, 0.30];
        let noise = points(300, 2, 9) * 0.7;
        let mut x = Array2::zeros((300, 2));
        let mut t = Array1::zeros(300);
        for i in 0..300 {
            let k = i % 3;
            x[[i, 0]] = centres[k][0] + noise[[i, 0]];
            x[[i, 1]] = centres[k][1] + noise[[i, 1]];
            t[i] = factors[k];
        }
        let mut net = RescalerNet::new(2, SYNTHETIC_WIDTH, 10).unwrap();
        let mut opt = OptimizerState::new(&net.params, 1e-3, 0.5, 0.9);
        for _ in 0..2000 {
            let (_, g) = net.regression_grad(x.view(), t.view()).unwrap();
            adam_step(&mut net.params, &g, &mut opt).unwrap();
        }
        let loss = net.regression_loss(x.view(), t.view()).unwrap();
        assert!(loss < 1e-2, "{loss}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = RescalerNet::new(4, 6, 11).unwrap();
        assert_eq!(RescalerNet::from_json(&net.to_json().unwrap()).unwrap(), net);
    }
}
