//! Input-convex potentials `psi(x) = z_L(x) + s * |x|^2 / 2`.
//!
//! Hidden layers follow `z_{l+1} = sigma(Wx_l x + Wz_l z_l + b_l)` with
//! `z_0 = 0`; the last layer has width one and no activation. Convexity in
//! `x` holds whenever every `Wz_l` is entrywise nonnegative and `s >= 0`.
//!
//! Besides evaluation and the transport map `x -> grad psi(x)`, this module
//! provides the two parameter gradients the trainer needs:
//! [`IcnnPotential::value_param_grad`] for `sum_i c_i psi(x_i)` and
//! [`IcnnPotential::mixed_param_grad`] for `sum_i c_i <w_i, grad psi(x_i)>`.
//! The latter is a forward tangent pass followed by a reverse sweep through
//! both the primal and tangent chains.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffengine::{ParameterBlock, Tensor};
use crate::error::{Error, Result};

/// Hidden-layer nonlinearity. Both are convex and nondecreasing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Rectifier,
    Softplus,
}

impl Activation {
    pub fn value(self, a: f64) -> f64 {
        match self {
            Activation::Rectifier => a.max(0.0),
            Activation::Softplus => softplus(a),
        }
    }

    pub fn first(self, a: f64) -> f64 {
        match self {
            Activation::Rectifier => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(a),
        }
    }

    pub fn second(self, a: f64) -> f64 {
        match self {
            Activation::Rectifier => 0.0,
            Activation::Softplus => {
                let s = sigmoid(a);
                s * (1.0 - s)
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rectifier" | "relu" => Ok(Activation::Rectifier),
            "softplus" => Ok(Activation::Softplus),
            other => Err(Error::invalid(format!("unknown activation {other:?}"))),
        }
    }
}

pub fn softplus(a: f64) -> f64 {
    if a > 0.0 {
        a + (-a).exp().ln_1p()
    } else {
        a.exp().ln_1p()
    }
}

pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// How nonnegativity of the `Wz` weights is maintained during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Enforcement {
    /// Negative entries are set to zero after each optimiser step.
    Clamp,
    /// Negative entries are discouraged by a quadratic penalty.
    Penalty,
}

/// Default hidden widths.
pub const DEFAULT_HIDDEN: [usize; 4] = [64, 64, 64, 64];

/// Scale of the output-layer weights at initialisation.
const INIT_SCALE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcnnPotential {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub quadratic_skip_coefficient: f64,
    pub enforcement: Enforcement,
    /// Tensors `wx{l}`, `wz{l}`, `b{l}` for each layer `l`; `wz0` has zero
    /// columns.
    pub params: ParameterBlock,
}

/// Per-layer activations kept for the backward passes.
struct Trace {
    /// Pre-activations `A_l`, batch x width.
    pre: Vec<Array2<f64>>,
    /// Layer inputs `Z_l`; `post[0]` has zero columns.
    post: Vec<Array2<f64>>,
}

impl IcnnPotential {
    /// Quadratic skip with coefficient 1 plus a network whose output layer
    /// is scaled down to `INIT_SCALE`, so that `grad psi(x)` starts out
    /// within about `1e-3` of `x`. Hidden layers get ordinary fan-in scaled
    /// weights (nonnegative for `Wz`) so the features are well conditioned
    /// from the first step.
    pub fn init_identity(dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if dim == 0 || hidden.contains(&0) {
            return Err(Error::invalid("dimension and hidden widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Uniform::new_inclusive(-1.0, 1.0);
        let widths = Self::widths_of(hidden);
        let last = widths.len() - 1;
        let mut tensors = Vec::with_capacity(3 * widths.len());
        let mut prev = 0;
        for (l, &h) in widths.iter().enumerate() {
            let (sx, sz, sb) = if l == last {
                let s = INIT_SCALE / (dim + prev) as f64;
                (s, s, 0.0)
            } else {
                let s = 1.0 / (dim as f64).sqrt();
                (s, 1.0 / prev.max(1) as f64, s)
            };
            let mut wx = Tensor::zeros(format!("wx{l}"), &[h, dim], false);
            wx.data.iter_mut().for_each(|w| *w = sx * unit.sample(&mut rng));
            let mut wz = Tensor::zeros(format!("wz{l}"), &[h, prev], true);
            wz.data.iter_mut().for_each(|w| *w = sz * unit.sample(&mut rng).abs());
            let mut b = Tensor::zeros(format!("b{l}"), &[h], false);
            b.data.iter_mut().for_each(|w| *w = sb * unit.sample(&mut rng));
            tensors.push(wx);
            tensors.push(wz);
            tensors.push(b);
            prev = h;
        }
        Ok(Self {
            dim,
            hidden: hidden.to_vec(),
            activation: Activation::Rectifier,
            quadratic_skip_coefficient: 1.0,
            enforcement: Enforcement::Clamp,
            params: ParameterBlock::new(tensors),
        })
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    /// Switches enforcement; the `nonneg` flags of the `Wz` tensors follow
    /// so that only clamped networks are projected by the optimiser loop.
    pub fn with_enforcement(mut self, enforcement: Enforcement) -> Self {
        self.enforcement = enforcement;
        let clamp = enforcement == Enforcement::Clamp;
        for t in self.params.tensors.iter_mut().filter(|t| t.name.starts_with("wz")) {
            t.nonneg = clamp;
        }
        self
    }

    fn widths_of(hidden: &[usize]) -> Vec<usize> {
        let mut w = hidden.to_vec();
        w.push(1);
        w
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    fn wx(&self, l: usize) -> ArrayView2<'_, f64> {
        self.params.tensors[3 * l].matrix()
    }

    fn wz(&self, l: usize) -> ArrayView2<'_, f64> {
        self.params.tensors[3 * l + 1].matrix()
    }

    fn bias(&self, l: usize) -> ArrayView1<'_, f64> {
        self.params.tensors[3 * l + 2].vector()
    }

    fn is_last(&self, l: usize) -> bool {
        l + 1 == self.num_layers()
    }

    fn act(&self, l: usize, a: f64) -> f64 {
        if self.is_last(l) {
            a
        } else {
            self.activation.value(a)
        }
    }

    fn act1(&self, l: usize, a: f64) -> f64 {
        if self.is_last(l) {
            1.0
        } else {
            self.activation.first(a)
        }
    }

    fn act2(&self, l: usize, a: f64) -> f64 {
        if self.is_last(l) {
            0.0
        } else {
            self.activation.second(a)
        }
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
        let b = x.nrows();
        let mut pre = Vec::with_capacity(self.num_layers());
        let mut post = Vec::with_capacity(self.num_layers() + 1);
        post.push(Array2::zeros((b, 0)));
        for l in 0..self.num_layers() {
            let mut a = x.dot(&self.wx(l).t());
            if l > 0 {
                a += &post[l].dot(&self.wz(l).t());
            }
            a += &self.bias(l);
            let z = a.mapv(|v| self.act(l, v));
            pre.push(a);
            post.push(z);
        }
        Trace { pre, post }
    }

    /// `1/2 |x_i|^2` for every row.
    fn half_sq_norms(x: ArrayView2<'_, f64>) -> Array1<f64> {
        x.map_axis(Axis(1), |r| 0.5 * r.dot(&r))
    }

    pub fn evaluate(&self, x: ArrayView1<'_, f64>) -> Result<f64> {
        let row = x.insert_axis(Axis(0));
        Ok(self.evaluate_batch(row)?[0])
    }

    pub fn evaluate_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        self.check_dim(x)?;
        let trace = self.forward(x);
        let out = trace.post[self.num_layers()].column(0).to_owned();
        Ok(out + Self::half_sq_norms(x) * self.quadratic_skip_coefficient)
    }

    /// Rows of `grad psi` at each row of `x`.
    pub fn gradient_map(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_dim(x)?;
        let trace = self.forward(x);
        Ok(self.input_grad(x, &trace))
    }

    /// Values and gradients from a single forward pass.
    pub fn value_and_gradient(&self, x: ArrayView2<'_, f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        self.check_dim(x)?;
        let trace = self.forward(x);
        let vals = trace.post[self.num_layers()].column(0).to_owned()
            + Self::half_sq_norms(x) * self.quadratic_skip_coefficient;
        Ok((vals, self.input_grad(x, &trace)))
    }

    fn input_grad(&self, x: ArrayView2<'_, f64>, trace: &Trace) -> Array2<f64> {
        let b = x.nrows();
        let mut gx = x.to_owned() * self.quadratic_skip_coefficient;
        let mut d = Array2::ones((b, 1));
        for l in (0..self.num_layers()).rev() {
            let mut ga = d;
            Zip::from(&mut ga).and(&trace.pre[l]).for_each(|g, &a| *g *= self.act1(l, a));
            gx += &ga.dot(&self.wx(l));
            d = if l > 0 { ga.dot(&self.wz(l)) } else { Array2::zeros((b, 0)) };
        }
        gx
    }

    /// Gradient with respect to the parameters of `sum_i c_i psi(x_i)`.
    pub fn value_param_grad(&self, x: ArrayView2<'_, f64>, c: ArrayView1<'_, f64>) -> Result<ParameterBlock> {
        self.check_dim(x)?;
        self.check_len(x, c.len())?;
        let trace = self.forward(x);
        let mut grad = self.params.zeros_like();
        let mut zbar = c.to_owned().insert_axis(Axis(1));
        for l in (0..self.num_layers()).rev() {
            let mut abar = zbar;
            Zip::from(&mut abar).and(&trace.pre[l]).for_each(|g, &a| *g *= self.act1(l, a));
            self.accumulate(&mut grad, l, &abar, x, trace.post[l].view(), true);
            zbar = abar.dot(&self.wz(l));
        }
        Ok(grad)
    }

    /// Gradient with respect to the parameters of
    /// `sum_i c_i <w_i, grad psi(x_i)>` with `w` held fixed.
    pub fn mixed_param_grad(
        &self,
        x: ArrayView2<'_, f64>,
        w: ArrayView2<'_, f64>,
        c: ArrayView1<'_, f64>,
    ) -> Result<ParameterBlock> {
        self.check_dim(x)?;
        self.check_dim(w)?;
        self.check_len(x, w.nrows())?;
        self.check_len(x, c.len())?;
        let b = x.nrows();
        let layers = self.num_layers();
        let trace = self.forward(x);

        // Tangent pass along w.
        let mut tpre = Vec::with_capacity(layers);
        let mut tpost: Vec<Array2<f64>> = Vec::with_capacity(layers + 1);
        tpost.push(Array2::zeros((b, 0)));
        for l in 0..layers {
            let mut ta = w.dot(&self.wx(l).t());
            if l > 0 {
                ta += &tpost[l].dot(&self.wz(l).t());
            }
            let mut tz = ta.clone();
            Zip::from(&mut tz).and(&trace.pre[l]).for_each(|t, &a| *t *= self.act1(l, a));
            tpre.push(ta);
            tpost.push(tz);
        }

        // Reverse through the primal and tangent chains together.
        let mut grad = self.params.zeros_like();
        let mut tzbar = c.to_owned().insert_axis(Axis(1));
        let mut zbar: Array2<f64> = Array2::zeros((b, 1));
        for l in (0..layers).rev() {
            let mut tabar = tzbar.clone();
            let mut abar = zbar;
            Zip::from(&mut tabar)
                .and(&mut abar)
                .and(&tzbar)
                .and(&trace.pre[l])
                .and(&tpre[l])
                .for_each(|tb, ab, &tz, &a, &ta| {
                    let s1 = self.act1(l, a);
                    *tb *= s1;
                    *ab = *ab * s1 + tz * self.act2(l, a) * ta;
                });
            self.accumulate(&mut grad, l, &tabar, w, tpost[l].view(), false);
            self.accumulate(&mut grad, l, &abar, x, trace.post[l].view(), true);
            tzbar = tabar.dot(&self.wz(l));
            zbar = abar.dot(&self.wz(l));
        }
        Ok(grad)
    }

    fn check_len(&self, x: ArrayView2<'_, f64>, len: usize) -> Result<()> {
        if x.nrows() != len {
            return Err(Error::LengthMismatch {
                expected: x.nrows(),
                found: len,
            });
        }
        Ok(())
    }

    /// Adds the parameter contributions of an adjoint `abar` of `A_l`, whose
    /// inputs were `input` (through `Wx_l`) and `z` (through `Wz_l`). Tangent
    /// pre-activations carry no bias.
    fn accumulate(
        &self,
        grad: &mut ParameterBlock,
        l: usize,
        abar: &Array2<f64>,
        input: ArrayView2<'_, f64>,
        z: ArrayView2<'_, f64>,
        with_bias: bool,
    ) {
        let gwx = abar.t().dot(&input);
        grad.tensors[3 * l].matrix_mut().scaled_add(1.0, &gwx);
        if z.ncols() > 0 {
            let gwz = abar.t().dot(&z);
            grad.tensors[3 * l + 1].matrix_mut().scaled_add(1.0, &gwz);
        }
        if !with_bias {
            return;
        }
        let gb = abar.sum_axis(Axis(0));
        let mut bt = grad.tensors[3 * l + 2].matrix_mut();
        bt.slice_mut(s![0, ..]).scaled_add(1.0, &gb);
    }

    fn wz_tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.params.tensors.iter().filter(|t| t.name.starts_with("wz"))
    }

    /// `Wz <- max(Wz, 0)`; everything else is untouched.
    pub fn convexity_project(&mut self) {
        for t in self.params.tensors.iter_mut().filter(|t| t.name.starts_with("wz")) {
            t.data.iter_mut().for_each(|w| *w = w.max(0.0));
        }
    }

    /// `lambda * sum |max(-Wz, 0)|^2`.
    pub fn convexity_penalty(&self, lambda: f64) -> f64 {
        if lambda == 0.0 {
            return 0.0;
        }
        let sq: f64 = self
            .wz_tensors()
            .flat_map(|t| t.data.iter())
            .map(|&w| if w < 0.0 { w * w } else { 0.0 })
            .sum();
        lambda * sq
    }

    pub fn convexity_penalty_grad(&self, lambda: f64) -> ParameterBlock {
        let mut grad = self.params.zeros_like();
        for (g, p) in grad.tensors.iter_mut().zip(&self.params.tensors) {
            if p.name.starts_with("wz") {
                for (gk, &w) in g.data.iter_mut().zip(&p.data) {
                    if w < 0.0 {
                        *gk = 2.0 * lambda * w;
                    }
                }
            }
        }
        grad
    }

    pub fn min_wz(&self) -> f64 {
        self.wz_tensors()
            .flat_map(|t| t.data.iter().copied())
            .fold(f64::INFINITY, f64::min)
    }

    /// Checks that the tensor list matches the declared architecture.
    pub fn validate(&self) -> Result<()> {
        let reference = Self::init_identity(self.dim, &self.hidden, 0)?;
        let mut shell = reference.params.clone();
        for (t, r) in shell.tensors.iter_mut().zip(&self.params.tensors) {
            t.nonneg = r.nonneg;
        }
        shell.check_layout(&self.params)?;
        for t in &self.params.tensors {
            if t.data.len() != t.shape.iter().product::<usize>() {
                return Err(Error::invalid(format!("tensor {} has inconsistent data length", t.name)));
            }
        }
        if !(self.quadratic_skip_coefficient >= 0.0) {
            return Err(Error::invalid("quadratic skip coefficient must be nonnegative"));
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
    use crate::diffengine::{finite_difference_check, FdOptions, Objective};
    use ndarray::array;
    use rand_distr::StandardNormal;

    /// Network with O(1) weights so that every term is exercised.
    fn rough(dim: usize, hidden: &[usize], seed: u64) -> IcnnPotential {
        let mut net = IcnnPotential::init_identity(dim, hidden, seed)
            .unwrap()
            .with_activation(Activation::Softplus);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for t in &mut net.params.tensors {
            for w in &mut t.data {
                let v: f64 = StandardNormal.sample(&mut rng);
                *w = if t.name.starts_with("wz") { 0.5 * v.abs() } else { 0.7 * v };
            }
        }
        net
    }

    fn normal_points(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn zero_weights_give_half_squared_norm() {
        let mut net = IcnnPotential::init_identity(2, &[3, 3], 0).unwrap();
        net.params.scale(0.0);
        assert_eq!(net.evaluate(array![2.0, 0.0].view()).unwrap(), 2.0);
        let x = array![[1.5, -0.5], [0.0, 3.0]];
        assert_eq!(net.gradient_map(x.view()).unwrap(), x);
    }

    #[test]
    fn one_layer_softplus_closed_form() {
        // Hidden unit h = softplus(x); output weight on it 1, no direct term.
        let mut net = IcnnPotential::init_identity(1, &[1], 0)
            .unwrap()
            .with_activation(Activation::Softplus);
        net.params.scale(0.0);
        net.params.tensor_mut("wx0").data[0] = 1.0;
        net.params.tensor_mut("wz1").data[0] = 1.0;
        for x in [-2.0, 0.0, 0.7, 3.0] {
            let want = softplus(x) + 0.5 * x * x;
            let got = net.evaluate(array![x].view()).unwrap();
            assert!((got - want).abs() < 1e-15);
            let g = net.gradient_map(array![[x]].view()).unwrap()[[0, 0]];
            assert!((g - (sigmoid(x) + x)).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_init_is_close_to_identity() {
        let net = IcnnPotential::init_identity(2, &DEFAULT_HIDDEN, 5).unwrap();
        let g = net.gradient_map(array![[1.0, 2.0]].view()).unwrap();
        assert!((g[[0, 0]] - 1.0).abs() < 1e-3 && (g[[0, 1]] - 2.0).abs() < 1e-3);
        let x = normal_points(2000, 2, 1);
        let g = net.gradient_map(x.view()).unwrap();
        let mean_dev = (&g - &x).map_axis(Axis(1), |r| r.dot(&r).sqrt()).mean().unwrap();
        assert!(mean_dev < 1e-3, "{mean_dev}");
        assert!(net.min_wz() >= 0.0);
        assert_eq!(net, IcnnPotential::init_identity(2, &DEFAULT_HIDDEN, 5).unwrap());
    }

    #[test]
    fn gradient_map_matches_finite_differences() {
        let net = rough(3, &[8, 8, 8], 2);
        let x = normal_points(20, 3, 3);
        let g = net.gradient_map(x.view()).unwrap();
        let h = 1e-5;
        for i in 0..x.nrows() {
            for k in 0..3 {
                let mut up = x.row(i).to_owned();
                let mut dn = up.clone();
                up[k] += h;
                dn[k] -= h;
                let fd = (net.evaluate(up.view()).unwrap() - net.evaluate(dn.view()).unwrap()) / (2.0 * h);
                let rel = (fd - g[[i, k]]).abs() / fd.abs().max(g[[i, k]].abs()).max(1e-3);
                assert!(rel < 1e-6, "row {i} coord {k}: {rel}");
            }
        }
    }

    #[test]
    fn batch_matches_single_point() {
        let net = rough(2, &[5, 5], 4);
        let x = normal_points(7, 2, 5);
        let vals = net.evaluate_batch(x.view()).unwrap();
        let grads = net.gradient_map(x.view()).unwrap();
        for i in 0..7 {
            assert_eq!(vals[i], net.evaluate(x.row(i)).unwrap());
            let single = net.gradient_map(x.slice(s![i..i + 1, ..])).unwrap();
            assert_eq!(grads.row(i), single.row(0));
        }
    }

    #[test]
    fn midpoint_convexity_probe() {
        for act in [Activation::Rectifier, Activation::Softplus] {
            let mut net = rough(2, &[16, 16], 6);
            net.activation = act;
            let a = normal_points(10_000, 2, 7) * 3.0;
            let b = normal_points(10_000, 2, 8) * 3.0;
            let mid = (&a + &b) * 0.5;
            let (fa, fb, fm) = (
                net.evaluate_batch(a.view()).unwrap(),
                net.evaluate_batch(b.view()).unwrap(),
                net.evaluate_batch(mid.view()).unwrap(),
            );
            for i in 0..a.nrows() {
                assert!(fm[i] <= 0.5 * fa[i] + 0.5 * fb[i] + 1e-9, "{act:?} pair {i}");
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let net = IcnnPotential::init_identity(2, &[4], 0).unwrap();
        assert!(matches!(
            net.evaluate(array![1.0, 2.0, 3.0].view()),
            Err(Error::DimensionMismatch { expected: 2, found: 3 })
        ));
        assert!(net.gradient_map(Array2::zeros((3, 1)).view()).is_err());
    }

    #[test]
    fn projection_and_penalty() {
        let mut net = IcnnPotential::init_identity(2, &[2, 2], 0)
            .unwrap()
            .with_enforcement(Enforcement::Penalty);
        assert_eq!(net.convexity_penalty(1.0), 0.0);
        net.params.tensor_mut("wz1").data[0] = -2.0;
        assert_eq!(net.convexity_penalty(1.0), 4.0);
        assert_eq!(net.convexity_penalty(0.0), 0.0);
        let g = net.convexity_penalty_grad(1.0);
        assert_eq!(g.tensor("wz1").data[0], -4.0);
        let before = net.clone();
        net.params.tensor_mut("wz1").data[1] = -0.2;
        net.convexity_project();
        assert_eq!(net.params.tensor("wz1").data[0], 0.0);
        assert_eq!(net.params.tensor("wz1").data[1], 0.0);
        assert_eq!(net.params.tensor("wx1"), before.params.tensor("wx1"));
        let once = net.clone();
        net.convexity_project();
        assert_eq!(net, once);
    }

    struct ValueObjective {
        x: Array2<f64>,
        c: Array1<f64>,
        template: IcnnPotential,
    }

    impl Objective for ValueObjective {
        fn value(&self, params: &[ParameterBlock]) -> f64 {
            let mut net = self.template.clone();
            net.params = params[0].clone();
            net.evaluate_batch(self.x.view()).unwrap().dot(&self.c)
        }
        fn gradient(&self, params: &[ParameterBlock]) -> Vec<ParameterBlock> {
            let mut net = self.template.clone();
            net.params = params[0].clone();
            vec![net.value_param_grad(self.x.view(), self.c.view()).unwrap()]
        }
    }

    struct MixedObjective {
        x: Array2<f64>,
        w: Array2<f64>,
        c: Array1<f64>,
        template: IcnnPotential,
    }

    impl Objective for MixedObjective {
        fn value(&self, params: &[ParameterBlock]) -> f64 {
            let mut net = self.template.clone();
            net.params = params[0].clone();
            let g = net.gradient_map(self.x.view()).unwrap();
            (&g * &self.w).sum_axis(Axis(1)).dot(&self.c)
        }
        fn gradient(&self, params: &[ParameterBlock]) -> Vec<ParameterBlock> {
            let mut net = self.template.clone();
            net.params = params[0].clone();
            vec![net.mixed_param_grad(self.x.view(), self.w.view(), self.c.view()).unwrap()]
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let net = rough(2, &[6, 6, 6], 9);
        let x = normal_points(12, 2, 10);
        let w = normal_points(12, 2, 11);
        let c = Array1::from_shape_fn(12, |i| 0.5 + 0.1 * i as f64);
        let opts = FdOptions {
            step: 1e-5,
            max_coords: 512,
            ..FdOptions::default()
        };
        let params = vec![net.params.clone()];
        let value = ValueObjective {
            x: x.clone(),
            c: c.clone(),
            template: net.clone(),
        };
        let r = finite_difference_check(&value, &params, &opts).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        let mixed = MixedObjective { x, w, c, template: net };
        let r = finite_difference_check(&mixed, &params, &opts).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net = rough(3, &[4, 4], 12);
        let back = IcnnPotential::from_json(&net.to_json().unwrap()).unwrap();
        assert_eq!(back, net);
        let mut broken = net.clone();
        broken.params.tensors[0].shape = vec![5, 3];
        let text = serde_json::to_string(&broken).unwrap();
        assert!(IcnnPotential::from_json(&text).is_err());
    }
}
