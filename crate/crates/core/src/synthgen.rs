//! Three-cluster Gaussian mixtures in the plane whose cluster proportions
//! change between source and target, with a constant shift applied to every
//! target point.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::WeightedPointCloud;
use crate::error::{Error, Result};

const THIRD: f64 = 1.0 / 3.0;

/// The three benchmark scenarios of increasing imbalance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioId {
    A,
    B,
    C,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 3] = [ScenarioId::A, ScenarioId::B, ScenarioId::C];

    /// `(source, target)` cluster proportions.
    pub fn proportions(self) -> ([f64; 3], [f64; 3]) {
        match self {
            ScenarioId::A => ([THIRD; 3], [0.45, 0.45, 0.10]),
            ScenarioId::B => ([THIRD; 3], [0.70, 0.20, 0.10]),
            ScenarioId::C => ([0.45, 0.45, 0.10], [0.10, 0.45, 0.45]),
        }
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ScenarioId::A => "a",
            ScenarioId::B => "b",
            ScenarioId::C => "c",
        };
        f.write_str(s)
    }
}

impl FromStr for ScenarioId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(ScenarioId::A),
            "b" => Ok(ScenarioId::B),
            "c" => Ok(ScenarioId::C),
            other => Err(Error::invalid(format!("unknown scenario {other:?} (expected a, b or c)"))),
        }
    }
}

/// Full description of one synthetic draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: ScenarioId,
    pub source_props: [f64; 3],
    pub target_props: [f64; 3],
    /// Points per cloud.
    pub n: usize,
    pub cluster_means: [[f64; 2]; 3],
    pub cluster_std: f64,
    pub shift: [f64; 2],
    pub seed: u64,
}

impl ScenarioSpec {
    /// Scenario defaults: means (0,0), (0.8,0), (0.4,0.7), std 0.07, shift
    /// (0,-0.3), 400 points per cloud. Squared distances stay well below one
    /// so that a marginal penalty of order 0.05 still sees the clusters.
    pub fn new(id: ScenarioId, seed: u64) -> Self {
        let (source_props, target_props) = id.proportions();
        Self {
            id,
            source_props,
            target_props,
            n: 400,
            cluster_means: [[0.0, 0.0], [0.8, 0.0], [0.4, 0.7]],
            cluster_std: 0.07,
            shift: [0.0, -0.3],
            seed,
        }
    }

    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    /// Multiplies means, spread and shift by `factor`.
    pub fn scaled(mut self, factor: f64) -> Self {
        for m in self.cluster_means.iter_mut() {
            m[0] *= factor;
            m[1] *= factor;
        }
        self.cluster_std *= factor;
        self.shift = [self.shift[0] * factor, self.shift[1] * factor];
        self
    }

    /// Per-cluster `q_k / p_k`.
    pub fn true_scaling(&self) -> [f64; 3] {
        std::array::from_fn(|k| self.target_props[k] / self.source_props[k])
    }

    fn validate(&self) -> Result<()> {
        for (name, props) in [("source", &self.source_props), ("target", &self.target_props)] {
            let sum: f64 = props.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || props.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::invalid(format!(
                    "{name} proportions {props:?} must be nonnegative and sum to 1"
                )));
            }
        }
        if self.n == 0 {
            return Err(Error::invalid("scenario needs at least one point"));
        }
        if !(self.cluster_std > 0.0) {
            return Err(Error::invalid("cluster_std must be positive"));
        }
        Ok(())
    }
}

/// Draws `(source, target)` clouds with unit masses and cluster labels.
pub fn generate(spec: &ScenarioSpec) -> Result<(WeightedPointCloud, WeightedPointCloud)> {
    spec.validate()?;
    let source = draw(spec, &spec.source_props, [0.0, 0.0], 0)?;
    let target = draw(spec, &spec.target_props, spec.shift, 1)?;
    Ok((source, target))
}

fn draw(spec: &ScenarioSpec, props: &[f64; 3], offset: [f64; 2], stream: u64) -> Result<WeightedPointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let picker = WeightedIndex::new(props).map_err(|e| Error::invalid(e.to_string()))?;
    let mut points = Array2::zeros((spec.n, 2));
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let k = picker.sample(&mut rng);
        for d in 0..2 {
            let z: f64 = StandardNormal.sample(&mut rng);
            points[[i, d]] = spec.cluster_means[k][d] + offset[d] + spec.cluster_std * z;
        }
        labels.push(k as i64);
    }
    WeightedPointCloud::uniform(points, Some(labels))
}
