//! Seeded synthetic datasets for tests, examples and the browser demo.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::TabularDataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;

/// Labels drawn from a 1-D Gaussian mixture, `counts[i]` from component `i`.
pub fn mixture_labels(means: &[f64], stddevs: &[f64], counts: &[usize], seed: u64) -> Result<Vec<f64>> {
    if means.len() != stddevs.len() || means.len() != counts.len() {
        return Err(Error::Invalid("mixture parameters must have equal lengths".into()));
    }
    let mut rng = rng::stream(seed, "mixture-labels");
    let mut out = Vec::with_capacity(counts.iter().sum());
    for ((&m, &s), &c) in means.iter().zip(stddevs).zip(counts) {
        let d = Normal::new(m, s).map_err(|e| Error::Invalid(e.to_string()))?;
        out.extend((0..c).map(|_| d.sample(&mut rng)));
    }
    Ok(out)
}

/// Regions along the target axis, each a Gaussian cluster of labels, with
/// features that are noisy views of the label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegionSpec {
    pub n_rows: usize,
    pub means: Vec<f64>,
    pub stddevs: Vec<f64>,
    /// Share of rows per region; normalized internally.
    pub weights: Vec<f64>,
    /// Noise stddev of each feature, in label units.
    pub feature_noise: Vec<f64>,
    /// Labels below this value are reflected above it.
    pub lower_bound: Option<f64>,
    pub seed: u64,
}

impl Default for RegionSpec {
    fn default() -> Self {
        Self {
            n_rows: 3000,
            means: vec![0.0, 10.0, 20.0],
            stddevs: vec![2.0, 2.0, 2.0],
            weights: vec![0.7, 0.2, 0.1],
            feature_noise: vec![3.0, 4.0, 5.0, 6.0],
            lower_bound: None,
            seed: 0,
        }
    }
}

impl RegionSpec {
    /// Rows per region by largest remainder.
    pub fn counts(&self) -> Vec<usize> {
        crate::data::apportion(self.n_rows, &self.weights)
    }
}

/// Rows from [`RegionSpec`]: `y` from its region's Gaussian (reflected at
/// the lower bound, if any), feature `j` is `(y + N(0, noise_j²)) / 10`.
pub fn regions(spec: &RegionSpec) -> Result<TabularDataset> {
    let k = spec.means.len();
    if k == 0 || spec.stddevs.len() != k || spec.weights.len() != k {
        return Err(Error::Invalid("region spec needs matching means, stddevs and weights".into()));
    }
    if spec.feature_noise.is_empty() {
        return Err(Error::Invalid("region spec needs at least one feature".into()));
    }
    let counts = spec.counts();
    let mut ys = mixture_labels(&spec.means, &spec.stddevs, &counts, spec.seed)?;
    if let Some(lb) = spec.lower_bound {
        for y in &mut ys {
            if *y < lb {
                *y = 2.0 * lb - *y;
            }
        }
    }
    let mut rng = rng::stream(spec.seed, "region-features");
    // interleave regions so row order carries no label information
    for i in (1..ys.len()).rev() {
        let j = rng.random_range(0..=i);
        ys.swap(i, j);
    }
    let d = spec.feature_noise.len();
    let mut data = Vec::with_capacity(ys.len() * d);
    for &y in &ys {
        for &s in &spec.feature_noise {
            let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
            data.push((y + s * z) / 10.0);
        }
    }
    TabularDataset::numeric(Matrix::new(ys.len(), d, data)?, ys)
}

/// Right-skewed long-tail data: exponential labels, two informative features
/// and one pure-noise feature.
pub fn long_tail(n_rows: usize, scale: f64, seed: u64) -> Result<TabularDataset> {
    let mut rng = rng::stream(seed, "long-tail");
    let mut ys = Vec::with_capacity(n_rows);
    let mut data = Vec::with_capacity(n_rows * 3);
    for _ in 0..n_rows {
        let u: f64 = rng.random();
        let y = -(1.0 - u).ln() * scale;
        let n1: f64 = rand_distr::StandardNormal.sample(&mut rng);
        let n2: f64 = rand_distr::StandardNormal.sample(&mut rng);
        let n3: f64 = rand_distr::StandardNormal.sample(&mut rng);
        data.extend_from_slice(&[y.sqrt() + 0.1 * n1, 0.5 * y + 0.5 * n2, n3]);
        ys.push(y);
    }
    TabularDataset::numeric(Matrix::new(n_rows, 3, data)?, ys)
}
