//! Test-time aggregation of frozen experts.
//!
//! Softmax weights over the experts are learned on unlabeled test features by
//! gradient descent on the prediction gap between two randomly corrupted
//! views of each batch.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::{self, ExpertModel};
use crate::matrix::Matrix;
use crate::rng::{self, Rng};

/// Anything that maps a feature matrix to one prediction per row.
pub trait Predictor: Sync {
    fn predict(&self, x: &Matrix) -> Result<Vec<f64>>;
}

impl Predictor for ExpertModel {
    fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        expert::predict(self, x)
    }
}

/// Adapts a closure to [`Predictor`].
pub struct FnPredictor<F>(pub F);

impl<F> Predictor for FnPredictor<F>
where
    F: Fn(&Matrix) -> Vec<f64> + Sync,
{
    fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        Ok((self.0)(x))
    }
}

/// Where masked entries draw their replacement values from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Marginal {
    /// Another row of the same batch.
    Batch,
    /// Any row of the full test matrix.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TtsaConfig {
    pub epochs: usize,
    pub corrupt_ratio: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub stop_threshold: f64,
    pub marginal: Marginal,
    /// Divides each step by `target_scale²`, making the learning rate
    /// independent of the target's units.
    pub target_scale: Option<f64>,
    pub seed: u64,
}

impl Default for TtsaConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            corrupt_ratio: 0.1,
            learning_rate: 0.05,
            batch_size: 256,
            stop_threshold: 0.05,
            marginal: Marginal::Batch,
            target_scale: None,
            seed: 0,
        }
    }
}

impl TtsaConfig {
    pub fn validate(&self, n_experts: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("ttsa epochs must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.corrupt_ratio) {
            return Err(Error::Config("ttsa corrupt_ratio must be in [0, 1]".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("ttsa batch_size must be >= 2".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("ttsa learning_rate must be > 0".into()));
        }
        if let Some(s) = self.target_scale {
            if !(s > 0.0) {
                return Err(Error::Config("ttsa target_scale must be > 0".into()));
            }
        }
        if n_experts > 0 && !(self.stop_threshold >= 0.0 && self.stop_threshold < 1.0 / n_experts as f64) {
            return Err(Error::Config(format!(
                "ttsa stop_threshold must be in [0, 1/{n_experts})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub weights: Vec<f64>,
    /// Mean prediction gap over the epoch's batches.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

impl AggregationWeights {
    pub fn from_raw(raw: Vec<f64>) -> Self {
        Self {
            normalized: softmax(&raw),
            raw,
            history: Vec::new(),
            stopped_early: false,
        }
    }

    pub fn uniform(n: usize) -> Self {
        Self::from_raw(vec![0.0; n])
    }
}

pub fn softmax(w: &[f64]) -> Vec<f64> {
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = w.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Replaces each entry independently with probability `r` by the same
/// column's value in a uniformly chosen other row.
pub fn corrupt(x: &Matrix, r: f64, rng: &mut Rng) -> Result<Matrix> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::Invalid("corruption needs at least two rows".into()));
    }
    let mut out = x.clone();
    for i in 0..n {
        for j in 0..x.cols() {
            if rng.random::<f64>() < r {
                let mut k = rng.random_range(0..n - 1);
                if k >= i {
                    k += 1;
                }
                out.set(i, j, x.get(k, j));
            }
        }
    }
    Ok(out)
}

/// Like [`corrupt`], drawing replacements from any row of `source`.
pub fn corrupt_from(x: &Matrix, source: &Matrix, r: f64, rng: &mut Rng) -> Result<Matrix> {
    if source.rows() == 0 || source.cols() != x.cols() {
        return Err(Error::Invalid("corruption source must be non-empty and match columns".into()));
    }
    let mut out = x.clone();
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            if rng.random::<f64>() < r {
                let k = rng.random_range(0..source.rows());
                out.set(i, j, source.get(k, j));
            }
        }
    }
    Ok(out)
}

fn expert_outputs(experts: &[&dyn Predictor], x: &Matrix) -> Result<Vec<Vec<f64>>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        experts.par_iter().map(|e| e.predict(x)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        experts.iter().map(|e| e.predict(x)).collect()
    }
}

fn check_lengths(experts: &[&dyn Predictor], w: &[f64]) -> Result<()> {
    if experts.len() != w.len() || experts.is_empty() {
        return Err(Error::Shape {
            expected: format!("{} weights", experts.len()),
            actual: format!("{} weights", w.len()),
        });
    }
    Ok(())
}

fn combine(p: &[f64], outputs: &[Vec<f64>]) -> Vec<f64> {
    let m = outputs[0].len();
    (0..m)
        .map(|r| p.iter().zip(outputs).map(|(pi, o)| pi * o[r]).sum())
        .collect()
}

/// `Σ_i softmax(w)_i · expert_i(x)` for raw weights `w`.
pub fn predict_aggregated(experts: &[&dyn Predictor], w: &[f64], x: &Matrix) -> Result<Vec<f64>> {
    check_lengths(experts, w)?;
    Ok(combine(&softmax(w), &expert_outputs(experts, x)?))
}

/// Gap and its gradient with respect to the raw weights, from the experts'
/// outputs on both views.
fn gap_and_gradient(p: &[f64], out1: &[Vec<f64>], out2: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let m = out1[0].len();
    let n = p.len();
    let mut s = 0.0;
    let mut grad = vec![0.0; n];
    let mut delta = vec![0.0; n];
    for r in 0..m {
        let mut d = 0.0;
        let mut mean_delta = 0.0;
        for i in 0..n {
            delta[i] = out1[i][r] - out2[i][r];
            d += p[i] * delta[i];
        }
        for i in 0..n {
            mean_delta += p[i] * delta[i];
        }
        s += d * d;
        for i in 0..n {
            grad[i] += d * p[i] * (delta[i] - mean_delta);
        }
    }
    let scale = 2.0 / m as f64;
    for g in &mut grad {
        *g *= scale;
    }
    (s / m as f64, grad)
}

fn check_views(v1: &Matrix, v2: &Matrix) -> Result<()> {
    if v1.rows() != v2.rows() || v1.cols() != v2.cols() || v1.rows() == 0 {
        return Err(Error::Shape {
            expected: format!("{}x{} (non-empty)", v1.rows(), v1.cols()),
            actual: format!("{}x{}", v2.rows(), v2.cols()),
        });
    }
    Ok(())
}

/// Mean squared difference of the aggregated predictions on two views.
pub fn prediction_gap(experts: &[&dyn Predictor], w: &[f64], v1: &Matrix, v2: &Matrix) -> Result<f64> {
    check_lengths(experts, w)?;
    check_views(v1, v2)?;
    let a = predict_aggregated(experts, w, v1)?;
    let b = predict_aggregated(experts, w, v2)?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

/// Gradient of [`prediction_gap`] with respect to the raw weights.
pub fn gap_gradient(experts: &[&dyn Predictor], w: &[f64], v1: &Matrix, v2: &Matrix) -> Result<Vec<f64>> {
    check_lengths(experts, w)?;
    check_views(v1, v2)?;
    let o1 = expert_outputs(experts, v1)?;
    let o2 = expert_outputs(experts, v2)?;
    Ok(gap_and_gradient(&softmax(w), &o1, &o2).1)
}

/// Splits shuffled row indices into batches, folding a trailing batch of one
/// row into its predecessor.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out[out.len() - 1].len() < 2 {
        let n = out.len();
        let start = (n - 2) * size;
        out.truncate(n - 2);
        out.push(&order[start..]);
    }
    out
}

/// Learns aggregation weights on unlabeled test features.
///
/// Starts from uniform weights; each batch gets two fresh corrupted views and
/// one gradient step. Training stops after the first epoch that leaves any
/// normalized weight at or below `stop_threshold`; those weights are returned.
pub fn aggregate(experts: &[&dyn Predictor], test_x: &Matrix, cfg: &TtsaConfig) -> Result<AggregationWeights> {
    if experts.is_empty() {
        return Err(Error::Empty("aggregation needs at least one expert".into()));
    }
    cfg.validate(experts.len())?;
    if test_x.rows() == 0 {
        return Err(Error::Empty("aggregation test features have no rows".into()));
    }
    let n = experts.len();
    if n == 1 {
        return Ok(AggregationWeights::uniform(1));
    }
    if test_x.rows() < 2 {
        return Err(Error::Invalid("aggregation needs at least two test rows".into()));
    }
    let step_scale = cfg.target_scale.map_or(1.0, |s| 1.0 / (s * s));
    let mut rng = rng::stream(cfg.seed, "ttsa");
    let mut w = AggregationWeights::uniform(n);
    let mut order: Vec<usize> = (0..test_x.rows()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut gap_sum = 0.0;
        let mut rows = 0usize;
        for batch in batches(&order, cfg.batch_size) {
            let xb = test_x.select_rows(batch);
            let (v1, v2) = match cfg.marginal {
                Marginal::Batch => (
                    corrupt(&xb, cfg.corrupt_ratio, &mut rng)?,
                    corrupt(&xb, cfg.corrupt_ratio, &mut rng)?,
                ),
                Marginal::Full => (
                    corrupt_from(&xb, test_x, cfg.corrupt_ratio, &mut rng)?,
                    corrupt_from(&xb, test_x, cfg.corrupt_ratio, &mut rng)?,
                ),
            };
            let o1 = expert_outputs(experts, &v1)?;
            let o2 = expert_outputs(experts, &v2)?;
            let p = softmax(&w.raw);
            let (s, grad) = gap_and_gradient(&p, &o1, &o2);
            if !s.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGap { epoch });
            }
            for (wi, g) in w.raw.iter_mut().zip(&grad) {
                *wi -= cfg.learning_rate * step_scale * g;
            }
            gap_sum += s * batch.len() as f64;
            rows += batch.len();
        }
        w.normalized = softmax(&w.raw);
        w.history.push(EpochRecord {
            epoch,
            weights: w.normalized.clone(),
            gap: gap_sum / rows as f64,
        });
        if w.normalized.iter().any(|&p| p <= cfg.stop_threshold) {
            w.stopped_early = true;
            break;
        }
    }
    Ok(w)
}
