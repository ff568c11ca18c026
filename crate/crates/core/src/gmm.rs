//! One-dimensional Gaussian mixtures over regression targets: EM fitting,
//! AIC model selection and posterior partition of a dataset.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{quantile_sorted, sorted_copy, variance, TabularDataset};
use crate::error::{Error, Result};
use crate::rng;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
/// Absolute variance floor, used when the labels themselves have no spread.
const MIN_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Absolute log-likelihood improvement below which EM stops.
    pub tol: f64,
    /// Component variances are floored at this fraction of the label variance.
    pub variance_floor_ratio: f64,
    /// Extra randomly initialized runs; the best log-likelihood wins.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-6,
            variance_floor_ratio: 1e-6,
            restarts: 0,
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::Config("gmm max_iter must be >= 1".into()));
        }
        if !(self.tol >= 0.0) || !(self.variance_floor_ratio >= 0.0) {
            return Err(Error::Config("gmm tol and variance_floor_ratio must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: f64,
    pub stddev: f64,
}

impl GaussianComponent {
    /// `ln(π · N(y | μ, σ²))`.
    pub fn log_weighted_density(&self, y: f64) -> f64 {
        let z = (y - self.mean) / self.stddev;
        self.weight.ln() - LN_SQRT_2PI - self.stddev.ln() - 0.5 * z * z
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    /// Sorted by ascending mean.
    pub components: Vec<GaussianComponent>,
    pub log_likelihood: f64,
    pub aic: f64,
    pub n_iterations: usize,
    pub converged: bool,
    /// Log-likelihood of the parameters at every iteration, ending with the
    /// returned model's value.
    pub log_likelihood_trace: Vec<f64>,
}

impl GmmModel {
    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn log_likelihood_of(&self, labels: &[f64]) -> f64 {
        labels
            .iter()
            .map(|&y| log_sum_exp(self.components.iter().map(|c| c.log_weighted_density(y))))
            .sum()
    }
}

/// Free parameters of an `n`-component 1-D mixture: `n` means, `n` variances
/// and `n - 1` independent weights.
pub fn n_parameters(n_components: usize) -> usize {
    3 * n_components - 1
}

pub fn aic(n_components: usize, log_likelihood: f64) -> f64 {
    2.0 * n_parameters(n_components) as f64 - 2.0 * log_likelihood
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn distinct_count(sorted: &[f64]) -> usize {
    let mut n = 0;
    let mut prev = None;
    for &v in sorted {
        if prev != Some(v) {
            n += 1;
            prev = Some(v);
        }
    }
    n
}

/// Fits an `n_components` mixture with EM from quantile initialization
/// (means at the `(n + 0.5)/N` quantiles, common overall stddev, equal
/// weights), plus `cfg.restarts` random-quantile restarts.
pub fn fit_em(labels: &[f64], n_components: usize, cfg: &EmConfig) -> Result<GmmModel> {
    cfg.validate()?;
    if n_components == 0 {
        return Err(Error::Config("n_components must be >= 1".into()));
    }
    if labels.len() < n_components {
        return Err(Error::Invalid(format!(
            "{} labels cannot support {n_components} components",
            labels.len()
        )));
    }
    if labels.iter().any(|y| !y.is_finite()) {
        return Err(Error::Invalid("labels must be finite".into()));
    }
    let sorted = sorted_copy(labels);
    let distinct = distinct_count(&sorted);
    if n_components > distinct {
        return Err(Error::TooFewDistinct {
            requested: n_components,
            distinct,
        });
    }
    let var = variance(labels);
    let floor = (cfg.variance_floor_ratio * var).max(MIN_VARIANCE);
    let sd0 = var.max(floor).sqrt();

    let quantile_means: Vec<f64> = (0..n_components)
        .map(|n| quantile_sorted(&sorted, (n as f64 + 0.5) / n_components as f64))
        .collect();
    let mut best = run_em(labels, quantile_means, sd0, floor, cfg);

    let mut rng = rng::stream(cfg.seed, "gmm-restarts");
    for _ in 0..cfg.restarts {
        let mut qs: Vec<f64> = (0..n_components).map(|_| rng.random::<f64>()).collect();
        qs.sort_by(f64::total_cmp);
        let means = qs.iter().map(|&q| quantile_sorted(&sorted, q)).collect();
        let candidate = run_em(labels, means, sd0, floor, cfg);
        if candidate.log_likelihood > best.log_likelihood {
            best = candidate;
        }
    }
    Ok(best)
}

fn run_em(labels: &[f64], means: Vec<f64>, sd0: f64, var_floor: f64, cfg: &EmConfig) -> GmmModel {
    let k = means.len();
    let n = labels.len() as f64;
    let mut comps: Vec<GaussianComponent> = means
        .into_iter()
        .map(|mean| GaussianComponent {
            weight: 1.0 / k as f64,
            mean,
            stddev: sd0,
        })
        .collect();
    let mut resp = vec![0.0; labels.len() * k];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut logp = vec![0.0; k];

    loop {
        // E-step: responsibilities and the log-likelihood of `comps`.
        let mut ll = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            for (c, comp) in comps.iter().enumerate() {
                logp[c] = comp.log_weighted_density(y);
            }
            let lse = log_sum_exp(logp.iter().copied());
            ll += lse;
            for c in 0..k {
                resp[i * k + c] = (logp[c] - lse).exp();
            }
        }
        let improvement = trace.last().map(|&prev| ll - prev);
        trace.push(ll);
        if matches!(improvement, Some(d) if d < cfg.tol) {
            converged = true;
            break;
        }
        if iterations == cfg.max_iter {
            break;
        }

        // M-step.
        for (c, comp) in comps.iter_mut().enumerate() {
            let nk: f64 = (0..labels.len()).map(|i| resp[i * k + c]).sum();
            if nk <= f64::MIN_POSITIVE {
                comp.weight = f64::MIN_POSITIVE;
                continue;
            }
            let mean = labels
                .iter()
                .enumerate()
                .map(|(i, &y)| resp[i * k + c] * y)
                .sum::<f64>()
                / nk;
            let var = labels
                .iter()
                .enumerate()
                .map(|(i, &y)| resp[i * k + c] * (y - mean).powi(2))
                .sum::<f64>()
                / nk;
            comp.weight = nk / n;
            comp.mean = mean;
            comp.stddev = var.max(var_floor).sqrt();
        }
        let total: f64 = comps.iter().map(|c| c.weight).sum();
        for comp in comps.iter_mut() {
            comp.weight /= total;
        }
        iterations += 1;
    }

    comps.sort_by(|a, b| a.mean.total_cmp(&b.mean));
    let log_likelihood = *trace.last().expect("at least one E-step");
    GmmModel {
        aic: aic(k, log_likelihood),
        components: comps,
        log_likelihood,
        n_iterations: iterations,
        converged,
        log_likelihood_trace: trace,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AicScore {
    pub n_components: usize,
    pub log_likelihood: f64,
    pub aic: f64,
}

/// Fits `1..=n_max` components and returns the smallest-AIC model (ties go to
/// fewer components) with the score of every candidate.
pub fn select_by_aic_with_scores(
    labels: &[f64],
    n_max: usize,
    cfg: &EmConfig,
) -> Result<(GmmModel, Vec<AicScore>)> {
    if n_max == 0 {
        return Err(Error::Config("n_max must be >= 1".into()));
    }
    let fits = fit_range(labels, n_max, cfg);
    let mut best: Option<GmmModel> = None;
    let mut scores = Vec::with_capacity(n_max);
    for fit in fits {
        let model = fit?;
        scores.push(AicScore {
            n_components: model.n_components(),
            log_likelihood: model.log_likelihood,
            aic: model.aic,
        });
        if best.as_ref().is_none_or(|b| model.aic < b.aic) {
            best = Some(model);
        }
    }
    Ok((best.expect("n_max >= 1"), scores))
}

pub fn select_by_aic(labels: &[f64], n_max: usize, cfg: &EmConfig) -> Result<GmmModel> {
    select_by_aic_with_scores(labels, n_max, cfg).map(|(m, _)| m)
}

#[cfg(feature = "parallel")]
fn fit_range(labels: &[f64], n_max: usize, cfg: &EmConfig) -> Vec<Result<GmmModel>> {
    use rayon::prelude::*;
    (1..=n_max)
        .into_par_iter()
        .map(|n| fit_em(labels, n, cfg))
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn fit_range(labels: &[f64], n_max: usize, cfg: &EmConfig) -> Vec<Result<GmmModel>> {
    (1..=n_max).map(|n| fit_em(labels, n, cfg)).collect()
}

/// `argmax_n π_n N(y | μ_n, σ_n²)`; exact ties go to the lower-mean component.
pub fn posterior_assign(gmm: &GmmModel, y: f64) -> usize {
    let mut best = 0;
    let mut best_lp = f64::NEG_INFINITY;
    for (n, c) in gmm.components.iter().enumerate() {
        let lp = c.log_weighted_density(y);
        if lp > best_lp {
            best = n;
            best_lp = lp;
        }
    }
    best
}

/// Rows of a dataset split by posterior component, in component order.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub subsets: Vec<TabularDataset>,
    /// Row indices (into the partitioned dataset) of each subset.
    pub indices: Vec<Vec<usize>>,
}

impl Partition {
    pub fn empty_components(&self) -> Vec<usize> {
        (0..self.subsets.len())
            .filter(|&n| self.subsets[n].is_empty())
            .collect()
    }
}

pub fn partition(ds: &TabularDataset, gmm: &GmmModel) -> Partition {
    let mut indices = vec![Vec::new(); gmm.n_components()];
    for (i, &y) in ds.targets().iter().enumerate() {
        indices[posterior_assign(gmm, y)].push(i);
    }
    let subsets = indices.iter().map(|idx| ds.subset(idx)).collect();
    Partition { subsets, indices }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use rand_distr::{Distribution, Normal};

    fn two_clusters(seed: u64, per: usize) -> Vec<f64> {
        let mut rng = rng::stream(seed, "test-two-clusters");
        let a = Normal::new(0.0, 1.0).unwrap();
        let b = Normal::new(10.0, 1.0).unwrap();
        let mut v: Vec<f64> = (0..per).map(|_| a.sample(&mut rng)).collect();
        v.extend((0..per).map(|_| b.sample(&mut rng)));
        v
    }

    fn model(components: &[(f64, f64, f64)]) -> GmmModel {
        GmmModel {
            components: components
                .iter()
                .map(|&(weight, mean, stddev)| GaussianComponent {
                    weight,
                    mean,
                    stddev,
                })
                .collect(),
            log_likelihood: 0.0,
            aic: 0.0,
            n_iterations: 0,
            converged: true,
            log_likelihood_trace: vec![],
        }
    }

    #[test]
    fn single_component_is_closed_form_after_one_iteration() {
        let labels = [1.0, 2.0, 4.0, 7.0, 11.0];
        let cfg = EmConfig {
            max_iter: 1,
            ..Default::default()
        };
        let m = fit_em(&labels, 1, &cfg).unwrap();
        let mean = 5.0;
        let sd = (labels.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / 5.0).sqrt();
        assert_eq!(m.n_iterations, 1);
        assert!((m.components[0].mean - mean).abs() < 1e-12);
        assert!((m.components[0].stddev - sd).abs() < 1e-12);
        assert_eq!(m.components[0].weight, 1.0);
    }

    #[test]
    fn recovers_two_separated_clusters() {
        let labels = two_clusters(3, 500);
        let m = fit_em(&labels, 2, &EmConfig::default()).unwrap();
        assert!(m.components[0].mean.abs() < 0.2, "{:?}", m.components);
        assert!((m.components[1].mean - 10.0).abs() < 0.2, "{:?}", m.components);
        let wsum: f64 = m.components.iter().map(|c| c.weight).sum();
        assert!((wsum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_likelihood_trace_is_monotone() {
        let labels = two_clusters(9, 200);
        for n in 1..=4 {
            let m = fit_em(&labels, n, &EmConfig::default()).unwrap();
            for w in m.log_likelihood_trace.windows(2) {
                assert!(w[1] - w[0] > -1e-9, "decrease {} -> {}", w[0], w[1]);
            }
            assert!((m.log_likelihood_of(&labels) - m.log_likelihood).abs() < 1e-6);
        }
    }

    #[test]
    fn aic_formula() {
        assert_eq!(n_parameters(2), 5);
        assert_eq!(aic(2, -100.0), 210.0);
        let labels = two_clusters(1, 100);
        let m = fit_em(&labels, 3, &EmConfig::default()).unwrap();
        assert!((m.aic - (2.0 * 8.0 - 2.0 * m.log_likelihood)).abs() < 1e-9);
    }

    #[test]
    fn too_many_components_is_an_error() {
        let labels = [1.0, 1.0, 2.0, 2.0];
        assert!(matches!(
            fit_em(&labels, 3, &EmConfig::default()),
            Err(Error::TooFewDistinct { requested: 3, distinct: 2 })
        ));
        assert!(fit_em(&labels, 0, &EmConfig::default()).is_err());
    }

    #[test]
    fn aic_picks_two_for_two_clusters() {
        let labels = two_clusters(5, 500);
        let (m, scores) = select_by_aic_with_scores(&labels, 2, &EmConfig::default()).unwrap();
        assert_eq!(m.n_components(), 2, "{scores:?}");
        assert!(scores[1].aic < scores[0].aic);
        let (_, scores) = select_by_aic_with_scores(&labels, 6, &EmConfig::default()).unwrap();
        assert_eq!(scores.len(), 6);
    }

    #[test]
    fn aic_with_one_candidate_equals_single_fit() {
        let labels = two_clusters(2, 50);
        let cfg = EmConfig::default();
        assert_eq!(select_by_aic(&labels, 1, &cfg).unwrap(), fit_em(&labels, 1, &cfg).unwrap());
    }

    #[test]
    fn posterior_examples() {
        let single = model(&[(1.0, 3.0, 2.0)]);
        assert_eq!(posterior_assign(&single, -100.0), 0);
        let sym = model(&[(0.5, 0.0, 1.0), (0.5, 10.0, 1.0)]);
        assert_eq!(posterior_assign(&sym, 5.0), 0);
        // weighted densities at 9.9: exp(-49.005) vs exp(-0.005)
        assert_eq!(posterior_assign(&sym, 9.9), 1);
        assert_eq!(posterior_assign(&sym, 5.0001), 1);
    }

    #[test]
    fn restarts_never_worsen_the_fit() {
        let labels = two_clusters(4, 100);
        let base = fit_em(&labels, 3, &EmConfig::default()).unwrap();
        let more = fit_em(
            &labels,
            3,
            &EmConfig {
                restarts: 4,
                seed: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(more.log_likelihood >= base.log_likelihood);
    }

    #[test]
    fn partition_examples() {
        let t = vec![0.0, 0.1, 10.0, 10.2];
        let ds = TabularDataset::numeric(Matrix::new(4, 1, t.clone()).unwrap(), t.clone()).unwrap();
        let m = fit_em(&t, 2, &EmConfig::default()).unwrap();
        let p = partition(&ds, &m);
        assert_eq!(p.subsets.iter().map(|s| s.n_rows()).collect::<Vec<_>>(), vec![2, 2]);
        let one = fit_em(&t, 1, &EmConfig::default()).unwrap();
        let p1 = partition(&ds, &one);
        assert_eq!(p1.subsets[0], ds);
        assert!(p1.empty_components().is_empty());
    }
}
