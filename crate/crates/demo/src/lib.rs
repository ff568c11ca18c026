//! Browser bindings for three steps of the pipeline. Every export takes plain
//! numbers or comma-separated lists and returns a JSON string, so the page
//! needs no generated TypeScript types.

use mati::gmm::{self, AicScore, EmConfig, GaussianComponent};
use mati::matrix::Matrix;
use mati::synth::{self, SynthConfig};
use mati::synthetic::{self, RegionSpec};
use mati::ttsa::{self, EpochRecord, FnPredictor, Predictor, TtsaConfig};
use mati::rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("not a number: {t:?}")))
        .collect()
}

fn to_json<T: Serialize>(r: Result<T, String>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| error_json(&e.to_string())),
        Err(e) => error_json(&e),
    }
}

fn error_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

#[derive(Debug, Serialize)]
pub struct MixtureView {
    pub labels: Vec<f64>,
    pub scores: Vec<AicScore>,
    pub components: Vec<GaussianComponent>,
}

/// Samples labels from a mixture and fits `1..=n_max` components, keeping
/// the smallest AIC.
pub fn mixture_view(means: &str, sds: &str, counts: &str, n_max: usize, seed: u64) -> Result<MixtureView, String> {
    let means = parse_list(means)?;
    let sds = parse_list(sds)?;
    let counts: Vec<usize> = parse_list(counts)?.iter().map(|c| c.max(0.0) as usize).collect();
    if means.len() != sds.len() || means.len() != counts.len() {
        return Err("means, stddevs and counts need the same length".into());
    }
    if counts.iter().sum::<usize>() > 20_000 {
        return Err("at most 20000 labels".into());
    }
    let labels = synthetic::mixture_labels(&means, &sds, &counts, seed).map_err(|e| e.to_string())?;
    let cfg = EmConfig { seed, ..Default::default() };
    let (model, scores) = gmm::select_by_aic_with_scores(&labels, n_max.clamp(1, 8), &cfg).map_err(|e| e.to_string())?;
    Ok(MixtureView {
        labels,
        scores,
        components: model.components,
    })
}

#[wasm_bindgen]
pub fn fit_mixture(means: &str, sds: &str, counts: &str, n_max: usize, seed: u64) -> String {
    to_json(mixture_view(means, sds, counts, n_max, seed))
}

#[derive(Debug, Serialize)]
pub struct RegionView {
    pub components: Vec<GaussianComponent>,
    pub lo: f64,
    pub hi: f64,
    pub before: Vec<f64>,
    pub added: Vec<f64>,
}

/// Generates the three-region toy data, fits a three-component mixture and
/// oversamples the chosen component's label range.
pub fn region_view(component: usize, alpha: f64, share: f64, seed: u64) -> Result<RegionView, String> {
    let ds = synthetic::regions(&RegionSpec {
        n_rows: 1500,
        seed,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let model = gmm::fit_em(ds.targets(), 3, &EmConfig { seed, restarts: 5, ..Default::default() })
        .map_err(|e| e.to_string())?;
    let c = model
        .components
        .get(component)
        .ok_or_else(|| format!("component must be below {}", model.components.len()))?;
    let cfg = SynthConfig {
        alpha,
        region_target: synth::OversamplePolicy::Share(share),
        seed,
        ..Default::default()
    };
    let out = synth::synthesize_region(&ds, c.mean, c.stddev, &cfg).map_err(|e| e.to_string())?;
    let (lo, hi) = synth::region_bounds(c.mean, c.stddev, alpha);
    let n = ds.n_rows();
    Ok(RegionView {
        components: model.components.clone(),
        lo,
        hi,
        before: ds.targets().to_vec(),
        added: out.dataset.targets()[n..].to_vec(),
    })
}

#[wasm_bindgen]
pub fn synthesize_region(component: usize, alpha: f64, share: f64, seed: u64) -> String {
    to_json(region_view(component, alpha, share, seed))
}

#[derive(Debug, Serialize)]
pub struct TraceView {
    pub slopes: Vec<f64>,
    pub history: Vec<EpochRecord>,
    pub normalized: Vec<f64>,
    pub stopped_early: bool,
}

/// Aggregates linear experts `f_k(x) = slope_k · Σx` on Gaussian features.
/// Experts with small slopes barely move under corruption and gain weight.
pub fn trace_view(slopes: &str, ratio: f64, lr: f64, epochs: usize, seed: u64) -> Result<TraceView, String> {
    let slopes = parse_list(slopes)?;
    if slopes.len() < 2 || slopes.len() > 8 {
        return Err("between 2 and 8 experts".into());
    }
    let (m, d) = (512, 4);
    let mut r = rng::stream(seed, "demo-features");
    let x = Matrix::new(m, d, (0..m * d).map(|_| StandardNormal.sample(&mut r)).collect()).map_err(|e| e.to_string())?;
    let experts: Vec<FnPredictor<_>> = slopes
        .iter()
        .map(|&s| {
            FnPredictor(move |x: &Matrix| {
                (0..x.rows())
                    .map(|i| s * (0..x.cols()).map(|j| x.get(i, j)).sum::<f64>())
                    .collect::<Vec<f64>>()
            })
        })
        .collect();
    let refs: Vec<&dyn Predictor> = experts.iter().map(|e| e as &dyn Predictor).collect();
    let cfg = TtsaConfig {
        epochs: epochs.clamp(1, 200),
        corrupt_ratio: ratio,
        learning_rate: lr,
        target_scale: Some(1.0),
        seed,
        ..Default::default()
    };
    let w = ttsa::aggregate(&refs, &x, &cfg).map_err(|e| e.to_string())?;
    Ok(TraceView {
        slopes,
        history: w.history,
        normalized: w.normalized,
        stopped_early: w.stopped_early,
    })
}

#[wasm_bindgen]
pub fn aggregation_trace(slopes: &str, ratio: f64, lr: f64, epochs: usize, seed: u64) -> String {
    to_json(trace_view(slopes, ratio, lr, epochs, seed))
}
