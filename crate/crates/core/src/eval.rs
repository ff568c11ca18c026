//! Metrics and reports over the balanced/normal/inverse test sets, region
//! test sets, perturbation sweeps and the pairwise/center-loss identity.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{bin_counts, bin_index, BinningScheme, SplitBundle, TabularDataset, TestDistribution};
use crate::error::{Error, Result};
use crate::gmm::GmmModel;
use crate::rng;
use crate::ttsa::{self, Predictor, TtsaConfig};

/// Targets with smaller magnitude are left out of MAPE.
pub const MAPE_ZERO_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub mae: f64,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
    pub n: usize,
    pub mape_skipped: usize,
}

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Shape {
            expected: format!("{} predictions", truth.len()),
            actual: format!("{} predictions", pred.len()),
        });
    }
    if pred.is_empty() {
        return Err(Error::Empty("metrics of empty vectors".into()));
    }
    Ok(())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok((pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64).sqrt())
}

/// MAPE in percent and the number of skipped near-zero targets. When every
/// target is skipped the value is 0.
pub fn mape(pred: &[f64], truth: &[f64]) -> Result<(f64, usize)> {
    check_pair(pred, truth)?;
    let mut sum = 0.0;
    let mut used = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        if t.abs() < MAPE_ZERO_GUARD {
            continue;
        }
        sum += ((p - t) / t).abs();
        used += 1;
    }
    let value = if used == 0 { 0.0 } else { 100.0 * sum / used as f64 };
    Ok((value, pred.len() - used))
}

pub fn metrics(pred: &[f64], truth: &[f64]) -> Result<MetricSet> {
    let (mape, mape_skipped) = mape(pred, truth)?;
    Ok(MetricSet {
        mae: mae(pred, truth)?,
        rmse: rmse(pred, truth)?,
        mape,
        n: pred.len(),
        mape_skipped,
    })
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShotRegion {
    Many,
    Medium,
    Few,
}

impl ShotRegion {
    pub const ALL: [ShotRegion; 3] = [ShotRegion::Many, ShotRegion::Medium, ShotRegion::Few];

    pub fn name(self) -> &'static str {
        match self {
            ShotRegion::Many => "many",
            ShotRegion::Medium => "medium",
            ShotRegion::Few => "few",
        }
    }
}

/// Train-count thresholds: more than `many` rows is many-shot, fewer than
/// `few` is few-shot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShotThresholds {
    pub many: usize,
    pub few: usize,
}

impl Default for ShotThresholds {
    fn default() -> Self {
        Self { many: 100, few: 20 }
    }
}

impl ShotThresholds {
    pub fn classify(&self, train_count: usize) -> ShotRegion {
        if train_count > self.many {
            ShotRegion::Many
        } else if train_count < self.few {
            ShotRegion::Few
        } else {
            ShotRegion::Medium
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinMetrics {
    pub bin: usize,
    pub lo: f64,
    pub hi: f64,
    pub train_count: usize,
    pub shot: ShotRegion,
    pub metrics: Option<MetricSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotMetrics {
    pub shot: ShotRegion,
    pub metrics: Option<MetricSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub distribution: TestDistribution,
    pub overall: MetricSet,
    pub bins: Vec<BinMetrics>,
    pub shots: Vec<ShotMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub distributions: Vec<DistributionReport>,
    pub metadata: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn get(&self, dist: TestDistribution) -> Option<&DistributionReport> {
        self.distributions.iter().find(|d| d.distribution == dist)
    }

    pub fn mae(&self, dist: TestDistribution) -> Option<f64> {
        self.get(dist).map(|d| d.overall.mae)
    }

    /// Mean of the overall MAE across distributions.
    pub fn mean_mae(&self) -> f64 {
        self.distributions.iter().map(|d| d.overall.mae).sum::<f64>() / self.distributions.len().max(1) as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One line per distribution × scope (overall, each shot region, each
    /// bin). Empty groups have blank metric fields.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "method", "distribution", "scope", "key", "lo", "hi", "n", "mae", "rmse", "mape", "mape_skipped",
        ])?;
        let fields = |m: &Option<MetricSet>| -> [String; 5] {
            match m {
                Some(m) => [
                    m.n.to_string(),
                    m.mae.to_string(),
                    m.rmse.to_string(),
                    m.mape.to_string(),
                    m.mape_skipped.to_string(),
                ],
                None => ["0".into(), String::new(), String::new(), String::new(), "0".into()],
            }
        };
        for d in &self.distributions {
            let dist = d.distribution.name();
            let mut rec = vec![self.method.clone(), dist.into(), "overall".into(), String::new(), String::new(), String::new()];
            rec.extend(fields(&Some(d.overall)));
            w.write_record(&rec)?;
            for s in &d.shots {
                let mut rec = vec![self.method.clone(), dist.into(), "shot".into(), s.shot.name().into(), String::new(), String::new()];
                rec.extend(fields(&s.metrics));
                w.write_record(&rec)?;
            }
            for b in &d.bins {
                let mut rec = vec![
                    self.method.clone(),
                    dist.into(),
                    "bin".into(),
                    b.bin.to_string(),
                    b.lo.to_string(),
                    b.hi.to_string(),
                ];
                rec.extend(fields(&b.metrics));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn metrics_of(idx: &[usize], pred: &[f64], truth: &[f64]) -> Result<Option<MetricSet>> {
    if idx.is_empty() {
        return Ok(None);
    }
    let p: Vec<f64> = idx.iter().map(|&i| pred[i]).collect();
    let t: Vec<f64> = idx.iter().map(|&i| truth[i]).collect();
    metrics(&p, &t).map(Some)
}

/// Report for one test set given its predictions.
pub fn distribution_report(
    dist: TestDistribution,
    test: &TabularDataset,
    pred: &[f64],
    train_counts: &[usize],
    scheme: &BinningScheme,
    shots: &ShotThresholds,
) -> Result<DistributionReport> {
    let truth = test.targets();
    let overall = metrics(pred, truth)?;
    let mut by_bin: Vec<Vec<usize>> = vec![Vec::new(); scheme.num_bins];
    for (i, &y) in truth.iter().enumerate() {
        by_bin[bin_index(y, scheme)].push(i);
    }
    let mut by_shot: BTreeMap<ShotRegion, Vec<usize>> = ShotRegion::ALL.iter().map(|&s| (s, Vec::new())).collect();
    let mut bins = Vec::with_capacity(scheme.num_bins);
    for (b, idx) in by_bin.iter().enumerate() {
        let shot = shots.classify(train_counts[b]);
        by_shot.get_mut(&shot).expect("all shot regions present").extend(idx);
        let (lo, hi) = scheme.edges(b);
        bins.push(BinMetrics {
            bin: b,
            lo,
            hi,
            train_count: train_counts[b],
            shot,
            metrics: metrics_of(idx, pred, truth)?,
        });
    }
    let shots = ShotRegion::ALL
        .iter()
        .map(|&s| Ok(ShotMetrics { shot: s, metrics: metrics_of(&by_shot[&s], pred, truth)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(DistributionReport {
        distribution: dist,
        overall,
        bins,
        shots,
    })
}

/// Evaluates `predict` on all three test sets of `bundle`. Only test rows
/// are scored; train rows contribute their bin counts for shot regions.
pub fn evaluate(
    method: &str,
    mut predict: impl FnMut(TestDistribution, &TabularDataset) -> Result<Vec<f64>>,
    bundle: &SplitBundle,
    scheme: &BinningScheme,
    shots: &ShotThresholds,
) -> Result<EvalReport> {
    let train_counts = bin_counts(bundle.train.targets(), scheme);
    let mut distributions = Vec::with_capacity(3);
    for dist in TestDistribution::ALL {
        let test = bundle.test(dist);
        if test.is_empty() {
            return Err(Error::Empty(format!("{dist} test set has no rows")));
        }
        let pred = predict(dist, test)?;
        distributions.push(distribution_report(dist, test, &pred, &train_counts, scheme, shots)?);
    }
    Ok(EvalReport {
        method: method.to_string(),
        distributions,
        metadata: BTreeMap::new(),
    })
}

// ---------------------------------------------------------------------------
// Region test sets

#[derive(Debug, Clone, PartialEq)]
pub struct RegionSets {
    pub sets: Vec<TabularDataset>,
    /// Regions whose range held no pool rows.
    pub empty: Vec<bool>,
}

/// Up to `per_region` rows of `pool` with target in `[mu_n - sigma_n,
/// mu_n + sigma_n]` for each component, drawn without replacement.
pub fn region_test_sets(pool: &TabularDataset, gmm: &GmmModel, per_region: usize, seed: u64) -> Result<RegionSets> {
    if pool.is_empty() {
        return Err(Error::Empty("region test pool has no rows".into()));
    }
    let mut rng = rng::stream(seed, "region-test");
    let mut sets = Vec::with_capacity(gmm.n_components());
    let mut empty = Vec::with_capacity(gmm.n_components());
    for c in &gmm.components {
        let (lo, hi) = (c.mean - c.stddev, c.mean + c.stddev);
        let mut idx: Vec<usize> = (0..pool.n_rows())
            .filter(|&i| pool.target(i) >= lo && pool.target(i) <= hi && !pool.synthetic_flags()[i])
            .collect();
        idx.shuffle(&mut rng);
        idx.truncate(per_region);
        idx.sort_unstable();
        empty.push(idx.is_empty());
        sets.push(pool.subset(&idx));
    }
    Ok(RegionSets { sets, empty })
}

/// `table[e][r]`: MAE of expert `e` on region `r`'s test set (`None` for an
/// empty set).
pub fn region_mae_table(experts: &[&dyn Predictor], sets: &RegionSets) -> Result<Vec<Vec<Option<f64>>>> {
    experts
        .iter()
        .map(|e| {
            sets.sets
                .iter()
                .map(|s| {
                    if s.is_empty() {
                        Ok(None)
                    } else {
                        mae(&e.predict(s.features())?, s.targets()).map(Some)
                    }
                })
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Perturbation sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub metrics: BTreeMap<TestDistribution, MetricSet>,
    pub weights: BTreeMap<TestDistribution, Vec<f64>>,
    pub mean_mae: f64,
}

/// Aggregation and evaluation repeated at each corruption ratio with all
/// other settings fixed.
pub fn perturbation_sweep(
    experts: &[&dyn Predictor],
    bundle: &SplitBundle,
    ratios: &[f64],
    cfg: &TtsaConfig,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::Config(format!("sweep ratio {ratio} outside [0, 1]")));
        }
        let run_cfg = TtsaConfig {
            corrupt_ratio: ratio,
            ..cfg.clone()
        };
        let mut metric_map = BTreeMap::new();
        let mut weight_map = BTreeMap::new();
        for dist in TestDistribution::ALL {
            let test = bundle.test(dist);
            let w = ttsa::aggregate(experts, test.features(), &run_cfg)?;
            let pred = ttsa::predict_aggregated(experts, &w.raw, test.features())?;
            metric_map.insert(dist, metrics(&pred, test.targets())?);
            weight_map.insert(dist, w.normalized);
        }
        let mean_mae = metric_map.values().map(|m| m.mae).sum::<f64>() / metric_map.len() as f64;
        rows.push(SweepRow {
            ratio,
            metrics: metric_map,
            weights: weight_map,
            mean_mae,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = vec!["ratio".to_string()];
    for d in TestDistribution::ALL {
        header.push(format!("{d}_mae"));
        header.push(format!("{d}_rmse"));
    }
    header.push("mean_mae".into());
    writeln!(f, "{}", header.join(","))?;
    for r in rows {
        let mut line = vec![r.ratio.to_string()];
        for d in TestDistribution::ALL {
            let m = &r.metrics[&d];
            line.push(m.mae.to_string());
            line.push(m.rmse.to_string());
        }
        line.push(r.mean_mae.to_string());
        writeln!(f, "{}", line.join(","))?;
    }
    f.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Pairwise / center-loss identity

/// Returns `(Σ_{j≠j'} (y_j - y_j')², 2·n·Σ_j (y_j - mean)²)`.
///
/// The pairwise sum is evaluated in O(n) from moments taken about the first
/// value, `2·n·Σd² - 2·(Σd)²` with `d = y - y_0`, which keeps it accurate for
/// data far from zero.
pub fn gap_center_identity(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Invalid("identity needs at least two values".into()));
    }
    let n = values.len() as f64;
    let y0 = values[0];
    let (s1, s2) = values.iter().fold((0.0, 0.0), |(a, b), &y| {
        let d = y - y0;
        (a + d, b + d * d)
    });
    let pairwise = (2.0 * n * s2 - 2.0 * s1 * s1).max(0.0);
    let c = values.iter().sum::<f64>() / n;
    let center: f64 = values.iter().map(|y| (y - c).powi(2)).sum();
    Ok((pairwise, 2.0 * n * center))
}
