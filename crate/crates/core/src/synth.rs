//! SMOGN-style oversampling for regression.
//!
//! Rare rows are found with a relevance function over the target, grouped into
//! contiguous "bumps" along the sorted target axis, and each rare bump is
//! grown with synthetic rows. A synthetic row comes from SMOTER interpolation
//! towards one of the seed's k nearest neighbours (HEOM distance, same bump)
//! when that neighbour is within half the median neighbour distance, and from
//! Gaussian perturbation of the seed otherwise.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{quantile_sorted, sorted_copy, variance, ColumnKind, TabularDataset, STDDEV_FLOOR};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{self, Rng};

// ---------------------------------------------------------------------------
// Relevance

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlPoint {
    pub y: f64,
    pub relevance: f64,
    pub slope: f64,
}

/// Piecewise cubic Hermite interpolation of relevance control points,
/// constant beyond the first and last point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceFn {
    points: Vec<ControlPoint>,
}

impl RelevanceFn {
    pub fn new(mut points: Vec<ControlPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Invalid("relevance needs at least one control point".into()));
        }
        points.sort_by(|a, b| a.y.total_cmp(&b.y));
        for p in &points {
            if !(0.0..=1.0).contains(&p.relevance) || !p.y.is_finite() || !p.slope.is_finite() {
                return Err(Error::Invalid(format!("invalid relevance control point {p:?}")));
            }
        }
        if points.windows(2).any(|w| w[0].y == w[1].y) {
            return Err(Error::Invalid("relevance control points must have distinct y".into()));
        }
        Ok(Self { points })
    }

    /// Control points with Fritsch–Carlson slopes, which keep the interpolant
    /// monotone between points.
    pub fn monotone(points: &[(f64, f64)]) -> Result<Self> {
        let mut pts: Vec<(f64, f64)> = points.to_vec();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = pts.len();
        let secants: Vec<f64> = pts
            .windows(2)
            .map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0))
            .collect();
        let mut slopes = vec![0.0; n];
        for i in 0..n {
            slopes[i] = if n < 2 {
                0.0
            } else if i == 0 {
                secants[0]
            } else if i == n - 1 {
                secants[n - 2]
            } else if secants[i - 1] * secants[i] <= 0.0 {
                0.0
            } else {
                (secants[i - 1] + secants[i]) / 2.0
            };
        }
        for i in 0..n.saturating_sub(1) {
            if secants[i] == 0.0 {
                slopes[i] = 0.0;
                slopes[i + 1] = 0.0;
                continue;
            }
            let a = slopes[i] / secants[i];
            let b = slopes[i + 1] / secants[i];
            let s = a * a + b * b;
            if s > 9.0 {
                let t = 3.0 / s.sqrt();
                slopes[i] = t * a * secants[i];
                slopes[i + 1] = t * b * secants[i];
            }
        }
        Self::new(
            pts.iter()
                .zip(slopes)
                .map(|(&(y, relevance), slope)| ControlPoint { y, relevance, slope })
                .collect(),
        )
    }

    pub fn points(&self) -> &[ControlPoint] {
        &self.points
    }

    pub fn eval(&self, y: f64) -> f64 {
        let p = &self.points;
        let first = p[0];
        let last = p[p.len() - 1];
        if y <= first.y {
            return first.relevance;
        }
        if y >= last.y {
            return last.relevance;
        }
        let seg = p.partition_point(|c| c.y <= y) - 1;
        let (a, b) = (p[seg], p[seg + 1]);
        let h = b.y - a.y;
        let t = (y - a.y) / h;
        let t2 = t * t;
        let t3 = t2 * t;
        let v = (2.0 * t3 - 3.0 * t2 + 1.0) * a.relevance
            + (t3 - 2.0 * t2 + t) * h * a.slope
            + (-2.0 * t3 + 3.0 * t2) * b.relevance
            + (t3 - t2) * h * b.slope;
        v.clamp(0.0, 1.0)
    }
}

/// Box-plot relevance with zero slopes at every control point: 0 at the
/// median and 1 at each adjacent value that has labels beyond it. A side with
/// no labels beyond its adjacent value gets `(extreme label, 0)` instead, so
/// data without outliers has no rare region.
pub fn build_relevance(labels: &[f64]) -> Result<RelevanceFn> {
    if labels.is_empty() {
        return Err(Error::Empty("relevance of no labels".into()));
    }
    let sorted = sorted_copy(labels);
    let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
    if min == max {
        return Err(Error::Invalid("all labels are identical; no rare region exists".into()));
    }
    let median = quantile_sorted(&sorted, 0.5);
    let q1 = quantile_sorted(&sorted, 0.25);
    let q3 = quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    let lower = sorted.iter().copied().find(|&v| v >= q1 - 1.5 * iqr).unwrap_or(min);
    let upper = sorted.iter().rev().copied().find(|&v| v <= q3 + 1.5 * iqr).unwrap_or(max);
    let point = |y: f64, relevance: f64| ControlPoint {
        y,
        relevance,
        slope: 0.0,
    };
    let mut points = vec![point(median, 0.0)];
    let low = if min < lower { point(lower, 1.0) } else { point(min, 0.0) };
    let high = if max > upper { point(upper, 1.0) } else { point(max, 0.0) };
    for p in [low, high] {
        if p.y != median {
            points.push(p);
        }
    }
    RelevanceFn::new(points)
}

// ---------------------------------------------------------------------------
// Configuration

/// How large a rare bump becomes after oversampling. Bumps are never shrunk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OversamplePolicy {
    /// Mean size over all bumps, rare and normal.
    MeanBump,
    /// Size of the largest bump.
    LargestBump,
    /// Multiply each rare bump's size.
    Factor(f64),
    /// Grow all rare bumps by a common factor until rare rows make up this
    /// share of the output.
    Share(f64),
}

/// Which spread defines a component's oversampling range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegionSigma {
    /// The mixture component's standard deviation.
    Component,
    /// Standard deviation of the synthesized rows assigned to the component.
    Assigned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub k_neighbors: usize,
    pub relevance_threshold: f64,
    /// Gaussian-noise scale as a fraction of each column's stddev.
    pub pert: f64,
    /// Policy of the whole-target-space synthesizer.
    pub oversample_target: OversamplePolicy,
    /// Policy of the per-component synthesizer.
    pub region_target: OversamplePolicy,
    /// Half-width of a component's range in units of its stddev.
    pub alpha: f64,
    pub region_sigma: RegionSigma,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 5,
            relevance_threshold: 0.8,
            pert: 0.02,
            oversample_target: OversamplePolicy::MeanBump,
            region_target: OversamplePolicy::Share(0.5),
            alpha: 1.5,
            region_sigma: RegionSigma::Component,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_neighbors == 0 {
            return Err(Error::Config("synth k_neighbors must be >= 1".into()));
        }
        if !(self.relevance_threshold > 0.0 && self.relevance_threshold < 1.0) {
            return Err(Error::Config("synth relevance_threshold must be in (0, 1)".into()));
        }
        if !(self.pert > 0.0) {
            return Err(Error::Config("synth pert must be > 0".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("synth alpha must be > 0".into()));
        }
        for p in [self.oversample_target, self.region_target] {
            match p {
                OversamplePolicy::Factor(f) if !(f >= 1.0) => {
                    return Err(Error::Config("oversample factor must be >= 1".into()))
                }
                OversamplePolicy::Share(s) if !(s > 0.0 && s < 1.0) => {
                    return Err(Error::Config("oversample share must be in (0, 1)".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Distance and neighbours

/// Heterogeneous Euclidean-overlap metric: numeric columns contribute
/// `|a - b| / range`, categorical columns `0` or `1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heom {
    kinds: Vec<ColumnKind>,
    ranges: Vec<f64>,
}

impl Heom {
    pub fn fit(ds: &TabularDataset) -> Self {
        let kinds: Vec<ColumnKind> = ds.schema().kinds().collect();
        let x = ds.features();
        let ranges = (0..x.cols())
            .map(|j| {
                let (lo, hi) = x
                    .column(j)
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
                if hi > lo {
                    hi - lo
                } else {
                    0.0
                }
            })
            .collect();
        Self { kinds, ranges }
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for j in 0..a.len() {
            let d = match self.kinds[j] {
                ColumnKind::Categorical => {
                    if a[j] == b[j] {
                        0.0
                    } else {
                        1.0
                    }
                }
                ColumnKind::Numeric => {
                    if self.ranges[j] > 0.0 {
                        (a[j] - b[j]).abs() / self.ranges[j]
                    } else {
                        0.0
                    }
                }
            };
            s += d * d;
        }
        s.sqrt()
    }

    pub fn kinds(&self) -> &[ColumnKind] {
        &self.kinds
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

/// The `k` nearest rows to row `query` among `candidates` (row indices of
/// `ds`), excluding `query` itself; ties break towards the lower row index.
/// Fewer than `k` are returned when the pool is small.
pub fn knn(
    ds: &TabularDataset,
    query: usize,
    k: usize,
    candidates: &[usize],
    metric: &Heom,
) -> Vec<Neighbor> {
    let q = ds.row(query);
    let mut all: Vec<Neighbor> = candidates
        .iter()
        .filter(|&&i| i != query)
        .map(|&i| Neighbor {
            index: i,
            distance: metric.distance(q, ds.row(i)),
        })
        .collect();
    all.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index)));
    all.truncate(k);
    all
}

// ---------------------------------------------------------------------------
// Sample generators

#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub features: &'a [f64],
    pub target: f64,
}

/// Interpolates numeric features at `u` along seed → neighbour, takes each
/// categorical value from the seed where `take_seed(j)` holds, and sets the
/// target to the inverse-distance weighted mean of the parents' targets.
pub fn smoter_interpolate(
    seed: Sample<'_>,
    neighbor: Sample<'_>,
    u: f64,
    mut take_seed: impl FnMut(usize) -> bool,
    metric: &Heom,
) -> (Vec<f64>, f64) {
    let features: Vec<f64> = (0..seed.features.len())
        .map(|j| match metric.kinds[j] {
            ColumnKind::Numeric => {
                seed.features[j] + u * (neighbor.features[j] - seed.features[j])
            }
            ColumnKind::Categorical => {
                if take_seed(j) {
                    seed.features[j]
                } else {
                    neighbor.features[j]
                }
            }
        })
        .collect();
    let d_seed = metric.distance(&features, seed.features);
    let d_nb = metric.distance(&features, neighbor.features);
    let target = if d_seed + d_nb > 0.0 && d_seed != d_nb {
        (d_nb * seed.target + d_seed * neighbor.target) / (d_seed + d_nb)
    } else {
        0.5 * (seed.target + neighbor.target)
    };
    let (lo, hi) = if seed.target <= neighbor.target {
        (seed.target, neighbor.target)
    } else {
        (neighbor.target, seed.target)
    };
    (features, target.clamp(lo, hi))
}

pub fn smoter_sample(
    seed: Sample<'_>,
    neighbor: Sample<'_>,
    metric: &Heom,
    rng: &mut Rng,
) -> (Vec<f64>, f64) {
    let u: f64 = rng.random();
    let picks: Vec<bool> = (0..seed.features.len()).map(|_| rng.random()).collect();
    smoter_interpolate(seed, neighbor, u, |j| picks[j], metric)
}

/// Perturbs numeric features and the target by `N(0, (pert·stddev)²)`,
/// truncated at six standard deviations. Categorical features and columns
/// whose stddev sits at the floor are left untouched.
pub fn noise_sample(
    seed: Sample<'_>,
    pert: f64,
    feature_stddevs: &[f64],
    target_stddev: f64,
    kinds: &[ColumnKind],
    rng: &mut Rng,
) -> (Vec<f64>, f64) {
    let mut draw = |sd: f64| -> f64 {
        if sd <= STDDEV_FLOOR {
            return 0.0;
        }
        let z: f64 = StandardNormal.sample(rng);
        z.clamp(-6.0, 6.0) * pert * sd
    };
    let features = seed
        .features
        .iter()
        .enumerate()
        .map(|(j, &v)| match kinds[j] {
            ColumnKind::Numeric => v + draw(feature_stddevs[j]),
            ColumnKind::Categorical => v,
        })
        .collect();
    let target = seed.target + draw(target_stddev);
    (features, target)
}

// ---------------------------------------------------------------------------
// Synthesis

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Smoter,
    Noise,
}

/// Parents of one synthetic row, as row indices into the synthesizer input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: usize,
    pub neighbor: Option<usize>,
    pub branch: Branch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BumpReport {
    pub lo: f64,
    pub hi: f64,
    pub rare: bool,
    pub original: usize,
    pub target: usize,
    pub generated: usize,
    pub smoter: usize,
    pub noise: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    /// Input rows unchanged, followed by synthetic rows.
    pub dataset: TabularDataset,
    pub bumps: Vec<BumpReport>,
    /// One entry per synthetic row, in output order.
    pub provenance: Vec<Provenance>,
    /// Set when no row qualified as rare and the input passed through.
    pub no_rare_region: bool,
}

impl SynthOutput {
    pub fn n_generated(&self) -> usize {
        self.provenance.len()
    }
}

/// Oversamples the rare regions found by [`build_relevance`] over the whole
/// target range.
pub fn synthesize_full(d_t: &TabularDataset, cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    if d_t.is_empty() {
        return Err(Error::Empty("synthesizer input has no rows".into()));
    }
    let relevance = match build_relevance(d_t.targets()) {
        Ok(r) => r,
        Err(Error::Invalid(_)) => return Ok(passthrough(d_t)),
        Err(e) => return Err(e),
    };
    let threshold = cfg.relevance_threshold;
    synthesize_with(
        d_t,
        |y| relevance.eval(y) >= threshold,
        cfg.oversample_target,
        cfg,
        "synth-full",
    )
}

/// Oversamples exactly the rows with target in `[mu - alpha·sigma,
/// mu + alpha·sigma]`; rows outside the range pass through.
pub fn synthesize_region(
    d_s: &TabularDataset,
    mu: f64,
    sigma: f64,
    cfg: &SynthConfig,
) -> Result<SynthOutput> {
    cfg.validate()?;
    if !(sigma > 0.0) {
        return Err(Error::Invalid(format!("region sigma must be > 0, got {sigma}")));
    }
    let (lo, hi) = region_bounds(mu, sigma, cfg.alpha);
    if !d_s.targets().iter().any(|&y| y >= lo && y <= hi) {
        return Err(Error::EmptyRange { lo, hi });
    }
    synthesize_with(
        d_s,
        |y| y >= lo && y <= hi,
        cfg.region_target,
        cfg,
        "synth-region",
    )
}

pub fn region_bounds(mu: f64, sigma: f64, alpha: f64) -> (f64, f64) {
    (mu - alpha * sigma, mu + alpha * sigma)
}

fn passthrough(ds: &TabularDataset) -> SynthOutput {
    SynthOutput {
        dataset: ds.clone(),
        bumps: Vec::new(),
        provenance: Vec::new(),
        no_rare_region: true,
    }
}

struct Bump {
    rows: Vec<usize>,
    rare: bool,
}

fn find_bumps(ds: &TabularDataset, is_rare: &impl Fn(f64) -> bool) -> Vec<Bump> {
    let mut order: Vec<usize> = (0..ds.n_rows()).collect();
    order.sort_by(|&a, &b| ds.target(a).total_cmp(&ds.target(b)).then(a.cmp(&b)));
    let mut bumps: Vec<Bump> = Vec::new();
    for i in order {
        let rare = is_rare(ds.target(i));
        match bumps.last_mut() {
            Some(b) if b.rare == rare => b.rows.push(i),
            _ => bumps.push(Bump {
                rows: vec![i],
                rare,
            }),
        }
    }
    bumps
}

fn bump_targets(bumps: &[Bump], policy: OversamplePolicy) -> Vec<usize> {
    let sizes: Vec<usize> = bumps.iter().map(|b| b.rows.len()).collect();
    let total: usize = sizes.iter().sum();
    let grow = |size: usize, target: f64| (target.round() as usize).max(size);
    match policy {
        OversamplePolicy::MeanBump => {
            let mean = total as f64 / bumps.len() as f64;
            bumps.iter().map(|b| if b.rare { grow(b.rows.len(), mean) } else { b.rows.len() }).collect()
        }
        OversamplePolicy::LargestBump => {
            let largest = sizes.iter().copied().max().unwrap_or(0) as f64;
            bumps.iter().map(|b| if b.rare { grow(b.rows.len(), largest) } else { b.rows.len() }).collect()
        }
        OversamplePolicy::Factor(f) => bumps
            .iter()
            .map(|b| if b.rare { grow(b.rows.len(), f * b.rows.len() as f64) } else { b.rows.len() })
            .collect(),
        OversamplePolicy::Share(s) => {
            let rare: usize = bumps.iter().filter(|b| b.rare).map(|b| b.rows.len()).sum();
            let normal = total - rare;
            let factor = if rare == 0 {
                1.0
            } else {
                (s * normal as f64 / ((1.0 - s) * rare as f64)).max(1.0)
            };
            bumps
                .iter()
                .map(|b| if b.rare { grow(b.rows.len(), factor * b.rows.len() as f64) } else { b.rows.len() })
                .collect()
        }
    }
}

fn synthesize_with(
    ds: &TabularDataset,
    is_rare: impl Fn(f64) -> bool,
    policy: OversamplePolicy,
    cfg: &SynthConfig,
    tag: &str,
) -> Result<SynthOutput> {
    let bumps = find_bumps(ds, &is_rare);
    if !bumps.iter().any(|b| b.rare) {
        return Ok(passthrough(ds));
    }
    let targets = bump_targets(&bumps, policy);
    let metric = Heom::fit(ds);
    let kinds = metric.kinds.clone();
    let x = ds.features();
    let feature_sd = column_stddevs(x);
    let target_sd = stddev(ds.targets());
    let mut rng = rng::stream(cfg.seed, tag);

    let mut new_x = Matrix::with_cols(ds.n_features());
    let mut new_y = Vec::new();
    let mut provenance = Vec::new();
    let mut reports = Vec::with_capacity(bumps.len());

    for (bump, &target) in bumps.iter().zip(&targets) {
        let size = bump.rows.len();
        let lo = ds.target(bump.rows[0]);
        let hi = ds.target(bump.rows[size - 1]);
        let mut report = BumpReport {
            lo,
            hi,
            rare: bump.rare,
            original: size,
            target,
            generated: 0,
            smoter: 0,
            noise: 0,
        };
        if !bump.rare || target <= size {
            reports.push(report);
            continue;
        }
        let need = target - size;
        let mut seeds = bump.rows.clone();
        seeds.shuffle(&mut rng);
        let (base, extra) = (need / size, need % size);
        for (pos, &seed_row) in seeds.iter().enumerate() {
            let count = base + usize::from(pos < extra);
            if count == 0 {
                continue;
            }
            let neighbors = knn(ds, seed_row, cfg.k_neighbors, &bump.rows, &metric);
            let safe = if neighbors.is_empty() {
                0.0
            } else {
                let d: Vec<f64> = neighbors.iter().map(|n| n.distance).collect();
                median(&d) / 2.0
            };
            let seed = Sample {
                features: x.row(seed_row),
                target: ds.target(seed_row),
            };
            for _ in 0..count {
                let chosen = if neighbors.is_empty() {
                    None
                } else {
                    Some(neighbors[rng.random_range(0..neighbors.len())])
                };
                let (features, y, prov) = match chosen {
                    Some(nb) if nb.distance < safe => {
                        let nb_sample = Sample {
                            features: x.row(nb.index),
                            target: ds.target(nb.index),
                        };
                        let (f, y) = smoter_sample(seed, nb_sample, &metric, &mut rng);
                        report.smoter += 1;
                        (
                            f,
                            y,
                            Provenance {
                                seed: seed_row,
                                neighbor: Some(nb.index),
                                branch: Branch::Smoter,
                            },
                        )
                    }
                    _ => {
                        let (f, y) = noise_sample(seed, cfg.pert, &feature_sd, target_sd, &kinds, &mut rng);
                        report.noise += 1;
                        (
                            f,
                            y,
                            Provenance {
                                seed: seed_row,
                                neighbor: None,
                                branch: Branch::Noise,
                            },
                        )
                    }
                };
                new_x.push_row(&features)?;
                new_y.push(y);
                provenance.push(prov);
                report.generated += 1;
            }
        }
        reports.push(report);
    }

    Ok(SynthOutput {
        dataset: ds.with_synthetic_rows(&new_x, &new_y)?,
        bumps: reports,
        provenance,
        no_rare_region: false,
    })
}

fn median(v: &[f64]) -> f64 {
    let s = sorted_copy(v);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn stddev(v: &[f64]) -> f64 {
    variance(v).sqrt()
}

fn column_stddevs(x: &Matrix) -> Vec<f64> {
    (0..x.cols())
        .map(|j| stddev(&x.column(j).collect::<Vec<_>>()))
        .collect()
}
