//! Tabular datasets, CSV ingestion, label binning, standardization and the
//! balanced / normal / inverse test-split protocol.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;

/// Lower bound applied to per-column standard deviations.
pub const STDDEV_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

impl Column {
    pub fn numeric(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Numeric,
        }
    }

    pub fn categorical(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Categorical,
        }
    }
}

/// Ordered feature columns plus the name of the target column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub columns: Vec<Column>,
    pub target: String,
}

impl FeatureSchema {
    pub fn new(columns: Vec<Column>, target: impl Into<String>) -> Result<Self> {
        let schema = Self {
            columns,
            target: target.into(),
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.columns.is_empty() {
            return Err(Error::Schema("at least one feature column is required".into()));
        }
        let mut seen = HashSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Schema(format!("duplicate column name `{}`", c.name)));
            }
        }
        if seen.contains(self.target.as_str()) {
            return Err(Error::Schema(format!(
                "target column `{}` is also listed as a feature",
                self.target
            )));
        }
        Ok(())
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn kinds(&self) -> impl Iterator<Item = ColumnKind> + '_ {
        self.columns.iter().map(|c| c.kind)
    }
}

/// Immutable feature matrix + targets. Categorical values are stored as
/// integer codes (as `f64`) indexing the column's code table.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    schema: FeatureSchema,
    code_tables: Vec<Vec<String>>,
    features: Matrix,
    targets: Vec<f64>,
    ids: Vec<u64>,
    synthetic: Vec<bool>,
}

impl TabularDataset {
    /// Builds a dataset of original rows; row ids are `0..n`.
    pub fn new(
        schema: FeatureSchema,
        code_tables: Vec<Vec<String>>,
        features: Matrix,
        targets: Vec<f64>,
    ) -> Result<Self> {
        let n = targets.len();
        Self::from_parts(
            schema,
            code_tables,
            features,
            targets,
            (0..n as u64).collect(),
            vec![false; n],
        )
    }

    pub fn from_parts(
        schema: FeatureSchema,
        code_tables: Vec<Vec<String>>,
        features: Matrix,
        targets: Vec<f64>,
        ids: Vec<u64>,
        synthetic: Vec<bool>,
    ) -> Result<Self> {
        schema.validate()?;
        let d = schema.n_features();
        if features.cols() != d {
            return Err(Error::Shape {
                expected: format!("{d} feature columns"),
                actual: format!("{} columns", features.cols()),
            });
        }
        let n = features.rows();
        if targets.len() != n || ids.len() != n || synthetic.len() != n {
            return Err(Error::Shape {
                expected: format!("{n} targets, ids and flags"),
                actual: format!(
                    "{} targets, {} ids, {} flags",
                    targets.len(),
                    ids.len(),
                    synthetic.len()
                ),
            });
        }
        if code_tables.len() != d {
            return Err(Error::Shape {
                expected: format!("{d} code tables"),
                actual: format!("{}", code_tables.len()),
            });
        }
        if let Some(i) = targets.iter().position(|y| !y.is_finite()) {
            return Err(Error::Invalid(format!("target of row {i} is not finite")));
        }
        for (j, col) in schema.columns.iter().enumerate() {
            match col.kind {
                ColumnKind::Categorical => {
                    let k = code_tables[j].len() as f64;
                    for i in 0..n {
                        let v = features.get(i, j);
                        if v.fract() != 0.0 || v < 0.0 || v >= k {
                            return Err(Error::Invalid(format!(
                                "row {i}: code {v} outside the code table of `{}`",
                                col.name
                            )));
                        }
                    }
                }
                ColumnKind::Numeric => {
                    if let Some(i) = (0..n).find(|&i| !features.get(i, j).is_finite()) {
                        return Err(Error::Invalid(format!(
                            "row {i}: non-finite value in `{}`",
                            col.name
                        )));
                    }
                }
            }
        }
        Ok(Self {
            schema,
            code_tables,
            features,
            targets,
            ids,
            synthetic,
        })
    }

    /// All-numeric dataset with generated column names `x0..`.
    pub fn numeric(features: Matrix, targets: Vec<f64>) -> Result<Self> {
        let columns = (0..features.cols())
            .map(|j| Column::numeric(format!("x{j}")))
            .collect();
        let d = features.cols();
        Self::new(
            FeatureSchema::new(columns, "y")?,
            vec![Vec::new(); d],
            features,
            targets,
        )
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn code_tables(&self) -> &[Vec<String>] {
        &self.code_tables
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn synthetic_flags(&self) -> &[bool] {
        &self.synthetic
    }

    pub fn n_rows(&self) -> usize {
        self.targets.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn n_synthetic(&self) -> usize {
        self.synthetic.iter().filter(|&&s| s).count()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn target(&self, i: usize) -> f64 {
        self.targets[i]
    }

    /// Largest row id in use, or `None` for an empty dataset.
    pub fn max_id(&self) -> Option<u64> {
        self.ids.iter().copied().max()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            schema: self.schema.clone(),
            code_tables: self.code_tables.clone(),
            features: self.features.select_rows(idx),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            synthetic: idx.iter().map(|&i| self.synthetic[i]).collect(),
        }
    }

    /// Same schema and code tables, no rows.
    pub fn empty_like(&self) -> Self {
        self.subset(&[])
    }

    /// Appends rows flagged as synthetic; ids continue after `max_id`.
    pub fn with_synthetic_rows(&self, features: &Matrix, targets: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        let mut next = self.max_id().map_or(0, |m| m + 1);
        for (i, &y) in targets.iter().enumerate() {
            out.features.push_row(features.row(i))?;
            out.targets.push(y);
            out.ids.push(next);
            out.synthetic.push(true);
            next += 1;
        }
        Ok(out)
    }

    pub fn with_features(&self, features: Matrix) -> Result<Self> {
        Self::from_parts(
            self.schema.clone(),
            self.code_tables.clone(),
            features,
            self.targets.clone(),
            self.ids.clone(),
            self.synthetic.clone(),
        )
    }

    /// Per-row CSV cell rendering of feature `j`.
    fn render(&self, i: usize, j: usize) -> String {
        let v = self.features.get(i, j);
        match self.schema.columns[j].kind {
            ColumnKind::Numeric => format!("{v}"),
            ColumnKind::Categorical => self.code_tables[j][v as usize].clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// CSV

/// Loads a CSV file with a header row. Feature columns are taken in schema
/// order; extra columns in the file are ignored. Categorical codes are
/// assigned in order of first appearance.
pub fn load_csv(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<TabularDataset> {
    load_csv_inner(path.as_ref(), schema, None)
}

/// Like [`load_csv`] but maps categorical labels through existing code tables,
/// so a persisted split decodes to the same codes it was written with.
pub fn load_csv_with_tables(
    path: impl AsRef<Path>,
    schema: &FeatureSchema,
    code_tables: &[Vec<String>],
) -> Result<TabularDataset> {
    load_csv_inner(path.as_ref(), schema, Some(code_tables))
}

fn load_csv_inner(
    path: &Path,
    schema: &FeatureSchema,
    fixed_tables: Option<&[Vec<String>]>,
) -> Result<TabularDataset> {
    schema.validate()?;
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let position = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(1, format!("missing column `{name}`")))
    };
    let feature_pos: Vec<usize> = schema
        .columns
        .iter()
        .map(|c| position(&c.name))
        .collect::<Result<_>>()?;
    let target_pos = position(&schema.target)?;
    let synthetic_pos = headers.iter().position(|h| h == "synthetic");

    let d = schema.n_features();
    let mut tables: Vec<Vec<String>> = match fixed_tables {
        Some(t) => t.to_vec(),
        None => vec![Vec::new(); d],
    };
    let mut lookup: Vec<HashMap<String, usize>> = tables
        .iter()
        .map(|t| t.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect())
        .collect();

    let mut data = Vec::new();
    let mut targets = Vec::new();
    let mut synthetic = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |pos: usize, name: &str| -> Result<&str> {
            match record.get(pos) {
                Some(s) if !s.is_empty() => Ok(s),
                _ => Err(parse_err(line, format!("missing value for `{name}`"))),
            }
        };
        for (j, col) in schema.columns.iter().enumerate() {
            let raw = field(feature_pos[j], &col.name)?;
            let v = match col.kind {
                ColumnKind::Numeric => parse_number(raw)
                    .ok_or_else(|| parse_err(line, format!("`{raw}` is not a number in column `{}`", col.name)))?,
                ColumnKind::Categorical => match lookup[j].get(raw) {
                    Some(&code) => code as f64,
                    None if fixed_tables.is_some() => {
                        return Err(parse_err(
                            line,
                            format!("unknown category `{raw}` in column `{}`", col.name),
                        ))
                    }
                    None => {
                        let code = tables[j].len();
                        tables[j].push(raw.to_string());
                        lookup[j].insert(raw.to_string(), code);
                        code as f64
                    }
                },
            };
            data.push(v);
        }
        let raw_y = field(target_pos, &schema.target)?;
        let y = parse_number(raw_y).ok_or_else(|| {
            parse_err(line, format!("`{raw_y}` is not a number in target `{}`", schema.target))
        })?;
        targets.push(y);
        let flag = match synthetic_pos.and_then(|p| record.get(p)) {
            Some(s) => matches!(s, "true" | "1"),
            None => false,
        };
        synthetic.push(flag);
    }
    let n = targets.len();
    let features = Matrix::new(n, d, data)?;
    TabularDataset::from_parts(
        schema.clone(),
        tables,
        features,
        targets,
        (0..n as u64).collect(),
        synthetic,
    )
}

fn parse_number(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Writes the dataset as CSV. With `with_synthetic`, an extra boolean
/// `synthetic` column is appended.
pub fn write_csv(ds: &TabularDataset, path: impl AsRef<Path>, with_synthetic: bool) -> Result<()> {
    if let Some(parent) = path.as_ref().parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = ds.schema.columns.iter().map(|c| c.name.as_str()).collect();
    header.push(&ds.schema.target);
    if with_synthetic {
        header.push("synthetic");
    }
    w.write_record(&header)?;
    for i in 0..ds.n_rows() {
        let mut rec: Vec<String> = (0..ds.n_features()).map(|j| ds.render(i, j)).collect();
        rec.push(format!("{}", ds.targets[i]));
        if with_synthetic {
            rec.push(ds.synthetic[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Binning

/// Half-open label bins `[origin + b·width, origin + (b+1)·width)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinningScheme {
    pub bin_width: f64,
    pub origin: f64,
    pub num_bins: usize,
}

impl BinningScheme {
    pub fn new(bin_width: f64, origin: f64, num_bins: usize) -> Result<Self> {
        let s = Self {
            bin_width,
            origin,
            num_bins,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bin_width > 0.0 && self.bin_width.is_finite()) {
            return Err(Error::Config(format!("bin width must be > 0, got {}", self.bin_width)));
        }
        if !self.origin.is_finite() {
            return Err(Error::Config("bin origin must be finite".into()));
        }
        if self.num_bins == 0 {
            return Err(Error::Config("at least one bin is required".into()));
        }
        Ok(())
    }

    /// Smallest grid of the given width (aligned to multiples of the width)
    /// that covers `labels`; with `max_bins`, values past the last bin are
    /// clamped into it.
    pub fn covering(labels: &[f64], bin_width: f64, max_bins: Option<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("cannot build bins from no labels".into()));
        }
        let lo = labels.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = labels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let origin = (lo / bin_width).floor() * bin_width;
        let mut num_bins = ((hi - origin) / bin_width).floor() as usize + 1;
        if let Some(m) = max_bins {
            num_bins = num_bins.min(m.max(1));
        }
        Self::new(bin_width, origin, num_bins)
    }

    pub fn index(&self, y: f64) -> usize {
        bin_index(y, self)
    }

    /// Left and right edge of bin `b`.
    pub fn edges(&self, b: usize) -> (f64, f64) {
        let lo = self.origin + b as f64 * self.bin_width;
        (lo, lo + self.bin_width)
    }
}

/// Bin of `y`; values left of the origin clamp to bin 0 and values at or past
/// the last edge clamp to the last bin.
pub fn bin_index(y: f64, scheme: &BinningScheme) -> usize {
    let pos = ((y - scheme.origin) / scheme.bin_width).floor();
    if pos.is_nan() || pos < 0.0 {
        0
    } else {
        (pos as usize).min(scheme.num_bins - 1)
    }
}

pub fn bin_counts(targets: &[f64], scheme: &BinningScheme) -> Vec<usize> {
    let mut counts = vec![0usize; scheme.num_bins];
    for &y in targets {
        counts[bin_index(y, scheme)] += 1;
    }
    counts
}

pub fn bin_frequencies(ds: &TabularDataset, scheme: &BinningScheme) -> Result<Vec<f64>> {
    if ds.is_empty() {
        return Err(Error::Empty("bin frequencies of an empty dataset".into()));
    }
    let n = ds.n_rows() as f64;
    Ok(bin_counts(ds.targets(), scheme)
        .into_iter()
        .map(|c| c as f64 / n)
        .collect())
}

/// Reciprocal weights `∝ 1/f_b` over bins with `f_b > 0`, normalized to sum
/// to one; empty bins get zero.
pub fn reciprocal_weights(freqs: &[f64]) -> Vec<f64> {
    let inv: Vec<f64> = freqs
        .iter()
        .map(|&f| if f > 0.0 { 1.0 / f } else { 0.0 })
        .collect();
    let total: f64 = inv.iter().sum();
    if total > 0.0 {
        inv.into_iter().map(|v| v / total).collect()
    } else {
        inv
    }
}

/// Integer apportionment of `total` by `weights` (largest remainder, ties to
/// the lower index).
pub fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 || total == 0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).filter(|&b| weights[b] > 0.0).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &b in order.iter().take(total.saturating_sub(assigned)) {
        out[b] += 1;
    }
    out
}

// ---------------------------------------------------------------------------
// Splits

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestDistribution {
    Balanced,
    Normal,
    Inverse,
}

impl TestDistribution {
    pub const ALL: [TestDistribution; 3] = [
        TestDistribution::Balanced,
        TestDistribution::Normal,
        TestDistribution::Inverse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TestDistribution::Balanced => "balanced",
            TestDistribution::Normal => "normal",
            TestDistribution::Inverse => "inverse",
        }
    }
}

impl std::fmt::Display for TestDistribution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-bin bookkeeping of a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSplitCounts {
    pub bin: usize,
    pub lo: f64,
    pub hi: f64,
    pub total: usize,
    pub train: usize,
    pub pool: usize,
    pub balanced: usize,
    pub normal: usize,
    pub inverse: usize,
    pub shortfall_balanced: bool,
    pub shortfall_normal: bool,
    pub shortfall_inverse: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub test_pool_fraction: f64,
    pub scheme: BinningScheme,
    pub pool_policy: String,
    pub per_test_set_size: usize,
    pub balanced_per_bin: usize,
    pub bins: Vec<BinSplitCounts>,
    pub code_tables: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitBundle {
    pub train: TabularDataset,
    pub test_balanced: TabularDataset,
    pub test_normal: TabularDataset,
    pub test_inverse: TabularDataset,
    pub bin_frequencies_train: Vec<f64>,
    pub seed: u64,
    pub shortfall: BTreeMap<TestDistribution, Vec<bool>>,
    pub manifest: SplitManifest,
}

impl SplitBundle {
    pub fn test(&self, dist: TestDistribution) -> &TabularDataset {
        match dist {
            TestDistribution::Balanced => &self.test_balanced,
            TestDistribution::Normal => &self.test_normal,
            TestDistribution::Inverse => &self.test_inverse,
        }
    }
}

const POOL_POLICY: &str = "per-bin stratified pool, divided three ways (extras to inverse, then balanced, then normal)";

/// Builds train and the three test sets.
///
/// Per bin, `floor(fraction · count)` shuffled rows go to a shared test pool and
/// the rest to train. The pool of each bin is dealt into three disjoint
/// sub-pools, one per test distribution. Every test set targets the same
/// total `M = floor(pool / 3)`: normal apportions `M` by train frequencies,
/// inverse by reciprocal train frequencies, balanced asks for
/// `c* = max(1, floor(median non-empty sub-pool count))` rows per bin. Targets
/// are capped by availability and flagged as shortfalls.
pub fn make_splits(
    ds: &TabularDataset,
    scheme: &BinningScheme,
    test_pool_fraction: f64,
    seed: u64,
) -> Result<SplitBundle> {
    scheme.validate()?;
    if !(test_pool_fraction > 0.0 && test_pool_fraction < 0.5) {
        return Err(Error::Config(format!(
            "test_pool_fraction must be in (0, 0.5), got {test_pool_fraction}"
        )));
    }
    let nb = scheme.num_bins;
    let mut rng = rng::stream(seed, "split");
    let mut by_bin: Vec<Vec<usize>> = vec![Vec::new(); nb];
    for (i, &y) in ds.targets().iter().enumerate() {
        by_bin[bin_index(y, scheme)].push(i);
    }

    let mut train_idx = Vec::new();
    let mut pools: Vec<Vec<usize>> = Vec::with_capacity(nb);
    for rows in by_bin.iter_mut() {
        rows.shuffle(&mut rng);
        let k = (test_pool_fraction * rows.len() as f64).floor() as usize;
        pools.push(rows[..k].to_vec());
        train_idx.extend_from_slice(&rows[k..]);
    }
    let pool_total: usize = pools.iter().map(Vec::len).sum();
    if pool_total == 0 {
        return Err(Error::Empty(
            "test pool is empty in every bin; increase test_pool_fraction or the dataset".into(),
        ));
    }
    train_idx.sort_unstable();
    let train = ds.subset(&train_idx);
    let train_counts = bin_counts(train.targets(), scheme);
    let n_train = train.n_rows().max(1) as f64;
    let freqs: Vec<f64> = train_counts.iter().map(|&c| c as f64 / n_train).collect();

    // Deal each pool into [inverse, balanced, normal] sub-pools.
    let deal_order = [
        TestDistribution::Inverse,
        TestDistribution::Balanced,
        TestDistribution::Normal,
    ];
    let mut sub: BTreeMap<TestDistribution, Vec<Vec<usize>>> = TestDistribution::ALL
        .iter()
        .map(|&d| (d, vec![Vec::new(); nb]))
        .collect();
    for (b, pool) in pools.iter().enumerate() {
        for (pos, &row) in pool.iter().enumerate() {
            let dist = deal_order[pos % 3];
            sub.get_mut(&dist).expect("all distributions present")[b].push(row);
        }
    }

    let m = pool_total / 3;
    let mut balanced_counts: Vec<usize> = sub[&TestDistribution::Balanced]
        .iter()
        .map(Vec::len)
        .filter(|&c| c > 0)
        .collect();
    balanced_counts.sort_unstable();
    let c_star = if balanced_counts.is_empty() {
        1
    } else {
        (median_sorted_usize(&balanced_counts).floor() as usize).max(1)
    };

    let nonempty_train: Vec<bool> = train_counts.iter().map(|&c| c > 0).collect();
    let targets: BTreeMap<TestDistribution, Vec<usize>> = [
        (TestDistribution::Normal, apportion(m, &freqs)),
        (TestDistribution::Inverse, apportion(m, &reciprocal_weights(&freqs))),
        (
            TestDistribution::Balanced,
            (0..nb)
                .map(|b| if nonempty_train[b] || !pools[b].is_empty() { c_star } else { 0 })
                .collect(),
        ),
    ]
    .into_iter()
    .collect();

    let mut sets = BTreeMap::new();
    let mut shortfall = BTreeMap::new();
    let mut realized: BTreeMap<TestDistribution, Vec<usize>> = BTreeMap::new();
    for dist in TestDistribution::ALL {
        let mut idx = Vec::new();
        let mut flags = vec![false; nb];
        let mut got = vec![0usize; nb];
        for b in 0..nb {
            let want = targets[&dist][b];
            let avail = &sub[&dist][b];
            let take = want.min(avail.len());
            flags[b] = want > avail.len();
            got[b] = take;
            idx.extend_from_slice(&avail[..take]);
        }
        idx.sort_unstable();
        sets.insert(dist, ds.subset(&idx));
        shortfall.insert(dist, flags);
        realized.insert(dist, got);
    }

    let bins = (0..nb)
        .map(|b| {
            let (lo, hi) = scheme.edges(b);
            BinSplitCounts {
                bin: b,
                lo,
                hi,
                total: by_bin[b].len(),
                train: train_counts[b],
                pool: pools[b].len(),
                balanced: realized[&TestDistribution::Balanced][b],
                normal: realized[&TestDistribution::Normal][b],
                inverse: realized[&TestDistribution::Inverse][b],
                shortfall_balanced: shortfall[&TestDistribution::Balanced][b],
                shortfall_normal: shortfall[&TestDistribution::Normal][b],
                shortfall_inverse: shortfall[&TestDistribution::Inverse][b],
            }
        })
        .collect();
    let manifest = SplitManifest {
        seed,
        test_pool_fraction,
        scheme: *scheme,
        pool_policy: POOL_POLICY.to_string(),
        per_test_set_size: m,
        balanced_per_bin: c_star,
        bins,
        code_tables: ds.code_tables().to_vec(),
    };

    let mut take = |d| sets.remove(&d).expect("all distributions built");
    Ok(SplitBundle {
        test_balanced: take(TestDistribution::Balanced),
        test_normal: take(TestDistribution::Normal),
        test_inverse: take(TestDistribution::Inverse),
        train,
        bin_frequencies_train: freqs,
        seed,
        shortfall,
        manifest,
    })
}

fn median_sorted_usize(v: &[usize]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

/// Persists a split as CSV files plus `manifest.json` under `dir`.
pub fn write_split(bundle: &SplitBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_csv(&bundle.train, dir.join("train.csv"), false)?;
    for dist in TestDistribution::ALL {
        write_csv(bundle.test(dist), dir.join(format!("test_{dist}.csv")), false)?;
    }
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&bundle.manifest)?,
    )?;
    Ok(())
}

/// Reads a split written by [`write_split`]. Row ids are renumbered per file.
pub fn read_split(dir: impl AsRef<Path>, schema: &FeatureSchema) -> Result<SplitBundle> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingArtifact(manifest_path.display().to_string()));
    }
    let manifest: SplitManifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
    let load = |name: &str| load_csv_with_tables(dir.join(name), schema, &manifest.code_tables);
    let train = load("train.csv")?;
    let counts = bin_counts(train.targets(), &manifest.scheme);
    let n = train.n_rows().max(1) as f64;
    let shortfall = [
        (
            TestDistribution::Balanced,
            manifest.bins.iter().map(|b| b.shortfall_balanced).collect(),
        ),
        (
            TestDistribution::Normal,
            manifest.bins.iter().map(|b| b.shortfall_normal).collect(),
        ),
        (
            TestDistribution::Inverse,
            manifest.bins.iter().map(|b| b.shortfall_inverse).collect(),
        ),
    ]
    .into_iter()
    .collect();
    Ok(SplitBundle {
        test_balanced: load("test_balanced.csv")?,
        test_normal: load("test_normal.csv")?,
        test_inverse: load("test_inverse.csv")?,
        bin_frequencies_train: counts.iter().map(|&c| c as f64 / n).collect(),
        train,
        seed: manifest.seed,
        shortfall,
        manifest,
    })
}

// ---------------------------------------------------------------------------
// Standardization

/// Per-feature affine standardization. Categorical columns map to identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub means: Vec<f64>,
    pub stddevs: Vec<f64>,
    pub numeric: Vec<bool>,
}

impl Scaler {
    pub fn transform_value(&self, j: usize, v: f64) -> f64 {
        if self.numeric[j] {
            (v - self.means[j]) / self.stddevs[j]
        } else {
            v
        }
    }

    pub fn inverse_value(&self, j: usize, v: f64) -> f64 {
        if self.numeric[j] {
            v * self.stddevs[j] + self.means[j]
        } else {
            v
        }
    }

    pub fn transform(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for i in 0..x.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = self.transform_value(j, *v);
            }
        }
        out
    }

    pub fn inverse(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for i in 0..x.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = self.inverse_value(j, *v);
            }
        }
        out
    }
}

/// Population mean and standard deviation of each numeric column, with the
/// standard deviation clamped to [`STDDEV_FLOOR`].
pub fn fit_scaler(ds: &TabularDataset) -> Scaler {
    fit_scaler_matrix(ds.features(), ds.schema().kinds())
}

pub fn fit_scaler_matrix(x: &Matrix, kinds: impl Iterator<Item = ColumnKind>) -> Scaler {
    let n = x.rows().max(1) as f64;
    let mut means = Vec::new();
    let mut stddevs = Vec::new();
    let mut numeric = Vec::new();
    for (j, kind) in kinds.enumerate() {
        if kind == ColumnKind::Numeric {
            let mean = x.column(j).sum::<f64>() / n;
            let var = x.column(j).map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            means.push(mean);
            stddevs.push(var.sqrt().max(STDDEV_FLOOR));
            numeric.push(true);
        } else {
            means.push(0.0);
            stddevs.push(1.0);
            numeric.push(false);
        }
    }
    Scaler {
        means,
        stddevs,
        numeric,
    }
}

pub fn apply_scaler(ds: &TabularDataset, scaler: &Scaler) -> Result<TabularDataset> {
    ds.with_features(scaler.transform(ds.features()))
}

pub fn invert_scaler(ds: &TabularDataset, scaler: &Scaler) -> Result<TabularDataset> {
    ds.with_features(scaler.inverse(ds.features()))
}

// ---------------------------------------------------------------------------
// Small statistics helpers shared across modules.

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population variance.
pub fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

/// Linear-interpolation quantile of sorted data (`q` in `[0, 1]`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn sorted_copy(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}
