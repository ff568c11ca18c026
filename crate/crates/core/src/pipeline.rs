//! End-to-end runs: split → mixture → synthesis → experts → aggregation →
//! reports, with the vanilla and SMOGN baselines alongside.
//!
//! Every stage writes its artifacts under `<out>/seed-<s>/<stage>/` together
//! with a `.key` file holding a SHA-256 over the stage's configuration and
//! its upstream keys. A stage whose key matches is loaded instead of being
//! recomputed.
//!
//! ```text
//! <out>/config.toml                 resolved configuration
//! <out>/summary.json, summary.csv   per-seed and mean metrics per method
//! <out>/seed-<s>/split/             train.csv, test_{balanced,normal,inverse}.csv, manifest.json
//! <out>/seed-<s>/gmm/               gmm.json
//! <out>/seed-<s>/synth/             full.csv, region-<n>.csv, manifest.json
//! <out>/seed-<s>/models/            expert-<n>.json, vanilla.json, smogn.json, manifest.json
//! <out>/seed-<s>/weights/           {balanced,normal,inverse}.json, trace.csv
//! <out>/seed-<s>/reports/           <method>.json, <method>.csv, region_mae.csv
//! <out>/seed-<s>/sweep/             sweep.csv, sweep.json
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    self, load_csv, load_csv_with_tables, make_splits, read_split, write_csv, write_split, BinningScheme, Column,
    FeatureSchema, SplitBundle, TabularDataset, TestDistribution,
};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, ShotThresholds, SweepRow};
use crate::expert::{self, ExpertModel, MlpConfig};
use crate::gmm::{self, AicScore, EmConfig, GmmModel};
use crate::rng::derive_seed;
use crate::synth::{self, BumpReport, RegionSigma, SynthConfig, SynthOutput};
use crate::ttsa::{self, AggregationWeights, Predictor, TtsaConfig};

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// CSV with a header row. Relative paths resolve against the config file.
    pub path: PathBuf,
    /// TOML file with `target` and `[[columns]]`; used when `columns` is empty.
    pub schema_file: Option<PathBuf>,
    pub target: Option<String>,
    pub columns: Vec<Column>,
}

impl DataConfig {
    pub fn schema(&self) -> Result<FeatureSchema> {
        if !self.columns.is_empty() {
            let target = self
                .target
                .clone()
                .ok_or_else(|| Error::Config("data.target is required with data.columns".into()))?;
            return FeatureSchema::new(self.columns.clone(), target);
        }
        match &self.schema_file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read schema file {}: {e}", p.display())))?;
                let schema: FeatureSchema = toml::from_str(&text)?;
                schema.validate()?;
                Ok(schema)
            }
            None => Err(Error::Config("data needs `columns` and `target`, or `schema_file`".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinningConfig {
    pub width: f64,
    /// Left edge of bin 0; defaults to the smallest label.
    pub origin: Option<f64>,
    pub num_bins: Option<usize>,
    /// Cap on the number of bins when they are derived from the labels.
    pub max_bins: Option<usize>,
}

impl Default for BinningConfig {
    fn default() -> Self {
        Self {
            width: 1.0,
            origin: None,
            num_bins: None,
            max_bins: None,
        }
    }
}

impl BinningConfig {
    pub fn scheme(&self, labels: &[f64]) -> Result<BinningScheme> {
        match (self.origin, self.num_bins) {
            (Some(origin), Some(n)) => BinningScheme::new(self.width, origin, n),
            (None, None) => BinningScheme::covering(labels, self.width, self.max_bins),
            _ => Err(Error::Config("binning.origin and binning.num_bins must be set together".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub test_pool_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_pool_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmConfig {
    pub n_max: usize,
    /// Skips AIC selection and fits exactly this many components.
    pub n_components: Option<usize>,
    pub max_iter: usize,
    pub tol: f64,
    pub variance_floor_ratio: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        let em = EmConfig::default();
        Self {
            n_max: 5,
            n_components: None,
            max_iter: em.max_iter,
            tol: em.tol,
            variance_floor_ratio: em.variance_floor_ratio,
            restarts: em.restarts,
            seed: 0,
        }
    }
}

impl GmmConfig {
    pub fn em(&self, seed: u64) -> EmConfig {
        EmConfig {
            max_iter: self.max_iter,
            tol: self.tol,
            variance_floor_ratio: self.variance_floor_ratio,
            restarts: self.restarts,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub many_shot: usize,
    pub few_shot: usize,
    /// Rows per region in the region-wise expert table.
    pub region_test_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let s = ShotThresholds::default();
        Self {
            many_shot: s.many,
            few_shot: s.few,
            region_test_size: 200,
        }
    }
}

impl EvalConfig {
    pub fn shots(&self) -> ShotThresholds {
        ShotThresholds {
            many: self.many_shot,
            few: self.few_shot,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub ratios: Vec<f64>,
    /// Also run the sweep at the end of `run-all`.
    pub enabled: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ratios: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
            enabled: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Vanilla,
    Smogn,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::Vanilla => "vanilla",
            Baseline::Smogn => "smogn",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub baselines: Vec<Baseline>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            baselines: vec![Baseline::Vanilla, Baseline::Smogn],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub binning: BinningConfig,
    pub split: SplitConfig,
    pub gmm: GmmConfig,
    pub synth: SynthConfig,
    pub mlp: MlpConfig,
    pub ttsa: TtsaConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub run: RunSection,
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies `key.path=value`
    /// overrides and resolves relative data paths against the file's
    /// directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(base) = path.and_then(Path::parent) {
            let resolve = |p: &mut PathBuf| {
                if !p.as_os_str().is_empty() && p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            resolve(&mut cfg.data.path);
            if let Some(s) = cfg.data.schema_file.as_mut() {
                resolve(s);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.binning.width > 0.0) {
            return Err(Error::Config("binning.width must be > 0".into()));
        }
        if !(self.split.test_pool_fraction > 0.0 && self.split.test_pool_fraction < 0.5) {
            return Err(Error::Config("split.test_pool_fraction must be in (0, 0.5)".into()));
        }
        if self.gmm.n_max == 0 || self.gmm.n_components == Some(0) {
            return Err(Error::Config("gmm.n_max and gmm.n_components must be >= 1".into()));
        }
        self.gmm.em(0).validate()?;
        self.synth.validate()?;
        self.mlp.validate()?;
        self.ttsa.validate(0)?;
        if self.run.seeds.is_empty() {
            return Err(Error::Config("run.seeds must not be empty".into()));
        }
        if self.eval.few_shot > self.eval.many_shot {
            return Err(Error::Config("eval.few_shot must not exceed eval.many_shot".into()));
        }
        Ok(())
    }
}

/// Applies `a.b.c=value`. The value is read as a TOML literal when it parses
/// as one and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` must look like key.path=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override `{assignment}` has an empty key segment")));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Seed of one stage, mixing the run seed, a stage tag and the section's own
/// seed field.
pub fn stage_seed(run_seed: u64, tag: &str, section_seed: u64) -> u64 {
    derive_seed(run_seed, &format!("{tag}/{section_seed}"))
}

// ---------------------------------------------------------------------------
// In-memory stages

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureFit {
    pub model: GmmModel,
    pub scores: Vec<AicScore>,
    pub partition_sizes: Vec<usize>,
}

pub fn fit_mixture(train: &TabularDataset, cfg: &GmmConfig, run_seed: u64) -> Result<MixtureFit> {
    let em = cfg.em(stage_seed(run_seed, "gmm", cfg.seed));
    let labels = train.targets();
    let (model, scores) = match cfg.n_components {
        Some(n) => {
            let m = gmm::fit_em(labels, n, &em)?;
            let s = vec![AicScore {
                n_components: n,
                log_likelihood: m.log_likelihood,
                aic: m.aic,
            }];
            (m, s)
        }
        None => gmm::select_by_aic_with_scores(labels, cfg.n_max, &em)?,
    };
    let partition_sizes = gmm::partition(train, &model).indices.iter().map(Vec::len).collect();
    Ok(MixtureFit {
        model,
        scores,
        partition_sizes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub component: usize,
    pub mean: f64,
    pub sigma: f64,
    pub lo: f64,
    pub hi: f64,
    pub rows: usize,
    pub generated: usize,
    pub smoter: usize,
    pub noise: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub config: SynthConfig,
    pub full_rows: usize,
    pub full_generated: usize,
    pub no_rare_region: bool,
    pub full_bumps: Vec<BumpReport>,
    pub regions: Vec<RegionSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthStage {
    pub full: TabularDataset,
    pub regions: Vec<TabularDataset>,
    pub manifest: SynthManifest,
}

fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(usize, &T) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
}

/// Whole-space synthesis followed by one region synthesis per component.
pub fn synthesize_all(train: &TabularDataset, mixture: &GmmModel, cfg: &SynthConfig, run_seed: u64) -> Result<SynthStage> {
    let full_cfg = SynthConfig {
        seed: stage_seed(run_seed, "synth-full", cfg.seed),
        ..cfg.clone()
    };
    let full: SynthOutput = synth::synthesize_full(train, &full_cfg)?;
    let d_s = &full.dataset;
    let assigned = gmm::partition(d_s, mixture);
    let comps: Vec<_> = mixture.components.iter().copied().collect();
    let results = par_map(&comps, |n, c| -> Result<(RegionSummary, SynthOutput)> {
        let sigma = match cfg.region_sigma {
            RegionSigma::Component => c.stddev,
            RegionSigma::Assigned => {
                let ys = assigned.subsets[n].targets();
                let sd = if ys.len() >= 2 { data::variance(ys).sqrt() } else { 0.0 };
                if sd > 0.0 {
                    sd
                } else {
                    c.stddev
                }
            }
        };
        let region_cfg = SynthConfig {
            seed: stage_seed(run_seed, &format!("synth-region-{n}"), cfg.seed),
            ..cfg.clone()
        };
        let out = synth::synthesize_region(d_s, c.mean, sigma, &region_cfg)?;
        let (lo, hi) = synth::region_bounds(c.mean, sigma, cfg.alpha);
        let count = |b: synth::Branch| out.provenance.iter().filter(|p| p.branch == b).count();
        Ok((
            RegionSummary {
                component: n,
                mean: c.mean,
                sigma,
                lo,
                hi,
                rows: out.dataset.n_rows(),
                generated: out.n_generated(),
                smoter: count(synth::Branch::Smoter),
                noise: count(synth::Branch::Noise),
            },
            out,
        ))
    });
    let mut regions = Vec::with_capacity(results.len());
    let mut summaries = Vec::with_capacity(results.len());
    for r in results {
        let (s, out) = r?;
        summaries.push(s);
        regions.push(out.dataset);
    }
    Ok(SynthStage {
        manifest: SynthManifest {
            config: cfg.clone(),
            full_rows: full.dataset.n_rows(),
            full_generated: full.n_generated(),
            no_rare_region: full.no_rare_region,
            full_bumps: full.bumps.clone(),
            regions: summaries,
        },
        full: full.dataset,
        regions,
    })
}

/// A named training job for [`train_models`].
pub struct TrainJob<'a> {
    pub name: String,
    pub data: &'a TabularDataset,
    pub region: Option<(f64, f64)>,
}

pub fn train_models(jobs: &[TrainJob<'_>], cfg: &MlpConfig, run_seed: u64) -> Result<Vec<ExpertModel>> {
    par_map(jobs, |_, job| {
        let c = MlpConfig {
            seed: stage_seed(run_seed, &format!("mlp-{}", job.name), cfg.seed),
            ..cfg.clone()
        };
        let m = expert::train_expert(job.data, &c)?;
        Ok(match job.region {
            Some((mean, sd)) => m.with_region(mean, sd),
            None => m,
        })
    })
    .into_iter()
    .collect()
}

/// One aggregation per test distribution on that set's features only.
pub fn aggregate_per_distribution(
    experts: &[ExpertModel],
    bundle: &SplitBundle,
    cfg: &TtsaConfig,
    run_seed: u64,
) -> Result<BTreeMap<TestDistribution, AggregationWeights>> {
    let refs: Vec<&dyn Predictor> = experts.iter().map(|e| e as &dyn Predictor).collect();
    let scale = cfg
        .target_scale
        .unwrap_or_else(|| data::variance(bundle.train.targets()).sqrt().max(1e-12));
    let dists = TestDistribution::ALL;
    let out = par_map(&dists, |_, &dist| {
        let c = TtsaConfig {
            seed: stage_seed(run_seed, &format!("ttsa-{dist}"), cfg.seed),
            target_scale: Some(scale),
            ..cfg.clone()
        };
        ttsa::aggregate(&refs, bundle.test(dist).features(), &c).map(|w| (dist, w))
    });
    out.into_iter().collect()
}

pub fn mati_report(
    experts: &[ExpertModel],
    weights: &BTreeMap<TestDistribution, AggregationWeights>,
    bundle: &SplitBundle,
    shots: &ShotThresholds,
) -> Result<EvalReport> {
    let refs: Vec<&dyn Predictor> = experts.iter().map(|e| e as &dyn Predictor).collect();
    eval::evaluate(
        "mati",
        |dist, test| ttsa::predict_aggregated(&refs, &weights[&dist].raw, test.features()),
        bundle,
        &bundle.manifest.scheme,
        shots,
    )
}

pub fn single_model_report(name: &str, model: &ExpertModel, bundle: &SplitBundle, shots: &ShotThresholds) -> Result<EvalReport> {
    eval::evaluate(
        name,
        |_, test| expert::predict(model, test.features()),
        bundle,
        &bundle.manifest.scheme,
        shots,
    )
}

// ---------------------------------------------------------------------------
// Run directories

fn sha256_json(value: &impl Serialize) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ok,
    Cached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelsManifest {
    pub experts: Vec<String>,
    pub baselines: Vec<String>,
    pub rows: BTreeMap<String, usize>,
    pub best_epochs: BTreeMap<String, usize>,
}

/// Everything a seed's run produced.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub mixture: MixtureFit,
    pub experts: Vec<ExpertModel>,
    pub weights: BTreeMap<TestDistribution, AggregationWeights>,
    pub reports: BTreeMap<String, EvalReport>,
    /// `region_mae[e][r]`: MAE of expert `e` on region `r`'s test rows.
    pub region_mae: Vec<Vec<Option<f64>>>,
    pub keys: BTreeMap<&'static str, String>,
}

/// Runs stages of one configuration inside an output directory.
pub struct Runner<'a> {
    pub cfg: RunConfig,
    pub out: PathBuf,
    log: Box<dyn Fn(&str) + 'a>,
}

struct Loaded<T> {
    value: T,
    key: String,
}

impl<'a> Runner<'a> {
    pub fn new(cfg: RunConfig, out: impl Into<PathBuf>) -> Self {
        Self {
            cfg,
            out: out.into(),
            log: Box::new(|_| {}),
        }
    }

    pub fn with_logger(mut self, log: impl Fn(&str) + 'a) -> Self {
        self.log = Box::new(log);
        self
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out.join(format!("seed-{seed}"))
    }

    fn stage_dir(&self, seed: u64, stage: &str) -> PathBuf {
        self.seed_dir(seed).join(stage)
    }

    fn emit(&self, seed: u64, stage: &str, status: StageStatus, detail: &str) {
        let s = match status {
            StageStatus::Ok => "ok",
            StageStatus::Cached => "cached",
        };
        let line = if detail.is_empty() {
            format!("seed={seed} stage={stage} status={s}")
        } else {
            format!("seed={seed} stage={stage} status={s} {detail}")
        };
        (self.log)(&line);
    }

    pub fn write_config_snapshot(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        std::fs::write(self.out.join("config.toml"), self.cfg.to_toml()?)?;
        Ok(())
    }

    /// Loads the stage when its key matches, otherwise computes and saves it.
    #[allow(clippy::too_many_arguments)]
    fn cached<T>(
        &self,
        seed: u64,
        stage: &'static str,
        key: String,
        load: impl Fn(&Path) -> Result<T>,
        compute: impl FnOnce() -> Result<T>,
        save: impl Fn(&T, &Path) -> Result<()>,
        detail: impl Fn(&T) -> String,
    ) -> Result<Loaded<T>> {
        let dir = self.stage_dir(seed, stage);
        let key_path = dir.join(".key");
        if std::fs::read_to_string(&key_path).is_ok_and(|k| k.trim() == key) {
            if let Ok(value) = load(&dir) {
                self.emit(seed, stage, StageStatus::Cached, &detail(&value));
                return Ok(Loaded { value, key });
            }
        }
        let value = compute().map_err(|e| e.in_stage(stage))?;
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::create_dir_all(&dir)?;
        save(&value, &dir).map_err(|e| e.in_stage(stage))?;
        std::fs::write(&key_path, format!("{key}\n"))?;
        self.emit(seed, stage, StageStatus::Ok, &detail(&value));
        Ok(Loaded { value, key })
    }

    fn require_key(&self, seed: u64, stage: &'static str, hint: &str) -> Result<String> {
        let p = self.stage_dir(seed, stage).join(".key");
        std::fs::read_to_string(&p)
            .map(|k| k.trim().to_string())
            .map_err(|_| Error::MissingArtifact(format!("{} (run `{hint}` first)", p.display())).in_stage(stage))
    }

    fn schema(&self) -> Result<FeatureSchema> {
        self.cfg.data.schema()
    }

    // -- split --------------------------------------------------------------

    fn split(&self, seed: u64) -> Result<Loaded<SplitBundle>> {
        let schema = self.schema().map_err(|e| e.in_stage("split"))?;
        let path = &self.cfg.data.path;
        if path.as_os_str().is_empty() {
            return Err(Error::Config("data.path is not set".into()).in_stage("split"));
        }
        let bytes = std::fs::read(path)
            .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())).in_stage("split"))?;
        let data_hash = hex::encode(Sha256::digest(&bytes));
        let key = sha256_json(&(
            "split",
            &data_hash,
            &schema,
            &self.cfg.binning,
            &self.cfg.split,
            seed,
        ))?;
        self.cached(
            seed,
            "split",
            key,
            |dir| read_split(dir, &schema),
            || {
                let ds = load_csv(path, &schema)?;
                let scheme = self.cfg.binning.scheme(ds.targets())?;
                make_splits(&ds, &scheme, self.cfg.split.test_pool_fraction, stage_seed(seed, "split", 0))
            },
            |b, dir| write_split(b, dir),
            |b| {
                format!(
                    "train={} balanced={} normal={} inverse={}",
                    b.train.n_rows(),
                    b.test_balanced.n_rows(),
                    b.test_normal.n_rows(),
                    b.test_inverse.n_rows()
                )
            },
        )
    }

    fn load_split(&self, seed: u64) -> Result<Loaded<SplitBundle>> {
        let key = self.require_key(seed, "split", "split")?;
        let value = read_split(self.stage_dir(seed, "split"), &self.schema()?).map_err(|e| e.in_stage("split"))?;
        Ok(Loaded { value, key })
    }

    // -- gmm ----------------------------------------------------------------

    fn gmm(&self, seed: u64, split: &Loaded<SplitBundle>) -> Result<Loaded<MixtureFit>> {
        let key = sha256_json(&("gmm", &split.key, &self.cfg.gmm, seed))?;
        self.cached(
            seed,
            "gmm",
            key,
            |dir| read_json(&dir.join("gmm.json")),
            || fit_mixture(&split.value.train, &self.cfg.gmm, seed),
            |m, dir| write_json(&dir.join("gmm.json"), m),
            |m| format!("components={}", m.model.n_components()),
        )
    }

    fn load_gmm(&self, seed: u64) -> Result<Loaded<MixtureFit>> {
        let key = self.require_key(seed, "gmm", "fit-gmm")?;
        let value = read_json(&self.stage_dir(seed, "gmm").join("gmm.json")).map_err(|e| e.in_stage("gmm"))?;
        Ok(Loaded { value, key })
    }

    // -- synth --------------------------------------------------------------

    fn synth(&self, seed: u64, split: &Loaded<SplitBundle>, mix: &Loaded<MixtureFit>) -> Result<Loaded<SynthStage>> {
        let key = sha256_json(&("synth", &mix.key, &self.cfg.synth, seed))?;
        let schema = self.schema()?;
        let tables = split.value.manifest.code_tables.clone();
        self.cached(
            seed,
            "synth",
            key,
            |dir| load_synth(dir, &schema, &tables),
            || synthesize_all(&split.value.train, &mix.value.model, &self.cfg.synth, seed),
            |s, dir| {
                write_csv(&s.full, dir.join("full.csv"), true)?;
                for (n, r) in s.regions.iter().enumerate() {
                    write_csv(r, dir.join(format!("region-{n}.csv")), true)?;
                }
                write_json(&dir.join("manifest.json"), &s.manifest)
            },
            |s| {
                let sizes: Vec<String> = s.regions.iter().map(|r| r.n_rows().to_string()).collect();
                format!("full={} regions={}", s.full.n_rows(), sizes.join(","))
            },
        )
    }

    fn load_synth_stage(&self, seed: u64, split: &Loaded<SplitBundle>) -> Result<Loaded<SynthStage>> {
        let key = self.require_key(seed, "synth", "synth")?;
        let value = load_synth(
            &self.stage_dir(seed, "synth"),
            &self.schema()?,
            &split.value.manifest.code_tables,
        )
        .map_err(|e| e.in_stage("synth"))?;
        Ok(Loaded { value, key })
    }

    // -- models -------------------------------------------------------------

    fn models(
        &self,
        seed: u64,
        split: &Loaded<SplitBundle>,
        mix: &Loaded<MixtureFit>,
        syn: &Loaded<SynthStage>,
    ) -> Result<Loaded<TrainedModels>> {
        let key = sha256_json(&("models", &split.key, &syn.key, &self.cfg.mlp, &self.cfg.run.baselines, seed))?;
        let baselines = self.cfg.run.baselines.clone();
        self.cached(
            seed,
            "models",
            key,
            load_models,
            || {
                let mut jobs: Vec<TrainJob<'_>> = syn
                    .value
                    .regions
                    .iter()
                    .zip(&syn.value.manifest.regions)
                    .map(|(d, r)| TrainJob {
                        name: format!("expert-{}", r.component),
                        data: d,
                        region: Some((r.mean, mix.value.model.components[r.component].stddev)),
                    })
                    .collect();
                let n_experts = jobs.len();
                for b in &baselines {
                    jobs.push(TrainJob {
                        name: b.name().into(),
                        data: match b {
                            Baseline::Vanilla => &split.value.train,
                            Baseline::Smogn => &syn.value.full,
                        },
                        region: None,
                    });
                }
                let mut models = train_models(&jobs, &self.cfg.mlp, seed)?;
                let base_models = models.split_off(n_experts);
                let names: Vec<String> = jobs.iter().map(|j| j.name.clone()).collect();
                let rows = jobs.iter().map(|j| (j.name.clone(), j.data.n_rows())).collect();
                let best_epochs = names
                    .iter()
                    .zip(models.iter().chain(&base_models))
                    .map(|(n, m)| (n.clone(), m.best_epoch))
                    .collect();
                Ok(TrainedModels {
                    manifest: ModelsManifest {
                        experts: names[..n_experts].to_vec(),
                        baselines: names[n_experts..].to_vec(),
                        rows,
                        best_epochs,
                    },
                    experts: models,
                    baselines: base_models,
                })
            },
            save_models,
            |m| format!("experts={} baselines={}", m.experts.len(), m.baselines.len()),
        )
    }

    fn load_models_stage(&self, seed: u64) -> Result<Loaded<TrainedModels>> {
        let dir = self.stage_dir(seed, "models");
        let key = self.require_key(seed, "models", "train-experts").map_err(|_| {
            Error::MissingArtifact(format!(
                "{} (run `train-experts` first)",
                dir.join("expert-*.json").display()
            ))
            .in_stage("models")
        })?;
        let value = load_models(&dir).map_err(|e| e.in_stage("models"))?;
        Ok(Loaded { value, key })
    }

    // -- weights ------------------------------------------------------------

    fn weights(
        &self,
        seed: u64,
        split: &Loaded<SplitBundle>,
        models: &Loaded<TrainedModels>,
    ) -> Result<Loaded<BTreeMap<TestDistribution, AggregationWeights>>> {
        let key = sha256_json(&("weights", &models.key, &self.cfg.ttsa, seed))?;
        self.cached(
            seed,
            "weights",
            key,
            |dir| {
                TestDistribution::ALL
                    .iter()
                    .map(|&d| Ok((d, read_json(&dir.join(format!("{d}.json")))?)))
                    .collect()
            },
            || aggregate_per_distribution(&models.value.experts, &split.value, &self.cfg.ttsa, seed),
            |w, dir| {
                for (d, aw) in w {
                    write_json(&dir.join(format!("{d}.json")), aw)?;
                }
                write_trace(w, &dir.join("trace.csv"))
            },
            |w| {
                w.iter()
                    .map(|(d, aw)| format!("{d}={}", fmt_weights(&aw.normalized)))
                    .collect::<Vec<_>>()
                    .join(" ")
            },
        )
    }

    fn load_weights(&self, seed: u64) -> Result<Loaded<BTreeMap<TestDistribution, AggregationWeights>>> {
        let key = self.require_key(seed, "weights", "aggregate")?;
        let dir = self.stage_dir(seed, "weights");
        let value = TestDistribution::ALL
            .iter()
            .map(|&d| Ok((d, read_json(&dir.join(format!("{d}.json")))?)))
            .collect::<Result<_>>()
            .map_err(|e: Error| e.in_stage("weights"))?;
        Ok(Loaded { value, key })
    }

    // -- reports ------------------------------------------------------------

    fn reports(
        &self,
        seed: u64,
        split: &SplitBundle,
        mix: &MixtureFit,
        models: &TrainedModels,
        weights: &BTreeMap<TestDistribution, AggregationWeights>,
    ) -> Result<(BTreeMap<String, EvalReport>, Vec<Vec<Option<f64>>>)> {
        let run = || -> Result<_> {
            let shots = self.cfg.eval.shots();
            let mut reports = BTreeMap::new();
            let mut mati = mati_report(&models.experts, weights, split, &shots)?;
            mati.metadata.insert("seed".into(), seed.to_string());
            mati.metadata.insert("experts".into(), models.experts.len().to_string());
            reports.insert("mati".to_string(), mati);
            for (name, m) in models.manifest.baselines.iter().zip(&models.baselines) {
                let mut r = single_model_report(name, m, split, &shots)?;
                r.metadata.insert("seed".into(), seed.to_string());
                reports.insert(name.clone(), r);
            }
            let pool = concat_tests(split)?;
            let sets = eval::region_test_sets(&pool, &mix.model, self.cfg.eval.region_test_size, stage_seed(seed, "region-test", 0))?;
            let refs: Vec<&dyn Predictor> = models.experts.iter().map(|e| e as &dyn Predictor).collect();
            let table = eval::region_mae_table(&refs, &sets)?;

            let dir = self.stage_dir(seed, "reports");
            if dir.exists() {
                std::fs::remove_dir_all(&dir)?;
            }
            std::fs::create_dir_all(&dir)?;
            for (name, r) in &reports {
                write_json(&dir.join(format!("{name}.json")), r)?;
                r.write_csv(dir.join(format!("{name}.csv")))?;
            }
            write_region_table(&table, &sets.sets, &dir.join("region_mae.csv"))?;
            Ok((reports, table))
        };
        let out = run().map_err(|e| e.in_stage("evaluate"))?;
        let detail = out
            .0
            .iter()
            .map(|(n, r)| {
                let maes: Vec<String> = TestDistribution::ALL
                    .iter()
                    .map(|&d| format!("{:.4}", r.mae(d).unwrap_or(f64::NAN)))
                    .collect();
                format!("{n}_mae={}", maes.join("/"))
            })
            .collect::<Vec<_>>()
            .join(" ");
        self.emit(seed, "evaluate", StageStatus::Ok, &detail);
        Ok(out)
    }

    // -- public entry points ------------------------------------------------

    pub fn run_split(&self, seed: u64) -> Result<SplitBundle> {
        self.write_config_snapshot()?;
        Ok(self.split(seed)?.value)
    }

    pub fn run_fit_gmm(&self, seed: u64) -> Result<MixtureFit> {
        let split = self.load_split(seed)?;
        Ok(self.gmm(seed, &split)?.value)
    }

    pub fn run_synth(&self, seed: u64) -> Result<SynthStage> {
        let split = self.load_split(seed)?;
        let mix = self.load_gmm(seed)?;
        Ok(self.synth(seed, &split, &mix)?.value)
    }

    pub fn run_train(&self, seed: u64) -> Result<TrainedModels> {
        let split = self.load_split(seed)?;
        let mix = self.load_gmm(seed)?;
        let syn = self.load_synth_stage(seed, &split)?;
        Ok(self.models(seed, &split, &mix, &syn)?.value)
    }

    pub fn run_aggregate(&self, seed: u64) -> Result<BTreeMap<TestDistribution, AggregationWeights>> {
        let models = self.load_models_stage(seed)?;
        let split = self.load_split(seed)?;
        Ok(self.weights(seed, &split, &models)?.value)
    }

    pub fn run_evaluate(&self, seed: u64) -> Result<BTreeMap<String, EvalReport>> {
        let models = self.load_models_stage(seed)?;
        let weights = self.load_weights(seed)?;
        let split = self.load_split(seed)?;
        let mix = self.load_gmm(seed)?;
        Ok(self.reports(seed, &split.value, &mix.value, &models.value, &weights.value)?.0)
    }

    pub fn run_sweep(&self, seed: u64, ratios: &[f64]) -> Result<Vec<SweepRow>> {
        let models = self.load_models_stage(seed)?;
        let split = self.load_split(seed)?;
        self.sweep(seed, &split.value, &models.value, ratios)
    }

    fn sweep(&self, seed: u64, split: &SplitBundle, models: &TrainedModels, ratios: &[f64]) -> Result<Vec<SweepRow>> {
        let run = || -> Result<_> {
            let refs: Vec<&dyn Predictor> = models.experts.iter().map(|e| e as &dyn Predictor).collect();
            let scale = self
                .cfg
                .ttsa
                .target_scale
                .unwrap_or_else(|| data::variance(split.train.targets()).sqrt().max(1e-12));
            let cfg = TtsaConfig {
                seed: stage_seed(seed, "sweep", self.cfg.ttsa.seed),
                target_scale: Some(scale),
                ..self.cfg.ttsa.clone()
            };
            let rows = eval::perturbation_sweep(&refs, split, ratios, &cfg)?;
            let dir = self.stage_dir(seed, "sweep");
            std::fs::create_dir_all(&dir)?;
            eval::write_sweep_csv(&rows, dir.join("sweep.csv"))?;
            write_json(&dir.join("sweep.json"), &rows)?;
            Ok(rows)
        };
        let rows = run().map_err(|e| e.in_stage("sweep"))?;
        let detail = rows
            .iter()
            .map(|r| format!("{}:{:.4}", r.ratio, r.mean_mae))
            .collect::<Vec<_>>()
            .join(" ");
        self.emit(seed, "sweep", StageStatus::Ok, &format!("mean_mae={detail}"));
        Ok(rows)
    }

    /// Every stage for one seed, reusing cached stages.
    pub fn run_seed(&self, seed: u64) -> Result<RunResult> {
        let split = self.split(seed)?;
        let mix = self.gmm(seed, &split)?;
        let syn = self.synth(seed, &split, &mix)?;
        let models = self.models(seed, &split, &mix, &syn)?;
        let weights = self.weights(seed, &split, &models)?;
        let (reports, region_mae) = self.reports(seed, &split.value, &mix.value, &models.value, &weights.value)?;
        if self.cfg.sweep.enabled {
            self.sweep(seed, &split.value, &models.value, &self.cfg.sweep.ratios)?;
        }
        let keys = [
            ("split", split.key),
            ("gmm", mix.key.clone()),
            ("synth", syn.key),
            ("models", models.key),
            ("weights", weights.key),
        ]
        .into_iter()
        .collect();
        Ok(RunResult {
            seed,
            mixture: mix.value,
            experts: models.value.experts,
            weights: weights.value,
            reports,
            region_mae,
            keys,
        })
    }

    /// All configured seeds plus `summary.json` and `summary.csv`.
    pub fn run_all(&self) -> Result<(Vec<RunResult>, Summary)> {
        self.write_config_snapshot()?;
        let mut results = Vec::new();
        for &seed in &self.cfg.run.seeds {
            results.push(self.run_seed(seed)?);
        }
        let summary = Summary::from_results(&results);
        write_json(&self.out.join("summary.json"), &summary)?;
        summary.write_csv(&self.out.join("summary.csv"))?;
        Ok((results, summary))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModels {
    pub experts: Vec<ExpertModel>,
    pub baselines: Vec<ExpertModel>,
    pub manifest: ModelsManifest,
}

fn save_models(m: &TrainedModels, dir: &Path) -> Result<()> {
    for (name, model) in m.manifest.experts.iter().zip(&m.experts) {
        std::fs::write(dir.join(format!("{name}.json")), model.to_json()? + "\n")?;
    }
    for (name, model) in m.manifest.baselines.iter().zip(&m.baselines) {
        std::fs::write(dir.join(format!("{name}.json")), model.to_json()? + "\n")?;
    }
    write_json(&dir.join("manifest.json"), &m.manifest)
}

fn load_models(dir: &Path) -> Result<TrainedModels> {
    let manifest: ModelsManifest = read_json(&dir.join("manifest.json"))?;
    let load = |name: &String| -> Result<ExpertModel> {
        let p = dir.join(format!("{name}.json"));
        let text = std::fs::read_to_string(&p).map_err(|_| Error::MissingArtifact(p.display().to_string()))?;
        ExpertModel::from_json(&text)
    };
    Ok(TrainedModels {
        experts: manifest.experts.iter().map(load).collect::<Result<_>>()?,
        baselines: manifest.baselines.iter().map(load).collect::<Result<_>>()?,
        manifest,
    })
}

fn load_synth(dir: &Path, schema: &FeatureSchema, tables: &[Vec<String>]) -> Result<SynthStage> {
    let manifest: SynthManifest = read_json(&dir.join("manifest.json"))?;
    let load = |name: String| -> Result<TabularDataset> {
        let p = dir.join(&name);
        if !p.exists() {
            return Err(Error::MissingArtifact(p.display().to_string()));
        }
        load_csv_with_tables(p, schema, tables)
    };
    let full = load("full.csv".into())?;
    let regions = (0..manifest.regions.len())
        .map(|n| load(format!("region-{n}.csv")))
        .collect::<Result<_>>()?;
    Ok(SynthStage { full, regions, manifest })
}

fn concat_tests(b: &SplitBundle) -> Result<TabularDataset> {
    let mut x = crate::matrix::Matrix::with_cols(b.train.n_features());
    let mut y = Vec::new();
    for t in [&b.test_balanced, &b.test_normal, &b.test_inverse] {
        for i in 0..t.n_rows() {
            x.push_row(t.row(i))?;
            y.push(t.target(i));
        }
    }
    TabularDataset::new(b.train.schema().clone(), b.train.code_tables().to_vec(), x, y)
}

fn fmt_weights(w: &[f64]) -> String {
    w.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(",")
}

fn write_trace(w: &BTreeMap<TestDistribution, AggregationWeights>, path: &Path) -> Result<()> {
    let n = w.values().next().map_or(0, |a| a.normalized.len());
    let mut out = String::from("distribution,epoch,gap");
    for i in 1..=n {
        out.push_str(&format!(",w{i}"));
    }
    out.push('\n');
    for (d, aw) in w {
        for h in &aw.history {
            out.push_str(&format!("{d},{},{}", h.epoch, h.gap));
            for v in &h.weights {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_region_table(table: &[Vec<Option<f64>>], sets: &[TabularDataset], path: &Path) -> Result<()> {
    let mut out = String::from("expert");
    for r in 0..sets.len() {
        out.push_str(&format!(",region_{r}"));
    }
    out.push('\n');
    out.push_str("rows");
    for s in sets {
        out.push_str(&format!(",{}", s.n_rows()));
    }
    out.push('\n');
    for (e, row) in table.iter().enumerate() {
        out.push_str(&format!("expert_{e}"));
        for v in row {
            match v {
                Some(v) => out.push_str(&format!(",{v}")),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Summary

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    /// Seed → distribution → metrics.
    pub per_seed: BTreeMap<u64, BTreeMap<TestDistribution, eval::MetricSet>>,
    /// Distribution → mean MAE over seeds.
    pub mean_mae: BTreeMap<TestDistribution, f64>,
    pub mean_rmse: BTreeMap<TestDistribution, f64>,
    /// Mean over seeds and distributions.
    pub overall_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seeds: Vec<u64>,
    pub methods: BTreeMap<String, MethodSummary>,
    /// Seed → distribution → normalized MATI weights.
    pub weights: BTreeMap<u64, BTreeMap<TestDistribution, Vec<f64>>>,
    pub components: BTreeMap<u64, usize>,
}

impl Summary {
    pub fn from_results(results: &[RunResult]) -> Self {
        let mut methods: BTreeMap<String, MethodSummary> = BTreeMap::new();
        for r in results {
            for (name, rep) in &r.reports {
                let entry = methods.entry(name.clone()).or_insert_with(|| MethodSummary {
                    per_seed: BTreeMap::new(),
                    mean_mae: BTreeMap::new(),
                    mean_rmse: BTreeMap::new(),
                    overall_mae: 0.0,
                });
                entry
                    .per_seed
                    .insert(r.seed, rep.distributions.iter().map(|d| (d.distribution, d.overall)).collect());
            }
        }
        for m in methods.values_mut() {
            let k = m.per_seed.len() as f64;
            for d in TestDistribution::ALL {
                let maes: Vec<f64> = m.per_seed.values().filter_map(|s| s.get(&d).map(|x| x.mae)).collect();
                let rmses: Vec<f64> = m.per_seed.values().filter_map(|s| s.get(&d).map(|x| x.rmse)).collect();
                m.mean_mae.insert(d, maes.iter().sum::<f64>() / k);
                m.mean_rmse.insert(d, rmses.iter().sum::<f64>() / k);
            }
            m.overall_mae = m.mean_mae.values().sum::<f64>() / m.mean_mae.len() as f64;
        }
        Summary {
            seeds: results.iter().map(|r| r.seed).collect(),
            methods,
            weights: results
                .iter()
                .map(|r| (r.seed, r.weights.iter().map(|(d, w)| (*d, w.normalized.clone())).collect()))
                .collect(),
            components: results.iter().map(|r| (r.seed, r.mixture.model.n_components())).collect(),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("method,seed,distribution,mae,rmse,mape,n\n");
        for (name, m) in &self.methods {
            for (seed, per) in &m.per_seed {
                for (d, ms) in per {
                    out.push_str(&format!("{name},{seed},{d},{},{},{},{}\n", ms.mae, ms.rmse, ms.mape, ms.n));
                }
            }
            for d in TestDistribution::ALL {
                out.push_str(&format!("{name},mean,{d},{},{},,\n", m.mean_mae[&d], m.mean_rmse[&d]));
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_values() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "gmm.n_max=3").unwrap();
        apply_override(&mut t, "data.path=foo/bar.csv").unwrap();
        apply_override(&mut t, "run.seeds=[4, 5]").unwrap();
        apply_override(&mut t, "synth.region_target={ share = 0.4 }").unwrap();
        let cfg: RunConfig = toml::Value::Table(t).try_into().unwrap();
        assert_eq!(cfg.gmm.n_max, 3);
        assert_eq!(cfg.data.path, PathBuf::from("foo/bar.csv"));
        assert_eq!(cfg.run.seeds, vec![4, 5]);
        assert_eq!(cfg.synth.region_target, synth::OversamplePolicy::Share(0.4));
        assert!(apply_override(&mut toml::Table::new(), "novalue").is_err());
        assert!(apply_override(&mut toml::Table::new(), "a..b=1").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[gmm]\nn_maks = 3\n").is_err());
        assert!(RunConfig::from_toml("[gmm]\nn_max = 3\n").is_ok());
    }

    #[test]
    fn default_config_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn stage_seeds_differ_by_tag() {
        assert_ne!(stage_seed(0, "a", 0), stage_seed(0, "b", 0));
        assert_ne!(stage_seed(0, "a", 0), stage_seed(0, "a", 1));
        assert_eq!(stage_seed(3, "a", 1), stage_seed(3, "a", 1));
    }
}
