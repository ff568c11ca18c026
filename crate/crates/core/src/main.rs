use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mati::fetch::{self, DatasetId, HttpDownloader};
use mati::pipeline::{RunConfig, Runner};
use mati::Error;

#[derive(Parser, Debug)]
#[command(name = "mati", version, about = "Region experts with test-time aggregation for imbalanced regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Run directory; every artifact is written below it
    #[arg(long, short, default_value = "runs/default")]
    out: PathBuf,
    /// Run seed; replaces `run.seeds` for this invocation
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-key override such as `mlp.max_epochs=50` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split the data into train/validation and the test pool
    Split(Common),
    /// Fit the label mixture and select its size by AIC
    FitGmm(Common),
    /// Synthesize the full and per-region training sets
    Synth(Common),
    /// Train the region experts and baselines
    TrainExperts(Common),
    /// Learn aggregation weights for each test distribution
    Aggregate(Common),
    /// Write evaluation reports for every method
    Evaluate(Common),
    /// Aggregate and evaluate across corruption ratios
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated corruption ratios
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
    },
    /// Every stage for every configured seed, plus the summary
    RunAll(Common),
    /// Download a public dataset into the local cache
    FetchData {
        /// abalone or bike-sharing
        dataset: String,
        /// Cache directory (defaults to $MATI_DATA_DIR or ~/.cache/mati)
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        /// Expected SHA-256 of the downloaded archive
        #[arg(long)]
        sha256: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load(common: &Common) -> Result<(RunConfig, u64), Error> {
    let mut overrides = common.overrides.clone();
    if let Some(s) = common.seed {
        overrides.push(format!("run.seeds=[{s}]"));
    }
    let cfg = RunConfig::load(common.config.as_deref(), &overrides).map_err(|e| e.in_stage("config"))?;
    let seed = cfg.run.seeds[0];
    Ok((cfg, seed))
}

fn with_runner<T>(common: &Common, f: impl FnOnce(&Runner, u64) -> Result<T, Error>) -> Result<(), Error> {
    let (cfg, seed) = load(common)?;
    let runner = Runner::new(cfg, &common.out).with_logger(|line| println!("{line}"));
    f(&runner, seed).map(|_| ())
}

fn dispatch(command: Command) -> Result<(), Error> {
    match command {
        Command::Split(c) => with_runner(&c, |r, s| r.run_split(s)),
        Command::FitGmm(c) => with_runner(&c, |r, s| r.run_fit_gmm(s)),
        Command::Synth(c) => with_runner(&c, |r, s| r.run_synth(s)),
        Command::TrainExperts(c) => with_runner(&c, |r, s| r.run_train(s)),
        Command::Aggregate(c) => with_runner(&c, |r, s| r.run_aggregate(s)),
        Command::Evaluate(c) => with_runner(&c, |r, s| r.run_evaluate(s)),
        Command::Sweep { common, ratios } => with_runner(&common, |r, s| {
            let ratios = ratios.unwrap_or_else(|| r.cfg.sweep.ratios.clone());
            r.run_sweep(s, &ratios)
        }),
        Command::RunAll(c) => with_runner(&c, |r, _| {
            let (_, summary) = r.run_all()?;
            for (name, m) in &summary.methods {
                let per: Vec<String> = m.mean_mae.iter().map(|(d, v)| format!("{d}={v:.4}")).collect();
                println!("summary method={name} mean_mae={:.4} {}", m.overall_mae, per.join(" "));
            }
            Ok(())
        }),
        Command::FetchData { dataset, cache_dir, sha256 } => {
            let id = DatasetId::parse(&dataset).map_err(|e| e.in_stage("fetch-data"))?;
            let dir = cache_dir.unwrap_or_else(fetch::default_cache_dir);
            let got = fetch::fetch_data(id, &dir, &HttpDownloader, sha256.as_deref()).map_err(|e| e.in_stage("fetch-data"))?;
            let status = if got.cached { "cached" } else { "ok" };
            println!(
                "stage=fetch-data status={status} dataset={} csv={} schema={} sha256={}",
                id.name(),
                got.csv.display(),
                got.schema.display(),
                got.sha256
            );
            Ok(())
        }
    }
}
