//! Command line front end. Exit codes: 0 success, 1 usage error, 2 data error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use bidscape_core::auction_log::{parse_log, write_csv, write_jsonl, GroupingKey, LogFormat};
use bidscape_core::evalkit::{
    cpa_goal_policy, eval_cpa_forecast, eval_winrate_forecast, simulate_cpa_dataset, simulated_ab,
    BidPolicy, CpaDataset, CpaMethod, EvalError, WinrateEvalConfig,
};
use bidscape_core::gsp_sim::{generate_log, summarize, MarketConfig, SimError};
use bidscape_core::landscape::{Normalization, DEFAULT_BIN_SIZE, DEFAULT_MAX_ECPM};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::pipeline::{self, BuildRequest, CurvesRequest, PipelineError, RecommendRequest};
use crate::store::ModelStore;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "bidscape",
    version,
    about = "Bid landscape learning and CPA bid recommendation"
)]
pub struct Cli {
    /// Model store directory.
    #[arg(
        long,
        global = true,
        env = "BIDSCAPE_STORE",
        default_value = "bidscape-store"
    )]
    pub store: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long, default_value_t = DEFAULT_BIN_SIZE)]
    pub bin_size: f64,
    #[arg(long, default_value_t = GroupingKey::ByContext)]
    pub group_by: GroupingKey,
    #[arg(long, default_value_t = DEFAULT_MAX_ECPM)]
    pub max_ecpm: f64,
    /// Drop intervals for positions past this one.
    #[arg(long)]
    pub max_position: Option<u32>,
    #[arg(long, default_value_t = Normalization::Observations)]
    pub normalization: Normalization,
}

impl BuildArgs {
    fn request(&self) -> BuildRequest {
        BuildRequest {
            group_by: self.group_by,
            bin_size: self.bin_size,
            max_ecpm: self.max_ecpm,
            max_position: self.max_position,
            normalization: self.normalization,
        }
    }
}

#[derive(Debug, Args)]
pub struct RateArgs {
    #[arg(long, default_value_t = 0)]
    pub impressions: u64,
    #[arg(long)]
    pub pctr: f64,
    #[arg(long)]
    pub pcvr: f64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate an auction log and add it to the store.
    Ingest {
        file: PathBuf,
        #[arg(long, default_value = "jsonl")]
        format: LogFormat,
    },
    /// Rebuild landscapes from the stored log.
    Build(BuildArgs),
    /// Merge a new log into the stored landscapes with decay.
    Rollup {
        file: PathBuf,
        #[arg(long, default_value = "jsonl")]
        format: LogFormat,
        #[arg(long, default_value_t = 1.0)]
        decay: f64,
        #[command(flatten)]
        build: BuildArgs,
    },
    /// Bid curve of a group as CSV.
    Curves {
        #[arg(long)]
        group: Option<String>,
        #[arg(long, default_value_t = 0.0)]
        from: f64,
        #[arg(long)]
        to: f64,
        #[arg(long)]
        step: f64,
        #[command(flatten)]
        rates: RateArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recommend a bid for a CPA goal and budget.
    Recommend {
        #[arg(long)]
        group: Option<String>,
        #[arg(long)]
        cpa_goal: f64,
        #[arg(long)]
        budget: f64,
        #[command(flatten)]
        rates: RateArgs,
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Generate a synthetic auction log from a market config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        auctions: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "jsonl")]
        format: LogFormat,
    },
    /// Build a simulated CPA evaluation dataset.
    Dataset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        auctions: usize,
        #[arg(long, default_value_t = 0.0001)]
        bin_size: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score CPA forecasts on a dataset.
    Eval {
        #[arg(long)]
        method: CpaMethod,
        #[arg(long)]
        dataset: PathBuf,
        /// JSON object of campaign id to predicted CPA, for method `external`.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Score win-rate forecasts against counterfactual replay.
    WinrateEval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        auctions: usize,
        #[arg(long, default_value_t = 0.0001)]
        bin_size: f64,
    },
    /// Simulated A/B of current bids against CPA-goal recommendations.
    Ab {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        auctions: usize,
        /// Budget as a multiple of each campaign's current spend.
        #[arg(long, default_value_t = 1.5)]
        budget_factor: f64,
        #[arg(long, default_value_t = 0.0001)]
        bin_size: f64,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
    #[error("--group is required when the store holds {0} groups")]
    GroupRequired(usize),
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_reader(open(path)?).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn print_json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("output serializes");
    writeln!(out, "{text}").map_err(|source| CliError::Io {
        path: "<stdout>".into(),
        source,
    })
}

fn resolve_group(store: &ModelStore, group: Option<String>) -> Result<String, CliError> {
    if let Some(g) = group {
        return Ok(g);
    }
    let groups = store.groups().map_err(PipelineError::from)?;
    match <[String; 1]>::try_from(groups) {
        Ok([only]) => Ok(only),
        Err(groups) => Err(CliError::GroupRequired(groups.len())),
    }
}

fn flush(mut w: impl Write, path: &Path) -> Result<(), CliError> {
    w.flush().map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Runs a parsed command, writing results to `out`.
pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let store_path = cli.store;
    let store = || ModelStore::open(&store_path).map_err(PipelineError::from);
    match cli.command {
        Command::Ingest { file, format } => {
            let summary = pipeline::ingest(&store()?, open(&file)?, format)?;
            print_json(out, &summary)
        }
        Command::Build(args) => print_json(out, &pipeline::build(&store()?, &args.request())?),
        Command::Rollup {
            file,
            format,
            decay,
            build,
        } => {
            let report = parse_log(open(&file)?, format);
            if report.snapshots.is_empty() {
                return Err(PipelineError::NothingIngested(report.errors).into());
            }
            let summary = pipeline::rollup(&store()?, &report.snapshots, &build.request(), decay)?;
            print_json(out, &summary)
        }
        Command::Curves {
            group,
            from,
            to,
            step,
            rates,
            out: path,
        } => {
            let store = store()?;
            let group = resolve_group(&store, group)?;
            let request = CurvesRequest {
                from,
                to,
                step,
                impressions: rates.impressions,
                pctr: rates.pctr,
                pcvr: rates.pcvr,
            };
            let curves = pipeline::curves(&store, &group, &request)?;
            match path {
                Some(p) => {
                    let mut w = create(&p)?;
                    pipeline::write_curves_csv(&curves.points, &mut w)?;
                    flush(w, &p)
                }
                None => Ok(pipeline::write_curves_csv(&curves.points, out)?),
            }
        }
        Command::Recommend {
            group,
            cpa_goal,
            budget,
            rates,
            tolerance,
        } => {
            let store = store()?;
            let request = RecommendRequest {
                group: resolve_group(&store, group)?,
                impressions: rates.impressions,
                pctr: rates.pctr,
                pcvr: rates.pcvr,
                cpa_goal,
                budget,
                tolerance,
            };
            print_json(out, &pipeline::recommend(&store, &request)?)
        }
        Command::Simulate {
            config,
            auctions,
            seed,
            out: path,
            format,
        } => {
            let mut market: MarketConfig = read_json(&config)?;
            if let Some(s) = seed {
                market.seed = s;
            }
            let log = generate_log(&market, auctions)?;
            let mut w = create(&path)?;
            match format {
                LogFormat::Jsonl => write_jsonl(&log, &mut w).map_err(|source| CliError::Io {
                    path: path.clone(),
                    source,
                })?,
                LogFormat::Csv => write_csv(&log, &mut w)?,
            }
            flush(w, &path)?;
            print_json(
                out,
                &serde_json::json!({ "auctions": log.len(), "out": path }),
            )
        }
        Command::Dataset {
            config,
            auctions,
            bin_size,
            out: path,
        } => {
            let market: MarketConfig = read_json(&config)?;
            let dataset = simulate_cpa_dataset(&market, auctions, bin_size)?;
            let mut w = create(&path)?;
            serde_json::to_writer(&mut w, &dataset).map_err(|source| CliError::Json {
                path: path.clone(),
                source,
            })?;
            flush(w, &path)?;
            print_json(
                out,
                &serde_json::json!({ "campaigns": dataset.campaigns.len(), "out": path }),
            )
        }
        Command::Eval {
            method,
            dataset,
            predictions,
        } => {
            let dataset: CpaDataset = read_json(&dataset)?;
            let external: Option<BTreeMap<String, f64>> =
                predictions.as_deref().map(read_json).transpose()?;
            let report = eval_cpa_forecast(&dataset, method, external.as_ref())?;
            print_json(
                out,
                &serde_json::json!({ "method": method, "n": report.n, "mape": report.mape, "rmspe": report.rmspe }),
            )
        }
        Command::WinrateEval {
            config,
            auctions,
            bin_size,
        } => {
            let market: MarketConfig = read_json(&config)?;
            let log = generate_log(&market, auctions)?;
            let cfg = WinrateEvalConfig {
                bin_size,
                ..WinrateEvalConfig::default()
            };
            print_json(out, &eval_winrate_forecast(&market, &log, &cfg)?)
        }
        Command::Ab {
            config,
            auctions,
            budget_factor,
            bin_size,
        } => {
            let market: MarketConfig = read_json(&config)?;
            let log = generate_log(&market, auctions)?;
            let stats = summarize(&market, &log);
            let baseline: BidPolicy = market
                .advertisers
                .iter()
                .map(|a| (a.advertiser_id.clone(), a.base_bid))
                .collect();
            let budgets: BTreeMap<String, f64> = stats
                .iter()
                .map(|(id, s)| (id.clone(), s.spend * budget_factor))
                .collect();
            let optimized = cpa_goal_policy(&market, &log, &budgets, bin_size)?;
            print_json(
                out,
                &simulated_ab(&market, &baseline, &optimized, auctions)?,
            )
        }
        Command::Serve {
            host,
            port,
            static_dir,
        } => {
            let store = Arc::new(store()?);
            let runtime = tokio::runtime::Runtime::new().map_err(|source| CliError::Io {
                path: store_path.clone(),
                source,
            })?;
            runtime
                .block_on(crate::service::serve(
                    store,
                    (host, port).into(),
                    static_dir,
                ))
                .map_err(|source| CliError::Io {
                    path: format!("{host}:{port}").into(),
                    source,
                })
        }
    }
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = write!(err, "{}", e.render());
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match execute(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if let CliError::Pipeline(PipelineError::NothingIngested(lines)) = &e {
                for l in lines.iter().take(20) {
                    let _ = writeln!(err, "  {l}");
                }
            }
            EXIT_DATA
        }
    }
}
