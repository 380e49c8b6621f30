//! Command-line driver: dataset fetching, single training runs, experiment
//! grids, report generation, and gradient verification.
//!
//! Exit codes: 0 success, 1 total failure, 2 usage error.

mod fetch;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use kwta_ensemble::data::DatasetTag;
use kwta_ensemble::ensemble::{save_checkpoint, Family};
use kwta_ensemble::gradcheck;
use kwta_ensemble::optim::LrSchedule;
use kwta_ensemble::report::{build_report, default_groups, render_markdown, ReportOptions};
use kwta_ensemble::stats::StdKind;
use kwta_ensemble::train::{
    load_raw, read_record, record_filename, run_grid, split_raw, train_one_with_model,
    write_json_atomic, GridSpec, RunRecord, TrainConfig, PAPER_DELAYS, PAPER_SEEDS,
    PAPER_SUBNET_COUNTS,
};

#[derive(Parser)]
#[command(name = "kwta", about = "Ensemble MLP training toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download benchmark datasets into the data directory and verify
    /// checksums (recorded on first fetch, enforced afterwards).
    Fetch {
        /// Datasets to fetch; defaults to all four.
        #[arg(value_name = "DATASET")]
        datasets: Vec<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Train one model and write its run record.
    Train(TrainArgs),
    /// Train every cell of an experiment grid (resumable).
    Grid(GridArgs),
    /// Aggregate run records into a markdown report and its JSON twin.
    Report {
        /// Directory holding run record JSON files (default: out dir).
        #[arg(long)]
        records_dir: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Variant keys entering the H test, comma-separated.
        #[arg(long, value_delimiter = ',')]
        groups: Vec<String>,
        /// Use the sample (n-1) standard deviation instead of population.
        #[arg(long)]
        sample_std: bool,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Verify analytic gradients against central finite differences for
    /// all four families.
    Gradcheck {
        #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
        tol: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Args, Clone)]
struct ConfigArgs {
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    family: Option<String>,
    /// Number of sub-networks.
    #[arg(long = "M")]
    m: Option<usize>,
    /// Competition delay in epochs (kwta family).
    #[arg(long = "d")]
    d: Option<usize>,
    #[arg(long)]
    k_frac: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Named hyperparameter preset; `paper` pins the replication values.
    #[arg(long)]
    preset: Option<String>,
    /// WDBC: hold out the test split before oversampling.
    #[arg(long)]
    split_first: bool,
    /// Reload the best checkpoint into the live model after every epoch.
    #[arg(long)]
    reload_each_epoch: bool,
    /// Cap the training pool at N samples (reduced-scale runs).
    #[arg(long, value_name = "N")]
    limit_train: Option<usize>,
    /// Extra key=value overrides onto the run config (e.g. lr_start=0.05).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Also save the restored best model as a binary checkpoint.
    #[arg(long, value_name = "PATH")]
    save_model: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Sub-network counts, comma-separated (default: preset grid).
    #[arg(long = "Ms", value_delimiter = ',')]
    ms: Vec<usize>,
    /// Competition delays, comma-separated (default: preset grid).
    #[arg(long = "ds", value_delimiter = ',')]
    ds: Vec<usize>,
    /// Families, comma-separated (default: kwta,moe,cooperative).
    #[arg(long, value_delimiter = ',')]
    families: Vec<String>,
    /// Seeds: `all` for the ten replication seeds, or a comma list.
    #[arg(long, default_value = "all")]
    seeds: String,
    /// Concurrent runs.
    #[arg(long)]
    jobs: Option<usize>,
}

/// Marker for errors that should exit with the usage code.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Fetch { datasets, data_dir } => {
            let data_dir = resolve_data_dir(data_dir);
            let tags = if datasets.is_empty() {
                vec![
                    DatasetTag::Mnist,
                    DatasetTag::Fashion,
                    DatasetTag::Kmnist,
                    DatasetTag::Wdbc,
                ]
            } else {
                datasets
                    .iter()
                    .map(|s| DatasetTag::parse(s).map_err(|e| usage(e.to_string())))
                    .collect::<Result<Vec<_>>>()?
            };
            fetch::fetch_datasets(&tags, &data_dir)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Train(args) => cmd_train(args),
        Command::Grid(args) => cmd_grid(args),
        Command::Report {
            records_dir,
            out_dir,
            groups,
            sample_std,
            alpha,
        } => cmd_report(records_dir, out_dir, groups, sample_std, alpha),
        Command::Gradcheck { tol, seed } => cmd_gradcheck(tol, seed),
    }
}

fn resolve_data_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("KWTA_DATA_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn resolve_out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("KWTA_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Build the effective run config: defaults, then preset, then --set
/// overrides, then explicit flags (highest precedence).
fn resolve_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let dataset = match &args.dataset {
        Some(s) => DatasetTag::parse(s).map_err(|e| usage(e.to_string()))?,
        None => return Err(usage("--dataset is required")),
    };

    let mut cfg = match args.preset.as_deref() {
        Some("paper") | None => {
            TrainConfig::paper(dataset, Family::KwtaEnn, 2, 0, PAPER_SEEDS[0])
        }
        Some(other) => return Err(usage(format!("unknown preset '{other}' (expected: paper)"))),
    };

    for pair in &args.set {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| usage(format!("malformed --set '{pair}' (expected KEY=VALUE)")))?;
        apply_override(&mut cfg, key.trim(), value.trim())?;
    }

    if let Some(s) = &args.family {
        cfg.family = Family::parse(s).map_err(|e| usage(e.to_string()))?;
    }
    if let Some(m) = args.m {
        cfg.m = m;
    }
    if let Some(d) = args.d {
        cfg.d = d;
    }
    if let Some(k) = args.k_frac {
        cfg.k_frac = k;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(h) = args.hidden_dim {
        cfg.hidden_dim = h;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.split_first {
        cfg.split_first = true;
    }
    if args.reload_each_epoch {
        cfg.reload_each_epoch = true;
    }
    if args.limit_train.is_some() {
        cfg.limit_train = args.limit_train;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn apply_override(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    let bad = |e: &dyn std::fmt::Display| usage(format!("--set {key}: {e}"));
    match key {
        "dataset" => cfg.dataset = DatasetTag::parse(value).map_err(|e| bad(&e))?,
        "family" => cfg.family = Family::parse(value).map_err(|e| bad(&e))?,
        "m" | "M" => cfg.m = value.parse().map_err(|e| bad(&e))?,
        "d" => cfg.d = value.parse().map_err(|e| bad(&e))?,
        "k_frac" => cfg.k_frac = value.parse().map_err(|e| bad(&e))?,
        "epochs" => cfg.epochs = value.parse().map_err(|e| bad(&e))?,
        "batch_size" => cfg.batch_size = value.parse().map_err(|e| bad(&e))?,
        "hidden_dim" => cfg.hidden_dim = value.parse().map_err(|e| bad(&e))?,
        "lr_start" => cfg.lr_start = value.parse().map_err(|e| bad(&e))?,
        "lr_end" => cfg.lr_end = value.parse().map_err(|e| bad(&e))?,
        "momentum" => cfg.momentum = value.parse().map_err(|e| bad(&e))?,
        "weight_decay" => cfg.weight_decay = value.parse().map_err(|e| bad(&e))?,
        "lr_schedule" => {
            cfg.lr_schedule = match value {
                "exponential" | "exp" => LrSchedule::Exponential,
                "linear" => LrSchedule::Linear,
                other => return Err(usage(format!("--set lr_schedule: unknown '{other}'"))),
            }
        }
        "seed" => cfg.seed = value.parse().map_err(|e| bad(&e))?,
        "split_first" => cfg.split_first = value.parse().map_err(|e| bad(&e))?,
        "reload_each_epoch" => cfg.reload_each_epoch = value.parse().map_err(|e| bad(&e))?,
        "limit_train" => {
            cfg.limit_train = if value == "none" {
                None
            } else {
                Some(value.parse().map_err(|e| bad(&e))?)
            }
        }
        unknown => return Err(usage(format!("unknown override key '{unknown}'"))),
    }
    Ok(())
}

fn summary_line(record: &RunRecord) {
    println!(
        "{} {} M={} d={} seed={} test_acc={:.4} wall={:.2}s",
        record.config.dataset,
        record.config.family,
        record.config.m,
        record.config.d,
        record.config.seed,
        record.test_accuracy,
        record.wall_time_secs
    );
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let config = resolve_config(&args.config)?;
    let data_dir = resolve_data_dir(args.config.data_dir.clone());
    let out_dir = resolve_out_dir(args.config.out_dir.clone());
    println!(
        "config: {}",
        serde_json::to_string(&config).context("serialize config")?
    );

    let raw = load_raw(config.dataset, &data_dir)?;
    let data = split_raw(&raw, config.seed, config.prepare_options())?;
    let (record, model) = train_one_with_model(&config, &data)?;

    std::fs::create_dir_all(&out_dir)?;
    let path = out_dir.join(record_filename(&config));
    write_json_atomic(&path, &record)?;
    summary_line(&record);
    println!("record: {}", path.display());

    if let Some(model_path) = &args.save_model {
        save_checkpoint(&model, model_path)?;
        println!("model: {}", model_path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_grid(args: GridArgs) -> Result<ExitCode> {
    let base = resolve_config(&args.config)?;
    let data_dir = resolve_data_dir(args.config.data_dir.clone());
    let out_dir = resolve_out_dir(args.config.out_dir.clone());

    let families = if args.families.is_empty() {
        vec![Family::KwtaEnn, Family::MoE, Family::Cooperative]
    } else {
        args.families
            .iter()
            .map(|s| Family::parse(s).map_err(|e| usage(e.to_string())))
            .collect::<Result<Vec<_>>>()?
    };
    let subnet_counts = if args.ms.is_empty() {
        PAPER_SUBNET_COUNTS.to_vec()
    } else {
        args.ms.clone()
    };
    let delays = if args.ds.is_empty() {
        PAPER_DELAYS.to_vec()
    } else {
        args.ds.clone()
    };
    let seeds: Vec<u64> = if args.seeds == "all" {
        PAPER_SEEDS.to_vec()
    } else {
        args.seeds
            .split(',')
            .map(|s| s.trim().parse().map_err(|e| usage(format!("--seeds: {e}"))))
            .collect::<Result<Vec<_>>>()?
    };
    let jobs = args.jobs.unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get().min(8))
            .unwrap_or(1)
    });

    let spec = GridSpec {
        base,
        families,
        subnet_counts,
        delays,
        seeds,
    };
    println!(
        "grid: dataset={} families={:?} Ms={:?} ds={:?} seeds={:?} jobs={} cells={}",
        spec.base.dataset,
        spec.families.iter().map(|f| f.tag()).collect::<Vec<_>>(),
        spec.subnet_counts,
        spec.delays,
        spec.seeds,
        jobs,
        spec.cells().len()
    );

    let outcome = run_grid(&spec, &data_dir, &out_dir, jobs, summary_line)?;
    println!(
        "grid done: {} completed, {} skipped (already present), {} failed",
        outcome.completed,
        outcome.skipped,
        outcome.failed.len()
    );
    for (stem, err) in &outcome.failed {
        eprintln!("failed {stem}: {err}");
    }
    // Nonzero exit only when every attempted run failed.
    if !outcome.failed.is_empty() && outcome.completed == 0 && outcome.skipped == 0 {
        bail!("all {} grid runs failed", outcome.failed.len());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(
    records_dir: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    groups: Vec<String>,
    sample_std: bool,
    alpha: f64,
) -> Result<ExitCode> {
    let records_dir = records_dir.unwrap_or_else(|| resolve_out_dir(None));
    let out_dir = out_dir.unwrap_or_else(|| records_dir.clone());

    let mut records = Vec::new();
    let entries = std::fs::read_dir(&records_dir)
        .with_context(|| format!("no records directory at {}", records_dir.display()))?;
    for entry in entries {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.ends_with(".json")
            && !name.ends_with(".failed.json")
            && !name.starts_with("report")
        {
            match read_record(&path) {
                Ok(record) => records.push(record),
                Err(e) => eprintln!("skipping {}: {e}", path.display()),
            }
        }
    }
    if records.is_empty() {
        bail!("no records found in {}", records_dir.display());
    }

    let opts = ReportOptions {
        groups: if groups.is_empty() {
            default_groups()
        } else {
            groups
        },
        std_kind: if sample_std {
            StdKind::Sample
        } else {
            StdKind::Population
        },
        alpha,
    };
    let report = build_report(&records, &opts)?;
    let markdown = render_markdown(&report);

    std::fs::create_dir_all(&out_dir)?;
    write_json_atomic(&out_dir.join("report.json"), &report)?;
    std::fs::write(out_dir.join("report.md"), &markdown)?;
    print!("{markdown}");
    println!(
        "\nwrote {} and {}",
        out_dir.join("report.md").display(),
        out_dir.join("report.json").display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(tol: f64, seed: u64) -> Result<ExitCode> {
    let families = [
        Family::Independent,
        Family::Cooperative,
        Family::MoE,
        Family::KwtaEnn,
    ];
    let mut all_passed = true;
    for family in families {
        let report = gradcheck::check_family(family, tol, seed)?;
        println!("{report}");
        all_passed &= report.passed;
    }
    if all_passed {
        Ok(ExitCode::SUCCESS)
    } else {
        bail!("gradient check failed (tolerance {tol:.1e})");
    }
}
