//! `dascl` command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dascl_core::augment::{apply_calibration, AugmentationPolicy, OpKind};
use dascl_core::data::{export_datasets, leave_one_domain_out, DomainDataset, Split, SplitSpec};
use dascl_core::harness::{self, load_domains, ExperimentConfig};
use dascl_core::metrics::Metric;
use dascl_core::probe::pairwise_distances;
use dascl_core::report::{render, MetricsReport, ReportFormat};
use dascl_core::train::{calibrate_magnitudes, dataset_features, evaluate, fit, Method};
use dascl_core::{Error, ModelBundle};

#[derive(Parser, Debug)]
#[command(
    name = "dascl",
    version,
    about = "Calibrated augmentation + cross-domain contrastive learning lab"
)]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    /// Where machine-readable results go.
    #[arg(long, global = true, value_enum, default_value_t = Emit::File)]
    emit: Emit,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Emit {
    File,
    Stdout,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the configured domains and export them as manifest + blob.
    GenData,
    /// Calibrate policy magnitudes against a trained baseline model.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        /// Withheld domain id.
        #[arg(long)]
        target: usize,
    },
    /// Train one model with a domain withheld.
    Train {
        #[arg(long, value_parser = parse_method)]
        method: Method,
        #[arg(long)]
        target: usize,
        /// Policy file for DASCL; the config's policy otherwise.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one domain.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        domain: usize,
        #[arg(long, value_parser = parse_metric, default_value = "accuracy")]
        metric: Metric,
    },
    /// Pairwise proxy A-distances between all domains in a model's features.
    Distance {
        #[arg(long)]
        model: PathBuf,
    },
    /// Run the full leave-one-domain-out matrix.
    Experiment,
    /// Render a stored JSON report.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_parser = parse_format, default_value = "markdown")]
        format: ReportFormat,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_format(s: &str) -> Result<ReportFormat, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Usage errors exit with 1, runtime failures with 2.
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.quiet {
        "warn"
    } else {
        "info"
    }))
    .target(env_logger::Target::Stderr)
    .init();

    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => {
            if !path.is_file() {
                return Err(Failure::Usage(format!(
                    "config file {} does not exist",
                    path.display()
                )));
            }
            ExperimentConfig::load(path).map_err(|e| Failure::Usage(e.to_string()))?
        }
        None => ExperimentConfig::new("dascl-out"),
    };
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn seed(cli: &Cli, cfg: &ExperimentConfig) -> u64 {
    cli.seed.unwrap_or(cfg.seeds[0])
}

/// Write `bytes` to `out_dir/name`, or to stdout with `--emit stdout`.
fn emit(cli: &Cli, cfg: &ExperimentConfig, name: &str, bytes: &[u8]) -> Outcome {
    match cli.emit {
        Emit::Stdout => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes)
                .and_then(|()| out.flush())
                .map_err(|e| Error::io(Path::new("<stdout>"), e))?;
        }
        Emit::File => {
            fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
            let path = cfg.out_dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            log::info!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn json(value: &impl serde::Serialize) -> Result<Vec<u8>, Failure> {
    let mut v = serde_json::to_vec_pretty(value).map_err(Error::from)?;
    v.push(b'\n');
    Ok(v)
}

fn split_for(cfg: &ExperimentConfig, target: usize, seed: u64) -> Result<Split, Failure> {
    let domains = load_domains(&cfg.dataset, cfg.data_seed)?;
    if !domains.iter().any(|d| d.domain_id == target) {
        return Err(Failure::Usage(format!("no domain with id {target}")));
    }
    Ok(leave_one_domain_out(
        domains,
        &SplitSpec {
            target_domain_id: target,
            val_fraction: cfg.val_fraction,
            seed,
        },
    )?)
}

fn find_domain(domains: Vec<DomainDataset>, id: usize) -> Result<DomainDataset, Failure> {
    domains
        .into_iter()
        .find(|d| d.domain_id == id)
        .ok_or_else(|| Failure::Usage(format!("no domain with id {id}")))
}

fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Report { input, format } => {
            let report = MetricsReport::load(input)?;
            let bytes = render(&report, *format)?;
            let mut out = std::io::stdout().lock();
            out.write_all(&bytes)
                .map_err(|e| Error::io(Path::new("<stdout>"), e))?;
            Ok(())
        }
        Command::GenData => {
            let cfg = load_config(cli)?;
            let domains = load_domains(&cfg.dataset, cli.seed.unwrap_or(cfg.data_seed))?;
            let manifest = export_datasets(&domains, &cfg.out_dir)?;
            log::info!(
                "exported {} domains to {}",
                manifest.domains.len(),
                cfg.out_dir.display()
            );
            if cli.emit == Emit::Stdout {
                emit(cli, &cfg, "", &json(&manifest)?)?;
            }
            Ok(())
        }
        Command::Calibrate { model, target } => {
            let cfg = load_config(cli)?;
            let seed = seed(cli, &cfg);
            let baseline = ModelBundle::load(model)?;
            let split = split_for(&cfg, *target, seed)?;
            let base = cfg.base_policy();
            let ops: Vec<OpKind> = base.entries.iter().map(|e| e.kind).collect();
            let cal = calibrate_magnitudes(
                &baseline,
                &split.val,
                &ops,
                &cfg.train.ranges,
                &cfg.calibration,
                seed,
            )?;
            for c in &cal {
                log::info!("{}: magnitude {}", c.kind, c.magnitude);
            }
            emit(
                cli,
                &cfg,
                harness::POLICY_FILE,
                &json(&apply_calibration(&base, &cal))?,
            )
        }
        Command::Train {
            method,
            target,
            policy,
        } => {
            let cfg = load_config(cli)?;
            let seed = seed(cli, &cfg);
            let split = split_for(&cfg, *target, seed)?;
            let mut tcfg = cfg.train.clone();
            tcfg.method = *method;
            tcfg.seed = seed;
            if let Some(p) = policy {
                tcfg.policy = AugmentationPolicy::load(p)?;
            }
            let model_cfg = cfg.model.for_domains(&split.train)?;
            let (model, history) = fit(&tcfg, &model_cfg, &split.train, &split.val)?;
            if let Some(last) = history.rows.last() {
                log::info!("final source-val accuracy {:.4}", last.val_acc);
            }
            fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
            model.save(&cfg.out_dir.join(harness::MODEL_FILE))?;
            emit(
                cli,
                &cfg,
                harness::HISTORY_FILE,
                history.to_csv().as_bytes(),
            )
        }
        Command::Eval {
            model,
            domain,
            metric,
        } => {
            let cfg = load_config(cli)?;
            let m = ModelBundle::load(model)?;
            let d = find_domain(load_domains(&cfg.dataset, cfg.data_seed)?, *domain)?;
            let value = evaluate(&m, &d, *metric)?;
            log::info!("{} {metric}: {value:.4}", d.name);
            let out = serde_json::json!({ "domain": d.domain_id, "name": d.name, "metric": metric, "value": value });
            emit(cli, &cfg, "eval.json", &json(&out)?)
        }
        Command::Distance { model } => {
            let cfg = load_config(cli)?;
            let m = ModelBundle::load(model)?;
            let domains = load_domains(&cfg.dataset, cfg.data_seed)?;
            let ids: Vec<usize> = domains.iter().map(|d| d.domain_id).collect();
            let feats = domains
                .iter()
                .map(|d| {
                    let xs: Vec<Vec<f64>> = d.samples().iter().map(|s| s.x.clone()).collect();
                    dataset_features(&m, &xs)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let matrix = pairwise_distances(&ids, &feats, seed(cli, &cfg))?;
            emit(cli, &cfg, harness::DISTANCES_FILE, &json(&matrix)?)
        }
        Command::Experiment => {
            let cfg = load_config(cli)?;
            let outcome = harness::run_experiment(&cfg)?;
            log::info!(
                "{} cells ({} reused), {} failed; report in {}",
                outcome.cells.len(),
                outcome.reused,
                outcome.report.failures.len(),
                cfg.out_dir.display()
            );
            if cli.emit == Emit::Stdout {
                emit(cli, &cfg, "", &render(&outcome.report, ReportFormat::Json)?)?;
            }
            Ok(())
        }
    }
}
