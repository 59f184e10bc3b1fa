use std::fs::File;
use std::io::BufReader;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use tracing::info;

use censorlab_core::circumvent::{evaluate_matrix, CircumventConfig, Method};
use censorlab_core::classifier::{classify_target, determine_trigger, FingerprintSet, TriggerConfig};
use censorlab_core::dataset::{clean_pipeline, load_target_list, CleaningReport, LivenessOptions};
use censorlab_core::emulator::{load_emulator_config, EmulatorHandle};
use censorlab_core::model::{parse_target, TargetUrl, Verdict};
use censorlab_core::probe::{run_campaign, Campaign, HttpCleanPath, ProbeConfig};
use censorlab_core::report::{aggregate, emit, load, render_table, RunReport};

#[derive(Parser)]
#[command(name = "censorlab", version, about = "Censorship measurement toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the four probe steps over a target list.
    Probe {
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Classify a results file into verdicts and a report.
    Classify {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        fingerprints: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the censor emulator until interrupted.
    Emulate {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        bind: IpAddr,
        #[arg(long, default_value_t = 0)]
        http_port: u16,
        #[arg(long, default_value_t = 0)]
        dns_port: u16,
        /// Where to write session transcripts on shutdown.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate circumvention methods per target.
    Circumvent {
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Collapse, dedupe and liveness-filter a target list.
    Clean {
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Render the table for a report or classify output.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
    /// Find whether a censor fires on Host alone or Host plus URI.
    Trigger {
        #[arg(long)]
        host: String,
        #[arg(long)]
        uri: String,
        #[arg(long)]
        decoy: SocketAddr,
        #[arg(long)]
        fingerprints: Option<PathBuf>,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct CliConfig {
    #[serde(flatten)]
    probe: ProbeConfig,
    circumvent: CircumventConfig,
    clean: CleanSection,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CleanSection {
    collapse_hosts: Vec<String>,
    attempts: usize,
    backoff_ms: Vec<u64>,
    control: Option<String>,
}

impl Default for CleanSection {
    fn default() -> Self {
        CleanSection { collapse_hosts: vec![], attempts: 3, backoff_ms: vec![1000, 2000, 4000], control: None }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Classified {
    verdicts: Vec<Verdict>,
    report: RunReport,
}

#[derive(Debug, Serialize)]
struct Cleaned {
    targets: Vec<TargetUrl>,
    report: CleaningReport,
}

/// Exit 1 for bad arguments or input files, exit 2 once a campaign fails.
enum Failure {
    Usage(anyhow::Error),
    Campaign(anyhow::Error),
}

trait OrFail<T> {
    fn usage(self) -> Result<T, Failure>;
    fn campaign(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrFail<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }

    fn campaign(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Campaign(e.into()))
    }
}

fn load_config(path: Option<&Path>, workers: Option<usize>) -> anyhow::Result<CliConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<CliConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => CliConfig::default(),
    };
    if let Some(w) = workers {
        cfg.probe.workers = w;
    }
    cfg.probe.validate()?;
    Ok(cfg)
}

fn load_targets(path: &Path) -> anyhow::Result<Vec<TargetUrl>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let list = load_target_list(BufReader::new(file)).with_context(|| path.display().to_string())?;
    for r in &list.rejected {
        eprintln!("{}:{}: skipped `{}`: {}", path.display(), r.line, r.text, r.reason);
    }
    Ok(list.targets)
}

fn load_fingerprints(path: Option<&Path>) -> anyhow::Result<FingerprintSet> {
    Ok(match path {
        Some(p) => FingerprintSet::load(p)?,
        None => FingerprintSet::default(),
    })
}

async fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Probe { targets, config, out, workers } => {
            let cfg = load_config(config.as_deref(), workers).usage()?;
            let targets = load_targets(&targets).usage()?;
            let campaign = run_campaign(&targets, &cfg.probe).await.usage()?;
            emit(&campaign, &out).campaign()?;
            let s = &campaign.summary;
            eprintln!("{} targets, {} reportable, {} error-logged", s.targets, s.reportable, s.error_logged);
            if s.targets > 0 && s.reportable == 0 {
                return Err(Failure::Campaign(anyhow!("no reportable results")));
            }
        }
        Command::Classify { input, config, fingerprints, out } => {
            let cfg = load_config(config.as_deref(), None).usage()?;
            let fp = load_fingerprints(fingerprints.as_deref()).usage()?;
            let campaign: Campaign = load(&input).usage()?;
            let verdicts: Vec<Verdict> = campaign
                .results
                .iter()
                .filter(|r| r.reportable())
                .map(|r| classify_target(r, &fp, &cfg.probe.resolvers, None))
                .collect::<Result<_, _>>()
                .campaign()?;
            let error_logged = campaign.results.len() - verdicts.len();
            let report = aggregate(&verdicts, verdicts.len())
                .campaign()?
                .with_error_logged(error_logged);
            print!("{}", render_table(&report));
            if let Some(out) = out {
                emit(&Classified { verdicts, report }, &out).campaign()?;
            }
        }
        Command::Emulate { policy, bind, http_port, dns_port, out } => {
            let text = std::fs::read_to_string(&policy)
                .with_context(|| format!("reading {}", policy.display()))
                .usage()?;
            let (policy_cfg, world) = load_emulator_config(&text, policy.parent())
                .usage()?;
            let handle = EmulatorHandle::start_on(policy_cfg, world, bind, http_port, dns_port)
                .await
                .campaign()?;
            println!("http {}", handle.http_addr());
            println!("origin {}", handle.origin_addr());
            for r in handle.probe_resolvers() {
                println!("dns {} {}", r.name, r.query_endpoint());
            }
            println!("dns clean {}", handle.clean_dns_endpoint());
            tokio::signal::ctrl_c().await.campaign()?;
            info!("shutting down");
            if let Some(out) = out {
                emit(&handle.transcripts(), &out).campaign()?;
            }
        }
        Command::Circumvent { targets, config, out, workers } => {
            let cfg = load_config(config.as_deref(), workers).usage()?;
            let targets = load_targets(&targets).usage()?;
            let methods: Vec<Method> = cfg.circumvent.methods.clone();
            let matrix = evaluate_matrix(&targets, &methods, &cfg.circumvent, &cfg.probe)
                .await
                .usage()?;
            for row in &matrix.rows {
                let cells: Vec<String> = row.outcomes.iter().map(|(m, o)| format!("{m:?}={o:?}")).collect();
                println!("{} {}", row.target, cells.join(" "));
            }
            emit(&matrix, &out).campaign()?;
        }
        Command::Clean { targets, config, out, workers } => {
            let cfg = load_config(Some(&config), workers).usage()?;
            let Some(clean_cfg) = cfg.probe.clean_path.clone() else {
                return Err(Failure::Usage(anyhow!("config needs a [clean_path] table")));
            };
            let targets = load_targets(&targets).usage()?;
            let control = match &cfg.clean.control {
                Some(c) => Some(parse_target(c).usage()?),
                None => None,
            };
            let opts = LivenessOptions {
                attempts: cfg.clean.attempts,
                backoff: cfg.clean.backoff_ms.iter().map(|ms| Duration::from_millis(*ms)).collect(),
                workers: cfg.probe.workers,
                control,
            };
            let clean = HttpCleanPath::new(clean_cfg, &cfg.probe);
            let (kept, report) = clean_pipeline(&targets, &cfg.clean.collapse_hosts, &clean, &opts)
                .await
                .campaign()?;
            eprintln!(
                "{} -> {} -> {} -> {}",
                report.initial_count, report.after_collapse, report.after_dedupe, report.after_liveness
            );
            emit(&Cleaned { targets: kept, report }, &out).campaign()?;
        }
        Command::Report { input } => {
            let value: serde_json::Value = load(&input).usage()?;
            let report_value = value.get("report").cloned().unwrap_or(value);
            let report: RunReport = serde_json::from_value(report_value)
                .with_context(|| format!("{} holds no report", input.display()))
                .usage()?;
            print!("{}", render_table(&report));
        }
        Command::Trigger { host, uri, decoy, fingerprints } => {
            let fp = load_fingerprints(fingerprints.as_deref()).usage()?;
            let cfg = TriggerConfig { fingerprints: fp, ..TriggerConfig::default() };
            let verdict = determine_trigger(&host, &uri, decoy, &cfg).await.campaign()?;
            println!("{verdict:?}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();

    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match runtime.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Campaign(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
