use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use ctxfold_client::{Client, ClientError};
use ctxfold_core::agent::StrategyKind;
use ctxfold_core::api::{ErrorKind, ReportRequest, RunState, SessionCreate};
use ctxfold_core::harness::{AggregateReport, ChatOutput, ExportFormat, ReplaySummary, RunConfig, CMD_QUIT};
use ctxfold_server::AppState;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_EPISODE_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "ctxfold", version, about = "Per-turn context folding for tool-using agents")]
struct Cli {
    /// Service base URL; an in-process service is started when absent.
    #[arg(long, global = true)]
    server: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
    /// Run a suite of episodes and print the aggregate report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured strategies; repeatable.
        #[arg(long, value_parser = parse_strategy)]
        strategy: Vec<StrategyKind>,
        #[arg(long)]
        k: Option<u32>,
        #[arg(long)]
        seed_base: Option<u64>,
        /// Distractor fields in tool results.
        #[arg(long, value_parser = parse_switch)]
        noise: Option<bool>,
        #[arg(long)]
        ablation: Option<String>,
        /// Output directory for episodes, logs and the report.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit with status 3 when any episode fails.
        #[arg(long)]
        strict: bool,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Aggregate or re-bin a run directory or exported report.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        bin_width: Option<usize>,
        #[arg(long, value_parser = parse_format)]
        format: Option<ExportFormat>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Talk to the agent interactively; `:ctx` shows the folded context,
    /// `:quit` ends the session.
    Chat {
        #[arg(long)]
        config: PathBuf,
        /// Built-in domain name or path to a domain file.
        #[arg(long, default_value = "retail")]
        domain: String,
        #[arg(long)]
        task: Option<String>,
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<StrategyKind>,
    },
    /// Summarize an events or calls log.
    Replay {
        #[arg(long)]
        log: PathBuf,
        /// Print each episode's rebuilt transcript.
        #[arg(long)]
        transcript: bool,
        #[arg(long)]
        json: bool,
    },
}

fn parse_strategy(s: &str) -> Result<StrategyKind, String> {
    StrategyKind::parse(s).ok_or_else(|| {
        let names: Vec<String> = StrategyKind::ALL.iter().map(|k| k.to_string()).collect();
        format!("unknown strategy {s:?}; expected one of {}", names.join(", "))
    })
}

fn parse_switch(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(format!("expected on or off, got {s:?}")),
    }
}

fn parse_format(s: &str) -> Result<ExportFormat, String> {
    ExportFormat::parse(s).ok_or_else(|| format!("unknown format {s:?}; expected csv or jsonl"))
}

enum Failure {
    Config(String),
    Episodes(Vec<String>),
    Other(String),
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        match e.kind() {
            Some(ErrorKind::Config) => Failure::Config(e.to_string()),
            _ => Failure::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

async fn connect(server: Option<String>) -> Result<Client, Failure> {
    if let Some(url) = server {
        return Ok(Client::new(url));
    }
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let addr = listener.local_addr()?;
    tokio::spawn(ctxfold_server::serve(listener, AppState::default()));
    Ok(Client::new(format!("http://{addr}")))
}

fn print_report(r: &AggregateReport) {
    println!("strategy\tdomain\ttasks\tavg@k");
    for row in &r.domain_avg {
        println!("{}\t{}\t{}\t{:.4}", row.strategy, row.domain, row.tasks, row.avg_at_k);
    }
    if !r.winrate.is_empty() {
        println!("\nbin\tu_fold\treact\twinrate");
        for b in &r.winrate {
            let w = b.winrate.map_or("undefined".to_string(), |w| format!("{w:.3}"));
            println!("{}-{}\t{}\t{}\t{w}", b.bin_start, b.bin_end, b.ufold_solved, b.react_solved);
        }
    }
    if !r.failures.is_empty() {
        println!("\nfailed episodes:");
        for f in &r.failures {
            println!("  {}\t{}", f.episode_id, f.cause);
        }
    }
}

#[allow(clippy::too_many_arguments)]
async fn run(
    client: &Client,
    config: &Path,
    strategies: Vec<StrategyKind>,
    k: Option<u32>,
    seed_base: Option<u64>,
    noise: Option<bool>,
    ablation: Option<String>,
    out: Option<PathBuf>,
    strict: bool,
    json: bool,
) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(config).map_err(|e| Failure::Config(e.to_string()))?;
    if !strategies.is_empty() {
        cfg.strategies = strategies;
    }
    if let Some(k) = k {
        cfg.k = k;
    }
    if let Some(b) = seed_base {
        cfg.seed_base = b;
    }
    if let Some(n) = noise {
        cfg.noise.enabled = n;
    }
    if ablation.is_some() {
        cfg.ablation = ablation;
    }
    // relative paths in the config are taken from the config's directory
    let base = absolute(config.parent().unwrap_or(Path::new(".")));
    cfg.tasks.paths = cfg.tasks.paths.iter().map(|p| base.join(p)).collect();
    cfg.templates_dir = cfg.templates_dir.map(|p| base.join(p));
    cfg.output_dir = cfg.output_dir.map(|p| base.join(p));
    if let Some(o) = out {
        cfg.output_dir = Some(absolute(&o));
    }

    let created = client.start_run(&cfg).await?;
    eprintln!("run {}: {} episodes", created.run_id, created.total);
    let mut last = usize::MAX;
    let status = client
        .wait_run(&created.run_id, Duration::from_millis(200), |s| {
            if s.done != last {
                eprintln!("  {}/{}", s.done, s.total);
                last = s.done;
            }
        })
        .await?;
    if status.state == RunState::Failed {
        return Err(Failure::Other(status.error.unwrap_or_default()));
    }
    let report = status.report.ok_or_else(|| Failure::Other("run finished without a report".into()))?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Failure::Other(e.to_string()))?);
    } else {
        print_report(&report);
    }
    if strict && !status.failed_episodes.is_empty() {
        return Err(Failure::Episodes(status.failed_episodes));
    }
    Ok(())
}

async fn report(
    client: &Client,
    input: &Path,
    bin_width: Option<usize>,
    format: Option<ExportFormat>,
    out: Option<PathBuf>,
    json: bool,
) -> Result<(), Failure> {
    let req = ReportRequest {
        input: absolute(input),
        bin_width,
        format,
        out_dir: out.map(|o| absolute(&o)),
    };
    let resp = client.report(&req).await?;
    if json {
        println!("{}", serde_json::to_string_pretty(&resp.report).map_err(|e| Failure::Other(e.to_string()))?);
    } else {
        print_report(&resp.report);
    }
    for f in &resp.files {
        eprintln!("wrote {}", f.display());
    }
    Ok(())
}

async fn chat(
    client: &Client,
    config: &Path,
    domain: String,
    task_id: Option<String>,
    strategy: Option<StrategyKind>,
) -> Result<(), Failure> {
    let cfg = RunConfig::load(config).map_err(|e| Failure::Config(e.to_string()))?;
    let domain = if Path::new(&domain).exists() {
        absolute(Path::new(&domain)).display().to_string()
    } else {
        domain
    };
    let created = client
        .create_session(&SessionCreate {
            domain,
            task_id,
            strategy,
            config: cfg,
        })
        .await?;
    let id = created.session_id;
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout();
    let mut lines = stdin.lock().lines();
    loop {
        write!(stdout, "> ")?;
        stdout.flush()?;
        let line = match lines.next() {
            Some(l) => l?,
            None => CMD_QUIT.to_string(),
        };
        if line.trim().is_empty() {
            continue;
        }
        match client.session_input(&id, &line).await? {
            ChatOutput::Reply {
                text, protocol_failure, ..
            } => {
                if protocol_failure {
                    println!("[protocol failure]");
                }
                println!("{text}");
            }
            ChatOutput::Context { text } => println!("{text}"),
            ChatOutput::Quit { turns, reward } => {
                match reward {
                    Some(r) => println!("[{turns} turns, reward {r}]"),
                    None => println!("[{turns} turns]"),
                }
                return Ok(());
            }
        }
    }
}

async fn replay(client: &Client, log: &Path, transcript: bool, json: bool) -> Result<(), Failure> {
    let text = std::fs::read_to_string(log)?;
    let summary = client.replay(&text).await?;
    if json {
        println!("{}", serde_json::to_string_pretty(&summary).map_err(|e| Failure::Other(e.to_string()))?);
        return Ok(());
    }
    match summary {
        ReplaySummary::Events { episodes } => {
            for e in episodes {
                let reward = e.reward.map_or("-".to_string(), |r| r.to_string());
                let cause = e.failure_cause.as_deref().unwrap_or("-");
                println!(
                    "{}\tturns={}\tevents={}\tsummaries={}\tfolds={}\treward={reward}\tfailure={cause}",
                    e.episode_id, e.turns, e.events, e.summaries, e.folds
                );
                if transcript {
                    println!("{}\n", e.transcript);
                }
            }
        }
        ReplaySummary::Calls { roles } => {
            for r in roles {
                let eps: Vec<String> = r.endpoints.iter().map(|(k, v)| format!("{k}={v}")).collect();
                println!("{}\tcalls={}\t{}", r.role, r.calls, eps.join(" "));
            }
        }
    }
    Ok(())
}

async fn dispatch(cli: Cli) -> Result<(), Failure> {
    if let Command::Serve { addr } = &cli.command {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        ctxfold_server::serve(listener, AppState::default()).await?;
        return Ok(());
    }
    let client = connect(cli.server).await?;
    match cli.command {
        Command::Serve { .. } => unreachable!(),
        Command::Run {
            config,
            strategy,
            k,
            seed_base,
            noise,
            ablation,
            out,
            strict,
            json,
        } => run(&client, &config, strategy, k, seed_base, noise, ablation, out, strict, json).await,
        Command::Report {
            input,
            bin_width,
            format,
            out,
            json,
        } => report(&client, &input, bin_width, format, out, json).await,
        Command::Chat {
            config,
            domain,
            task,
            strategy,
        } => chat(&client, &config, domain, task, strategy).await,
        Command::Replay { log, transcript, json } => replay(&client, &log, transcript, json).await,
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match dispatch(Cli::parse()).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Episodes(ids)) => {
            eprintln!("{} episode(s) failed: {}", ids.len(), ids.join(", "));
            ExitCode::from(EXIT_EPISODE_FAILED)
        }
        Err(Failure::Other(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
