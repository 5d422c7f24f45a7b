use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{io_err, HarnessError};
use crate::agent::{EpisodeRecord, FailureCause, StrategyKind};
use crate::environment::NoiseConfig;
use crate::transcript::log::{EpisodeEvent, EventPayload};

pub const DEFAULT_BIN_WIDTH: usize = 2048;

/// CSV spelling of a win-rate bin with no reference solves.
pub const UNDEFINED: &str = "undefined";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub strategies: Vec<StrategyKind>,
    pub ablation: Option<String>,
    pub k: u32,
    pub seeds: Vec<u64>,
    pub noise: NoiseConfig,
    pub max_cycles_per_turn: u32,
    pub max_turns: u32,
    pub max_output_tokens: u32,
    pub context_window: usize,
    pub token_estimator: String,
    pub bin_width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode_id: String,
    pub strategy: StrategyKind,
    pub domain: String,
    pub task_id: String,
    pub seed: u64,
    pub reward: f64,
    pub failure_cause: Option<FailureCause>,
    pub turns: u32,
    pub tool_call_count: usize,
    pub repeated_tool_call_count: usize,
    pub final_context_tokens: usize,
    pub turn_prompt_tokens: Vec<usize>,
}

impl EpisodeSummary {
    pub fn of(r: &EpisodeRecord) -> Self {
        EpisodeSummary {
            episode_id: r.episode_id.clone(),
            strategy: r.strategy,
            domain: r.domain.clone(),
            task_id: r.task_id.clone(),
            seed: r.seed,
            reward: r.reward,
            failure_cause: r.failure_cause,
            turns: r.turns,
            tool_call_count: r.metrics.tool_call_count,
            repeated_tool_call_count: r.metrics.repeated_tool_call_count,
            final_context_tokens: r.metrics.final_context_tokens,
            turn_prompt_tokens: r.metrics.turn_prompt_tokens.clone(),
        }
    }

    fn solved(&self) -> bool {
        self.reward >= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvgRow {
    pub strategy: StrategyKind,
    pub domain: String,
    pub task_id: String,
    pub runs: usize,
    pub avg_at_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainAvgRow {
    pub strategy: StrategyKind,
    pub domain: String,
    pub tasks: usize,
    pub avg_at_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthRow {
    pub turn: u32,
    pub strategy: StrategyKind,
    /// Mean agent-prompt estimate over episodes that completed this turn.
    pub tokens: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinrateBin {
    pub bin_start: usize,
    pub bin_end: usize,
    pub ufold_solved: usize,
    pub react_solved: usize,
    /// None when the reference strategy solved nothing in the bin.
    pub winrate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub strategy: StrategyKind,
    pub tool_calls: usize,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRow {
    pub episode_id: String,
    pub cause: FailureCause,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub meta: ReportMeta,
    pub episodes: Vec<EpisodeSummary>,
    pub avg_at_k: Vec<AvgRow>,
    pub domain_avg: Vec<DomainAvgRow>,
    pub context_growth: Vec<GrowthRow>,
    pub winrate: Vec<WinrateBin>,
    pub tool_histogram: Vec<HistogramRow>,
    pub failures: Vec<FailureRow>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn aggregate(records: &[EpisodeRecord], meta: ReportMeta, bin_width: usize) -> AggregateReport {
    let episodes: Vec<EpisodeSummary> = records.iter().map(EpisodeSummary::of).collect();
    aggregate_summaries(episodes, meta, bin_width)
}

pub(crate) fn aggregate_summaries(mut episodes: Vec<EpisodeSummary>, meta: ReportMeta, bin_width: usize) -> AggregateReport {
    episodes.sort_by(|a, b| a.episode_id.cmp(&b.episode_id));

    let mut per_task: BTreeMap<(StrategyKind, &str, &str), Vec<f64>> = BTreeMap::new();
    for e in &episodes {
        per_task
            .entry((e.strategy, &e.domain, &e.task_id))
            .or_default()
            .push(e.reward);
    }
    let avg_at_k: Vec<AvgRow> = per_task
        .iter()
        .map(|(&(strategy, domain, task_id), rewards)| AvgRow {
            strategy,
            domain: domain.to_string(),
            task_id: task_id.to_string(),
            runs: rewards.len(),
            avg_at_k: mean(rewards.iter().copied()),
        })
        .collect();

    let mut per_domain: BTreeMap<(StrategyKind, &str), Vec<f64>> = BTreeMap::new();
    for row in &avg_at_k {
        per_domain
            .entry((row.strategy, &row.domain))
            .or_default()
            .push(row.avg_at_k);
    }
    let domain_avg = per_domain
        .iter()
        .map(|(&(strategy, domain), xs)| DomainAvgRow {
            strategy,
            domain: domain.to_string(),
            tasks: xs.len(),
            avg_at_k: mean(xs.iter().copied()),
        })
        .collect();

    let mut growth: BTreeMap<(StrategyKind, u32), Vec<f64>> = BTreeMap::new();
    for e in &episodes {
        for (i, t) in e.turn_prompt_tokens.iter().enumerate() {
            growth.entry((e.strategy, i as u32 + 1)).or_default().push(*t as f64);
        }
    }
    let context_growth = growth
        .iter()
        .map(|(&(strategy, turn), xs)| GrowthRow {
            turn,
            strategy,
            tokens: mean(xs.iter().copied()),
            episodes: xs.len(),
        })
        .collect();

    let by = |k: StrategyKind| episodes.iter().filter(|e| e.strategy == k).cloned().collect::<Vec<_>>();
    let ufold = by(StrategyKind::UFold);
    let react = by(StrategyKind::FullContextReact);
    let winrate = if ufold.is_empty() || react.is_empty() {
        Vec::new()
    } else {
        compute_winrate_bins(&ufold, &react, bin_width).unwrap_or_default()
    };

    let mut hist: BTreeMap<(StrategyKind, usize), usize> = BTreeMap::new();
    for e in &episodes {
        *hist.entry((e.strategy, e.tool_call_count)).or_default() += 1;
    }
    let tool_histogram = hist
        .into_iter()
        .map(|((strategy, tool_calls), episodes)| HistogramRow {
            strategy,
            tool_calls,
            episodes,
        })
        .collect();

    let failures = episodes
        .iter()
        .filter_map(|e| {
            e.failure_cause.map(|cause| FailureRow {
                episode_id: e.episode_id.clone(),
                cause,
            })
        })
        .collect();

    AggregateReport {
        meta,
        episodes,
        avg_at_k,
        domain_avg,
        context_growth,
        winrate,
        tool_histogram,
        failures,
    }
}

/// Win rate per bin of the reference run's final context size: tasks
/// solved by u_fold over tasks solved by the reference, on the same grid.
pub fn compute_winrate_bins(
    ufold: &[EpisodeSummary],
    react: &[EpisodeSummary],
    bin_width: usize,
) -> Result<Vec<WinrateBin>, HarnessError> {
    if bin_width == 0 {
        return Err(HarnessError::Config("bin_width must be positive".into()));
    }
    let key = |e: &EpisodeSummary| (e.domain.clone(), e.task_id.clone(), e.seed);
    let u: BTreeMap<_, _> = ufold.iter().map(|e| (key(e), e)).collect();
    let r: BTreeMap<_, _> = react.iter().map(|e| (key(e), e)).collect();
    let uk: BTreeSet<_> = u.keys().collect();
    let rk: BTreeSet<_> = r.keys().collect();
    if uk != rk || u.len() != ufold.len() || r.len() != react.len() {
        let only: Vec<String> = uk
            .symmetric_difference(&rk)
            .map(|(d, t, s)| format!("{d}/{t}/s{s}"))
            .collect();
        return Err(HarnessError::GridMismatch(if only.is_empty() {
            "duplicate grid points".into()
        } else {
            only.join(", ")
        }));
    }
    let mut bins: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (k, re) in &r {
        let b = re.final_context_tokens / bin_width;
        let entry = bins.entry(b).or_default();
        if u[k].solved() {
            entry.0 += 1;
        }
        if re.solved() {
            entry.1 += 1;
        }
    }
    Ok(bins
        .into_iter()
        .map(|(b, (us, rs))| WinrateBin {
            bin_start: b * bin_width,
            bin_end: (b + 1) * bin_width,
            ufold_solved: us,
            react_solved: rs,
            winrate: (rs > 0).then(|| us as f64 / rs as f64),
        })
        .collect())
}

fn tool_executions(events: &[EpisodeEvent]) -> usize {
    events
        .iter()
        .filter(|e| matches!(&e.payload, EventPayload::Cycle { cycle } if cycle.action.is_tool_invocation()))
        .count()
}

/// Sum of tool_calls × episodes over the histogram equals the tool calls
/// found in the records' event logs.
pub fn check_histogram_conservation(report: &AggregateReport, records: &[EpisodeRecord]) -> Result<(), String> {
    let hist: usize = report.tool_histogram.iter().map(|h| h.tool_calls * h.episodes).sum();
    let logged: usize = records.iter().map(|r| tool_executions(&r.events)).sum();
    if hist == logged {
        Ok(())
    } else {
        Err(format!("histogram counts {hist} tool calls, logs contain {logged}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Csv,
    Jsonl,
}

impl ExportFormat {
    fn ext(self) -> &'static str {
        match self {
            ExportFormat::Csv => "csv",
            ExportFormat::Jsonl => "jsonl",
        }
    }

    pub fn parse(s: &str) -> Option<ExportFormat> {
        match s {
            "csv" => Some(ExportFormat::Csv),
            "jsonl" => Some(ExportFormat::Jsonl),
            _ => None,
        }
    }
}

/// Flat CSV form of an episode; the token sequence is space separated.
#[derive(Serialize, Deserialize)]
struct EpisodeCsv {
    episode_id: String,
    strategy: StrategyKind,
    domain: String,
    task_id: String,
    seed: u64,
    reward: f64,
    failure_cause: String,
    turns: u32,
    tool_call_count: usize,
    repeated_tool_call_count: usize,
    final_context_tokens: usize,
    turn_prompt_tokens: String,
}

#[derive(Serialize, Deserialize)]
struct WinrateCsv {
    bin_start: usize,
    bin_end: usize,
    ufold_solved: usize,
    react_solved: usize,
    winrate: String,
}

const EPISODE_COLS: &[&str] = &[
    "episode_id",
    "strategy",
    "domain",
    "task_id",
    "seed",
    "reward",
    "failure_cause",
    "turns",
    "tool_call_count",
    "repeated_tool_call_count",
    "final_context_tokens",
    "turn_prompt_tokens",
];
const AVG_COLS: &[&str] = &["strategy", "domain", "task_id", "runs", "avg_at_k"];
const DOMAIN_COLS: &[&str] = &["strategy", "domain", "tasks", "avg_at_k"];
const GROWTH_COLS: &[&str] = &["turn", "strategy", "tokens", "episodes"];
const WINRATE_COLS: &[&str] = &["bin_start", "bin_end", "ufold_solved", "react_solved", "winrate"];
const HIST_COLS: &[&str] = &["strategy", "tool_calls", "episodes"];
const FAILURE_COLS: &[&str] = &["episode_id", "cause"];

fn cause_str(c: Option<FailureCause>) -> String {
    c.map(|c| c.as_str().to_string()).unwrap_or_default()
}

fn parse_cause(s: &str) -> Result<Option<FailureCause>, HarnessError> {
    if s.is_empty() {
        return Ok(None);
    }
    serde_json::from_value(serde_json::Value::String(s.into())).map(Some).map_err(Into::into)
}

fn write_csv<T: Serialize>(path: &Path, cols: &[&str], rows: &[T]) -> Result<(), HarnessError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(cols)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_err(path))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Into::into))
        .collect()
}

const TABLES: [&str; 7] = [
    "episodes",
    "avg_at_k",
    "domain_avg",
    "context_growth",
    "winrate",
    "tool_histogram",
    "failures",
];

/// Writes `meta.json` plus one file per table; returns the paths written.
pub fn export_report(report: &AggregateReport, dir: &Path, format: ExportFormat) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let meta = dir.join("meta.json");
    std::fs::write(&meta, serde_json::to_string_pretty(&report.meta)? + "\n").map_err(io_err(&meta))?;
    let path = |name: &str| dir.join(format!("{name}.{}", format.ext()));
    match format {
        ExportFormat::Csv => {
            let episodes: Vec<EpisodeCsv> = report
                .episodes
                .iter()
                .map(|e| EpisodeCsv {
                    episode_id: e.episode_id.clone(),
                    strategy: e.strategy,
                    domain: e.domain.clone(),
                    task_id: e.task_id.clone(),
                    seed: e.seed,
                    reward: e.reward,
                    failure_cause: cause_str(e.failure_cause),
                    turns: e.turns,
                    tool_call_count: e.tool_call_count,
                    repeated_tool_call_count: e.repeated_tool_call_count,
                    final_context_tokens: e.final_context_tokens,
                    turn_prompt_tokens: e
                        .turn_prompt_tokens
                        .iter()
                        .map(usize::to_string)
                        .collect::<Vec<_>>()
                        .join(" "),
                })
                .collect();
            let winrate: Vec<WinrateCsv> = report
                .winrate
                .iter()
                .map(|b| WinrateCsv {
                    bin_start: b.bin_start,
                    bin_end: b.bin_end,
                    ufold_solved: b.ufold_solved,
                    react_solved: b.react_solved,
                    winrate: b.winrate.map_or_else(|| UNDEFINED.to_string(), |w| w.to_string()),
                })
                .collect();
            write_csv(&path("episodes"), EPISODE_COLS, &episodes)?;
            write_csv(&path("avg_at_k"), AVG_COLS, &report.avg_at_k)?;
            write_csv(&path("domain_avg"), DOMAIN_COLS, &report.domain_avg)?;
            write_csv(&path("context_growth"), GROWTH_COLS, &report.context_growth)?;
            write_csv(&path("winrate"), WINRATE_COLS, &winrate)?;
            write_csv(&path("tool_histogram"), HIST_COLS, &report.tool_histogram)?;
            write_csv(&path("failures"), FAILURE_COLS, &report.failures)?;
        }
        ExportFormat::Jsonl => {
            write_jsonl(&path("episodes"), &report.episodes)?;
            write_jsonl(&path("avg_at_k"), &report.avg_at_k)?;
            write_jsonl(&path("domain_avg"), &report.domain_avg)?;
            write_jsonl(&path("context_growth"), &report.context_growth)?;
            write_jsonl(&path("winrate"), &report.winrate)?;
            write_jsonl(&path("tool_histogram"), &report.tool_histogram)?;
            write_jsonl(&path("failures"), &report.failures)?;
        }
    }
    Ok(std::iter::once(meta).chain(TABLES.iter().map(|t| path(t))).collect())
}

pub fn import_report(dir: &Path, format: ExportFormat) -> Result<AggregateReport, HarnessError> {
    let meta_path = dir.join("meta.json");
    let meta: ReportMeta =
        serde_json::from_str(&std::fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?)?;
    let path = |name: &str| dir.join(format!("{name}.{}", format.ext()));
    Ok(match format {
        ExportFormat::Csv => {
            let episodes = read_csv::<EpisodeCsv>(&path("episodes"))?
                .into_iter()
                .map(|e| {
                    let tokens = e
                        .turn_prompt_tokens
                        .split_whitespace()
                        .map(|t| t.parse::<usize>().map_err(|err| HarnessError::Config(err.to_string())))
                        .collect::<Result<Vec<_>, _>>()?;
                    Ok(EpisodeSummary {
                        episode_id: e.episode_id,
                        strategy: e.strategy,
                        domain: e.domain,
                        task_id: e.task_id,
                        seed: e.seed,
                        reward: e.reward,
                        failure_cause: parse_cause(&e.failure_cause)?,
                        turns: e.turns,
                        tool_call_count: e.tool_call_count,
                        repeated_tool_call_count: e.repeated_tool_call_count,
                        final_context_tokens: e.final_context_tokens,
                        turn_prompt_tokens: tokens,
                    })
                })
                .collect::<Result<Vec<_>, HarnessError>>()?;
            let winrate = read_csv::<WinrateCsv>(&path("winrate"))?
                .into_iter()
                .map(|b| {
                    let winrate = if b.winrate == UNDEFINED {
                        None
                    } else {
                        Some(b.winrate.parse::<f64>().map_err(|e| HarnessError::Config(e.to_string()))?)
                    };
                    Ok(WinrateBin {
                        bin_start: b.bin_start,
                        bin_end: b.bin_end,
                        ufold_solved: b.ufold_solved,
                        react_solved: b.react_solved,
                        winrate,
                    })
                })
                .collect::<Result<Vec<_>, HarnessError>>()?;
            AggregateReport {
                meta,
                episodes,
                avg_at_k: read_csv(&path("avg_at_k"))?,
                domain_avg: read_csv(&path("domain_avg"))?,
                context_growth: read_csv(&path("context_growth"))?,
                winrate,
                tool_histogram: read_csv(&path("tool_histogram"))?,
                failures: read_csv(&path("failures"))?,
            }
        }
        ExportFormat::Jsonl => AggregateReport {
            meta,
            episodes: read_jsonl(&path("episodes"))?,
            avg_at_k: read_jsonl(&path("avg_at_k"))?,
            domain_avg: read_jsonl(&path("domain_avg"))?,
            context_growth: read_jsonl(&path("context_growth"))?,
            winrate: read_jsonl(&path("winrate"))?,
            tool_histogram: read_jsonl(&path("tool_histogram"))?,
            failures: read_jsonl(&path("failures"))?,
        },
    })
}

/// Rebuilds a report from exported episode rows with a new bin width.
pub fn rebin(report: &AggregateReport, bin_width: usize) -> AggregateReport {
    let mut meta = report.meta.clone();
    meta.bin_width = bin_width;
    aggregate_summaries(report.episodes.clone(), meta, bin_width)
}
