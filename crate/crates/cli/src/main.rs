//! `hindsight` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 judge backend error.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use hindsight::analysis::{
    compare_goal_sets, cluster_goals, fleiss_kappa, noise_bound, sample_for_review, AnnotationMatrix, BoundInputs,
    HashedBowEmbedder, MetricsReport, DEFAULT_CLUSTERS,
};
use hindsight::augment::{emit_dataset, OutputFormat};
use hindsight::judge::{HttpJudge, HttpJudgeConfig, MockJudge, RuleProxyJudge, ScriptedJudge, TranscriptRecorder};
use hindsight::pipeline::{
    accepted_items, acceptance_rate, read_results, run_pipeline_with, write_checkpoint, write_rejects,
    write_results, RunStats, TrajectoryResult,
};
use hindsight::synth::{generate_corpus, read_truth, score_pipeline, write_truth, OracleJudge, TypeMix};
use hindsight::trajectory::{read_corpus, write_corpus, StageMode, Temperatures};
use hindsight::{Judge, JudgeError, Lexicon, PipelineConfig, Trajectory};
use serde_json::json;

use config::ConfigFile;

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(anyhow::Error),
    Backend(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Backend(_) => 3,
        }
    }
}

type CmdResult = Result<(), Failure>;

fn data<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Data(e.into())
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(msg.to_string())
}

#[derive(Parser)]
#[command(name = "hindsight", version, about = "Relabel failed agent trajectories with hindsight goals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the relabeling pipeline over a trajectory corpus.
    Relabel(Box<RelabelArgs>),
    /// Package accepted decisions into training datasets.
    Pack(PackArgs),
    /// Generate a synthetic failed-trajectory corpus with ground truth.
    Synth(SynthArgs),
    /// Score pipeline decisions against synthetic ground truth.
    Score(ScoreArgs),
    /// Goal-distribution metrics over accepted hindsight goals.
    Analyze(AnalyzeArgs),
    /// Noise-robustness bound for a given judge precision.
    Bound(BoundArgs),
    /// Fleiss' kappa of an items x categories vote matrix (JSON).
    Kappa(KappaArgs),
    /// Export a blind review sample of accepted relabelings.
    SampleReview(SampleReviewArgs),
    /// Acceptance statistics from a decisions file or raw counts.
    Stats(StatsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum JudgeKind {
    Mock,
    Scripted,
    Http,
    RuleProxy,
    Oracle,
}

impl FromStr for JudgeKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        <JudgeKind as ValueEnum>::from_str(s, false)
    }
}

/// Comma-separated output formats.
#[derive(Debug, Clone)]
struct Formats(Vec<OutputFormat>);

impl FromStr for Formats {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let list = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(OutputFormat::from_str)
            .collect::<Result<Vec<_>, _>>()?;
        if list.is_empty() {
            return Err("no output format given".into());
        }
        Ok(Formats(list))
    }
}

#[derive(Args)]
struct RelabelArgs {
    /// Failed-trajectory corpus (JSONL).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output_dir: PathBuf,
    /// key = value settings file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Confidence threshold [default: 0.5]
    #[arg(long)]
    theta: Option<f64>,
    /// Severity-gate threshold [default: 0.3]
    #[arg(long)]
    delta: Option<f64>,
    /// Relabel attempts per trajectory [default: 3]
    #[arg(long)]
    max_retries: Option<u32>,
    /// Require a second judge to confirm [default: true]
    #[arg(long)]
    multi_judge: Option<bool>,
    /// rule or judge [default: rule]
    #[arg(long)]
    stage1_mode: Option<StageMode>,
    /// rule or judge [default: rule]
    #[arg(long)]
    stage2_mode: Option<StageMode>,
    /// Judge backend [default: mock]
    #[arg(long, value_enum)]
    judge: Option<JudgeKind>,
    /// Transcript to replay with --judge scripted.
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Save every judge exchange of this run as a transcript.
    #[arg(long)]
    record_transcript: Option<PathBuf>,
    /// Ground-truth sidecar for --judge oracle.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Verdict flip rate of the oracle judge [default: 0]
    #[arg(long)]
    oracle_noise: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads [default: 1]
    #[arg(long)]
    concurrency: Option<usize>,
    /// Comma-separated subset of sft,dpo,sharegpt [default: all]
    #[arg(long)]
    format: Option<Formats>,
    /// Keyword lexicon JSON for the rule modes.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// [default: 0.3]
    #[arg(long)]
    temperature_first: Option<f64>,
    /// [default: 0.7]
    #[arg(long)]
    temperature_retry: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    temperature_second: Option<f64>,
    /// Chat-completions URL for --judge http.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long)]
    api_key_env: Option<String>,
    #[arg(long)]
    retry_budget: Option<u32>,
    #[arg(long)]
    timeout_secs: Option<u64>,
}

#[derive(Args)]
struct PackArgs {
    #[arg(long)]
    input: PathBuf,
    /// decisions.jsonl written by `relabel`.
    #[arg(long)]
    decisions: PathBuf,
    #[arg(long)]
    output_dir: PathBuf,
    /// Comma-separated subset of sft,dpo,sharegpt [default: all]
    #[arg(long)]
    format: Option<Formats>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Failure-type mix, e.g. "incomplete=0.35,constraint_violation=0.28"; unlisted types share the rest.
    #[arg(long)]
    mix: Option<String>,
    /// Corpus output (JSONL).
    #[arg(long)]
    output: PathBuf,
    /// Ground-truth output (JSONL).
    #[arg(long)]
    truth: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    decisions: PathBuf,
    #[arg(long)]
    truth: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    decisions: PathBuf,
    /// Corpus whose goals form the comparison distribution.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_CLUSTERS)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Vote matrix JSON for an agreement figure.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Judge precision for the bound section.
    #[arg(long)]
    precision: Option<f64>,
    #[arg(long, default_value_t = 0.089)]
    delta_perfect: f64,
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
    /// Also write the report here.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct BoundArgs {
    #[arg(long)]
    precision: f64,
    /// Gain of a perfect judge.
    #[arg(long, default_value_t = 0.089)]
    delta_perfect: f64,
    /// Harm of one wrong relabel.
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
}

#[derive(Args)]
struct KappaArgs {
    /// JSON array of per-item category counts.
    #[arg(long)]
    matrix: PathBuf,
}

#[derive(Args)]
struct SampleReviewArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    decisions: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long, conflicts_with_all = ["accepted", "total"])]
    decisions: Option<PathBuf>,
    #[arg(long, requires = "total")]
    accepted: Option<u64>,
    #[arg(long, requires = "accepted")]
    total: Option<u64>,
}

/// Write a line to stdout; a closed pipe downstream is not an error.
fn emit(text: &str) -> CmdResult {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(data(e)),
        _ => Ok(()),
    }
}

fn print_json(v: &impl serde::Serialize) -> CmdResult {
    emit(&serde_json::to_string_pretty(v).map_err(data)?)
}

fn load_corpus(path: &Path) -> Result<Vec<Trajectory>, Failure> {
    read_corpus(path).with_context(|| format!("reading {}", path.display())).map_err(data)
}

fn load_results(path: &Path) -> Result<Vec<TrajectoryResult>, Failure> {
    read_results(path).with_context(|| format!("reading {}", path.display())).map_err(data)
}

fn formats(list: Option<Formats>) -> Vec<OutputFormat> {
    list.map(|f| f.0).unwrap_or_else(|| OutputFormat::ALL.to_vec())
}

fn emit_all(corpus: &[Trajectory], results: &[TrajectoryResult], dir: &Path, fmts: &[OutputFormat]) -> Result<serde_json::Value, Failure> {
    let items = accepted_items(corpus, results);
    let accepted = results.iter().filter(|r| r.is_accepted()).count();
    if items.len() != accepted {
        return Err(data(anyhow::anyhow!(
            "{} accepted decisions have no matching trajectory in the corpus",
            accepted - items.len()
        )));
    }
    let mut counts = serde_json::Map::new();
    for &f in fmts {
        let path = dir.join(f.file_name());
        let n = emit_dataset(&items, f, &path).with_context(|| format!("writing {}", path.display())).map_err(data)?;
        counts.insert(f.file_name().into(), n.into());
    }
    Ok(counts.into())
}

struct Resolved {
    cfg: PipelineConfig,
    judge: JudgeKind,
    formats: Vec<OutputFormat>,
    oracle_noise: f64,
    transcript: Option<PathBuf>,
    truth: Option<PathBuf>,
    lexicon: Option<PathBuf>,
    http: HttpJudgeConfig,
}

fn resolve(a: RelabelArgs) -> Result<(Resolved, PathBuf, PathBuf, Option<PathBuf>), Failure> {
    let file = match &a.config {
        Some(p) => ConfigFile::load(p).map_err(usage)?,
        None => ConfigFile::default(),
    };
    let d = PipelineConfig::default();
    let t = Temperatures::default();
    let h = HttpJudgeConfig::default();
    let cfg = PipelineConfig {
        theta: file.pick(a.theta, "theta").map_err(usage)?.unwrap_or(d.theta),
        delta: file.pick(a.delta, "delta").map_err(usage)?.unwrap_or(d.delta),
        max_retries: file.pick(a.max_retries, "max-retries").map_err(usage)?.unwrap_or(d.max_retries),
        multi_judge: file.pick(a.multi_judge, "multi-judge").map_err(usage)?.unwrap_or(d.multi_judge),
        stage1_mode: file.pick(a.stage1_mode, "stage1-mode").map_err(usage)?.unwrap_or(d.stage1_mode),
        stage2_mode: file.pick(a.stage2_mode, "stage2-mode").map_err(usage)?.unwrap_or(d.stage2_mode),
        temperatures: Temperatures {
            first_attempt: file.pick(a.temperature_first, "temperature-first").map_err(usage)?.unwrap_or(t.first_attempt),
            retry: file.pick(a.temperature_retry, "temperature-retry").map_err(usage)?.unwrap_or(t.retry),
            second_judge: file.pick(a.temperature_second, "temperature-second").map_err(usage)?.unwrap_or(t.second_judge),
        },
        concurrency: file.pick(a.concurrency, "concurrency").map_err(usage)?.unwrap_or(d.concurrency),
        seed: file.pick(a.seed, "seed").map_err(usage)?.unwrap_or(d.seed),
    };
    cfg.validate().map_err(usage)?;
    let http = HttpJudgeConfig {
        endpoint: file.pick(a.endpoint, "endpoint").map_err(usage)?.unwrap_or(h.endpoint.clone()),
        model: file.pick(a.model, "model").map_err(usage)?.unwrap_or(h.model.clone()),
        api_key_env: file.pick(a.api_key_env, "api-key-env").map_err(usage)?.unwrap_or(h.api_key_env.clone()),
        retry_budget: file.pick(a.retry_budget, "retry-budget").map_err(usage)?.unwrap_or(h.retry_budget),
        timeout: file
            .pick(a.timeout_secs, "timeout-secs")
            .map_err(usage)?
            .map(Duration::from_secs)
            .unwrap_or(h.timeout),
        max_in_flight: cfg.concurrency.max(1),
        ..h
    };
    let r = Resolved {
        judge: file.pick(a.judge, "judge").map_err(usage)?.unwrap_or(JudgeKind::Mock),
        formats: formats(file.pick(a.format, "format").map_err(usage)?),
        oracle_noise: file.pick(a.oracle_noise, "oracle-noise").map_err(usage)?.unwrap_or(0.0),
        transcript: file.pick(a.transcript, "transcript").map_err(usage)?,
        truth: file.pick(a.truth, "truth").map_err(usage)?,
        lexicon: file.pick(a.lexicon, "lexicon").map_err(usage)?,
        http,
        cfg,
    };
    if !(0.0..=1.0).contains(&r.oracle_noise) {
        return Err(usage(format!("oracle-noise must be in [0, 1], got {}", r.oracle_noise)));
    }
    match r.judge {
        JudgeKind::Scripted if r.transcript.is_none() => return Err(usage("--judge scripted needs --transcript")),
        JudgeKind::Oracle if r.truth.is_none() => return Err(usage("--judge oracle needs --truth")),
        _ => {}
    }
    Ok((r, a.input, a.output_dir, a.record_transcript))
}

fn build_judge(r: &Resolved, corpus: &[Trajectory], lexicon: &Lexicon) -> Result<Box<dyn Judge>, Failure> {
    Ok(match r.judge {
        JudgeKind::Mock => Box::new(MockJudge::new(r.cfg.seed)),
        JudgeKind::RuleProxy => Box::new(RuleProxyJudge::new(lexicon.clone())),
        JudgeKind::Scripted => {
            let path = r.transcript.as_deref().expect("checked in resolve");
            Box::new(ScriptedJudge::from_path(path).map_err(data)?)
        }
        JudgeKind::Oracle => {
            let path = r.truth.as_deref().expect("checked in resolve");
            let tasks = read_truth(path).with_context(|| format!("reading {}", path.display())).map_err(data)?;
            Box::new(OracleJudge::new(corpus, tasks, r.oracle_noise, r.cfg.seed).map_err(data)?)
        }
        JudgeKind::Http => Box::new(HttpJudge::new(r.http.clone()).map_err(|e| match e {
            JudgeError::AuthMissing(_) => Failure::Backend(e.into()),
            other => data(other),
        })?),
    })
}

fn cmd_relabel(a: RelabelArgs) -> CmdResult {
    let (r, input, out_dir, record) = resolve(a)?;
    let lexicon = match &r.lexicon {
        Some(p) => Lexicon::load(p).with_context(|| format!("reading {}", p.display())).map_err(data)?,
        None => Lexicon::default(),
    };
    let corpus = load_corpus(&input)?;
    let judge = TranscriptRecorder::new(build_judge(&r, &corpus, &lexicon)?);
    let out = run_pipeline_with(&corpus, &r.cfg, &judge, &lexicon).map_err(data)?;

    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display())).map_err(data)?;
    let write = |name: &str, res: Result<(), hindsight::pipeline::PipelineError>| {
        res.with_context(|| format!("writing {name}")).map_err(data)
    };
    write("decisions.jsonl", write_results(&out.results, out_dir.join("decisions.jsonl")))?;
    write("rejects.jsonl", write_rejects(&out.results, out_dir.join("rejects.jsonl")).map(|_| ()))?;
    write("checkpoint.txt", write_checkpoint(&out.results, out_dir.join("checkpoint.txt")))?;
    emit_all(&corpus, &out.results, &out_dir, &r.formats)?;
    let stats_json = serde_json::to_string_pretty(&out.stats).map_err(data)?;
    fs::write(out_dir.join("stats.json"), format!("{stats_json}\n")).context("writing stats.json").map_err(data)?;
    if let Some(p) = record {
        judge.save(&p).with_context(|| format!("writing {}", p.display())).map_err(data)?;
    }

    emit(&stats_json)?;
    eprintln!("{}", out.stats.table());

    let s = &out.stats;
    if s.relabel_attempted > 0 && s.accepted == 0 && s.judge_errors == s.relabel_attempted {
        let sample = out.results.iter().find_map(|r| r.error.clone()).unwrap_or_default();
        return Err(Failure::Backend(anyhow::anyhow!(
            "judge failed on all {} trajectories that reached it; first error: {sample}",
            s.judge_errors
        )));
    }
    Ok(())
}

fn cmd_pack(a: PackArgs) -> CmdResult {
    let corpus = load_corpus(&a.input)?;
    let results = load_results(&a.decisions)?;
    fs::create_dir_all(&a.output_dir).map_err(data)?;
    let counts = emit_all(&corpus, &results, &a.output_dir, &formats(a.format))?;
    print_json(&counts)
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let mix = match &a.mix {
        Some(m) => TypeMix::parse(m).map_err(usage)?,
        None => TypeMix::uniform(),
    };
    let (corpus, tasks) = generate_corpus(a.n, a.seed, &mix).map_err(data)?;
    write_corpus(&corpus, &a.output).with_context(|| format!("writing {}", a.output.display())).map_err(data)?;
    write_truth(&tasks, &a.truth).with_context(|| format!("writing {}", a.truth.display())).map_err(data)?;
    let mut counts = std::collections::BTreeMap::<&str, u64>::new();
    for t in &tasks {
        *counts.entry(t.planted_failure_type.as_str()).or_default() += 1;
    }
    print_json(&json!({"trajectories": corpus.len(), "planted": counts}))
}

fn cmd_score(a: ScoreArgs) -> CmdResult {
    let results = load_results(&a.decisions)?;
    let tasks = read_truth(&a.truth).with_context(|| format!("reading {}", a.truth.display())).map_err(data)?;
    print_json(&score_pipeline(&results, &tasks).map_err(data)?)
}

fn read_matrix(path: &Path) -> Result<AnnotationMatrix, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(data)?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display())).map_err(data)
}

fn bound(precision: f64, delta_perfect: f64, epsilon: f64) -> Result<hindsight::analysis::BoundReport, Failure> {
    noise_bound(BoundInputs {
        judge_precision: precision,
        perfect_gain: delta_perfect,
        harm_bound: epsilon,
    })
    .map_err(usage)
}

fn cmd_analyze(a: AnalyzeArgs) -> CmdResult {
    let results = load_results(&a.decisions)?;
    let goals: Vec<&str> = results
        .iter()
        .filter_map(|r| r.accepted_parts().map(|(_, d)| d.hindsight_prompt.as_str()))
        .collect();
    if a.k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    let embedder = HashedBowEmbedder::default();
    let mut report = MetricsReport::default();
    if !goals.is_empty() {
        match &a.reference {
            Some(p) => {
                let reference = load_corpus(p)?;
                let ref_goals: Vec<&str> = reference.iter().map(|t| t.goal.as_str()).collect();
                let (da, _, jsd) = compare_goal_sets(&goals, &ref_goals, a.k, &embedder, a.seed).map_err(data)?;
                report.entropy = Some(da.entropy_nats);
                report.coverage = Some(da.coverage);
                report.jsd = Some(jsd);
            }
            None => {
                let d = cluster_goals(&goals, a.k, &embedder, a.seed).map_err(data)?;
                report.entropy = Some(d.entropy_nats);
                report.coverage = Some(d.coverage);
            }
        }
    }
    if let Some(p) = &a.annotations {
        report.kappa = Some(fleiss_kappa(&read_matrix(p)?));
    }
    if let Some(p) = a.precision {
        report.bound = Some(bound(p, a.delta_perfect, a.epsilon)?);
    }
    if let Some(p) = &a.output {
        let text = serde_json::to_string_pretty(&report).map_err(data)?;
        fs::write(p, format!("{text}\n")).with_context(|| format!("writing {}", p.display())).map_err(data)?;
    }
    print_json(&report)
}

fn cmd_bound(a: BoundArgs) -> CmdResult {
    print_json(&bound(a.precision, a.delta_perfect, a.epsilon)?)
}

fn cmd_kappa(a: KappaArgs) -> CmdResult {
    let k = fleiss_kappa(&read_matrix(&a.matrix)?);
    emit(&serde_json::to_string(&k).map_err(data)?)
}

fn cmd_sample_review(a: SampleReviewArgs) -> CmdResult {
    let corpus = load_corpus(&a.input)?;
    let results = load_results(&a.decisions)?;
    let items = accepted_items(&corpus, &results);
    let pairs: Vec<_> = items.iter().map(|i| (i.trajectory, i.decision)).collect();
    let sample = sample_for_review(&pairs, a.n, a.seed).map_err(usage)?;
    let mut text = String::new();
    for r in &sample {
        text.push_str(&serde_json::to_string(r).map_err(data)?);
        text.push('\n');
    }
    fs::write(&a.output, text).with_context(|| format!("writing {}", a.output.display())).map_err(data)?;
    print_json(&json!({"sampled": sample.len(), "available": pairs.len()}))
}

fn cmd_stats(a: StatsArgs) -> CmdResult {
    match (a.decisions, a.accepted, a.total) {
        (Some(p), _, _) => {
            let stats = RunStats::from_results(&load_results(&p)?);
            stats.check().map_err(|e| data(anyhow::anyhow!(e)))?;
            print_json(&stats)?;
            eprintln!("{}", stats.table());
            Ok(())
        }
        (None, Some(accepted), Some(total)) => {
            if total == 0 || accepted > total {
                return Err(usage(format!("need 0 <= accepted <= total and total > 0, got {accepted}/{total}")));
            }
            let rate = acceptance_rate(accepted, total);
            print_json(&json!({
                "accepted": accepted,
                "total": total,
                "acceptance_rate": rate,
                "percent": format!("{:.1}%", rate * 100.0),
            }))
        }
        _ => Err(usage("give --decisions or both --accepted and --total")),
    }
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Relabel(a) => cmd_relabel(*a),
        Command::Pack(a) => cmd_pack(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Score(a) => cmd_score(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Bound(a) => cmd_bound(a),
        Command::Kappa(a) => cmd_kappa(a),
        Command::SampleReview(a) => cmd_sample_review(a),
        Command::Stats(a) => cmd_stats(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // --help and --version land here too
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Data(e) | Failure::Backend(e) => eprintln!("error: {e:#}"),
            }
            ExitCode::from(f.code())
        }
    }
}
